//! Central-difference gradient verification.

use std::collections::BTreeMap;

use super::graph::{Bindings, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward's adjoints against `(f(x+eps) − f(x−eps)) / (2·eps)` for every
/// element of every parameter in `params`, returning the worst relative error per leaf.
///
/// `inputs` binds the graph's non-differentiable leaves; `params` binds the differentiable ones.
pub fn grad_check(
    graph: &mut Graph<f64>,
    root: NodeId,
    inputs: &Bindings<'_, f64>,
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
) -> Result<BTreeMap<String, f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    graph.forward(root, &bind_all(inputs, params, None))?;
    let analytic = graph.backward(root)?;

    let mut report = BTreeMap::new();
    for (name, base) in params {
        let adj = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut probe = base.clone();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let orig = base.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = graph
                .forward(root, &bind_all(inputs, params, Some((name, &probe))))?
                .item();
            probe.data_mut()[i] = orig - eps;
            let down = graph
                .forward(root, &bind_all(inputs, params, Some((name, &probe))))?
                .item();
            probe.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(adj.data()[i], numeric));
        }
        report.insert(name.clone(), worst);
    }
    Ok(report)
}

fn bind_all<'a>(
    inputs: &Bindings<'a, f64>,
    params: &'a BTreeMap<String, Tensor<f64>>,
    overrides: Option<(&'a str, &'a Tensor<f64>)>,
) -> Bindings<'a, f64> {
    let mut b = Bindings::new();
    for name in inputs.names() {
        b.bind(name, inputs.get(name).expect("listed"));
    }
    for (name, t) in params {
        b.bind(name.as_str(), t);
    }
    if let Some((name, t)) = overrides {
        b.bind(name, t);
    }
    b
}

/// Largest entry of a [`grad_check`] report.
pub fn worst(report: &BTreeMap<String, f64>) -> f64 {
    report.values().copied().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let params = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![1.0, -2.0, 3.0]))]);
        let report = grad_check(&mut g, s, &Bindings::new(), &params, 1e-5).unwrap();
        assert!(worst(&report) <= 1e-6, "{report:?}");
    }

    #[test]
    fn constant_root_reports_zero() {
        let mut g = Graph::new();
        let x = g.param("x");
        let c = g.constant(Tensor::from_vec(vec![4.0, 5.0]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let z = g.mask(x, zero);
        let s0 = g.sum(z);
        let s1 = g.sum(c);
        let s = g.add(s0, s1);
        let params = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![0.3, 0.7]))]);
        let report = grad_check(&mut g, s, &Bindings::new(), &params, 1e-5).unwrap();
        assert_eq!(report["x"], 0.0);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x");
        let s = g.sum(x);
        let params = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![1.0]))]);
        for eps in [0.0, -1e-5, f64::NAN] {
            assert!(grad_check(&mut g, s, &Bindings::new(), &params, eps).is_err());
        }
    }
}
