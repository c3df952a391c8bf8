//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order: every operator refers only to earlier nodes. `forward`
//! evaluates the nodes the root depends on in ascending order and caches every
//! value; `backward` walks the same nodes in descending order, visiting each once.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Constant,
    Conv2d { x: NodeId, w: NodeId },
    BiasAdd { x: NodeId, b: NodeId },
    Relu(NodeId),
    MaxPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Pow(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Mask(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Detach(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::MaxPool2(_) => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Concat(..) => "concat",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Pow(..) => "pow",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mask(..) => "mask",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Detach(_) => "detach",
        }
    }

    /// Inputs through which adjoints flow.
    fn diff_inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Constant | Op::Detach(_) => vec![],
            Op::Conv2d { x, w } => vec![x, w],
            Op::BiasAdd { x, b } => vec![x, b],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Mask(x, _) => vec![x],
            Op::Relu(x)
            | Op::MaxPool2(x)
            | Op::Upsample2(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Pow(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _) => vec![x],
        }
    }

    fn all_inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Mask(x, m) => vec![x, m],
            Op::Detach(x) => vec![x],
            _ => self.diff_inputs(),
        }
    }
}

enum Aux<T> {
    None,
    Patches(Option<Vec<T>>),
    Argmax(Vec<usize>),
}

struct Node<T> {
    op: Op,
    constant: Option<Tensor<T>>,
    value: Option<Tensor<T>>,
    aux: Aux<T>,
    requires_grad: bool,
}

/// Leaf bindings for one forward evaluation, keyed by leaf name.
pub struct Bindings<'a, T> {
    map: HashMap<&'a str, &'a Tensor<T>>,
}

impl<'a, T> Default for Bindings<'a, T> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn with(mut self, name: &'a str, value: &'a Tensor<T>) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }

    /// Bound names in sorted order.
    pub fn names(&self) -> Vec<&'a str> {
        let mut names: Vec<&'a str> = self.map.keys().copied().collect();
        names.sort_unstable();
        names
    }
}

/// Adjoints of the differentiable leaves, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    evaluated_root: Option<NodeId>,
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            evaluated_root: None,
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, constant: Option<Tensor<T>>) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            other => other
                .diff_inputs()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        for id in op.all_inputs() {
            assert!(
                id.0 < self.nodes.len(),
                "node {} refers to a later node",
                id.0
            );
        }
        self.evaluated_root = None;
        self.nodes.push(Node {
            op,
            constant,
            value: None,
            aux: Aux::None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf bound at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), None)
    }

    /// Differentiable leaf bound at forward time. Repeated names share one node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()), None);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, Some(value))
    }

    /// Same-size convolution: stride 1, zero padding `k/2`, kernel `cout×cin×k×k` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Conv2d { x, w }, None)
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BiasAdd { x, b }, None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x), None)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2(x), None)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2(x), None)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b), None)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x), None)
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn pow(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(x, exponent), None)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), None)
    }

    /// Elementwise product with a 0/1 tensor; no adjoint flows into the mask.
    pub fn mask(&mut self, x: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::Mask(x, mask), None)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor), None)
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> NodeId {
        self.push(Op::AddScalar(x, offset), None)
    }

    /// Identity in the forward pass, a constant in the backward pass.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x), None)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Adjoint of an arbitrary node after [`Graph::backward`]; `None` if no adjoint reached it.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input(name) => format!("input '{name}' (#{})", id.0),
            Op::Param(name) => format!("param '{name}' (#{})", id.0),
            op => format!("{} #{}", op.name(), id.0),
        }
    }

    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        seen[root.0] = true;
        for i in (0..=root.0).rev() {
            if seen[i] {
                for id in self.nodes[i].op.all_inputs() {
                    seen[id.0] = true;
                }
            }
        }
        seen
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    /// Evaluates every node the root depends on and returns the root's value.
    pub fn forward(&mut self, root: NodeId, bindings: &Bindings<'_, T>) -> Result<&Tensor<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "root #{} is not in the graph",
                root.0
            )));
        }
        self.evaluated_root = None;
        self.adjoints.clear();
        let needed = self.reachable(root);
        for i in 0..=root.0 {
            if !needed[i] {
                continue;
            }
            let (value, aux) = self.eval_node(NodeId(i), bindings)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: self.label(NodeId(i)),
                });
            }
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.aux = aux;
        }
        self.evaluated_root = Some(root);
        Ok(self.val(root))
    }

    fn eval_node(&self, id: NodeId, bindings: &Bindings<'_, T>) -> Result<(Tensor<T>, Aux<T>)> {
        let node = &self.nodes[id.0];
        let plain = |t: Tensor<T>| Ok((t, Aux::None));
        match node.op {
            Op::Input(ref name) | Op::Param(ref name) => match bindings.get(name) {
                Some(t) => plain(t.clone()),
                None => Err(Error::Graph(format!("leaf '{name}' is not bound"))),
            },
            Op::Constant => plain(node.constant.clone().expect("constant nodes carry a value")),
            Op::Conv2d { x, w } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let Some((cin, h, wd)) = xv.chw() else {
                    return shape_err(
                        "conv2d",
                        format!("input must be C×H×W, got {:?}", xv.shape()),
                    );
                };
                let (cout, k) = match wv.shape()[..] {
                    [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
                    _ => {
                        return shape_err(
                            "conv2d",
                            format!(
                            "kernel {:?} incompatible with input {:?} (need cout×{cin}×k×k, odd k)",
                            wv.shape(),
                            xv.shape()
                        ),
                        )
                    }
                };
                let res = kernels::conv2d_forward(xv.data(), wv.data(), cin, cout, h, wd, k);
                Ok((Tensor::new(&[cout, h, wd], res.out)?, Aux::Patches(res.col)))
            }
            Op::BiasAdd { x, b } => {
                let (xv, bv) = (self.val(x), self.val(b));
                let Some((c, h, w)) = xv.chw() else {
                    return shape_err(
                        "bias_add",
                        format!("input must be C×H×W, got {:?}", xv.shape()),
                    );
                };
                if bv.shape() != [c] {
                    return shape_err(
                        "bias_add",
                        format!("bias {:?} does not match {c} channels", bv.shape()),
                    );
                }
                let hw = h * w;
                let mut out = xv.clone();
                for (ch, &bias) in bv.data().iter().enumerate() {
                    for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                        *v = *v + bias;
                    }
                }
                plain(out)
            }
            Op::Relu(x) => plain(
                self.val(x)
                    .map(|v| if v > T::zero() { v } else { T::zero() }),
            ),
            Op::MaxPool2(x) => {
                let xv = self.val(x);
                match xv.chw() {
                    Some((c, h, w)) if h % 2 == 0 && w % 2 == 0 => {
                        let (out, arg) = kernels::maxpool2_forward(xv.data(), c, h, w);
                        Ok((Tensor::new(&[c, h / 2, w / 2], out)?, Aux::Argmax(arg)))
                    }
                    _ => shape_err(
                        "maxpool2",
                        format!("input must be C×H×W with even H, W; got {:?}", xv.shape()),
                    ),
                }
            }
            Op::Upsample2(x) => {
                let xv = self.val(x);
                let Some((c, h, w)) = xv.chw() else {
                    return shape_err(
                        "upsample2",
                        format!("input must be C×H×W, got {:?}", xv.shape()),
                    );
                };
                plain(Tensor::new(
                    &[c, 2 * h, 2 * w],
                    kernels::upsample2_forward(xv.data(), c, h, w),
                )?)
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                match (av.chw(), bv.chw()) {
                    (Some((ca, ha, wa)), Some((cb, hb, wb))) if ha == hb && wa == wb => {
                        let mut data = Vec::with_capacity(av.len() + bv.len());
                        data.extend_from_slice(av.data());
                        data.extend_from_slice(bv.data());
                        plain(Tensor::new(&[ca + cb, ha, wa], data)?)
                    }
                    _ => shape_err(
                        "concat",
                        format!(
                            "spatial extents differ: {:?} vs {:?}",
                            av.shape(),
                            bv.shape()
                        ),
                    ),
                }
            }
            Op::Softmax(x) => {
                let xv = self.val(x);
                let Some((c, h, w)) = xv.chw() else {
                    return shape_err(
                        "softmax",
                        format!("input must be C×H×W, got {:?}", xv.shape()),
                    );
                };
                plain(Tensor::new(
                    xv.shape(),
                    kernels::softmax_channels(xv.data(), c, h * w),
                )?)
            }
            Op::Log(x) => {
                let floor = T::lit(LOG_FLOOR);
                plain(self.val(x).map(|v| v.max(floor).ln()))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.shape() != bv.shape() {
                    return shape_err(
                        node.op.name(),
                        format!(
                            "operand extents differ: {:?} vs {:?}",
                            av.shape(),
                            bv.shape()
                        ),
                    );
                }
                let f: fn(T, T) -> T = match node.op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| f(p, q))
                    .collect();
                plain(Tensor::new(av.shape(), data)?)
            }
            Op::Pow(x, e) => {
                let e = T::lit(e);
                plain(self.val(x).map(|v| v.powf(e)))
            }
            Op::Sum(x) => plain(Tensor::scalar(self.val(x).sum())),
            Op::Mean(x) => {
                let xv = self.val(x);
                plain(Tensor::scalar(xv.sum() / T::lit(xv.len() as f64)))
            }
            Op::Mask(x, m) => {
                let (xv, mv) = (self.val(x), self.val(m));
                if xv.shape() != mv.shape() {
                    return shape_err(
                        "mask",
                        format!("mask {:?} does not match {:?}", mv.shape(), xv.shape()),
                    );
                }
                if mv.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                    return Err(Error::InvalidArgument(format!(
                        "mask operand of {} is not a 0/1 tensor",
                        self.label(id)
                    )));
                }
                let data = xv
                    .data()
                    .iter()
                    .zip(mv.data())
                    .map(|(&v, &mk)| if mk == T::zero() { T::zero() } else { v })
                    .collect();
                plain(Tensor::new(xv.shape(), data)?)
            }
            Op::Scale(x, s) => {
                let s = T::lit(s);
                plain(self.val(x).map(|v| v * s))
            }
            Op::AddScalar(x, s) => {
                let s = T::lit(s);
                plain(self.val(x).map(|v| v + s))
            }
            Op::Detach(x) => plain(self.val(x).clone()),
        }
    }

    /// Adjoints of the root with respect to every differentiable leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>> {
        if self.evaluated_root != Some(root) {
            return Err(Error::Graph(
                "backward called before forward on this root".into(),
            ));
        }
        let root_len = self.val(root).len();
        if root_len != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(self.val(root).shape(), T::one()));
        let mut grads = Gradients::default();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                adj[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.node_adjoints(NodeId(i), &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            if let Op::Param(name) = &node.op {
                grads.by_name.insert(name.clone(), g.clone());
            }
            adj[i] = Some(g);
        }
        for (name, &id) in &self.params {
            if id.0 < n && !grads.by_name.contains_key(name) {
                if let Some(v) = self.nodes[id.0].value.as_ref() {
                    grads.by_name.insert(name.clone(), Tensor::zeros(v.shape()));
                }
            }
        }
        self.adjoints = adj;
        Ok(grads)
    }

    fn node_adjoints(&self, id: NodeId, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id.0];
        let out = node.value.as_ref().expect("evaluated");
        let zero = T::zero();
        Ok(match node.op {
            Op::Input(_) | Op::Param(_) | Op::Constant | Op::Detach(_) => vec![],
            Op::Conv2d { x, w } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let (cin, h, wd) = xv.chw().expect("checked in forward");
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let patches = match &node.aux {
                    Aux::Patches(p) => p.as_deref(),
                    _ => None,
                };
                let (dx, dw) = kernels::conv2d_backward(
                    xv.data(),
                    patches,
                    wv.data(),
                    g.data(),
                    cin,
                    cout,
                    h,
                    wd,
                    k,
                );
                vec![
                    (x, Tensor::new(xv.shape(), dx)?),
                    (w, Tensor::new(wv.shape(), dw)?),
                ]
            }
            Op::BiasAdd { x, b } => {
                let (c, h, w) = g.chw().expect("checked in forward");
                let hw = h * w;
                let db = (0..c)
                    .map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().copied().sum())
                    .collect();
                vec![(x, g.clone()), (b, Tensor::new(&[c], db)?)]
            }
            Op::Relu(x) => {
                let xv = self.val(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > zero { d } else { zero })
                    .collect();
                vec![(x, Tensor::new(xv.shape(), data)?)]
            }
            Op::MaxPool2(x) => {
                let xv = self.val(x);
                let Aux::Argmax(arg) = &node.aux else {
                    unreachable!("maxpool caches its argmax")
                };
                let mut dx = Tensor::zeros(xv.shape());
                for (&src, &d) in arg.iter().zip(g.data()) {
                    dx.data_mut()[src] = dx.data()[src] + d;
                }
                vec![(x, dx)]
            }
            Op::Upsample2(x) => {
                let xv = self.val(x);
                let (c, h, w) = xv.chw().expect("checked in forward");
                vec![(
                    x,
                    Tensor::new(xv.shape(), kernels::upsample2_backward(g.data(), c, h, w))?,
                )]
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let split = av.len();
                vec![
                    (a, Tensor::new(av.shape(), g.data()[..split].to_vec())?),
                    (b, Tensor::new(bv.shape(), g.data()[split..].to_vec())?),
                ]
            }
            Op::Softmax(x) => {
                let (c, h, w) = out.chw().expect("checked in forward");
                vec![(
                    x,
                    Tensor::new(
                        out.shape(),
                        kernels::softmax_channels_backward(out.data(), g.data(), c, h * w),
                    )?,
                )]
            }
            Op::Log(x) => {
                let xv = self.val(x);
                let floor = T::lit(LOG_FLOOR);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > floor { d / v } else { zero })
                    .collect();
                vec![(x, Tensor::new(xv.shape(), data)?)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|d| -d))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let da = bv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&q, &d)| q * d)
                    .collect();
                let db = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&p, &d)| p * d)
                    .collect();
                vec![
                    (a, Tensor::new(av.shape(), da)?),
                    (b, Tensor::new(bv.shape(), db)?),
                ]
            }
            Op::Pow(x, e) => {
                let xv = self.val(x);
                let data = if e == 0.0 {
                    vec![zero; xv.len()]
                } else {
                    let (et, em1) = (T::lit(e), T::lit(e - 1.0));
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| d * et * v.powf(em1))
                        .collect()
                };
                vec![(x, Tensor::new(xv.shape(), data)?)]
            }
            Op::Sum(x) => {
                let xv = self.val(x);
                vec![(x, Tensor::full(xv.shape(), g.item()))]
            }
            Op::Mean(x) => {
                let xv = self.val(x);
                let d = g.item() / T::lit(xv.len() as f64);
                vec![(x, Tensor::full(xv.shape(), d))]
            }
            Op::Mask(x, m) => {
                let mv = self.val(m);
                let data = g
                    .data()
                    .iter()
                    .zip(mv.data())
                    .map(|(&d, &mk)| if mk == zero { zero } else { d })
                    .collect();
                vec![(x, Tensor::new(g.shape(), data)?)]
            }
            Op::Scale(x, s) => {
                let s = T::lit(s);
                vec![(x, g.map(|d| d * s))]
            }
            Op::AddScalar(x, _) => vec![(x, g.clone())],
        })
    }
}
