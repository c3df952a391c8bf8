//! Segmentation quality metrics and per-organ evaluation tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phantom::{LabelMap, Sample};
use crate::segnet::{predict, ModelParams};

/// Binary `H×W` mask of one organ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                op: "binary_mask",
                detail: format!("{} bits for {height}×{width}", bits.len()),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Pixels of `labels` equal to `class`.
    pub fn of_class(labels: &LabelMap, class: u8) -> Self {
        Self {
            height: labels.height(),
            width: labels.width(),
            bits: labels.labels().iter().map(|&l| l == class).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn points(&self) -> Vec<(f64, f64)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / self.width) as f64, (i % self.width) as f64))
            .collect()
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "{}×{} vs {}×{}",
                    self.height, self.width, other.height, other.width
                ),
            });
        }
        Ok(())
    }
}

/// `2|P∩G| / (|P| + |G|)`, or 1 when both are empty.
pub fn dsc(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same_shape(g, "dsc")?;
    let (np, ng) = (p.count(), g.count());
    if np + ng == 0 {
        return Ok(1.0);
    }
    let inter = p.bits.iter().zip(&g.bits).filter(|(&a, &b)| a && b).count();
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

fn directed(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| (ay - by).powi(2) + (ax - bx).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Mean of the two directed Hausdorff distances in pixels. One empty mask gives
/// the image diagonal, two empty masks give 0.
pub fn hausdorff(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same_shape(g, "hausdorff")?;
    let (pp, gp) = (p.points(), g.points());
    Ok(match (pp.is_empty(), gp.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => {
            let (h, w) = ((p.height - 1) as f64, (p.width - 1) as f64);
            (h * h + w * w).sqrt()
        }
        _ => (directed(&pp, &gp) + directed(&gp, &pp)) / 2.0,
    })
}

/// Per-organ DSC (fraction in [0, 1]) and HD (pixels), averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub dsc: Vec<f64>,
    pub hd: Vec<f64>,
}

impl MetricsTable {
    pub fn organs(&self) -> usize {
        self.dsc.len()
    }

    pub fn avg_dsc(&self) -> f64 {
        mean(&self.dsc)
    }

    pub fn avg_hd(&self) -> f64 {
        mean(&self.hd)
    }

    /// Header `organ,dsc,hd`; DSC in percent with 2 decimals, the last row is `avg`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("organ,dsc,hd\n");
        for c in 0..self.organs() {
            let _ = writeln!(
                out,
                "{},{:.2},{:.2}",
                c + 1,
                100.0 * self.dsc[c],
                self.hd[c]
            );
        }
        let _ = writeln!(
            out,
            "avg,{:.2},{:.2}",
            100.0 * self.avg_dsc(),
            self.avg_hd()
        );
        out
    }

    /// Aligned table with one column per organ plus the averages.
    pub fn to_text(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend((1..=self.organs()).map(|c| format!("organ {c}")));
        header.push("avg".into());
        let row = |name: &str, vals: &[f64], avg: f64, scale: f64| {
            let mut r = vec![name.to_string()];
            r.extend(vals.iter().map(|v| format!("{:.2}", scale * v)));
            r.push(format!("{:.2}", scale * avg));
            r
        };
        render_rows(&[
            header,
            row("DSC (%)", &self.dsc, self.avg_dsc(), 100.0),
            row("HD (px)", &self.hd, self.avg_hd(), 1.0),
        ])
    }
}

/// Renders rows with left-aligned first column and right-aligned others.
pub fn render_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores predicted label maps against fully annotated ground truth for organs `1..=organs`.
pub fn score_label_maps(
    predictions: &[LabelMap],
    truths: &[&LabelMap],
    organs: usize,
) -> Result<MetricsTable> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty prediction and truth lists, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let mut dsc_sum = vec![0.0; organs];
    let mut hd_sum = vec![0.0; organs];
    for (pred, truth) in predictions.iter().zip(truths) {
        for c in 0..organs {
            let p = BinaryMask::of_class(pred, c as u8 + 1);
            let g = BinaryMask::of_class(truth, c as u8 + 1);
            dsc_sum[c] += dsc(&p, &g)?;
            hd_sum[c] += hausdorff(&p, &g)?;
        }
    }
    let n = predictions.len() as f64;
    Ok(MetricsTable {
        dsc: dsc_sum.into_iter().map(|v| v / n).collect(),
        hd: hd_sum.into_iter().map(|v| v / n).collect(),
    })
}

fn require_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one sample".into(),
        ));
    }
    Ok(())
}

/// Evaluates one multi-organ model: organ `c` is predicted where the argmax class is `c`.
pub fn evaluate(model: &ModelParams, samples: &[Sample]) -> Result<MetricsTable> {
    require_samples(samples)?;
    let predictions = samples
        .iter()
        .map(|s| Ok(predict(&s.image, model)?.argmax()))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<&LabelMap> = samples.iter().map(|s| &s.mask).collect();
    score_label_maps(&predictions, &truths, model.arch().organs())
}

/// Evaluates single-organ models: organ `c` is scored with model `c` (class 1 of
/// its two-class head) against the organ-`c` pixels of the ground truth.
pub fn evaluate_individual(models: &[ModelParams], samples: &[Sample]) -> Result<MetricsTable> {
    require_samples(samples)?;
    let mut dsc_v = Vec::with_capacity(models.len());
    let mut hd_v = Vec::with_capacity(models.len());
    for (c, model) in models.iter().enumerate() {
        if model.arch().classes != 2 {
            return Err(Error::InvalidArgument(format!(
                "individual model {} has {} classes, expected 2",
                c + 1,
                model.arch().classes
            )));
        }
        let organ = c as u8 + 1;
        let predictions = samples
            .iter()
            .map(|s| Ok(predict(&s.image, model)?.argmax()))
            .collect::<Result<Vec<_>>>()?;
        let projected: Vec<LabelMap> = samples.iter().map(|s| s.mask.binary(organ)).collect();
        let truths: Vec<&LabelMap> = projected.iter().collect();
        let t = score_label_maps(&predictions, &truths, 1)?;
        dsc_v.push(t.dsc[0]);
        hd_v.push(t.hd[0]);
    }
    Ok(MetricsTable {
        dsc: dsc_v,
        hd: hd_v,
    })
}

/// Scores organ `c` on the samples annotated for it (`parts[c - 1]`) only, for
/// partially annotated training sets. `models` holds either one multi-organ
/// model or one single-organ model per organ.
pub fn evaluate_partial(models: &[ModelParams], parts: &[Vec<Sample>]) -> Result<MetricsTable> {
    let individual = models.len() > 1 || models.first().is_some_and(|m| m.arch().classes == 2);
    if models.is_empty() || (individual && models.len() != parts.len()) {
        return Err(Error::InvalidArgument(format!(
            "{} models for {} organ datasets",
            models.len(),
            parts.len()
        )));
    }
    let mut dsc_v = Vec::with_capacity(parts.len());
    let mut hd_v = Vec::with_capacity(parts.len());
    for (c, part) in parts.iter().enumerate() {
        require_samples(part)?;
        let organ = c as u8 + 1;
        let (model, class) = if individual {
            (&models[c], 1)
        } else {
            (&models[0], organ)
        };
        let predictions = part
            .iter()
            .map(|s| Ok(predict(&s.image, model)?.argmax().binary(class)))
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<LabelMap> = part.iter().map(|s| s.mask.binary(organ)).collect();
        let t = score_label_maps(&predictions, &truths.iter().collect::<Vec<_>>(), 1)?;
        dsc_v.push(t.dsc[0]);
        hd_v.push(t.hd[0]);
    }
    Ok(MetricsTable {
        dsc: dsc_v,
        hd: hd_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(y, x) in on {
            bits[y * w + x] = true;
        }
        BinaryMask::new(h, w, bits).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(4, 4, &[(3, 3)])).unwrap(), 0.0);
        let p = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]);
        let g = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (2, 2)]);
        assert!((dsc(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dsc(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert!(dsc(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let p = mask(5, 5, &[(0, 0)]);
        let g = mask(5, 5, &[(3, 4)]);
        assert!((hausdorff(&p, &g).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(hausdorff(&g, &g).unwrap(), 0.0);
        let empty = mask(64, 64, &[]);
        let one = mask(64, 64, &[(10, 10)]);
        let diag = hausdorff(&empty, &one).unwrap();
        assert!((diag - (2.0f64 * 63.0 * 63.0).sqrt()).abs() < 1e-12);
        assert!((diag - 89.095).abs() < 1e-3);
        assert_eq!(hausdorff(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn scoring_averages_over_samples() {
        // sample 1: organ 1 perfect, organ 2 missed; sample 2: organ 1 half, organ 2 perfect
        let t1 = LabelMap::new(1, 4, vec![1, 1, 0, 2]).unwrap();
        let p1 = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let t2 = LabelMap::new(1, 4, vec![1, 0, 0, 2]).unwrap();
        let p2 = LabelMap::new(1, 4, vec![1, 1, 0, 2]).unwrap();
        let t = score_label_maps(&[p1, p2], &[&t1, &t2], 2).unwrap();
        let organ1 = (1.0 + 2.0 * 1.0 / 3.0) / 2.0;
        let organ2 = (0.0 + 1.0) / 2.0;
        assert!((t.dsc[0] - organ1).abs() < 1e-12);
        assert!((t.dsc[1] - organ2).abs() < 1e-12);
        // hd organ 1: 0 then (0 + 1)/2; organ 2: diagonal sqrt(0 + 9) = 3 then 0
        assert!((t.hd[0] - 0.25).abs() < 1e-12);
        assert!((t.hd[1] - 1.5).abs() < 1e-12);
        assert!((t.avg_dsc() - (organ1 + organ2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_renders_percentages() {
        let t = MetricsTable {
            dsc: vec![0.959, 0.953],
            hd: vec![1.0, 2.5],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("organ,dsc,hd\n1,95.90,1.00\n2,95.30,2.50\navg,95.60,1.75\n"));
        let text = t.to_text();
        assert!(text.contains("95.90") && text.contains("organ 2"));
    }

    #[test]
    fn empty_sample_list_is_rejected() {
        let model = crate::segnet::init_params(0, 2, 4).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }
}
