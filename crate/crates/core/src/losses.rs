//! Training objectives: weighted focal loss, dice loss, region masks, the soft
//! consistency loss, ramp-up weighting and their combination.
//!
//! Every loss has a graph builder (`*_node`) for training and a value function
//! evaluated in 64-bit precision on a [`ClassProbMap`].

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::phantom::{DatasetSplit, LabelMap, Sample};
use crate::segnet::ClassProbMap;

/// Loss hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Per-class weights `α_c`, background first.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_soft: f64,
    /// Iterations until the soft-loss ramp reaches 1.
    pub rampup_length: u64,
}

impl LossWeights {
    /// Default knobs (γ = 2, ε = 1e-5, λ = 1.0 / 0.1 / 0.1) with the given α.
    pub fn with_alpha(alpha: Vec<f64>, rampup_length: u64) -> Result<Self> {
        let w = Self {
            alpha,
            gamma: 2.0,
            epsilon: 1e-5,
            lambda_focal: 1.0,
            lambda_dice: 0.1,
            lambda_soft: 0.1,
            rampup_length,
        };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.alpha.len() < 2 || self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad(format!(
                "alpha needs at least two positive entries, got {:?}",
                self.alpha
            ));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be ≥ 0, got {}", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        for (name, v) in [
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice", self.lambda_dice),
            ("lambda_soft", self.lambda_soft),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if self.rampup_length < 1 {
            return bad("rampup_length must be at least 1".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }
}

/// `α_c ∝ 1 / mean_size_c`, normalized so the weights average to 1.
pub fn weights_from_mean_sizes(mean_sizes: &[f64]) -> Result<Vec<f64>> {
    if let Some(c) = mean_sizes.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::Data(format!("class {c} has no observed pixels")));
    }
    let inv: Vec<f64> = mean_sizes.iter().map(|m| 1.0 / m).collect();
    let mean_inv = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|v| v / mean_inv).collect())
}

/// Class weights from the trusted training labels: each class's mean pixel
/// count is taken over the training images in which it appears.
pub fn organ_weights(split: &DatasetSplit) -> Result<Vec<f64>> {
    let classes = split.organs + 1;
    let mut totals = vec![0usize; classes];
    let mut images = vec![0usize; classes];
    for s in split.all_train() {
        for (c, (t, n)) in totals.iter_mut().zip(images.iter_mut()).enumerate() {
            let count = s.mask.count(c as u8);
            if count > 0 {
                *t += count;
                *n += 1;
            }
        }
    }
    let means: Vec<f64> = totals
        .iter()
        .zip(&images)
        .map(|(&t, &n)| if n == 0 { 0.0 } else { t as f64 / n as f64 })
        .collect();
    weights_from_mean_sizes(&means)
}

fn check_labels(labels: &LabelMap, classes: usize, h: usize, w: usize) -> Result<()> {
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::Shape {
            op: "loss",
            detail: format!(
                "labels are {}×{} but probabilities are {h}×{w}",
                labels.height(),
                labels.width()
            ),
        });
    }
    let max = labels.max_label() as usize;
    if max >= classes {
        return Err(Error::InvalidArgument(format!(
            "label {max} is outside 0..{}",
            classes - 1
        )));
    }
    Ok(())
}

/// `−mean_p α_y (1 − q)^γ log q` where `q` is the probability of the labeled class.
/// `probs` must evaluate to `classes × H × W`.
pub fn focal_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    shape: (usize, usize, usize),
    labels: &LabelMap,
    weights: &LossWeights,
) -> Result<NodeId> {
    let (c, h, w) = shape;
    check_labels(labels, c, h, w)?;
    if weights.classes() != c {
        return Err(Error::Shape {
            op: "focal_loss",
            detail: format!("{} class weights for {c} classes", weights.classes()),
        });
    }
    let hw = h * w;
    let scale = -1.0 / hw as f64;
    let mut a = vec![T::zero(); c * hw];
    for (p, &y) in labels.labels().iter().enumerate() {
        a[y as usize * hw + p] = T::lit(weights.alpha[y as usize] * scale);
    }
    let a = g.constant(Tensor::new(&[c, h, w], a)?);
    let logp = g.log(probs);
    let weighted = g.mul(a, logp);
    let term = if weights.gamma == 0.0 {
        weighted
    } else {
        let neg = g.scale(probs, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let focus = g.pow(one_minus, weights.gamma);
        g.mul(weighted, focus)
    };
    Ok(g.sum(term))
}

/// Mean over organ classes of `1 − (2·overlap + ε) / (|label| + Σq + ε)`.
pub fn dice_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    shape: (usize, usize, usize),
    labels: &LabelMap,
    weights: &LossWeights,
) -> Result<NodeId> {
    let (c, h, w) = shape;
    check_labels(labels, c, h, w)?;
    let hw = h * w;
    let organs = c - 1;
    let eps = weights.epsilon;
    let mut ratio_sum: Option<NodeId> = None;
    for class in 1..c {
        let mut overlap = vec![T::zero(); c * hw];
        let mut channel = vec![T::zero(); c * hw];
        let mut label_count = 0usize;
        for (p, &y) in labels.labels().iter().enumerate() {
            channel[class * hw + p] = T::one();
            if y as usize == class {
                overlap[class * hw + p] = T::one();
                label_count += 1;
            }
        }
        let overlap = g.constant(Tensor::new(&[c, h, w], overlap)?);
        let channel = g.constant(Tensor::new(&[c, h, w], channel)?);
        let inter = g.mask(probs, overlap);
        let inter = g.sum(inter);
        let num = g.scale(inter, 2.0);
        let num = g.add_scalar(num, eps);
        let pred = g.mask(probs, channel);
        let pred = g.sum(pred);
        let den = g.add_scalar(pred, label_count as f64 + eps);
        let inv = g.pow(den, -1.0);
        let ratio = g.mul(num, inv);
        ratio_sum = Some(match ratio_sum {
            None => ratio,
            Some(acc) => g.add(acc, ratio),
        });
    }
    let ratio_sum = ratio_sum.expect("at least one organ class");
    let neg = g.scale(ratio_sum, -1.0 / organs as f64);
    Ok(g.add_scalar(neg, 1.0))
}

/// Pixels where soft supervision applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                op: "region_mask",
                detail: format!("{} bits for {height}×{width}", bits.len()),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// How pixels away from any pseudo-labeled organ are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskReading {
    /// Only dilated pseudo-labeled organs other than the annotated one.
    Selective,
    /// Everything except the annotated organ.
    Literal,
}

impl std::str::FromStr for MaskReading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective" => Ok(Self::Selective),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!(
                "mask_reading must be selective or literal, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MaskReading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Selective => "selective",
            Self::Literal => "literal",
        })
    }
}

/// Dilation by a `(2r+1)²` square, done as separable row and column maxima.
pub fn dilate_square(bits: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; bits.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(width - 1);
            rows[y * width + x] = bits[y * width + lo..=y * width + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; bits.len()];
    for y in 0..height {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

pub fn make_region_mask(
    sample: &Sample,
    pseudo_labels: &LabelMap,
    radius: usize,
    reading: MaskReading,
) -> Result<RegionMask> {
    let k = sample.annotated_organ;
    if k == 0 {
        return Err(Error::InvalidArgument(
            "region mask is undefined for a fully annotated sample".into(),
        ));
    }
    let (h, w) = (sample.height(), sample.width());
    if (pseudo_labels.height(), pseudo_labels.width()) != (h, w) {
        return Err(Error::Shape {
            op: "make_region_mask",
            detail: format!(
                "pseudo labels are {}×{} but the sample is {h}×{w}",
                pseudo_labels.height(),
                pseudo_labels.width()
            ),
        });
    }
    let annotated = sample.mask.labels().iter().map(|&l| l == k);
    let bits = match reading {
        MaskReading::Literal => annotated.map(|a| !a).collect(),
        MaskReading::Selective => {
            let other: Vec<bool> = pseudo_labels
                .labels()
                .iter()
                .map(|&l| l != 0 && l != k)
                .collect();
            dilate_square(&other, h, w, radius)
                .into_iter()
                .zip(annotated)
                .map(|(d, a)| d && !a)
                .collect()
        }
    };
    RegionMask::new(h, w, bits)
}

/// `−Σ_{masked p} Σ_c teacher·log student / (H·W)`; the teacher is detached.
///
/// Dividing by the full pixel count, as the focal loss does, keeps the ratio
/// between hard and soft terms that the summed objective has. Dividing by the
/// masked count instead would scale the soft term up by `H·W / #masked`.
pub fn soft_consistency_node<T: Scalar>(
    g: &mut Graph<T>,
    student: NodeId,
    teacher: NodeId,
    shape: (usize, usize, usize),
    mask: &RegionMask,
) -> Result<NodeId> {
    let (c, h, w) = shape;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape {
            op: "soft_consistency_loss",
            detail: format!(
                "mask is {}×{} but probabilities are {h}×{w}",
                mask.height(),
                mask.width()
            ),
        });
    }
    let plane: Vec<T> = mask
        .bits()
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    let broadcast: Vec<T> = (0..c).flat_map(|_| plane.iter().copied()).collect();
    let m = g.constant(Tensor::new(&[c, h, w], broadcast)?);
    let t = g.detach(teacher);
    let logs = g.log(student);
    let prod = g.mul(t, logs);
    let masked = g.mask(prod, m);
    let total = g.sum(masked);
    Ok(g.scale(total, -1.0 / (h * w) as f64))
}

/// `exp(−5 (1 − min(t, L)/L)²)`.
pub fn rampup_weight(t: u64, rampup_length: u64) -> f64 {
    let l = rampup_length.max(1) as f64;
    let phase = 1.0 - (t as f64).min(l) / l;
    (-5.0 * phase * phase).exp()
}

/// Loss terms of one network on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub focal: f64,
    pub dice: f64,
    pub soft: f64,
}

impl LossComponents {
    /// This network's share of [`total_loss`].
    pub fn weighted(&self, w: &LossWeights, rampup: f64) -> f64 {
        w.lambda_focal * self.focal + w.lambda_dice * self.dice + rampup * w.lambda_soft * self.soft
    }
}

/// Combined objective of a network pair.
pub fn total_loss(
    first: &LossComponents,
    second: &LossComponents,
    w: &LossWeights,
    rampup: f64,
) -> f64 {
    first.weighted(w, rampup) + second.weighted(w, rampup)
}

/// Graph nodes of one network's objective on one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub focal: NodeId,
    pub dice: NodeId,
    pub soft: Option<NodeId>,
}

/// Builds `λ_f·focal + λ_d·dice [+ rampup·λ_s·soft]` on top of `probs`.
pub fn objective_node<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    shape: (usize, usize, usize),
    labels: &LabelMap,
    weights: &LossWeights,
    soft: Option<(NodeId, &RegionMask, f64)>,
) -> Result<LossNodes> {
    let focal = focal_loss_node(g, probs, shape, labels, weights)?;
    let dice = dice_loss_node(g, probs, shape, labels, weights)?;
    let f = g.scale(focal, weights.lambda_focal);
    let d = g.scale(dice, weights.lambda_dice);
    let mut total = g.add(f, d);
    let mut soft_node = None;
    if let Some((teacher, mask, rampup)) = soft {
        let s = soft_consistency_node(g, probs, teacher, shape, mask)?;
        let ws = g.scale(s, rampup * weights.lambda_soft);
        total = g.add(total, ws);
        soft_node = Some(s);
    }
    Ok(LossNodes {
        total,
        focal,
        dice,
        soft: soft_node,
    })
}

fn shape_of(probs: &ClassProbMap) -> (usize, usize, usize) {
    (probs.classes(), probs.height(), probs.width())
}

fn evaluate(
    build: impl FnOnce(&mut Graph<f64>, NodeId) -> Result<NodeId>,
    probs: &ClassProbMap,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(probs.tensor().cast());
    let root = build(&mut g, p)?;
    Ok(g.forward(root, &Default::default())?.item())
}

pub fn focal_loss(probs: &ClassProbMap, labels: &LabelMap, weights: &LossWeights) -> Result<f64> {
    evaluate(
        |g, p| focal_loss_node(g, p, shape_of(probs), labels, weights),
        probs,
    )
}

pub fn dice_loss(probs: &ClassProbMap, labels: &LabelMap, weights: &LossWeights) -> Result<f64> {
    evaluate(
        |g, p| dice_loss_node(g, p, shape_of(probs), labels, weights),
        probs,
    )
}

pub fn soft_consistency_loss(
    student: &ClassProbMap,
    teacher: &ClassProbMap,
    mask: &RegionMask,
) -> Result<f64> {
    if shape_of(student) != shape_of(teacher) {
        return Err(Error::Shape {
            op: "soft_consistency_loss",
            detail: format!(
                "student {:?} vs teacher {:?}",
                student.tensor().shape(),
                teacher.tensor().shape()
            ),
        });
    }
    evaluate(
        |g, s| {
            let t = g.constant(teacher.tensor().cast());
            soft_consistency_node(g, s, t, shape_of(student), mask)
        },
        student,
    )
}
