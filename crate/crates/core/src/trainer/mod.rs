//! Training pipeline: individual pre-training, pseudo-label fusion, dual-network
//! co-training and final model selection, plus the SGD optimizer.

mod cotrain;
mod pseudo;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use cotrain::{cotrain, teacher_source, CotrainOutput, TeacherSource, TrainedNet};
pub use pseudo::{fuse_labels, generate_pseudo_dataset, PseudoDataset};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    objective_node, weights_from_mean_sizes, LossComponents, LossWeights, MaskReading, RegionMask,
};
use crate::metrics::{evaluate, render_rows, MetricsTable};
use crate::phantom::{mix_seed, DatasetSplit, LabelMap, Sample};
use crate::segnet::{build, init_params, ModelParams};

/// Which ablation variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Individual,
    SelfTraining,
    Ct,
    Wa,
    CtWa,
    CtWaRm,
}

impl Mode {
    /// Report order.
    pub const ALL: [Mode; 6] = [
        Mode::Individual,
        Mode::SelfTraining,
        Mode::Ct,
        Mode::Wa,
        Mode::CtWa,
        Mode::CtWaRm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Individual => "individual",
            Mode::SelfTraining => "self_training",
            Mode::Ct => "ct",
            Mode::Wa => "wa",
            Mode::CtWa => "ct_wa",
            Mode::CtWaRm => "ct_wa_rm",
        }
    }

    /// Number of co-trained networks.
    pub fn networks(self) -> usize {
        match self {
            Mode::Ct | Mode::CtWa | Mode::CtWaRm => 2,
            _ => 1,
        }
    }

    pub fn uses_ema(self) -> bool {
        matches!(self, Mode::Wa | Mode::CtWa | Mode::CtWaRm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of individual, self_training, ct, wa, ct_wa, ct_wa_rm"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest global gradient norm fed to the optimizer; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_soft: f64,
    /// Ramp-up length as a fraction of the total iteration count.
    pub rampup_fraction: f64,
    pub ema_alpha: f64,
    pub mask_reading: MaskReading,
    pub dilation_radius: usize,
    pub base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CtWaRm,
            epochs: 10,
            batch_size: 8,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            grad_clip: 0.5,
            seed: 0,
            gamma: 2.0,
            epsilon: 1e-5,
            lambda_focal: 1.0,
            lambda_dice: 0.1,
            lambda_soft: 0.1,
            rampup_fraction: 0.3,
            ema_alpha: 0.999,
            mask_reading: MaskReading::Selective,
            dilation_radius: 2,
            base_channels: 8,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!(
                "grad_clip must be a finite value ≥ 0, got {}",
                self.grad_clip
            ));
        }
        if !(self.rampup_fraction > 0.0 && self.rampup_fraction <= 1.0) {
            return bad(format!(
                "rampup_fraction must lie in (0, 1], got {}",
                self.rampup_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!(
                "ema_alpha must lie in [0, 1], got {}",
                self.ema_alpha
            ));
        }
        if self.mask_reading == MaskReading::Literal && self.mode != Mode::CtWaRm {
            return bad(format!(
                "mask_reading = literal only applies to mode ct_wa_rm, not {}",
                self.mode
            ));
        }
        self.loss_weights(vec![1.0, 1.0], 1)?;
        Ok(())
    }

    pub fn loss_weights(&self, alpha: Vec<f64>, rampup_length: u64) -> Result<LossWeights> {
        let w = LossWeights {
            alpha,
            gamma: self.gamma,
            epsilon: self.epsilon,
            lambda_focal: self.lambda_focal,
            lambda_dice: self.lambda_dice,
            lambda_soft: self.lambda_soft,
            rampup_length: rampup_length.max(1),
        };
        w.check()?;
        Ok(w)
    }
}

/// Momentum buffers plus the cosine schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub t: u64,
    pub total: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, total_iterations: u64) -> Self {
        Self {
            velocity: params.zeros_like(),
            t: 0,
            total: total_iterations.max(1),
        }
    }
}

/// `lr0 · ½(1 + cos(π t / T))`, clamped at `T`.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> f64 {
    let phase = (t.min(total) as f64) / total.max(1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Factor that scales `grads` down to a global norm of at most `max_norm`.
/// 1 when clipping is off (`max_norm` = 0) or the norm is already within bounds.
pub fn clip_factor(grads: &ModelParams, max_norm: f64) -> f32 {
    if max_norm == 0.0 {
        return 1.0;
    }
    let norm = grads
        .flat()
        .iter()
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        (max_norm / norm) as f32
    } else {
        1.0
    }
}

/// One momentum-SGD step on gradients clipped to `cfg.grad_clip`; returns the
/// learning rate used.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if params.fingerprint() != grads.fingerprint()
        || params.fingerprint() != opt.velocity.fingerprint()
    {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: "parameters, gradients and velocity have different shapes".into(),
        });
    }
    let lr64 = cosine_lr(cfg.lr0, opt.t, opt.total);
    let lr = lr64 as f32;
    let clip = clip_factor(grads, cfg.grad_clip);
    let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    for (((_, p), (_, g)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(opt.velocity.iter_mut())
    {
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = mu * *vv + clip * gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    opt.t += 1;
    Ok(lr64)
}

/// Worker pool for per-sample gradients; `COTRAIN_SEG_THREADS` caps its size.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("COTRAIN_SEG_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool construction")
    })
}

/// What one sample contributes to a network's objective.
pub(crate) struct SampleTarget<'a> {
    pub sample: &'a Sample,
    pub labels: &'a LabelMap,
    /// Teacher probabilities and the pixels where they apply.
    pub soft: Option<(Tensor<f32>, RegionMask)>,
}

/// Loss components and parameter gradients of one sample.
pub(crate) fn sample_gradient(
    params: &ModelParams,
    target: &SampleTarget<'_>,
    weights: &LossWeights,
    rampup: f64,
) -> Result<(ModelParams, LossComponents)> {
    let (h, w) = (target.sample.height(), target.sample.width());
    let shape = (params.arch().classes, h, w);
    let image = target.sample.input();
    let mut g = Graph::<f32>::new();
    let x = g.input("image");
    let probs = build(&mut g, x, params.arch(), "");
    let soft = match &target.soft {
        Some((teacher, mask)) => Some((g.constant(teacher.clone()), mask, rampup)),
        None => None,
    };
    let nodes = objective_node(&mut g, probs, shape, target.labels, weights, soft)?;
    let mut bindings = params.bindings();
    bindings.bind("image", &image);
    g.forward(nodes.total, &bindings)?;
    let grads = g.backward(nodes.total)?;
    let value = |id| g.value(id).map_or(0.0, |t| t.item() as f64);
    let comps = LossComponents {
        focal: value(nodes.focal),
        dice: value(nodes.dice),
        soft: nodes.soft.map_or(0.0, value),
    };
    let mut out = params.zeros_like();
    for (name, t) in out.iter_mut() {
        let gt = grads
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no gradient produced for parameter {name}")))?;
        t.data_mut().copy_from_slice(gt.data());
    }
    Ok((out, comps))
}

/// Mean gradient and mean loss components over a batch. Samples may run in
/// parallel; the reduction is in index order, so the result does not depend on
/// the thread count.
pub(crate) fn batch_gradient(
    params: &ModelParams,
    targets: &[SampleTarget<'_>],
    weights: &LossWeights,
    rampup: f64,
) -> Result<(ModelParams, LossComponents)> {
    let per_sample: Vec<Result<(ModelParams, LossComponents)>> = thread_pool().install(|| {
        targets
            .par_iter()
            .map(|t| sample_gradient(params, t, weights, rampup))
            .collect()
    });
    let mut total = params.zeros_like();
    let mut comps = LossComponents::default();
    for r in per_sample {
        let (g, c) = r?;
        for ((_, acc), (_, gt)) in total.iter_mut().zip(g.iter()) {
            acc.add_assign(gt);
        }
        comps.focal += c.focal;
        comps.dice += c.dice;
        comps.soft += c.soft;
    }
    let n = targets.len() as f32;
    for (_, t) in total.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let nf = targets.len() as f64;
    comps.focal /= nf;
    comps.dice /= nf;
    comps.soft /= nf;
    Ok((total, comps))
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub rampup: f64,
    /// Loss components of each network on this batch.
    pub losses: Vec<LossComponents>,
    /// Soft-target source of each network on this batch.
    pub teachers: Vec<TeacherSource>,
}

/// Per-epoch summary of the first network.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub lr: f64,
    pub rampup: f64,
    pub validation: Option<MetricsTable>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,split,organ,dsc,hd,loss_focal,loss_dice,loss_soft,lr,lambda_rampup";

/// Rows for one evaluated table: one per organ plus `avg`; DSC in percent.
pub fn metrics_csv_rows(
    epoch: usize,
    split: &str,
    table: &MetricsTable,
    losses: &LossComponents,
    lr: f64,
    rampup: f64,
) -> String {
    let tail = format!(
        "{:.6},{:.6},{:.6},{:.8},{:.6}",
        losses.focal, losses.dice, losses.soft, lr, rampup
    );
    let mut out = String::new();
    for c in 0..table.organs() {
        out.push_str(&format!(
            "{epoch},{split},{},{:.2},{:.2},{tail}\n",
            c + 1,
            100.0 * table.dsc[c],
            table.hd[c]
        ));
    }
    out.push_str(&format!(
        "{epoch},{split},avg,{:.2},{:.2},{tail}\n",
        100.0 * table.avg_dsc(),
        table.avg_hd()
    ));
    out
}

impl TrainLog {
    /// Per-epoch validation rows (header excluded).
    pub fn metrics_csv_rows(&self) -> String {
        self.epochs
            .iter()
            .filter_map(|e| {
                e.validation
                    .as_ref()
                    .map(|t| metrics_csv_rows(e.epoch, "validation", t, &e.losses, e.lr, e.rampup))
            })
            .collect()
    }

    /// `iteration,epoch,lr,lambda_rampup` then `focal,dice,soft` per network.
    pub fn iterations_csv(&self) -> String {
        let nets = self.iterations.first().map_or(0, |r| r.losses.len());
        let mut out = String::from("iteration,epoch,lr,lambda_rampup");
        for n in 1..=nets {
            out.push_str(&format!(",focal_{n},dice_{n},soft_{n}"));
        }
        out.push('\n');
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{:.8},{:.8}",
                r.iteration, r.epoch, r.lr, r.rampup
            ));
            for c in &r.losses {
                out.push_str(&format!(",{:.6},{:.6},{:.6}", c.focal, c.dice, c.soft));
            }
            out.push('\n');
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stream, index]))
}

/// Seed stream of network `net` in co-training (net 0 is shared with self-training).
pub(crate) fn network_init_seed(seed: u64, net: usize) -> u64 {
    mix_seed(&[seed, 0x2000 + net as u64])
}

pub(crate) fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

pub(crate) fn iterations_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}

pub(crate) fn rampup_length(total: u64, fraction: f64) -> u64 {
    ((total as f64 * fraction).ceil() as u64).max(1)
}

/// Accumulates per-iteration loss components into an epoch mean.
#[derive(Default)]
pub(crate) struct EpochMeans {
    sum: LossComponents,
    n: usize,
}

impl EpochMeans {
    pub fn push(&mut self, c: &LossComponents) {
        self.sum.focal += c.focal;
        self.sum.dice += c.dice;
        self.sum.soft += c.soft;
        self.n += 1;
    }

    pub fn mean(&self) -> LossComponents {
        let n = self.n.max(1) as f64;
        LossComponents {
            focal: self.sum.focal / n,
            dice: self.sum.dice / n,
            soft: self.sum.soft / n,
        }
    }
}

/// A trained single-organ model with its log.
#[derive(Debug, Clone)]
pub struct IndividualModel {
    pub organ: u8,
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Trains model `k` on `D_k` alone with a background/organ-`k` head, using the
/// focal and dice losses.
pub fn pretrain_individual(
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<IndividualModel>> {
    cfg.check()?;
    if split.train.len() != split.organs {
        return Err(Error::Data(format!(
            "{} training partitions for {} organs",
            split.train.len(),
            split.organs
        )));
    }
    (1..=split.organs)
        .map(|k| pretrain_one(split, k as u8, cfg))
        .collect()
}

fn pretrain_one(split: &DatasetSplit, organ: u8, cfg: &TrainConfig) -> Result<IndividualModel> {
    let data = &split.train[organ as usize - 1];
    if data.is_empty() {
        return Err(Error::Data(format!(
            "training set of organ {organ} is empty"
        )));
    }
    let labels: Vec<LabelMap> = data.iter().map(|s| s.mask.binary(organ)).collect();
    let mean_size = |class: u8| {
        let counts: Vec<usize> = labels
            .iter()
            .map(|l| l.count(class))
            .filter(|&c| c > 0)
            .collect();
        if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        }
    };
    let alpha = weights_from_mean_sizes(&[mean_size(0), mean_size(1)])?;
    let per_epoch = iterations_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let weights = cfg.loss_weights(alpha, rampup_length(total, cfg.rampup_fraction))?;

    let mut params = init_params(
        mix_seed(&[cfg.seed, 0x1000 + organ as u64]),
        1,
        cfg.base_channels,
    )?;
    let mut opt = OptimizerState::new(&params, total);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(
            data.len(),
            &mut stream_rng(cfg.seed, 0x1100 + organ as u64, epoch as u64),
        );
        let mut means = EpochMeans::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let targets: Vec<SampleTarget<'_>> = chunk
                .iter()
                .map(|&i| SampleTarget {
                    sample: &data[i],
                    labels: &labels[i],
                    soft: None,
                })
                .collect();
            let (grads, comps) = batch_gradient(&params, &targets, &weights, 0.0)?;
            let iteration = opt.t;
            lr = sgd_step(&mut params, &grads, &mut opt, cfg)?;
            means.push(&comps);
            log.iterations.push(IterationRecord {
                epoch: epoch + 1,
                iteration,
                lr,
                rampup: 0.0,
                losses: vec![comps],
                teachers: vec![TeacherSource::None],
            });
        }
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            losses: means.mean(),
            lr,
            rampup: 0.0,
            validation: None,
        });
    }
    Ok(IndividualModel { organ, params, log })
}

/// Picks the candidate with the highest mean per-organ validation DSC; ties go
/// to the earlier candidate. Returns its index and every candidate's table.
pub fn select_final_model(
    candidates: &[&ModelParams],
    validation: &[Sample],
) -> Result<(usize, Vec<MetricsTable>)> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument(
            "model selection needs a non-empty validation set".into(),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no candidate models to select from".into(),
        ));
    }
    let tables = candidates
        .iter()
        .map(|m| evaluate(m, validation))
        .collect::<Result<Vec<_>>>()?;
    Ok((pick_best(&tables), tables))
}

/// Index of the highest average DSC; the first wins ties.
pub fn pick_best(tables: &[MetricsTable]) -> usize {
    let mut best = 0;
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.avg_dsc() > tables[best].avg_dsc() {
            best = i;
        }
    }
    best
}

/// Plain-text dump of per-epoch losses, mainly for command-line progress output.
pub fn render_epochs(log: &TrainLog) -> String {
    let mut rows = vec![vec![
        "epoch".to_string(),
        "focal".into(),
        "dice".into(),
        "soft".into(),
        "lr".into(),
        "val DSC".into(),
    ]];
    for e in &log.epochs {
        rows.push(vec![
            e.epoch.to_string(),
            format!("{:.4}", e.losses.focal),
            format!("{:.4}", e.losses.dice),
            format!("{:.4}", e.losses.soft),
            format!("{:.5}", e.lr),
            e.validation
                .as_ref()
                .map_or("-".into(), |t| format!("{:.2}", 100.0 * t.avg_dsc())),
        ]);
    }
    render_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::Architecture;

    fn scalar_model(value: f32) -> ModelParams {
        let mut p = init_params(0, 1, 4).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
        p
    }

    #[test]
    fn sgd_hand_example() {
        let cfg = TrainConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_model(0.5);
        let g = scalar_model(1.0);
        let mut opt = OptimizerState::new(&p, 100);
        let lr = sgd_step(&mut p, &g, &mut opt, &cfg).unwrap();
        assert!((lr - 0.1).abs() < 1e-9);
        assert!(p.flat().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn clipping_caps_the_global_gradient_norm() {
        let g = scalar_model(1.0);
        let norm = (g.flat().len() as f64).sqrt();
        let f = clip_factor(&g, 0.5);
        assert!((f as f64 * norm - 0.5).abs() < 1e-6);
        assert_eq!(clip_factor(&g, 0.0), 1.0);
        assert_eq!(clip_factor(&g, 2.0 * norm), 1.0);

        let cfg = TrainConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: 0.5,
            ..TrainConfig::default()
        };
        let mut p = scalar_model(0.5);
        let mut opt = OptimizerState::new(&p, 100);
        sgd_step(&mut p, &g, &mut opt, &cfg).unwrap();
        let step: f64 = p
            .flat()
            .iter()
            .map(|&v| (0.5 - v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((step - 0.05).abs() < 1e-5, "{step}");
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = init_params(3, 2, 4).unwrap();
        let before = p.clone();
        let zero = p.zeros_like();
        let mut opt = OptimizerState::new(&p, 10);
        sgd_step(&mut p, &zero, &mut opt, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut p = init_params(3, 2, 4).unwrap();
        let g = init_params(3, 3, 4).unwrap();
        let mut opt = OptimizerState::new(&p, 10);
        assert!(sgd_step(&mut p, &g, &mut opt, &TrainConfig::default()).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 100), 0.05);
        assert!(cosine_lr(0.05, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.05, 50, 100) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("ours".parse::<Mode>().is_err());
    }

    #[test]
    fn literal_mask_outside_region_mode_is_a_config_error() {
        let cfg = TrainConfig {
            mode: Mode::CtWa,
            mask_reading: MaskReading::Literal,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.check(), Err(Error::Config(_))));
        let ok = TrainConfig {
            mask_reading: MaskReading::Literal,
            ..TrainConfig::default()
        };
        ok.check().unwrap();
    }

    #[test]
    fn selection_prefers_higher_dsc_and_first_on_ties() {
        let t = |d: f64| MetricsTable {
            dsc: vec![d, d],
            hd: vec![0.0, 0.0],
        };
        assert_eq!(pick_best(&[t(0.90), t(0.88)]), 0);
        assert_eq!(pick_best(&[t(0.88), t(0.90)]), 1);
        assert_eq!(pick_best(&[t(0.9), t(0.9)]), 0);
        let m = init_params(0, 2, 4).unwrap();
        assert!(select_final_model(&[&m], &[]).is_err());
    }

    #[test]
    fn csv_rows_have_header_arity() {
        let table = MetricsTable {
            dsc: vec![0.5, 0.25],
            hd: vec![1.0, 2.0],
        };
        let rows = metrics_csv_rows(3, "test", &table, &LossComponents::default(), 0.01, 1.0);
        let arity = METRICS_CSV_HEADER.split(',').count();
        for line in rows.lines() {
            assert_eq!(line.split(',').count(), arity);
        }
        assert!(rows.starts_with("3,test,1,50.00,1.00,"));
        assert!(rows
            .lines()
            .last()
            .unwrap()
            .starts_with("3,test,avg,37.50,1.50,"));
        assert_eq!(Architecture::new(2, 4).unwrap().classes, 3);
    }
}
