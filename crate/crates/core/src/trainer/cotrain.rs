//! Joint training on fused hard labels and soft targets from a partner network.

use rayon::prelude::*;

use super::{
    batch_gradient, iterations_per_epoch, network_init_seed, rampup_length, sgd_step, shuffled,
    stream_rng, thread_pool, EpochMeans, EpochRecord, IterationRecord, Mode, OptimizerState,
    PseudoDataset, SampleTarget, TrainConfig, TrainLog,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{make_region_mask, organ_weights, rampup_weight, RegionMask};
use crate::mean_teacher::{ema_init, ema_update, teacher_predict, EmaState};
use crate::metrics::evaluate;
use crate::phantom::{DatasetSplit, Sample};
use crate::segnet::{init_params, predict, ModelParams};

/// Where a network's soft targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    None,
    /// Instantaneous prediction of another student.
    OtherStudent(usize),
    /// The network's own averaged parameters.
    OwnAverage(usize),
    /// Another network's averaged parameters.
    OtherAverage(usize),
}

/// Soft-target wiring of network `net` under `mode`.
pub fn teacher_source(mode: Mode, net: usize) -> TeacherSource {
    match mode {
        Mode::Individual | Mode::SelfTraining => TeacherSource::None,
        Mode::Ct => TeacherSource::OtherStudent(1 - net),
        Mode::Wa => TeacherSource::OwnAverage(net),
        Mode::CtWa | Mode::CtWaRm => TeacherSource::OtherAverage(1 - net),
    }
}

/// Rejects any wiring in which a co-trained network learns from itself.
fn check_wiring(mode: Mode, sources: &[TeacherSource]) -> Result<()> {
    for (i, &s) in sources.iter().enumerate() {
        let ok = match (mode, s) {
            (Mode::SelfTraining, TeacherSource::None) => true,
            (Mode::Wa, TeacherSource::OwnAverage(j)) => j == i,
            (Mode::Ct, TeacherSource::OtherStudent(j)) => j != i && j < sources.len(),
            (Mode::CtWa | Mode::CtWaRm, TeacherSource::OtherAverage(j)) => {
                j != i && j < sources.len()
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Graph(format!(
                "network {} of mode {mode} would be supervised by {s:?}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Final student parameters and, in averaging modes, the averaged copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub student: ModelParams,
    pub averaged: Option<EmaState>,
}

impl TrainedNet {
    /// The model used for evaluation: averaged parameters when present.
    pub fn candidate(&self) -> &ModelParams {
        self.averaged
            .as_ref()
            .map_or(&self.student, |e| e.averaged())
    }
}

#[derive(Debug, Clone)]
pub struct CotrainOutput {
    pub nets: Vec<TrainedNet>,
    pub log: TrainLog,
}

/// Round-robin interleaving of per-organ shuffles: `(organ index, sample index)`.
fn epoch_order(split: &DatasetSplit, seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let orders: Vec<Vec<usize>> = split
        .train
        .iter()
        .enumerate()
        .map(|(k, part)| {
            shuffled(
                part.len(),
                &mut stream_rng(seed, 0x3000 + k as u64, epoch as u64),
            )
        })
        .collect();
    let longest = orders.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| {
            orders
                .iter()
                .enumerate()
                .filter_map(move |(k, o)| o.get(i).map(|&s| (k, s)))
        })
        .collect()
}

/// Trains `cfg.mode` (any mode except `individual`) on the fused labels of
/// `pseudo`, with soft targets wired per mode.
pub fn cotrain(
    split: &DatasetSplit,
    pseudo: &PseudoDataset,
    cfg: &TrainConfig,
) -> Result<CotrainOutput> {
    cfg.check()?;
    if cfg.mode == Mode::Individual {
        return Err(Error::Config(
            "mode individual is trained by pre-training, not co-training".into(),
        ));
    }
    PseudoDataset::from_split(&pseudo.to_split(split)?, split)?;
    let samples: usize = split.train.iter().map(Vec::len).sum();
    if samples == 0 {
        return Err(Error::Data("the training set is empty".into()));
    }
    let per_epoch = iterations_per_epoch(samples, cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let ramp_len = rampup_length(total, cfg.rampup_fraction);
    let weights = cfg.loss_weights(organ_weights(split)?, ramp_len)?;

    let n = cfg.mode.networks();
    let mut params = (0..n)
        .map(|i| {
            init_params(
                network_init_seed(cfg.seed, i),
                split.organs,
                cfg.base_channels,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opts: Vec<OptimizerState> = params
        .iter()
        .map(|p| OptimizerState::new(p, total))
        .collect();
    let mut emas: Vec<Option<EmaState>> = params
        .iter()
        .map(|p| {
            cfg.mode
                .uses_ema()
                .then(|| ema_init(p, cfg.ema_alpha))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let sources: Vec<TeacherSource> = (0..n).map(|i| teacher_source(cfg.mode, i)).collect();

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(split, cfg.seed, epoch);
        let mut means = EpochMeans::default();
        let (mut lr, mut ramp) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            check_wiring(cfg.mode, &sources)?;
            let iteration = opts[0].t;
            ramp = rampup_weight(iteration, ramp_len);
            let batch: Vec<(&Sample, &crate::phantom::LabelMap)> = chunk
                .iter()
                .map(|&(k, i)| (&split.train[k][i], &pseudo.fused[k][i]))
                .collect();
            let masks: Vec<RegionMask> = batch
                .iter()
                .map(|&(s, fused)| match cfg.mode {
                    Mode::CtWaRm => {
                        make_region_mask(s, fused, cfg.dilation_radius, cfg.mask_reading)
                    }
                    _ => RegionMask::new(s.height(), s.width(), vec![true; s.height() * s.width()]),
                })
                .collect::<Result<_>>()?;

            let mut grads = Vec::with_capacity(n);
            let mut comps = Vec::with_capacity(n);
            for net in 0..n {
                let predict_one = |s: &Sample| -> Result<Tensor<f32>> {
                    let probs = match sources[net] {
                        TeacherSource::None => unreachable!("no soft targets requested"),
                        TeacherSource::OtherStudent(j) => predict(&s.image, &params[j])?,
                        TeacherSource::OwnAverage(j) | TeacherSource::OtherAverage(j) => {
                            let ema = emas[j].as_ref().expect("averaging modes keep states");
                            teacher_predict(ema, &s.image)?
                        }
                    };
                    Ok(probs.into_tensor())
                };
                let soft: Vec<Option<Tensor<f32>>> = match sources[net] {
                    TeacherSource::None => vec![None; batch.len()],
                    _ => thread_pool().install(|| {
                        batch
                            .par_iter()
                            .map(|(s, _)| predict_one(s).map(Some))
                            .collect::<Result<Vec<_>>>()
                    })?,
                };
                let targets: Vec<SampleTarget<'_>> = batch
                    .iter()
                    .zip(soft)
                    .zip(&masks)
                    .map(|((&(sample, labels), teacher), mask)| SampleTarget {
                        sample,
                        labels,
                        soft: teacher.map(|t| (t, mask.clone())),
                    })
                    .collect();
                let (g, c) = batch_gradient(&params[net], &targets, &weights, ramp)?;
                grads.push(g);
                comps.push(c);
            }
            for net in 0..n {
                lr = sgd_step(&mut params[net], &grads[net], &mut opts[net], cfg)?;
            }
            for (ema, p) in emas.iter_mut().zip(&params) {
                if let Some(state) = ema {
                    ema_update(state, p)?;
                }
            }
            means.push(&comps[0]);
            log.iterations.push(IterationRecord {
                epoch: epoch + 1,
                iteration,
                lr,
                rampup: ramp,
                losses: comps,
                teachers: sources.clone(),
            });
        }
        let validation = if split.validation.is_empty() {
            None
        } else {
            let candidate = emas[0].as_ref().map_or(&params[0], |e| e.averaged());
            Some(evaluate(candidate, &split.validation)?)
        };
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            losses: means.mean(),
            lr,
            rampup: ramp,
            validation,
        });
    }
    let nets = params
        .into_iter()
        .zip(emas)
        .map(|(student, averaged)| TrainedNet { student, averaged })
        .collect();
    Ok(CotrainOutput { nets, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wiring_per_mode() {
        assert_eq!(
            teacher_source(Mode::CtWaRm, 0),
            TeacherSource::OtherAverage(1)
        );
        assert_eq!(
            teacher_source(Mode::CtWa, 1),
            TeacherSource::OtherAverage(0)
        );
        assert_eq!(teacher_source(Mode::Ct, 0), TeacherSource::OtherStudent(1));
        assert_eq!(teacher_source(Mode::Wa, 0), TeacherSource::OwnAverage(0));
        assert_eq!(teacher_source(Mode::SelfTraining, 0), TeacherSource::None);
        for mode in Mode::ALL.into_iter().skip(1) {
            let s: Vec<_> = (0..mode.networks())
                .map(|i| teacher_source(mode, i))
                .collect();
            check_wiring(mode, &s).unwrap();
        }
    }

    #[test]
    fn self_teaching_is_rejected_in_cross_modes() {
        let own = [TeacherSource::OwnAverage(0), TeacherSource::OwnAverage(1)];
        assert!(check_wiring(Mode::CtWa, &own).is_err());
        let crossed_to_self = [
            TeacherSource::OtherAverage(0),
            TeacherSource::OtherAverage(0),
        ];
        assert!(check_wiring(Mode::CtWaRm, &crossed_to_self).is_err());
    }
}
