//! Exponential moving average of network parameters and the teacher
//! predictions served from it.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::segnet::{
    load_checkpoint, predict, save_checkpoint, CheckpointRole, ClassProbMap, EmaHeader, ModelParams,
};

/// Averaged parameters `E_t(θ)` with their smoothing coefficient and step count.
///
/// The running average lives in an f64 shadow and `averaged` is its rounding
/// to f32, so rounding errors do not accumulate across steps.
#[derive(Debug, Clone)]
pub struct EmaState {
    averaged: ModelParams,
    shadow: Vec<f64>,
    alpha: f64,
    step: u64,
}

/// Equality covers the published state; checkpoints hold only the f32 rounding
/// of the shadow, so a reloaded state compares equal to the saved one.
impl PartialEq for EmaState {
    fn eq(&self, other: &Self) -> bool {
        self.averaged == other.averaged && self.alpha == other.alpha && self.step == other.step
    }
}

impl EmaState {
    pub fn averaged(&self) -> &ModelParams {
        &self.averaged
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            &self.averaged,
            CheckpointRole::Averaged(EmaHeader {
                alpha: self.alpha,
                step: self.step,
            }),
            path,
        )
    }

    /// Loads an averaged-parameter checkpoint; a student checkpoint is rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        match ck.role {
            CheckpointRole::Averaged(h) => Ok(Self {
                shadow: widen(&ck.params),
                averaged: ck.params,
                alpha: check_alpha(h.alpha)?,
                step: h.step,
            }),
            CheckpointRole::Student => Err(Error::InvalidArgument(
                "checkpoint holds student parameters, not averaged ones".into(),
            )),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "smoothing coefficient must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(alpha)
}

fn widen(params: &ModelParams) -> Vec<f64> {
    params.flat().into_iter().map(f64::from).collect()
}

pub fn ema_init(params: &ModelParams, alpha: f64) -> Result<EmaState> {
    Ok(EmaState {
        averaged: params.clone(),
        shadow: widen(params),
        alpha: check_alpha(alpha)?,
        step: 0,
    })
}

/// `e ← α·e + (1 − α)·p` elementwise, then `step += 1`.
pub fn ema_update(state: &mut EmaState, params: &ModelParams) -> Result<()> {
    if state.averaged.fingerprint() != params.fingerprint() {
        return Err(Error::InvalidArgument(format!(
            "averaged parameters {} cannot track {}",
            state.averaged.fingerprint(),
            params.fingerprint()
        )));
    }
    let a = state.alpha;
    let b = 1.0 - state.alpha;
    let mut offset = 0;
    for ((_, e), (_, p)) in state.averaged.iter_mut().zip(params.iter()) {
        let n = p.len();
        blend(&mut state.shadow[offset..offset + n], e, p, a, b);
        offset += n;
    }
    state.step += 1;
    Ok(())
}

fn blend(shadow: &mut [f64], e: &mut Tensor<f32>, p: &Tensor<f32>, a: f64, b: f64) {
    for ((sv, ev), &pv) in shadow.iter_mut().zip(e.data_mut()).zip(p.data()) {
        *sv = a * *sv + b * pv as f64;
        *ev = *sv as f32;
    }
}

/// Prediction of the averaged network. The result is a plain value, so any
/// graph consuming it holds it as a constant and sends no gradient back.
pub fn teacher_predict(state: &EmaState, image: &Tensor<f32>) -> Result<ClassProbMap> {
    predict(image, &state.averaged)
}
