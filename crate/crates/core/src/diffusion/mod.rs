//! Conditional denoising diffusion: schedule, denoiser, PDE-regularised
//! loss, training and ancestral sampling.

mod denoiser;
mod loss;
mod modes;
mod sample;
mod schedule;
mod train;

pub use denoiser::{sinusoidal, Denoiser, DenoiserBatch, DenoiserConfig, DIFF_EMB, FEATURE_EMB, TIME_EMB};
pub use loss::{pde_residual_standardized, step_loss, step_loss_tape, LossParts};
pub use modes::{IntegrationMode, PdeFit, PdeRole, MODE_IDS};
pub use sample::{sample, sample_window};
pub use schedule::{build_schedule, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
pub use train::{train, write_loss_curve, LossRow, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::deeponet::DeepOnet;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MaskedField, WindowSample};
use crate::pde::{pde_forecast, PdeOperator};
use crate::tensor::{Records, Tensor};

/// Standardisation by the training split's observed mean and deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub mean: f64,
    pub std: f64,
}

impl Norm {
    pub fn from_field(field: &MaskedField) -> Result<Norm> {
        let (mean, std) = field
            .observed_stats()
            .ok_or_else(|| Error::InsufficientData("no observations to standardise by".into()))?;
        Ok(Norm { mean, std: if std > 0.0 { std } else { 1.0 } })
    }

    pub fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn raw(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Standardised values with unobserved entries set to zero.
    pub fn z_masked(&self, v: &[f64], m: &[bool]) -> Vec<f64> {
        v.iter().zip(m).map(|(&v, &m)| if m { self.z(v) } else { 0.0 }).collect()
    }

    pub fn to_records(&self) -> Records {
        let mut r = Records::new();
        r.insert("norm.mean".into(), Tensor::scalar(self.mean));
        r.insert("norm.std".into(), Tensor::scalar(self.std));
        r
    }

    pub fn from_records(r: &Records) -> Result<Norm> {
        let get = |k: &str| {
            r.get(k)
                .and_then(|t| t.data().first().copied())
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{k}`")))
        };
        Ok(Norm { mean: get("norm.mean")?, std: get("norm.std")? })
    }
}

/// Conditional information for one window, standardised.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPack {
    pub l1: usize,
    pub l2: usize,
    pub cells: usize,
    /// Zero-filled history, `L1 * cells`.
    pub v_co: Vec<f64>,
    pub m_co: Vec<bool>,
    /// DeepONet forecast of the target slices; zeros without a DeepONet.
    pub v_de: Vec<f64>,
    /// PDE forecast of the target slices, when the PDE is a condition.
    pub pde: Option<Vec<f64>>,
}

/// Grid matching an operator's lattice, for building history fields.
pub(crate) fn grid_of(op: &PdeOperator) -> GridSpec {
    GridSpec {
        cell_size: op.params.n,
        slice_length: op.params.dt,
        x: op.params.x,
        y: op.params.y,
        ..GridSpec::default()
    }
}

/// PDE forecast of a window's target slices in raw units; the mean when the
/// history holds no observations.
pub fn pde_channel(w: &WindowSample, op: &PdeOperator, fallback: f64) -> Result<Vec<f64>> {
    let hist = MaskedField::new(grid_of(op), w.l1, w.v_co.clone(), w.m_co.clone())?;
    match pde_forecast(&hist, op, w.l2) {
        Ok(v) => Ok(v),
        Err(Error::InsufficientData(_)) => Ok(vec![fallback; w.l2 * w.cells]),
        Err(e) => Err(e),
    }
}

impl ConditionPack {
    pub fn build(
        w: &WindowSample,
        norm: &Norm,
        deeponet: Option<&DeepOnet>,
        pde: Option<&PdeOperator>,
    ) -> Result<ConditionPack> {
        let d = w.l2 * w.cells;
        let v_de = match deeponet {
            Some(m) => m.forward(w)?.iter().map(|&v| norm.z(v)).collect(),
            None => vec![0.0; d],
        };
        let pde = match pde {
            Some(op) => Some(pde_channel(w, op, norm.mean)?.iter().map(|&v| norm.z(v)).collect()),
            None => None,
        };
        Ok(ConditionPack {
            l1: w.l1,
            l2: w.l2,
            cells: w.cells,
            v_co: norm.z_masked(&w.v_co, &w.m_co),
            m_co: w.m_co.clone(),
            v_de,
            pde,
        })
    }
}

/// Everything that shapes one diffusion training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub omega: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub denoiser: DenoiserConfig,
    pub mode: IntegrationMode,
    /// Train on every target entry, treating unobserved ones as the mean.
    pub unmasked_loss: bool,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            omega: 1.0,
            iterations: 2000,
            batch: 1,
            lr: 1e-3,
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            denoiser: DenoiserConfig::default(),
            mode: IntegrationMode::default(),
            unmasked_loss: false,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::config(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("learning rate must be >= 0"));
        }
        self.denoiser.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}
