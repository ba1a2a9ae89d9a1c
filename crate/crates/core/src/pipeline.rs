//! End-to-end glue: PDE parameter selection, DeepONet pretraining,
//! diffusion training, the persisted model bundle, tiled forecasting and
//! the baselines.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deeponet::{train_deeponet, DeepOnet, DeepOnetConfig, DeepOnetLoss};
use crate::diffusion::{
    sample, train, ConditionPack, Denoiser, IntegrationMode, LossRow, Norm, PdeFit, PdeRole, TrainRunConfig,
};
use crate::error::{Error, Result};
use crate::grid::{sliding_windows, MaskedField, WindowSample, DEFAULT_L1, DEFAULT_L2};
use crate::par;
use crate::pde::{build_transition, fit_pde_params, FitLattice, PdeOperator, PdeParams};
use crate::synth::Scenario;
use crate::tensor::{read_stpc, write_stpc, Records, Tensor};

/// Everything needed to go from a training field to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub l1: usize,
    pub l2: usize,
    pub train: TrainRunConfig,
    pub deeponet: DeepOnetConfig,
    /// `(K, Px, Py)` used when the mode asks for known parameters.
    pub known_pde: (f64, f64, f64),
    /// Scenario and seed whose observations serve as the external fit set.
    pub external_scenario: String,
    pub external_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = Scenario::default_scenario(0).synth;
        PipelineConfig {
            l1: DEFAULT_L1,
            l2: DEFAULT_L2,
            train: TrainRunConfig::default(),
            deeponet: DeepOnetConfig::default(),
            known_pde: s.pde_params().summary(),
            external_scenario: "default".into(),
            external_seed: 1000,
        }
    }
}

/// Trained components plus what is needed to forecast with them.
#[derive(Clone, Debug)]
pub struct Model {
    pub denoiser: Denoiser,
    pub deeponet: Option<DeepOnet>,
    pub op: PdeOperator,
    pub norm: Norm,
    pub mode: IntegrationMode,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub l1: usize,
    pub l2: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    mode: IntegrationMode,
    pde: PdeParams,
}

/// JSON sidecar written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    pub fn to_records(&self) -> Records {
        let mut r = self.denoiser.to_records("denoiser.");
        if let Some(d) = &self.deeponet {
            r.extend(d.to_records("deeponet."));
        }
        r.extend(self.op.to_records());
        r.extend(self.norm.to_records());
        r.insert(
            "schedule".into(),
            Tensor::from_vec(vec![self.steps as f64, self.beta_min, self.beta_max]),
        );
        r.insert("window".into(), Tensor::from_vec(vec![self.l1 as f64, self.l2 as f64]));
        r
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_stpc(path, &self.to_records())?;
        let side = Sidecar { mode: self.mode, pde: self.op.params.clone() };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let records = read_stpc(path)?;
        let side: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let op = build_transition(&side.pde)?;
        let stored = records.get("pde.B").ok_or_else(|| Error::Corrupt("checkpoint lacks `pde.B`".into()))?;
        if stored.data().len() != op.b.len()
            || stored.data().iter().zip(&op.b).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
        {
            return Err(Error::Corrupt("stored transition matrix disagrees with the sidecar parameters".into()));
        }
        let meta = |k: &str, n: usize| -> Result<Vec<f64>> {
            let t = records.get(k).ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{k}`")))?;
            if t.len() != n {
                return Err(Error::Corrupt(format!("`{k}` has {} values, expected {n}", t.len())));
            }
            Ok(t.data().to_vec())
        };
        let sched = meta("schedule", 3)?;
        let win = meta("window", 2)?;
        let deeponet = if records.keys().any(|k| k.starts_with("deeponet.")) {
            Some(DeepOnet::from_records(&records, "deeponet.")?)
        } else {
            None
        };
        if side.mode.uses_deeponet() && deeponet.is_none() {
            return Err(Error::Corrupt("mode uses a DeepONet but the checkpoint has none".into()));
        }
        Ok(Model {
            denoiser: Denoiser::from_records(&records, "denoiser.")?,
            deeponet,
            op,
            norm: Norm::from_records(&records)?,
            mode: side.mode,
            steps: sched[0] as usize,
            beta_min: sched[1],
            beta_max: sched[2],
            l1: win[0] as usize,
            l2: win[1] as usize,
        })
    }

    fn pde_condition(&self) -> Option<&PdeOperator> {
        (self.mode.pde_role == PdeRole::Condition).then_some(&self.op)
    }

    pub fn conditions(&self, windows: &[WindowSample], jobs: usize) -> Result<Vec<ConditionPack>> {
        par::try_map(jobs, windows, |_, w| {
            ConditionPack::build(w, &self.norm, self.deeponet.as_ref(), self.pde_condition())
        })
    }

    /// Sampled forecasts (raw units) for each window's target slices.
    pub fn forecast_windows(&self, windows: &[WindowSample], samples: usize, seed: u64, jobs: usize) -> Result<Vec<Vec<f64>>> {
        let sched = crate::diffusion::build_schedule(self.steps, self.beta_min, self.beta_max)?;
        let hidden: Vec<WindowSample> = windows.iter().map(WindowSample::for_forecast).collect();
        let conds = self.conditions(&hidden, jobs)?;
        sample(&self.denoiser, &conds, &sched, &self.norm, samples, seed, jobs)
    }

    /// Forecasts every slice from `l1` on by tiling target blocks of `l2`;
    /// each tile conditions on the `l1` observed slices before it.
    pub fn forecast_field(&self, field: &MaskedField, samples: usize, seed: u64, jobs: usize) -> Result<MaskedField> {
        let tiles = tile_windows(field, self.l1, self.l2)?;
        let preds = self.forecast_windows(&tiles, samples, seed, jobs)?;
        Ok(assemble_tiles(field, &tiles, &preds))
    }
}

/// History windows starting at `0, l2, 2 l2, ...`; the last tile's targets
/// may run past the field and are then cut off by [`assemble_tiles`].
pub fn tile_windows(field: &MaskedField, l1: usize, l2: usize) -> Result<Vec<WindowSample>> {
    if l1 == 0 || l2 == 0 {
        return Err(Error::config("window lengths must be positive"));
    }
    if field.slices <= l1 {
        return Err(Error::InsufficientData(format!(
            "forecasting needs more than {l1} slices, field has {}",
            field.slices
        )));
    }
    let k = field.cells();
    let mut out = Vec::new();
    let mut s = 0;
    while s + l1 < field.slices {
        out.push(WindowSample {
            start: s,
            l1,
            l2,
            cells: k,
            v_co: field.values[s * k..(s + l1) * k].to_vec(),
            m_co: field.mask[s * k..(s + l1) * k].to_vec(),
            v_ta: vec![0.0; l2 * k],
            m_ta: vec![false; l2 * k],
            v_de: None,
        });
        s += l2;
    }
    Ok(out)
}

/// Field shaped like `field` holding the tiled forecasts; slices before the
/// first target are unmasked.
pub fn assemble_tiles(field: &MaskedField, tiles: &[WindowSample], preds: &[Vec<f64>]) -> MaskedField {
    let k = field.cells();
    let mut out = MaskedField::empty(field.grid, field.slices);
    for (w, p) in tiles.iter().zip(preds) {
        for l in 0..w.l2 {
            let dst = w.start + w.l1 + l;
            if dst >= field.slices {
                break;
            }
            out.values[dst * k..(dst + 1) * k].copy_from_slice(&p[l * k..(l + 1) * k]);
            out.mask[dst * k..(dst + 1) * k].iter_mut().for_each(|m| *m = true);
        }
    }
    out
}

/// Repeats each cell's last observation in the history; cells never
/// observed take the history's observed mean, or `fallback` if there is none.
pub fn persistence_forecast(w: &WindowSample, fallback: f64) -> Vec<f64> {
    let k = w.cells;
    let obs: Vec<f64> = w.v_co.iter().zip(&w.m_co).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let mean = if obs.is_empty() { fallback } else { obs.iter().sum::<f64>() / obs.len() as f64 };
    let last: Vec<f64> = (0..k)
        .map(|c| {
            (0..w.l1)
                .rev()
                .find(|&l| w.m_co[l * k + c])
                .map_or(mean, |l| w.v_co[l * k + c])
        })
        .collect();
    last.iter().copied().cycle().take(w.l2 * k).collect()
}

/// PDE-only baseline for one window.
pub fn pde_baseline(w: &WindowSample, op: &PdeOperator, fallback: f64) -> Result<Vec<f64>> {
    Ok(crate::diffusion::pde_channel(w, op, fallback)?.into_iter().map(|v| v.max(0.0)).collect())
}

/// Parameters for a mode's `pde_fit` setting on `grid`.
pub fn select_pde_params(fit: PdeFit, train: &MaskedField, cfg: &PipelineConfig) -> Result<PdeParams> {
    let lattice = FitLattice::default();
    let (k, px, py) = match fit {
        PdeFit::Known => cfg.known_pde,
        PdeFit::FitTrain => fit_pde_params(train, &lattice)?.summary(),
        PdeFit::FitExternal => {
            let ext = Scenario::by_name(&cfg.external_scenario, cfg.external_seed)?.generate()?;
            fit_pde_params(&ext.observed, &lattice)?.summary()
        }
        PdeFit::Random => fit_pde_params(&white_noise(train, cfg.train.seed)?, &lattice)?.summary(),
    };
    log::info!("PDE parameters ({fit:?}): K={k} P=({px}, {py})");
    Ok(PdeParams::uniform(&train.grid, k, px, py))
}

/// Fully observed i.i.d. Gaussian field matching the observed statistics of `like`.
pub fn white_noise(like: &MaskedField, seed: u64) -> Result<MaskedField> {
    let (mean, std) = like.observed_stats().unwrap_or((0.0, 1.0));
    let dist = Normal::new(mean, std.max(1e-9)).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let slices = like.slices.min(48);
    let values = (0..slices * like.cells()).map(|_| dist.sample(&mut rng)).collect();
    MaskedField::observed(like.grid, slices, values)
}

/// Wall-clock seconds spent in each training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTimings {
    pub pde_fit: f64,
    pub deeponet: f64,
    pub diffusion: f64,
}

pub struct Fitted {
    pub model: Model,
    pub curve: Vec<LossRow>,
    pub timings: TrainTimings,
}

/// Pretrains the DeepONet the mode asks for.
pub fn pretrain_deeponet(
    windows: &[WindowSample],
    cfg: &PipelineConfig,
    norm: Norm,
    op: &PdeOperator,
    loss: DeepOnetLoss,
) -> Result<DeepOnet> {
    let dcfg = DeepOnetConfig { loss_mode: loss, seed: cfg.train.seed.wrapping_add(7), ..cfg.deeponet.clone() };
    train_deeponet(windows, &dcfg, (norm.mean, norm.std), Some(op))
}

/// Trains with an optionally pre-built DeepONet and PDE parameters.
pub fn fit_with(
    train_field: &MaskedField,
    cfg: &PipelineConfig,
    pde: Option<PdeParams>,
    deeponet: Option<DeepOnet>,
) -> Result<Fitted> {
    let mode = cfg.train.mode;
    let norm = Norm::from_field(train_field)?;
    let windows = sliding_windows(train_field, cfg.l1, cfg.l2)?;
    let mut timings = TrainTimings::default();

    let clock = Instant::now();
    let params = match pde {
        Some(p) => p,
        None => select_pde_params(mode.pde_fit, train_field, cfg)?,
    };
    let op = build_transition(&params)?;
    timings.pde_fit = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let deeponet = match (mode.uses_deeponet(), deeponet) {
        (false, _) => None,
        (true, Some(d)) => Some(d),
        (true, None) => {
            // The PDE loss variant of the DeepONet always uses the known dynamics.
            let known = build_transition(&select_pde_params(PdeFit::Known, train_field, cfg)?)?;
            Some(pretrain_deeponet(&windows, cfg, norm, &known, mode.deeponet_loss)?)
        }
    };
    timings.deeponet = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let out = train(&windows, norm, deeponet, &op, &cfg.train)?;
    timings.diffusion = clock.elapsed().as_secs_f64();

    let model = Model {
        denoiser: out.denoiser,
        deeponet: out.deeponet,
        op,
        norm,
        mode,
        steps: cfg.train.steps,
        beta_min: cfg.train.beta_min,
        beta_max: cfg.train.beta_max,
        l1: cfg.l1,
        l2: cfg.l2,
    };
    Ok(Fitted { model, curve: out.curve, timings })
}

pub fn fit(train_field: &MaskedField, cfg: &PipelineConfig) -> Result<Fitted> {
    fit_with(train_field, cfg, None, None)
}

/// `(pred, truth, mask)` concatenated over windows, for metric computation.
pub fn stack_targets(windows: &[WindowSample], preds: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut p = Vec::new();
    let mut t = Vec::new();
    let mut m = Vec::new();
    for (w, f) in windows.iter().zip(preds) {
        p.extend_from_slice(f);
        t.extend_from_slice(&w.v_ta);
        m.extend_from_slice(&w.m_ta);
    }
    (p, t, m)
}
