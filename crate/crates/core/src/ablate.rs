//! Sweeps over the PDE-loss weight, the number of residual blocks and the
//! integration modes, plus the standalone baselines, in one table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deeponet::{DeepOnet, DeepOnetLoss};
use crate::diffusion::{IntegrationMode, Norm, PdeFit, MODE_IDS};
use crate::error::{Error, Result};
use crate::eval::{metrics, MetricReport};
use crate::grid::{sliding_windows, MaskedField, WindowSample};
use crate::pde::{build_transition, PdeParams};
use crate::pipeline::{
    fit_with, pde_baseline, persistence_forecast, pretrain_deeponet, select_pde_params, stack_targets, PipelineConfig,
};

pub const OMEGAS: [f64; 8] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const LAYERS: [usize; 5] = [2, 4, 6, 8, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub base: PipelineConfig,
    pub omegas: Vec<f64>,
    pub layers: Vec<usize>,
    pub modes: Vec<String>,
    /// Diffusion iterations per run.
    pub iterations: usize,
    /// Test windows to evaluate, spread evenly; 0 keeps all.
    pub eval_windows: usize,
    pub samples: usize,
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: PipelineConfig::default(),
            omegas: OMEGAS.to_vec(),
            layers: LAYERS.to_vec(),
            modes: MODE_IDS.iter().map(|s| s.to_string()).collect(),
            iterations: 50,
            eval_windows: 0,
            samples: 1,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub setting: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub n: usize,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Directional comparisons, reported rather than enforced.
    pub notes: Vec<String>,
}

/// Evenly spaced subset of `n` windows that have observed targets.
pub fn eval_subset(windows: Vec<WindowSample>, n: usize) -> Vec<WindowSample> {
    let usable: Vec<WindowSample> = windows.into_iter().filter(|w| w.m_ta.iter().any(|&m| m)).collect();
    if n == 0 || n >= usable.len() {
        return usable;
    }
    (0..n).map(|i| usable[i * usable.len() / n].clone()).collect()
}

fn row(group: &str, setting: String, r: &MetricReport, train_s: f64, infer_s: f64) -> AblationRow {
    AblationRow {
        group: group.into(),
        setting,
        mae: r.mae,
        rmse: r.rmse,
        mape: r.mape,
        n: r.n,
        train_seconds: train_s,
        infer_seconds: infer_s,
    }
}

fn score(windows: &[WindowSample], preds: &[Vec<f64>]) -> Result<MetricReport> {
    let (p, t, m) = stack_targets(windows, preds);
    metrics(&p, &t, &m)
}

/// Runs every configured sweep on `train` and scores on windows of `test`.
pub fn run_ablation(train: &MaskedField, test: &MaskedField, cfg: &AblationConfig) -> Result<AblationTable> {
    let base = &cfg.base;
    let windows = eval_subset(sliding_windows(test, base.l1, base.l2)?, cfg.eval_windows);
    if windows.is_empty() {
        return Err(Error::InsufficientData("no test window has observed targets".into()));
    }
    let train_windows = sliding_windows(train, base.l1, base.l2)?;
    let norm = Norm::from_field(train)?;
    let mut rows = Vec::new();

    let mut fits: BTreeMap<String, PdeParams> = BTreeMap::new();
    let mut fit_for = |fit: PdeFit| -> Result<PdeParams> {
        let key = format!("{fit:?}");
        if let Some(p) = fits.get(&key) {
            return Ok(p.clone());
        }
        let p = select_pde_params(fit, train, base)?;
        fits.insert(key, p.clone());
        Ok(p)
    };
    let known = build_transition(&fit_for(PdeFit::Known)?)?;
    let mut nets: BTreeMap<String, (DeepOnet, f64)> = BTreeMap::new();
    let mut net_for = |loss: DeepOnetLoss| -> Result<(DeepOnet, f64)> {
        let key = format!("{loss:?}");
        if let Some(n) = nets.get(&key) {
            return Ok(n.clone());
        }
        let clock = Instant::now();
        let n = pretrain_deeponet(&train_windows, base, norm, &known, loss)?;
        let entry = (n, clock.elapsed().as_secs_f64());
        nets.insert(key, entry.clone());
        Ok(entry)
    };

    // Baselines.
    let clock = Instant::now();
    let preds: Vec<Vec<f64>> = windows.iter().map(|w| persistence_forecast(&w.for_forecast(), norm.mean)).collect();
    rows.push(row("baseline", "persistence".into(), &score(&windows, &preds)?, 0.0, clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let preds = windows
        .iter()
        .map(|w| pde_baseline(&w.for_forecast(), &known, norm.mean))
        .collect::<Result<Vec<_>>>()?;
    rows.push(row("baseline", "pde".into(), &score(&windows, &preds)?, 0.0, clock.elapsed().as_secs_f64()));
    let (net, net_s) = net_for(DeepOnetLoss::Mse)?;
    let clock = Instant::now();
    let preds = windows
        .iter()
        .map(|w| Ok(net.forward(&w.for_forecast())?.into_iter().map(|v| v.max(0.0)).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    rows.push(row("baseline", "deeponet".into(), &score(&windows, &preds)?, net_s, clock.elapsed().as_secs_f64()));

    let mut run = |group: &str, setting: String, pc: PipelineConfig| -> Result<()> {
        let mode = pc.train.mode;
        let params = fit_for(mode.pde_fit)?;
        let (net, net_s) = if mode.uses_deeponet() { net_for(mode.deeponet_loss).map(|(n, s)| (Some(n), s))? } else { (None, 0.0) };
        let fitted = fit_with(train, &pc, Some(params), net)?;
        let clock = Instant::now();
        let preds = fitted.model.forecast_windows(&windows, cfg.samples, pc.train.seed, cfg.jobs)?;
        let infer = clock.elapsed().as_secs_f64();
        let r = score(&windows, &preds)?;
        log::info!("ablation {group} {setting}: MAE {:.4}", r.mae);
        rows.push(row(group, setting, &r, fitted.timings.diffusion + net_s, infer));
        Ok(())
    };

    let mut base_run = base.clone();
    base_run.train.iterations = cfg.iterations;
    for &w in &cfg.omegas {
        let mut pc = base_run.clone();
        pc.train.omega = w;
        run("omega", format!("{w}"), pc)?;
    }
    for &l in &cfg.layers {
        let mut pc = base_run.clone();
        pc.train.denoiser.layers = l;
        run("layers", format!("{l}"), pc)?;
    }
    for id in &cfg.modes {
        let mut pc = base_run.clone();
        pc.train.mode = IntegrationMode::from_id(id)?;
        run("mode", id.clone(), pc)?;
    }

    let find = |g: &str, s: &str| rows.iter().find(|r| r.group == g && r.setting == s).map(|r| r.mae);
    let mut notes = Vec::new();
    let mut compare = |label: &str, a: Option<f64>, b: Option<f64>| {
        if let (Some(a), Some(b)) = (a, b) {
            let verdict = if a < b { "holds" } else { "does not hold" };
            notes.push(format!("{label}: MAE {a:.4} vs {b:.4}, {verdict}"));
        }
    };
    compare("omega=1 beats omega=0", find("omega", "1"), find("omega", "0"));
    compare("mode 10 beats mode 1", find("mode", "10"), find("mode", "1"));
    Ok(AblationTable { rows, notes })
}

impl AblationTable {
    /// Aligned table; timings vary run to run, so they are optional.
    pub fn to_text(&self, timings: bool) -> String {
        let mut s = format!("{:<9} {:<12} {:>10} {:>10} {:>10} {:>7}", "group", "setting", "MAE", "RMSE", "MAPE", "n");
        if timings {
            let _ = write!(s, " {:>10} {:>10}", "train_s", "infer_s");
        }
        s.push('\n');
        for r in &self.rows {
            let mape = r.mape.map_or_else(|| "-".into(), |m| format!("{m:.4}"));
            let _ = write!(s, "{:<9} {:<12} {:>10.4} {:>10.4} {:>10} {:>7}", r.group, r.setting, r.mae, r.rmse, mape, r.n);
            if timings {
                let _ = write!(s, " {:>10.2} {:>10.2}", r.train_seconds, r.infer_seconds);
            }
            s.push('\n');
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn to_csv(&self, timings: bool) -> String {
        let mut s = String::from("group,setting,mae,rmse,mape,n");
        s.push_str(if timings { ",train_seconds,infer_seconds\n" } else { "\n" });
        for r in &self.rows {
            let mape = r.mape.map_or_else(String::new, |m| m.to_string());
            let _ = write!(s, "{},{},{},{},{},{}", r.group, r.setting, r.mae, r.rmse, mape, r.n);
            if timings {
                let _ = write!(s, ",{:.2},{:.2}", r.train_seconds, r.infer_seconds);
            }
            s.push('\n');
        }
        s
    }
}
