//! Flat `key = value` run configuration with dotted keys.
//!
//! Every accepted key is listed in [`KEYS`] with its default. `auto` defers
//! to the scenario (synthetic keys, known PDE parameters) or to the data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stepdiff::deeponet::{DeepOnetConfig, DeepOnetLoss};
use stepdiff::diffusion::{DenoiserConfig, IntegrationMode, TrainRunConfig};
use stepdiff::grid::GridSpec;
use stepdiff::pipeline::PipelineConfig;
use stepdiff::synth::{FleetMode, InitMode, Scenario};

pub const AUTO: &str = "auto";

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("jobs", "1", "worker threads for window-parallel work"),
    ("scenario", "default", "synthetic scenario: default | advection"),
    ("grid.origin_lat", AUTO, "latitude of the grid's south-west corner"),
    ("grid.origin_lon", AUTO, "longitude of the grid's south-west corner"),
    ("grid.cell_size", AUTO, "cell edge, meters"),
    ("grid.slice_length", AUTO, "slice length, seconds"),
    ("grid.x", AUTO, "cells along x"),
    ("grid.y", AUTO, "cells along y"),
    ("synth.slices", AUTO, "slices to simulate"),
    ("synth.k", AUTO, "diffusion coefficient K, m^2/s"),
    ("synth.px", AUTO, "uniform wind x component, m/s"),
    ("synth.py", AUTO, "uniform wind y component, m/s"),
    ("synth.source_period", AUTO, "source modulation period, slices"),
    ("synth.source_modulation", AUTO, "relative source modulation amplitude"),
    ("synth.init_mode", AUTO, "initial field: smooth-random | hotspot"),
    ("synth.init_level", AUTO, "peak of the initial field"),
    ("synth.obs_noise_sigma", AUTO, "observation noise deviation"),
    ("fleet.n_vehicles", AUTO, "vehicles in the fleet"),
    ("fleet.mode", AUTO, "fleet movement: bus-route | free-car"),
    ("fleet.route_len", AUTO, "cells per bus loop"),
    ("fleet.route_period", AUTO, "slices per bus loop"),
    ("fleet.steps_per_slice", AUTO, "random-walk steps per slice for free cars"),
    ("fleet.start_hour", AUTO, "hour of day at slice 0"),
    ("ingest.t0", "0", "timestamp of the first slice, seconds"),
    ("ingest.slices", AUTO, "slices to build; auto spans the records"),
    ("window.l1", "12", "history slices"),
    ("window.l2", "12", "target slices"),
    ("train.omega", "1", "PDE loss weight"),
    ("train.iterations", "2000", "diffusion training iterations"),
    ("train.batch", "1", "windows per iteration"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.steps", "50", "diffusion steps T"),
    ("train.beta_min", "0.0001", "first noise level"),
    ("train.beta_max", "0.5", "last noise level"),
    ("train.mode", "10", "integration mode: diff or 1..10"),
    ("train.unmasked_loss", "false", "train on unobserved target entries too"),
    ("denoiser.channels", "64", "residual channels"),
    ("denoiser.heads", "8", "attention heads"),
    ("denoiser.layers", "4", "residual blocks"),
    ("denoiser.ff", "64", "transformer feed-forward width"),
    ("deeponet.p", "64", "basis size"),
    ("deeponet.hidden", "256,256", "hidden widths of branch and trunk"),
    ("deeponet.epochs", "20", "pretraining epochs"),
    ("deeponet.lr", "0.001", "pretraining learning rate"),
    ("deeponet.batch", "8", "pretraining minibatch"),
    ("deeponet.omega", "1", "PDE weight of the DeepONet loss in mode 9"),
    ("pde.k", AUTO, "known K; auto takes the scenario's"),
    ("pde.px", AUTO, "known wind x; auto takes the scenario's"),
    ("pde.py", AUTO, "known wind y; auto takes the scenario's"),
    ("pde.external_scenario", "default", "scenario fitted for external PDE parameters"),
    ("pde.external_seed", "1000", "seed of the external scenario"),
    ("forecast.samples", "1", "draws averaged per forecast"),
    ("eval.truth_source", "mobile", "ground truth: mobile | station"),
    ("eval.threshold", "25", "pollution-day threshold"),
    ("eval.start_hour", "0", "hour of day at the first evaluated slice"),
    ("ablate.iterations", "50", "iterations per ablation run"),
    ("ablate.eval_windows", "0", "test windows scored; 0 keeps all"),
    ("ablate.omegas", "0,0.25,0.5,1,2,4,8,16", "omega sweep"),
    ("ablate.layers", "2,4,6,8,10", "residual block sweep"),
    ("ablate.modes", "diff,1,2,3,4,5,6,7,8,9,10", "mode sweep"),
    ("path.in", "", "input file"),
    ("path.out", "", "output file or directory"),
    ("path.data", "", "field to train on or forecast from"),
    ("path.model", "", "model checkpoint"),
    ("path.pred", "", "forecast field"),
    ("path.truth", "", "truth field"),
    ("path.train", "", "training field"),
    ("path.test", "", "test field"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Res<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Res<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => err(format!("unknown config key `{key}`")),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Res<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Res<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Res<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| ConfigError(format!("`{key} = {v}`: {e}")))
    }

    /// `None` when the key is `auto`.
    pub fn get_auto<T: FromStr>(&self, key: &str) -> Res<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key) == AUTO {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Res<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| ConfigError(format!("`{key}` entry `{s}`: {e}"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> Res<&Path> {
        match self.raw(key) {
            "" => err(format!("missing required path `{key}`")),
            p => Ok(Path::new(p)),
        }
    }

    /// The resolved configuration, one sorted `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn fill(&mut self, key: &str, value: impl ToString) {
        if self.raw(key) == AUTO {
            self.values.insert(key.to_string(), value.to_string());
        }
    }

    /// The scenario with every non-`auto` synthetic key applied; `auto` keys
    /// are replaced by the values used.
    pub fn scenario(&mut self) -> Res<Scenario> {
        let seed: u64 = self.get("seed")?;
        let mut sc = Scenario::by_name(self.raw("scenario"), seed).map_err(|e| ConfigError(e.to_string()))?;
        let g = self.grid_over(sc.synth.grid)?;
        let s = &mut sc.synth;
        if g.cells() != s.grid.cells() {
            let c = g.cells();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            s.px = vec![mean(&s.px); c];
            s.py = vec![mean(&s.py); c];
            s.source = vec![mean(&s.source); c];
        }
        s.grid = g;
        if let Some(v) = self.get_auto("synth.slices")? {
            s.slices = v;
        }
        if let Some(v) = self.get_auto("synth.k")? {
            s.k = v;
        }
        if let Some(v) = self.get_auto::<f64>("synth.px")? {
            s.px = vec![v; g.cells()];
        }
        if let Some(v) = self.get_auto::<f64>("synth.py")? {
            s.py = vec![v; g.cells()];
        }
        if let Some(v) = self.get_auto("synth.source_period")? {
            s.source_period = v;
        }
        if let Some(v) = self.get_auto("synth.source_modulation")? {
            s.source_modulation = v;
        }
        if let Some(v) = self.get_auto::<String>("synth.init_mode")? {
            s.init_mode = match v.as_str() {
                "smooth-random" => InitMode::SmoothRandom,
                "hotspot" => InitMode::Hotspot,
                _ => return err(format!("synth.init_mode must be smooth-random or hotspot, got `{v}`")),
            };
        }
        if let Some(v) = self.get_auto("synth.init_level")? {
            s.init_level = v;
        }
        if let Some(v) = self.get_auto("synth.obs_noise_sigma")? {
            s.obs_noise_sigma = v;
        }
        let f = &mut sc.fleet;
        if let Some(v) = self.get_auto("fleet.n_vehicles")? {
            f.n_vehicles = v;
        }
        if let Some(v) = self.get_auto::<String>("fleet.mode")? {
            f.mode = match v.as_str() {
                "bus-route" => FleetMode::BusRoute,
                "free-car" => FleetMode::FreeCar,
                _ => return err(format!("fleet.mode must be bus-route or free-car, got `{v}`")),
            };
        }
        if let Some(v) = self.get_auto("fleet.route_len")? {
            f.route_len = v;
        }
        if let Some(v) = self.get_auto("fleet.route_period")? {
            f.route_period = v;
        }
        if let Some(v) = self.get_auto("fleet.steps_per_slice")? {
            f.steps_per_slice = v;
        }
        if let Some(v) = self.get_auto("fleet.start_hour")? {
            f.start_hour = v;
        }

        let s = sc.synth.clone();
        let (k, px, py) = s.pde_params().summary();
        self.fill("synth.slices", s.slices);
        self.fill("synth.k", k);
        self.fill("synth.px", px);
        self.fill("synth.py", py);
        self.fill("synth.source_period", s.source_period);
        self.fill("synth.source_modulation", s.source_modulation);
        self.fill("synth.init_mode", if s.init_mode == InitMode::Hotspot { "hotspot" } else { "smooth-random" });
        self.fill("synth.init_level", s.init_level);
        self.fill("synth.obs_noise_sigma", s.obs_noise_sigma);
        let f = sc.fleet.clone();
        self.fill("fleet.n_vehicles", f.n_vehicles);
        self.fill("fleet.mode", if f.mode == FleetMode::BusRoute { "bus-route" } else { "free-car" });
        self.fill("fleet.route_len", f.route_len);
        self.fill("fleet.route_period", f.route_period);
        self.fill("fleet.steps_per_slice", f.steps_per_slice);
        self.fill("fleet.start_hour", f.start_hour);
        Ok(sc)
    }

    /// `base` with every non-`auto` grid key applied; fills the `auto` keys.
    pub fn grid_over(&mut self, base: GridSpec) -> Res<GridSpec> {
        let mut g = base;
        if let Some(v) = self.get_auto("grid.origin_lat")? {
            g.origin_lat = v;
        }
        if let Some(v) = self.get_auto("grid.origin_lon")? {
            g.origin_lon = v;
        }
        if let Some(v) = self.get_auto("grid.cell_size")? {
            g.cell_size = v;
        }
        if let Some(v) = self.get_auto("grid.slice_length")? {
            g.slice_length = v;
        }
        if let Some(v) = self.get_auto("grid.x")? {
            g.x = v;
        }
        if let Some(v) = self.get_auto("grid.y")? {
            g.y = v;
        }
        g.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.fill("grid.origin_lat", g.origin_lat);
        self.fill("grid.origin_lon", g.origin_lon);
        self.fill("grid.cell_size", g.cell_size);
        self.fill("grid.slice_length", g.slice_length);
        self.fill("grid.x", g.x);
        self.fill("grid.y", g.y);
        Ok(g)
    }

    /// Grid for ingesting: the scenario's grid under the `grid.*` keys.
    pub fn grid(&mut self) -> Res<GridSpec> {
        let seed: u64 = self.get("seed")?;
        let sc = Scenario::by_name(self.raw("scenario"), seed).map_err(|e| ConfigError(e.to_string()))?;
        self.grid_over(sc.synth.grid)
    }

    pub fn pipeline(&mut self) -> Res<PipelineConfig> {
        let seed: u64 = self.get("seed")?;
        let sc = Scenario::by_name(self.raw("scenario"), seed).map_err(|e| ConfigError(e.to_string()))?;
        let (k0, px0, py0) = sc.synth.pde_params().summary();
        let known = (
            self.get_auto("pde.k")?.unwrap_or(k0),
            self.get_auto("pde.px")?.unwrap_or(px0),
            self.get_auto("pde.py")?.unwrap_or(py0),
        );
        self.fill("pde.k", known.0);
        self.fill("pde.px", known.1);
        self.fill("pde.py", known.2);
        let mode_id = self.raw("train.mode").to_string();
        let mode = IntegrationMode::from_id(&mode_id).map_err(|e| ConfigError(e.to_string()))?;
        let train = TrainRunConfig {
            omega: self.get("train.omega")?,
            iterations: self.get("train.iterations")?,
            batch: self.get("train.batch")?,
            lr: self.get("train.lr")?,
            steps: self.get("train.steps")?,
            beta_min: self.get("train.beta_min")?,
            beta_max: self.get("train.beta_max")?,
            denoiser: DenoiserConfig {
                channels: self.get("denoiser.channels")?,
                heads: self.get("denoiser.heads")?,
                layers: self.get("denoiser.layers")?,
                ff: self.get("denoiser.ff")?,
                pde_channel: false,
                seed,
            },
            mode,
            unmasked_loss: self.get("train.unmasked_loss")?,
            seed,
            jobs: self.get("jobs")?,
        };
        train.validate().map_err(|e| ConfigError(e.to_string()))?;
        let deeponet = DeepOnetConfig {
            p: self.get("deeponet.p")?,
            hidden: self.list("deeponet.hidden")?,
            epochs: self.get("deeponet.epochs")?,
            lr: self.get("deeponet.lr")?,
            batch: self.get("deeponet.batch")?,
            loss_mode: DeepOnetLoss::Mse,
            omega: self.get("deeponet.omega")?,
            seed,
            ..DeepOnetConfig::default()
        };
        deeponet.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(PipelineConfig {
            l1: self.get("window.l1")?,
            l2: self.get("window.l2")?,
            train,
            deeponet,
            known_pde: known,
            external_scenario: self.raw("pde.external_scenario").to_string(),
            external_seed: self.get("pde.external_seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.merge_text("train.omega = 2\n# note\n\ntrain.bogus = 1\n").is_err());
        assert!(c.merge_text("no equals sign").is_err());
        c.merge_text("train.omega = 8 # trailing comment").unwrap();
        assert_eq!(c.get::<f64>("train.omega").unwrap(), 8.0);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("denoiser.layers", "6").unwrap();
        c.scenario().unwrap();
        c.pipeline().unwrap();
        let mut d = RunConfig::default();
        d.merge_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert!(!d.to_text().contains(AUTO) || d.raw("ingest.slices") == AUTO);
    }

    #[test]
    fn scenario_overrides_apply() {
        let mut c = RunConfig::default();
        c.merge_text("scenario = advection\nsynth.slices = 50\ngrid.x = 4\ngrid.y = 3\nsynth.k = 2.5").unwrap();
        let sc = c.scenario().unwrap();
        assert_eq!((sc.synth.slices, sc.synth.grid.cells(), sc.synth.k), (50, 12, 2.5));
        assert_eq!(sc.synth.px.len(), 12);
        assert_eq!(c.raw("synth.px"), "1");
    }

    #[test]
    fn bad_values_name_their_key() {
        let mut c = RunConfig::default();
        c.set("train.iterations", "many").unwrap();
        let e = c.pipeline().unwrap_err();
        assert!(e.0.contains("train.iterations"), "{e}");
    }
}
