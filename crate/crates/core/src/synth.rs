//! Synthetic ground truth from known convection–diffusion dynamics and
//! simulated fleet observation masks.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, MaskedField, RawRecord};
use crate::pde::{build_transition, PdeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    SmoothRandom,
    Hotspot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub slices: usize,
    pub k: f64,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    /// Source per cell, µg/(m³·s).
    pub source: Vec<f64>,
    /// Source strength at slice `l` is `source * (1 + modulation * sin(2π l / period))`.
    pub source_period: usize,
    pub source_modulation: f64,
    pub init_mode: InitMode,
    /// Peak of the initial bumps, µg/m³.
    pub init_level: f64,
    pub obs_noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Zero source, uniform wind, smooth random start.
    pub fn new(grid: GridSpec, slices: usize, k: f64, px: f64, py: f64, seed: u64) -> Self {
        let c = grid.cells();
        SynthConfig {
            grid,
            slices,
            k,
            px: vec![px; c],
            py: vec![py; c],
            source: vec![0.0; c],
            source_period: 24,
            source_modulation: 0.0,
            init_mode: InitMode::SmoothRandom,
            init_level: 40.0,
            obs_noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let c = self.grid.cells();
        if self.slices == 0 {
            return Err(Error::config("scenario needs at least one slice"));
        }
        if !(self.k >= 0.0) {
            return Err(Error::config(format!("K must be >= 0, got {}", self.k)));
        }
        if !(self.obs_noise_sigma >= 0.0) {
            return Err(Error::config(format!("observation noise must be >= 0, got {}", self.obs_noise_sigma)));
        }
        if self.px.len() != c || self.py.len() != c || self.source.len() != c {
            return Err(Error::config(format!("wind and source fields need {c} entries")));
        }
        if self.source_period == 0 {
            return Err(Error::config("source period must be positive"));
        }
        Ok(())
    }

    pub fn pde_params(&self) -> PdeParams {
        let mut p = PdeParams::uniform(&self.grid, self.k, 0.0, 0.0);
        p.px = self.px.clone();
        p.py = self.py.clone();
        p
    }

    /// Source active during slice `l -> l+1`.
    pub fn source_at(&self, l: usize) -> Vec<f64> {
        let phase = 2.0 * std::f64::consts::PI * (l % self.source_period) as f64 / self.source_period as f64;
        let f = 1.0 + self.source_modulation * phase.sin();
        self.source.iter().map(|s| s * f).collect()
    }
}

/// Adds a Gaussian bump of height `h` and width `w` cells centred at `(cx, cy)`.
fn add_bump(grid: &GridSpec, v: &mut [f64], cx: f64, cy: f64, w: f64, h: f64) {
    for x in 0..grid.x {
        for y in 0..grid.y {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v[grid.cell(x, y)] += h * (-d2 / (2.0 * w * w)).exp();
        }
    }
}

fn initial_slice(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = &cfg.grid;
    let mut v = vec![0.0; g.cells()];
    match cfg.init_mode {
        InitMode::Hotspot => {
            let cx = (g.x as f64 - 1.0) / 4.0;
            let cy = (g.y as f64 - 1.0) / 2.0;
            add_bump(g, &mut v, cx, cy, 1.0, cfg.init_level);
        }
        InitMode::SmoothRandom => {
            for _ in 0..4 {
                let cx = rng.random_range(0.0..g.x as f64);
                let cy = rng.random_range(0.0..g.y as f64);
                let w = rng.random_range(1.0..3.0);
                let h = rng.random_range(0.3..1.0) * cfg.init_level;
                add_bump(g, &mut v, cx, cy, w, h);
            }
        }
    }
    v
}

/// Evolves slice 0 through the configured dynamics; every value is clamped at zero.
pub fn gen_ground_truth(cfg: &SynthConfig) -> Result<MaskedField> {
    cfg.validate()?;
    let op = build_transition(&cfg.pde_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = initial_slice(cfg, &mut rng);
    let mut values = Vec::with_capacity(cfg.slices * v.len());
    for l in 0..cfg.slices {
        values.extend_from_slice(&v);
        if l + 1 < cfg.slices {
            v = op.evolve(&v, &cfg.source_at(l))?;
            v.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
    MaskedField::observed(cfg.grid, cfg.slices, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FleetMode {
    BusRoute,
    FreeCar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_vehicles: usize,
    pub mode: FleetMode,
    /// Cells on each bus loop.
    pub route_len: usize,
    /// Slices to complete one loop.
    pub route_period: usize,
    /// Random-walk steps per slice for free cars.
    pub steps_per_slice: usize,
    /// Hours of day (0..24) in which vehicles sample.
    pub active_hours: BTreeSet<u8>,
    /// Hour of day at slice 0.
    pub start_hour: f64,
    pub seed: u64,
}

impl FleetConfig {
    pub fn always_active(n_vehicles: usize, mode: FleetMode, seed: u64) -> Self {
        FleetConfig {
            n_vehicles,
            mode,
            route_len: 10,
            route_period: 1,
            steps_per_slice: 6,
            active_hours: (0..24).collect(),
            start_hour: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vehicles == 0 {
            return Err(Error::config("fleet needs at least one vehicle"));
        }
        if self.route_len == 0 || self.route_period == 0 {
            return Err(Error::config("route length and period must be positive"));
        }
        if self.active_hours.iter().any(|&h| h >= 24) {
            return Err(Error::config("active hours must lie in 0..24"));
        }
        Ok(())
    }
}

/// Hour of day (0..24) covered by slice `l`.
pub fn hour_of_slice(start_hour: f64, slice_length: f64, l: usize) -> u8 {
    let h = (start_hour + l as f64 * slice_length / 3600.0).floor();
    h.rem_euclid(24.0) as u8
}

/// Boustrophedon order through the grid, a contiguous cycle of all cells.
fn snake(grid: &GridSpec) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.cells());
    for x in 0..grid.x {
        if x % 2 == 0 {
            out.extend((0..grid.y).map(|y| grid.cell(x, y)));
        } else {
            out.extend((0..grid.y).rev().map(|y| grid.cell(x, y)));
        }
    }
    out
}

pub fn gen_fleet_mask(cfg: &FleetConfig, grid: &GridSpec, slices: usize) -> Result<Vec<bool>> {
    cfg.validate()?;
    grid.validate()?;
    let k = grid.cells();
    let mut mask = vec![false; slices * k];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.mode {
        FleetMode::BusRoute => {
            let path = snake(grid);
            let len = cfg.route_len.min(k);
            let per_slice = len.div_ceil(cfg.route_period);
            let routes: Vec<Vec<usize>> = (0..cfg.n_vehicles)
                .map(|_| {
                    let off = rng.random_range(0..k);
                    (0..len).map(|i| path[(off + i) % k]).collect()
                })
                .collect();
            for l in 0..slices {
                if !cfg.active_hours.contains(&hour_of_slice(cfg.start_hour, grid.slice_length, l)) {
                    continue;
                }
                for route in &routes {
                    let first = (l % cfg.route_period) * per_slice;
                    for i in first..first + per_slice {
                        mask[l * k + route[i % len]] = true;
                    }
                }
            }
        }
        FleetMode::FreeCar => {
            let mut pos: Vec<(usize, usize)> =
                (0..cfg.n_vehicles).map(|_| (rng.random_range(0..grid.x), rng.random_range(0..grid.y))).collect();
            for l in 0..slices {
                let active = cfg.active_hours.contains(&hour_of_slice(cfg.start_hour, grid.slice_length, l));
                for p in pos.iter_mut() {
                    for step in 0..=cfg.steps_per_slice {
                        if step > 0 {
                            *p = random_step(*p, grid, &mut rng);
                        }
                        if active {
                            mask[l * k + grid.cell(p.0, p.1)] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

fn random_step((x, y): (usize, usize), g: &GridSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let moves: Vec<(usize, usize)> = [
        (x.wrapping_sub(1), y),
        (x + 1, y),
        (x, y.wrapping_sub(1)),
        (x, y + 1),
    ]
    .into_iter()
    .filter(|&(a, b)| a < g.x && b < g.y)
    .collect();
    if moves.is_empty() {
        return (x, y);
    }
    moves[rng.random_range(0..moves.len())]
}

/// Truth plus Gaussian noise where `mask` is set, sentinel elsewhere.
pub fn make_observed(truth: &MaskedField, mask: &[bool], sigma: f64, seed: u64) -> Result<MaskedField> {
    if mask.len() != truth.values.len() {
        return Err(Error::dim(format!(
            "mask has {} entries, field has {}",
            mask.len(),
            truth.values.len()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let values = truth
        .values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v + sigma * normal.sample(&mut rng) } else { 0.0 })
        .collect();
    MaskedField::new(truth.grid, truth.slices, values, mask.to_vec())
}

/// One record per observed entry, at the cell centre and slice midpoint.
pub fn field_to_records(field: &MaskedField, t0: i64) -> Vec<RawRecord> {
    let g = &field.grid;
    let mut out = Vec::new();
    for l in 0..field.slices {
        let ts = t0 + ((l as f64 + 0.5) * g.slice_length).floor() as i64;
        for x in 0..g.x {
            for y in 0..g.y {
                let i = field.index(l, x, y);
                if field.mask[i] {
                    let (lat, lon) = g.center_of(x, y);
                    out.push(RawRecord {
                        device_id: format!("veh-{x}-{y}"),
                        timestamp: ts,
                        lon,
                        lat,
                        value: field.values[i].max(0.0),
                    });
                }
            }
        }
    }
    out
}

/// A ground-truth configuration with its fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub synth: SynthConfig,
    pub fleet: FleetConfig,
}

/// Output of [`Scenario::generate`].
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub truth: MaskedField,
    pub observed: MaskedField,
}

impl Scenario {
    pub const NAMES: [&'static str; 2] = ["default", "advection"];

    /// Paper-shaped 336 x 10 x 10 hourly scenario with weak, stable physics.
    pub fn default_scenario(seed: u64) -> Self {
        let grid = GridSpec::default();
        let mut synth = SynthConfig::new(grid, 336, 20.0, -0.1, -0.05, seed);
        synth.source = source_map(&grid, 0.006, 0.0015);
        synth.source_modulation = 0.5;
        synth.obs_noise_sigma = 1.0;
        let mut fleet = FleetConfig::always_active(4, FleetMode::BusRoute, seed ^ 0x5eed);
        fleet.route_len = 30;
        fleet.route_period = 3;
        fleet.active_hours = (6..23).collect();
        Scenario { name: "default".into(), synth, fleet }
    }

    /// Advection-dominated scenario: K = 5 m²/s, P = (1, 0) m/s, ~60% coverage.
    ///
    /// Cells are 5 m so the stencil's +x coupling `K/n² − P/n` is exactly
    /// zero and transport is upwind; a slice moves the plume half a cell.
    pub fn advection(seed: u64) -> Self {
        let grid = GridSpec { cell_size: 5.0, slice_length: 2.5, ..GridSpec::default() };
        let mut synth = SynthConfig::new(grid, 336, 5.0, 1.0, 0.0, seed);
        synth.source = source_map(&grid, 6.0, 0.6);
        synth.source_modulation = 0.6;
        synth.source_period = 24;
        synth.obs_noise_sigma = 1.0;
        let mut fleet = FleetConfig::always_active(17, FleetMode::FreeCar, seed ^ 0x5eed);
        fleet.steps_per_slice = 6;
        Scenario { name: "advection".into(), synth, fleet }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_scenario(seed)),
            "advection" => Ok(Self::advection(seed)),
            other => Err(Error::config(format!(
                "unknown scenario `{other}` (expected one of {:?})",
                Self::NAMES
            ))),
        }
    }

    pub fn generate(&self) -> Result<ScenarioData> {
        let truth = gen_ground_truth(&self.synth)?;
        let mask = gen_fleet_mask(&self.fleet, &self.synth.grid, self.synth.slices)?;
        let observed = make_observed(&truth, &mask, self.synth.obs_noise_sigma, self.synth.seed ^ 0x0b5)?;
        Ok(ScenarioData { truth, observed })
    }
}

/// Three emission blobs on the low-x side plus a weak uniform background.
fn source_map(grid: &GridSpec, peak: f64, background: f64) -> Vec<f64> {
    let mut s = vec![background; grid.cells()];
    let fx = grid.x as f64;
    let fy = grid.y as f64;
    for (cx, cy) in [(0.15 * fx, 0.2 * fy), (0.3 * fx, 0.65 * fy), (0.1 * fx, 0.85 * fy)] {
        add_bump(grid, &mut s, cx, cy, 0.8, peak);
    }
    s
}
