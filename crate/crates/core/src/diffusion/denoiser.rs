//! Noise predictor `ε_θ(v_t^ta, t | v^co, m^co, v^de)` with alternating
//! temporal and feature attention inside gated residual blocks.
//!
//! Tokens are one per `(batch, cell, step)` over the full window, rows in
//! that order. The target comes back as `[B * L2, cells]`, rows `(b, l)`.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Dense, TransformerLayer};
use crate::tensor::{ParamStore, Params, Records, SeqLayout, Tape, Tensor, Var};

pub const TIME_EMB: usize = 32;
pub const FEATURE_EMB: usize = 16;
pub const DIFF_EMB: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub heads: usize,
    /// Residual blocks, each holding one temporal and one feature transformer layer.
    pub layers: usize,
    pub ff: usize,
    /// Adds the PDE forecast as an input channel.
    pub pde_channel: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { channels: 64, heads: 8, layers: 4, ff: 64, pde_channel: false, seed: 0 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.layers == 0 || self.ff == 0 {
            return Err(Error::config("denoiser widths, heads and layers must be positive"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "denoiser channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        4 + self.pde_channel as usize
    }
}

/// Standardised inputs for one batch of windows.
#[derive(Clone, Debug)]
pub struct DenoiserBatch {
    pub batch: usize,
    pub cells: usize,
    pub l1: usize,
    pub l2: usize,
    /// Noisy target, `[B, L2 * cells]` slice-major per window.
    pub noisy: Vec<f64>,
    /// Zero-filled history, `[B, L1 * cells]`.
    pub v_co: Vec<f64>,
    pub m_co: Vec<bool>,
    /// PDE forecast of the target slices, required iff the model has a PDE channel.
    pub pde: Option<Vec<f64>>,
    /// Diffusion step per window, 1-based.
    pub t: Vec<usize>,
    /// Per `(b, l)` validity over the full window; padded steps are ignored by
    /// temporal attention.
    pub step_valid: Option<Vec<bool>>,
}

impl DenoiserBatch {
    pub fn steps(&self) -> usize {
        self.l1 + self.l2
    }

    fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let (b, k) = (self.batch, self.cells);
        let bad = |what: &str, got: usize, want: usize| {
            Error::dim(format!("denoiser {what} has {got} entries, expected {want}"))
        };
        if b == 0 || k == 0 || self.l2 == 0 {
            return Err(Error::dim("denoiser batch, cells and target length must be positive"));
        }
        if self.noisy.len() != b * self.l2 * k {
            return Err(bad("noisy target", self.noisy.len(), b * self.l2 * k));
        }
        if self.v_co.len() != b * self.l1 * k {
            return Err(bad("history values", self.v_co.len(), b * self.l1 * k));
        }
        if self.m_co.len() != self.v_co.len() {
            return Err(bad("history mask", self.m_co.len(), self.v_co.len()));
        }
        if self.t.len() != b {
            return Err(bad("step list", self.t.len(), b));
        }
        match (&self.pde, cfg.pde_channel) {
            (Some(p), true) if p.len() != b * self.l2 * k => return Err(bad("PDE channel", p.len(), b * self.l2 * k)),
            (None, true) => return Err(Error::Usage("model expects a PDE channel".into())),
            (Some(_), false) => return Err(Error::Usage("model has no PDE channel".into())),
            _ => {}
        }
        if let Some(v) = &self.step_valid {
            if v.len() != b * self.steps() {
                return Err(bad("step validity", v.len(), b * self.steps()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    diff: Dense,
    temporal: TransformerLayer,
    feature: TransformerLayer,
    mid: Dense,
    cond: Dense,
    out: Dense,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub cells: usize,
    pub store: ParamStore,
    input: Dense,
    diff: [Dense; 2],
    blocks: Vec<Block>,
    head: [Dense; 2],
}

const FEATURE_TABLE: &str = "feature_emb";

/// Sinusoidal embedding of position `pos` into `dim` values (sines then cosines).
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, cells: usize) -> Result<Self> {
        cfg.validate()?;
        if cells == 0 {
            return Err(Error::config("denoiser needs at least one cell"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let side = TIME_EMB + FEATURE_EMB + 1;
        let input = Dense::new(&mut store, "input", cfg.input_channels(), c, &mut rng);
        let diff = [
            Dense::new(&mut store, "diff.0", DIFF_EMB, DIFF_EMB, &mut rng),
            Dense::new(&mut store, "diff.1", DIFF_EMB, DIFF_EMB, &mut rng),
        ];
        store.insert_glorot(FEATURE_TABLE, cells, FEATURE_EMB, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Block {
                    diff: Dense::new(&mut store, &n("diff"), DIFF_EMB, c, &mut rng),
                    temporal: TransformerLayer::new(&mut store, &n("temporal"), c, cfg.heads, cfg.ff, &mut rng),
                    feature: TransformerLayer::new(&mut store, &n("feature"), c, cfg.heads, cfg.ff, &mut rng),
                    mid: Dense::new(&mut store, &n("mid"), c, 2 * c, &mut rng),
                    cond: Dense::new(&mut store, &n("cond"), side, 2 * c, &mut rng),
                    out: Dense::new(&mut store, &n("out"), c, 2 * c, &mut rng),
                }
            })
            .collect();
        let head = [Dense::new(&mut store, "head.0", c, c, &mut rng), Dense::zeroed(&mut store, "head.1", c, 1)];
        Ok(Denoiser { cfg: cfg.clone(), cells, store, input, diff, blocks, head })
    }

    /// Name of the final projection's weight; zero at initialisation.
    pub fn output_weight(&self) -> &str {
        self.head[1].weight_name()
    }

    /// Predicted noise `[B * L2, cells]`; `v_de` is `[B, L2 * cells]` in standardised units.
    pub fn forward(&self, tape: &mut Tape, p: &Params<'_>, batch: &DenoiserBatch, v_de: Var) -> Result<Var> {
        batch.validate(&self.cfg)?;
        if batch.cells != self.cells {
            return Err(Error::dim(format!("denoiser built for {} cells, batch has {}", self.cells, batch.cells)));
        }
        let (b, k, l1, l2) = (batch.batch, batch.cells, batch.l1, batch.l2);
        if tape.shape(v_de) != [b, l2 * k] {
            return Err(Error::dim(format!("v_de has shape {:?}, expected [{b}, {}]", tape.shape(v_de), l2 * k)));
        }
        let steps = l1 + l2;
        let n = b * k * steps;
        let c = self.cfg.channels;
        let row = |bi: usize, ki: usize, l: usize| (bi * k + ki) * steps + l;

        // Constant channels and the side information.
        let nconst = self.cfg.input_channels() - 1;
        let mut xin = vec![0.0; n * nconst];
        let mut side = vec![0.0; n * (TIME_EMB + 1)];
        let mut target_ind = vec![0.0; n];
        let mut de_idx = vec![0usize; n];
        let time_table: Vec<Vec<f64>> = (0..steps).map(|l| sinusoidal(l as f64, TIME_EMB)).collect();
        for bi in 0..b {
            for ki in 0..k {
                for l in 0..steps {
                    let r = row(bi, ki, l);
                    let xr = &mut xin[r * nconst..(r + 1) * nconst];
                    let sr = &mut side[r * (TIME_EMB + 1)..(r + 1) * (TIME_EMB + 1)];
                    sr[..TIME_EMB].copy_from_slice(&time_table[l]);
                    if l < l1 {
                        let h = bi * l1 * k + l * k + ki;
                        let m = batch.m_co[h];
                        xr[1] = if m { batch.v_co[h] } else { 0.0 };
                        xr[2] = m as u8 as f64;
                        sr[TIME_EMB] = xr[2];
                    } else {
                        let ti = bi * l2 * k + (l - l1) * k + ki;
                        xr[0] = batch.noisy[ti];
                        if let Some(pde) = &batch.pde {
                            xr[3] = pde[ti];
                        }
                        target_ind[r] = 1.0;
                        de_idx[r] = ti;
                    }
                }
            }
        }
        let xconst = tape.constant(Tensor::new(vec![n, nconst], xin)?);
        let de_col = tape.reshape(v_de, &[b * l2 * k, 1])?;
        let de_col = tape.gather_rows(de_col, Arc::new(de_idx))?;
        let ind = tape.constant(Tensor::new(vec![n, 1], target_ind)?);
        let de_col = tape.mul(de_col, ind)?;
        let x = tape.concat_cols(&[xconst, de_col])?;
        let x = self.input.forward(tape, p, x)?;
        let mut x = tape.relu(x);

        let side_const = tape.constant(Tensor::new(vec![n, TIME_EMB + 1], side)?);
        let table = tape.param(p, FEATURE_TABLE)?;
        let cell_idx: Vec<usize> = (0..n).map(|r| (r / steps) % k).collect();
        let feat = tape.gather_rows(table, Arc::new(cell_idx))?;
        let side = tape.concat_cols(&[side_const, feat])?;

        let mut demb = Vec::with_capacity(b * DIFF_EMB);
        for &t in &batch.t {
            demb.extend(sinusoidal(t as f64, DIFF_EMB));
        }
        let mut d = tape.constant(Tensor::new(vec![b, DIFF_EMB], demb)?);
        for layer in &self.diff {
            d = layer.forward(tape, p, d)?;
            d = tape.silu(d);
        }

        let mut temporal = SeqLayout::temporal(b, k, steps);
        if let Some(valid) = &batch.step_valid {
            let mask = (0..b * k).flat_map(|s| (0..steps).map(move |l| valid[(s / k) * steps + l])).collect();
            temporal = temporal.with_key_mask(mask);
        }
        let temporal = Arc::new(temporal);
        let feature = Arc::new(SeqLayout::feature(b, k, steps));

        let mut skips = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let dp = blk.diff.forward(tape, p, d)?;
            let y = tape.add_bias(x, dp)?;
            let y = if steps > 1 { blk.temporal.forward(tape, p, y, temporal.clone())? } else { y };
            let y = if k > 1 { blk.feature.forward(tape, p, y, feature.clone())? } else { y };
            let y = blk.mid.forward(tape, p, y)?;
            let cp = blk.cond.forward(tape, p, side)?;
            let y = tape.add(y, cp)?;
            let gate = tape.slice_cols(y, 0, c)?;
            let filter = tape.slice_cols(y, c, c)?;
            let gate = tape.sigmoid(gate);
            let filter = tape.tanh(filter);
            let y = tape.mul(gate, filter)?;
            let y = blk.out.forward(tape, p, y)?;
            let res = tape.slice_cols(y, 0, c)?;
            let skip = tape.slice_cols(y, c, c)?;
            let sum = tape.add(x, res)?;
            x = tape.scale(sum, 1.0 / SQRT_2);
            skips.push(skip);
        }
        let mut acc = skips[0];
        for &s in &skips[1..] {
            acc = tape.add(acc, s)?;
        }
        let h = tape.scale(acc, 1.0 / (skips.len() as f64).sqrt());
        let h = self.head[0].forward(tape, p, h)?;
        let h = tape.relu(h);
        let out = self.head[1].forward(tape, p, h)?;
        let mut tidx = Vec::with_capacity(b * l2 * k);
        for bi in 0..b {
            for l in 0..l2 {
                for ki in 0..k {
                    tidx.push(row(bi, ki, l1 + l));
                }
            }
        }
        let out = tape.gather_rows(out, Arc::new(tidx))?;
        tape.reshape(out, &[b * l2, k])
    }

    /// Forward pass with frozen parameters and a constant `v_de`, returning values.
    pub fn predict(&self, batch: &DenoiserBatch, v_de: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let de = tape.constant(Tensor::new(vec![batch.batch, batch.l2 * batch.cells], v_de.to_vec())?);
        let out = self.forward(&mut tape, &self.store.frozen(), batch, de)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn to_records(&self, prefix: &str) -> Records {
        let mut r = self.store.to_records(prefix);
        let c = &self.cfg;
        let meta = vec![
            c.channels as f64,
            c.heads as f64,
            c.layers as f64,
            c.ff as f64,
            c.pde_channel as u8 as f64,
            self.cells as f64,
        ];
        r.insert(format!("{prefix}meta"), Tensor::from_vec(meta));
        r
    }

    pub fn from_records(records: &Records, prefix: &str) -> Result<Self> {
        let meta = records
            .get(&format!("{prefix}meta"))
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{prefix}meta`")))?
            .data();
        if meta.len() != 6 {
            return Err(Error::Corrupt("denoiser metadata has the wrong length".into()));
        }
        let cfg = DenoiserConfig {
            channels: meta[0] as usize,
            heads: meta[1] as usize,
            layers: meta[2] as usize,
            ff: meta[3] as usize,
            pde_channel: meta[4] != 0.0,
            seed: 0,
        };
        let mut model = Denoiser::new(&cfg, meta[5] as usize).map_err(|e| Error::Corrupt(e.to_string()))?;
        let loaded = crate::tensor::ParamStore::from_records(records, prefix);
        let names: Vec<String> = model.store.names().map(str::to_string).collect();
        for name in names {
            let t = loaded
                .get(&name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{prefix}{name}`")))?;
            model.store.set(&name, t.clone()).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Denoiser, DenoiserBatch) {
        let cfg = DenoiserConfig { channels: 8, heads: 2, layers: 2, ff: 8, pde_channel: false, seed: 3 };
        let m = Denoiser::new(&cfg, 4).unwrap();
        let (b, k, l1, l2) = (2, 4, 3, 2);
        let batch = DenoiserBatch {
            batch: b,
            cells: k,
            l1,
            l2,
            noisy: (0..b * l2 * k).map(|i| (i as f64 * 0.37).sin()).collect(),
            v_co: (0..b * l1 * k).map(|i| (i as f64 * 0.11).cos()).collect(),
            m_co: (0..b * l1 * k).map(|i| i % 3 != 0).collect(),
            pde: None,
            t: vec![3, 17],
            step_valid: None,
        };
        (m, batch)
    }

    #[test]
    fn zero_head_predicts_zero() {
        let (m, batch) = toy();
        let out = m.predict(&batch, &vec![0.5; 16]).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_and_shaped() {
        let (mut m, batch) = toy();
        let w = Tensor::new(vec![8, 1], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
        m.store.set(&m.output_weight().to_string(), w).unwrap();
        let a = m.predict(&batch, &vec![0.1; 16]).unwrap();
        let b = m.predict(&batch, &vec![0.1; 16]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v != 0.0));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padded_steps_do_not_leak() {
        let (mut m, mut batch) = toy();
        let w = Tensor::new(vec![8, 1], vec![0.2; 8]).unwrap();
        m.store.set(&m.output_weight().to_string(), w).unwrap();
        // Step 0 of every window is padding.
        batch.step_valid = Some((0..2 * 5).map(|i| i % 5 != 0).collect());
        let base = m.predict(&batch, &vec![0.0; 16]).unwrap();
        let mut moved = batch.clone();
        for bi in 0..2 {
            for ki in 0..4 {
                moved.v_co[bi * 12 + ki] += 7.5;
                moved.m_co[bi * 12 + ki] = !moved.m_co[bi * 12 + ki];
            }
        }
        let after = m.predict(&moved, &vec![0.0; 16]).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (m, batch) = toy();
        let r = m.to_records("denoiser.");
        let back = Denoiser::from_records(&r, "denoiser.").unwrap();
        assert_eq!(back.store.checksum(), m.store.checksum());
        assert_eq!(back.predict(&batch, &vec![0.0; 16]).unwrap(), m.predict(&batch, &vec![0.0; 16]).unwrap());
    }

    #[test]
    fn shape_errors() {
        let (m, mut batch) = toy();
        batch.noisy.pop();
        assert!(matches!(m.predict(&batch, &vec![0.0; 16]), Err(Error::Dimension(_))));
    }
}
