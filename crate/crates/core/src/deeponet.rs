//! DeepONet `F(V)(M)`: a branch net over the observed history and a trunk
//! net over the full mask, joined by an inner product over `p` latent
//! components plus a per-output bias.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::WindowSample;
use crate::pde::PdeOperator;
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{AdamConfig, ParamStore, Params, Records, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepOnetRole {
    None,
    FrozenCondition,
    TrainableCondition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepOnetLoss {
    Mse,
    MsePlusPde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetConfig {
    pub p: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub role: DeepOnetRole,
    pub loss_mode: DeepOnetLoss,
    /// Weight of the PDE residual under `MsePlusPde`.
    pub omega: f64,
    pub seed: u64,
}

impl Default for DeepOnetConfig {
    fn default() -> Self {
        DeepOnetConfig {
            p: 64,
            hidden: vec![256, 256],
            epochs: 20,
            lr: 1e-3,
            batch: 8,
            role: DeepOnetRole::FrozenCondition,
            loss_mode: DeepOnetLoss::Mse,
            omega: 1.0,
            seed: 0,
        }
    }
}

impl DeepOnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::config("DeepONet latent width p must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("DeepONet hidden widths must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("DeepONet batch must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(self.omega >= 0.0) {
            return Err(Error::config("DeepONet lr and omega must be >= 0"));
        }
        Ok(())
    }
}

/// A DeepONet with its parameters and the standardisation it was trained with.
#[derive(Clone, Debug)]
pub struct DeepOnet {
    pub l1: usize,
    pub l2: usize,
    pub cells: usize,
    pub p: usize,
    pub hidden: Vec<usize>,
    branch: Mlp,
    trunk: Mlp,
    pub store: ParamStore,
    pub mean: f64,
    pub std: f64,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
}

const BIAS: &str = "bias";

impl DeepOnet {
    pub fn new(l1: usize, l2: usize, cells: usize, cfg: &DeepOnetConfig, mean: f64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (branch, trunk) = Self::layers(&mut store, l1, l2, cells, cfg.p, &cfg.hidden, &mut rng);
        store.insert(BIAS, Tensor::zeros(&[l2 * cells]));
        Ok(DeepOnet {
            l1,
            l2,
            cells,
            p: cfg.p,
            hidden: cfg.hidden.clone(),
            branch,
            trunk,
            store,
            mean,
            std: if std > 0.0 { std } else { 1.0 },
            final_loss: f64::NAN,
        })
    }

    fn layers(
        store: &mut ParamStore,
        l1: usize,
        l2: usize,
        cells: usize,
        p: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (Mlp, Mlp) {
        let mut bw = vec![2 * l1 * cells];
        bw.extend_from_slice(hidden);
        bw.push(p);
        let mut tw = vec![(l1 + l2) * cells];
        tw.extend_from_slice(hidden);
        tw.push(l2 * cells * p);
        let branch = Mlp::new(store, "branch", &bw, Activation::Tanh, rng);
        let trunk = Mlp::new(store, "trunk", &tw, Activation::Tanh, rng);
        (branch, trunk)
    }

    /// Output count `D = L2 * cells`.
    pub fn outputs(&self) -> usize {
        self.l2 * self.cells
    }

    fn check(&self, w: &WindowSample) -> Result<()> {
        if w.l1 != self.l1 || w.l2 != self.l2 || w.cells != self.cells {
            return Err(Error::dim(format!(
                "DeepONet expects {}+{} slices of {} cells, window has {}+{} of {}",
                self.l1, self.l2, self.cells, w.l1, w.l2, w.cells
            )));
        }
        if w.v_co.len() != w.l1 * w.cells || w.m_co.len() != w.v_co.len() {
            return Err(Error::dim("window history arrays do not match its declared shape"));
        }
        Ok(())
    }

    /// Standardised outputs `[B, D]` for a batch of windows, recorded on `tape`.
    ///
    /// The trunk sees `concat(m_co, m_ta)` with the target part zeroed, which
    /// is what is known at forecasting time.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Params<'_>, windows: &[&WindowSample]) -> Result<Var> {
        let b = windows.len();
        let hist = self.l1 * self.cells;
        let mut bin = Vec::with_capacity(b * 2 * hist);
        let mut tin = vec![0.0; b * (self.l1 + self.l2) * self.cells];
        let tw = (self.l1 + self.l2) * self.cells;
        for (i, w) in windows.iter().enumerate() {
            self.check(w)?;
            bin.extend(w.v_co.iter().zip(&w.m_co).map(|(&v, &m)| if m { (v - self.mean) / self.std } else { 0.0 }));
            bin.extend(w.m_co.iter().map(|&m| m as u8 as f64));
            for (j, &m) in w.m_co.iter().enumerate() {
                tin[i * tw + j] = m as u8 as f64;
            }
        }
        let bx = tape.constant(Tensor::new(vec![b, 2 * hist], bin)?);
        let tx = tape.constant(Tensor::new(vec![b, tw], tin)?);
        let br = self.branch.forward(tape, p, bx)?;
        let tr = self.trunk.forward(tape, p, tx)?;
        let d = self.outputs();
        let tr = tape.reshape(tr, &[b * d, self.p])?;
        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, d)).collect();
        let br = tape.gather_rows(br, Arc::new(rep))?;
        let prod = tape.mul(tr, br)?;
        let ones = tape.constant(Tensor::full(&[self.p, 1], 1.0));
        let dotp = tape.matmul(prod, ones)?;
        let dotp = tape.reshape(dotp, &[b, d])?;
        let bias = tape.param(p, BIAS)?;
        tape.add_bias(dotp, bias)
    }

    /// Forecast `v_de` (`L2 * cells`, raw units) for one window.
    pub fn forward(&self, w: &WindowSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &self.store.frozen(), &[w])?;
        Ok(tape.value(out).data().iter().map(|z| z * self.std + self.mean).collect())
    }

    pub fn to_records(&self, prefix: &str) -> Records {
        let mut r = self.store.to_records(prefix);
        let meta = [self.l1, self.l2, self.cells, self.p].iter().chain(&self.hidden).map(|&v| v as f64).collect();
        r.insert(format!("{prefix}meta"), Tensor::from_vec(meta));
        r.insert(format!("{prefix}norm"), Tensor::from_vec(vec![self.mean, self.std]));
        r
    }

    pub fn from_records(records: &Records, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            records
                .get(&format!("{prefix}{k}"))
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{prefix}{k}`")))
        };
        let meta: Vec<usize> = get("meta")?.data().iter().map(|&v| v as usize).collect();
        if meta.len() < 4 {
            return Err(Error::Corrupt("DeepONet metadata is too short".into()));
        }
        let norm = get("norm")?.data().to_vec();
        let loaded = ParamStore::from_records(records, prefix);
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (branch, trunk) = Self::layers(&mut scratch, meta[0], meta[1], meta[2], meta[3], &meta[4..], &mut rng);
        let mut store = ParamStore::new();
        for name in scratch.names().chain(std::iter::once(BIAS)) {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{prefix}{name}`")))?;
            let want = scratch.get(name).map(|w| w.shape().to_vec()).unwrap_or_else(|| vec![meta[1] * meta[2]]);
            if t.shape() != want.as_slice() {
                return Err(Error::Corrupt(format!("`{prefix}{name}` has shape {:?}, expected {want:?}", t.shape())));
            }
            store.insert(name, t.clone());
        }
        Ok(DeepOnet {
            l1: meta[0],
            l2: meta[1],
            cells: meta[2],
            p: meta[3],
            hidden: meta[4..].to_vec(),
            branch,
            trunk,
            store,
            mean: norm[0],
            std: norm[1],
            final_loss: f64::NAN,
        })
    }
}

/// Masked MSE in standardised units, plus the optional PDE residual term.
pub(crate) fn deeponet_loss(
    tape: &mut Tape,
    model: &DeepOnet,
    out: Var,
    windows: &[&WindowSample],
    pde: Option<(&PdeOperator, f64)>,
) -> Result<Var> {
    let b = windows.len();
    let d = model.outputs();
    let mut target = Vec::with_capacity(b * d);
    let mut mask = Vec::with_capacity(b * d);
    for w in windows {
        target.extend(w.v_ta.iter().zip(&w.m_ta).map(|(&v, &m)| if m { (v - model.mean) / model.std } else { 0.0 }));
        mask.extend(w.m_ta.iter().map(|&m| m as u8 as f64));
    }
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(Error::InsufficientData("batch has no observed targets".into()));
    }
    let t = tape.constant(Tensor::new(vec![b, d], target)?);
    let m = tape.constant(Tensor::new(vec![b, d], mask)?);
    let diff = tape.sub(out, t)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.mul(sq, m)?;
    let s = tape.sum(sq);
    let mut loss = tape.scale(s, 1.0 / count);
    if let Some((op, omega)) = pde {
        if omega > 0.0 && model.l2 > 1 {
            let r = crate::diffusion::pde_residual_standardized(tape, op, out, b, model.l2, model.mean / model.std)?;
            let rr = tape.mul(r, r)?;
            let n = tape.value(rr).len() as f64;
            let s = tape.sum(rr);
            let term = tape.scale(s, omega / n);
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// Trains a fresh DeepONet on `windows` with minibatch Adam.
pub fn train_deeponet(
    windows: &[WindowSample],
    cfg: &DeepOnetConfig,
    norm: (f64, f64),
    op: Option<&PdeOperator>,
) -> Result<DeepOnet> {
    cfg.validate()?;
    let first = windows.first().ok_or_else(|| Error::InsufficientData("no training windows".into()))?;
    if windows.iter().all(|w| !w.m_ta.iter().any(|&m| m)) {
        return Err(Error::InsufficientData("training windows have no observed targets".into()));
    }
    let mut model = DeepOnet::new(first.l1, first.l2, first.cells, cfg, norm.0, norm.1)?;
    let pde = match cfg.loss_mode {
        DeepOnetLoss::Mse => None,
        DeepOnetLoss::MsePlusPde => Some((
            op.ok_or_else(|| Error::Usage("PDE loss mode needs an operator".into()))?,
            cfg.omega,
        )),
    };
    let usable: Vec<&WindowSample> = windows.iter().filter(|w| w.m_ta.iter().any(|&m| m)).collect();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0);
    let adam = AdamConfig::with_lr(cfg.lr);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| usable[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward_tape(&mut tape, &model.store.trainable(), &batch)?;
            let loss = deeponet_loss(&mut tape, &model, out, &batch, pde)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("DeepONet loss became {lv} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            model.store.adam_step(&grads, &adam)?;
            total += lv;
            batches += 1;
        }
        model.final_loss = total / batches.max(1) as f64;
        log::debug!("deeponet epoch {epoch}: loss {:.5}", model.final_loss);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(l1: usize, l2: usize, cells: usize, v: f64) -> WindowSample {
        WindowSample {
            start: 0,
            l1,
            l2,
            cells,
            v_co: vec![v; l1 * cells],
            m_co: vec![true; l1 * cells],
            v_ta: vec![v; l2 * cells],
            m_ta: vec![true; l2 * cells],
            v_de: None,
        }
    }

    fn small() -> DeepOnetConfig {
        DeepOnetConfig { p: 4, hidden: vec![8], epochs: 2, ..DeepOnetConfig::default() }
    }

    #[test]
    fn zero_branch_returns_bias() {
        let mut m = DeepOnet::new(2, 3, 4, &small(), 10.0, 2.0).unwrap();
        let last = m.branch.layers.last().unwrap().clone();
        m.store.set(last.weight_name(), Tensor::zeros(&[8, 4])).unwrap();
        let bias: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        m.store.set(BIAS, Tensor::from_vec(bias.clone())).unwrap();
        let out = m.forward(&window(2, 3, 4, 25.0)).unwrap();
        assert_eq!(out.len(), 12);
        for (o, b) in out.iter().zip(&bias) {
            assert!((o - (b * 2.0 + 10.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = DeepOnet::new(2, 3, 4, &small(), 0.0, 1.0).unwrap();
        assert!(matches!(m.forward(&window(2, 3, 5, 1.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ws = vec![window(2, 2, 3, 5.0), window(2, 2, 3, 7.0)];
        let cfg = DeepOnetConfig { lr: 0.0, ..small() };
        let a = train_deeponet(&ws, &cfg, (6.0, 1.0), None).unwrap();
        let b = DeepOnet::new(2, 2, 3, &cfg, 6.0, 1.0).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ws = vec![window(2, 2, 3, 5.0)];
        let a = train_deeponet(&ws, &small(), (5.0, 1.0), None).unwrap();
        let b = DeepOnet::from_records(&a.to_records("deeponet."), "deeponet.").unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_eq!(a.forward(&ws[0]).unwrap(), b.forward(&ws[0]).unwrap());
    }

    #[test]
    fn no_targets_is_an_error() {
        let mut w = window(2, 2, 3, 5.0);
        w.m_ta = vec![false; 6];
        assert!(matches!(train_deeponet(&[w], &small(), (0.0, 1.0), None), Err(Error::InsufficientData(_))));
    }
}
