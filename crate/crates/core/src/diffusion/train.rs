use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::loss::step_loss_tape;
use super::{ConditionPack, Denoiser, DenoiserBatch, Norm, PdeRole, TrainRunConfig};
use crate::deeponet::{DeepOnet, DeepOnetRole};
use crate::error::{Error, Result};
use crate::grid::WindowSample;
use crate::par;
use crate::pde::PdeOperator;
use crate::tensor::{AdamConfig, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub loss: f64,
    pub l_eps: f64,
    pub l_pde: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub denoiser: Denoiser,
    pub deeponet: Option<DeepOnet>,
    pub curve: Vec<LossRow>,
}

/// Writes `iter,loss,l_eps,l_pde`.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "loss", "l_eps", "l_pde"]).map_err(csv_err)?;
    for r in curve {
        w.write_record([r.iter.to_string(), r.loss.to_string(), r.l_eps.to_string(), r.l_pde.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Noise-matching training loop.
///
/// Each iteration draws `batch` windows, a step per window and the noise,
/// all from one seeded stream, then takes one Adam step. A trainable
/// DeepONet is updated from the same gradients.
pub fn train(
    windows: &[WindowSample],
    norm: Norm,
    deeponet: Option<DeepOnet>,
    op: &PdeOperator,
    cfg: &TrainRunConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = windows.first().ok_or_else(|| Error::InsufficientData("no training windows".into()))?;
    let (l1, l2, k) = (first.l1, first.l2, first.cells);
    if windows.iter().any(|w| w.l1 != l1 || w.l2 != l2 || w.cells != k) {
        return Err(Error::dim("training windows differ in shape"));
    }
    if op.cells() != k {
        return Err(Error::dim(format!("operator has {} cells, windows have {k}", op.cells())));
    }
    let role = cfg.mode.deeponet_role;
    let mut deeponet = match (role, deeponet) {
        (DeepOnetRole::None, _) => None,
        (_, Some(m)) => Some(m),
        (_, None) => return Err(Error::Usage(format!("mode {:?} needs a pretrained DeepONet", cfg.mode))),
    };
    let windows: Vec<&WindowSample> =
        windows.iter().filter(|w| cfg.unmasked_loss || w.m_ta.iter().any(|&m| m)).collect();
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training window has observed targets".into()));
    }

    let pde_cond = (cfg.mode.pde_role == PdeRole::Condition).then_some(op);
    let frozen_de = if role == DeepOnetRole::FrozenCondition { deeponet.as_ref() } else { None };
    let packs = par::try_map(cfg.jobs, &windows, |_, w| ConditionPack::build(w, &norm, frozen_de, pde_cond))?;
    let targets: Vec<(Vec<f64>, Vec<f64>)> = windows
        .iter()
        .map(|w| {
            let mask = w.m_ta.iter().map(|&m| if m || cfg.unmasked_loss { 1.0 } else { 0.0 }).collect();
            (norm.z_masked(&w.v_ta, &w.m_ta), mask)
        })
        .collect();

    let dcfg = super::DenoiserConfig {
        pde_channel: pde_cond.is_some(),
        seed: cfg.seed.wrapping_add(1),
        ..cfg.denoiser.clone()
    };
    let mut denoiser = Denoiser::new(&dcfg, k)?;
    let sched = cfg.schedule()?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let omega = cfg.mode.effective_omega(cfg.omega);
    let bt = op.b_transposed();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, d) = (cfg.batch, l2 * k);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..windows.len())).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();

        let mut noisy = Vec::with_capacity(b * d);
        let mut mask = Vec::with_capacity(b * d);
        let mut batch = DenoiserBatch {
            batch: b,
            cells: k,
            l1,
            l2,
            noisy: Vec::new(),
            v_co: Vec::with_capacity(b * l1 * k),
            m_co: Vec::with_capacity(b * l1 * k),
            pde: pde_cond.map(|_| Vec::with_capacity(b * d)),
            t: ts.clone(),
            step_valid: None,
        };
        let mut de = Vec::with_capacity(b * d);
        for (j, &i) in idx.iter().enumerate() {
            let (v0, m) = &targets[i];
            noisy.extend(sched.forward_noise(v0, ts[j], &eps[j * d..(j + 1) * d])?);
            mask.extend_from_slice(m);
            let p = &packs[i];
            batch.v_co.extend_from_slice(&p.v_co);
            batch.m_co.extend_from_slice(&p.m_co);
            if let (Some(dst), Some(src)) = (batch.pde.as_mut(), p.pde.as_ref()) {
                dst.extend_from_slice(src);
            }
            de.extend_from_slice(&p.v_de);
        }
        batch.noisy = noisy;

        let mut tape = Tape::new();
        let v_de = match (&deeponet, role) {
            (Some(m), DeepOnetRole::TrainableCondition) => {
                let ws: Vec<&WindowSample> = idx.iter().map(|&i| windows[i]).collect();
                m.forward_tape(&mut tape, &m.store.trainable(), &ws)?
            }
            _ => tape.constant(Tensor::new(vec![b, d], de)?),
        };
        let eps_hat = denoiser.forward(&mut tape, &denoiser.store.trainable(), &batch, v_de)?;
        let parts = step_loss_tape(&mut tape, eps_hat, &eps, &mask, &bt, omega, b, l2)?;
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {loss} at iteration {it} (steps {ts:?}, windows {idx:?}, l_eps {}, l_pde {})",
                parts.l_eps, parts.l_pde
            )));
        }
        let grads = tape.backward(parts.loss)?;
        if !grads.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {it} (steps {ts:?})")));
        }
        denoiser.store.adam_step(&grads, &adam)?;
        if role == DeepOnetRole::TrainableCondition {
            if let Some(m) = deeponet.as_mut() {
                m.store.adam_step(&grads, &adam)?;
            }
        }
        curve.push(LossRow { iter: it, loss, l_eps: parts.l_eps, l_pde: parts.l_pde });
        if (it + 1) % 100 == 0 {
            log::info!("iteration {}: loss {loss:.4} (l_eps {:.4}, l_pde {:.4})", it + 1, parts.l_eps, parts.l_pde);
        }
    }
    Ok(TrainOutcome { denoiser, deeponet, curve })
}
