use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ConditionPack, Denoiser, DenoiserBatch, NoiseSchedule, Norm};
use crate::error::{Error, Result};
use crate::par;

fn window_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Ancestral sampling for one window, averaged over `samples` draws.
///
/// Returns `L2 * cells` raw values clamped at zero.
pub fn sample_window(
    denoiser: &Denoiser,
    cond: &ConditionPack,
    sched: &NoiseSchedule,
    norm: &Norm,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::config("samples must be >= 1"));
    }
    let d = cond.l2 * cond.cells;
    let b = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
    let rep = |x: &[f64]| x.iter().copied().cycle().take(b * x.len()).collect::<Vec<f64>>();
    let v_de = rep(&cond.v_de);
    let mut batch = DenoiserBatch {
        batch: b,
        cells: cond.cells,
        l1: cond.l1,
        l2: cond.l2,
        noisy: Vec::new(),
        v_co: rep(&cond.v_co),
        m_co: cond.m_co.iter().copied().cycle().take(b * cond.m_co.len()).collect(),
        pde: cond.pde.as_deref().map(rep),
        t: Vec::new(),
        step_valid: None,
    };
    for t in (1..=sched.steps()).rev() {
        batch.t = vec![t; b];
        batch.noisy = v;
        let eps_hat = denoiser.predict(&batch, &v_de)?;
        let z: Vec<f64> = if t > 1 { (0..b * d).map(|_| rng.sample(StandardNormal)).collect() } else { Vec::new() };
        v = sched.reverse_step(&batch.noisy, &eps_hat, t, &z)?;
    }
    let mut out = vec![0.0; d];
    for draw in v.chunks(d) {
        for (o, &z) in out.iter_mut().zip(draw) {
            *o += norm.raw(z).max(0.0);
        }
    }
    out.iter_mut().for_each(|o| *o /= b as f64);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampled forecast is not finite".into()));
    }
    Ok(out)
}

/// Samples every window; window `i` draws from its own stream derived from `seed`.
pub fn sample(
    denoiser: &Denoiser,
    conds: &[ConditionPack],
    sched: &NoiseSchedule,
    norm: &Norm,
    samples: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    par::try_map(jobs, conds, |i, c| sample_window(denoiser, c, sched, norm, samples, window_seed(seed, i)))
}
