use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pde::PdeOperator;
use crate::tensor::{Tape, Tensor, Var};

/// Loss node plus the values of its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub l_eps: f64,
    pub l_pde: f64,
}

/// Rows `(b, l+1)` of `target` minus `B` applied to rows `(b, l)` of `pred`,
/// for `l` in `0..l2-1`. Both inputs are `[batch * l2, cells]`; `bt` is `Bᵀ`.
pub(crate) fn pde_residual(tape: &mut Tape, bt: Var, pred: Var, target: Var, batch: usize, l2: usize) -> Result<Var> {
    let evolved = tape.matmul(pred, bt)?;
    let prev: Vec<usize> = (0..batch).flat_map(|b| (0..l2 - 1).map(move |l| b * l2 + l)).collect();
    let next: Vec<usize> = prev.iter().map(|r| r + 1).collect();
    let evolved = tape.gather_rows(evolved, Arc::new(prev))?;
    let target = tape.gather_rows(target, Arc::new(next))?;
    tape.sub(target, evolved)
}

/// Residual of standardised fields `z = (v - μ) / σ` measured in raw units
/// over `σ`: `z^{l+1} - B z^l + (μ/σ)(1 - B·1)`. `z` is `[batch, l2 * cells]`.
pub fn pde_residual_standardized(
    tape: &mut Tape,
    op: &PdeOperator,
    z: Var,
    batch: usize,
    l2: usize,
    shift: f64,
) -> Result<Var> {
    let k = op.cells();
    let z = tape.reshape(z, &[batch * l2, k])?;
    let bt = tape.constant(op.b_transposed());
    let r = pde_residual(tape, bt, z, z, batch, l2)?;
    if shift == 0.0 {
        return Ok(r);
    }
    let row_sums = op.apply_b(&vec![1.0; k]);
    let offset = Tensor::from_vec(row_sums.iter().map(|s| shift * (1.0 - s)).collect());
    let offset = tape.constant(offset);
    tape.add_bias(r, offset)
}

/// `L_ε + ω L_PDE` on the tape.
///
/// `eps_hat` is `[batch * l2, cells]`; `eps` and `mask` are the matching flat
/// arrays. `L_PDE` compares `ε^{l+1}` against `B ε̂^l` and is weighted by the
/// mask of slice `l+1`.
#[allow(clippy::too_many_arguments)]
pub fn step_loss_tape(
    tape: &mut Tape,
    eps_hat: Var,
    eps: &[f64],
    mask: &[f64],
    bt: &Tensor,
    omega: f64,
    batch: usize,
    l2: usize,
) -> Result<LossParts> {
    if !(omega >= 0.0) {
        return Err(Error::config(format!("omega must be >= 0, got {omega}")));
    }
    let (rows, k) = tape.value(eps_hat).as_matrix_dims();
    if rows != batch * l2 || eps.len() != rows * k || mask.len() != eps.len() {
        return Err(Error::dim(format!(
            "loss inputs disagree: eps_hat [{rows}, {k}], eps {}, mask {}, batch {batch} x {l2} slices",
            eps.len(),
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    if total == 0.0 {
        return Err(Error::InsufficientData("no observed target entries in the loss".into()));
    }
    let e = tape.constant(Tensor::new(vec![rows, k], eps.to_vec())?);
    let m = tape.constant(Tensor::new(vec![rows, k], mask.to_vec())?);
    let d = tape.sub(e, eps_hat)?;
    let d2 = tape.mul(d, d)?;
    let d2 = tape.mul(d2, m)?;
    let s = tape.sum(d2);
    let l_eps = tape.scale(s, 1.0 / total);
    let l_eps_val = tape.value(l_eps).item();

    let later: Vec<f64> = (0..batch).flat_map(|b| mask[(b * l2 + 1) * k..(b + 1) * l2 * k].iter().copied()).collect();
    let later_total: f64 = later.iter().sum();
    if l2 < 2 || later_total == 0.0 {
        return Ok(LossParts { loss: l_eps, l_eps: l_eps_val, l_pde: 0.0 });
    }
    let btv = tape.constant(bt.clone());
    let r = pde_residual(tape, btv, eps_hat, e, batch, l2)?;
    let lm = tape.constant(Tensor::new(vec![batch * (l2 - 1), k], later)?);
    let r2 = tape.mul(r, r)?;
    let r2 = tape.mul(r2, lm)?;
    let s = tape.sum(r2);
    let l_pde = tape.scale(s, 1.0 / later_total);
    let l_pde_val = tape.value(l_pde).item();
    let weighted = tape.scale(l_pde, omega);
    let loss = tape.add(l_eps, weighted)?;
    Ok(LossParts { loss, l_eps: l_eps_val, l_pde: l_pde_val })
}

/// Value of the loss for one window: arrays are `l2 * cells`, slice-major.
pub fn step_loss(eps_t: &[f64], eps_hat: &[f64], op: &PdeOperator, omega: f64, m_ta: &[bool]) -> Result<f64> {
    let k = op.cells();
    if k == 0 || !eps_t.len().is_multiple_of(k) || eps_hat.len() != eps_t.len() || m_ta.len() != eps_t.len() {
        return Err(Error::dim(format!(
            "step_loss needs matching multiples of {k} cells (eps {}, eps_hat {}, mask {})",
            eps_t.len(),
            eps_hat.len(),
            m_ta.len()
        )));
    }
    let l2 = eps_t.len() / k;
    let mut tape = Tape::new();
    let hat = tape.constant(Tensor::new(vec![l2, k], eps_hat.to_vec())?);
    let mask: Vec<f64> = m_ta.iter().map(|&m| m as u8 as f64).collect();
    let parts = step_loss_tape(&mut tape, hat, eps_t, &mask, &op.b_transposed(), omega, 1, l2)?;
    Ok(tape.value(parts.loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::pde::{build_transition, PdeParams};

    fn identity_op(cells_x: usize) -> PdeOperator {
        let g = GridSpec { x: cells_x, y: 1, ..GridSpec::default() };
        build_transition(&PdeParams::uniform(&g, 0.0, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn omega_zero_is_masked_mse() {
        let op = identity_op(2);
        let eps = [1.0, 2.0, 3.0, 4.0];
        let hat = [0.0, 2.0, 1.0, 0.0];
        let mask = [true, true, true, false];
        // (1 + 0 + 4) / 3
        let l = step_loss(&eps, &hat, &op, 0.0, &mask).unwrap();
        assert!((l - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn alternating_noise_with_identity_b() {
        let op = identity_op(3);
        let eps = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let l = step_loss(&eps, &eps, &op, 1.0, &[true; 6]).unwrap();
        assert!((l - 4.0).abs() < 1e-15);
        let flat = [0.5; 6];
        assert_eq!(step_loss(&flat, &flat, &op, 3.0, &[true; 6]).unwrap(), 0.0);
    }

    #[test]
    fn consistent_noise_gives_zero() {
        let g = GridSpec { x: 3, y: 3, cell_size: 1.0, slice_length: 0.1, ..GridSpec::default() };
        let op = build_transition(&PdeParams::uniform(&g, 1.0, 0.5, -0.5)).unwrap();
        let first: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let second = op.apply_b(&first);
        let third = op.apply_b(&second);
        let eps: Vec<f64> = [first, second, third].concat();
        let l = step_loss(&eps, &eps, &op, 5.0, &[true; 27]).unwrap();
        assert!(l.abs() < 1e-24);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let op = identity_op(2);
        assert!(matches!(step_loss(&[0.0; 4], &[0.0; 4], &op, 1.0, &[false; 4]), Err(Error::InsufficientData(_))));
    }
}
