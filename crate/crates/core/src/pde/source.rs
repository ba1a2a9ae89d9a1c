use super::forecast::fill_slices;
use super::PdeOperator;
use crate::error::{Error, Result};
use crate::grid::MaskedField;

/// Trailing transitions used for the source fit.
pub const SOURCE_WINDOW: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceEstimate {
    /// Source per cell, µg/(m³·s).
    pub s: Vec<f64>,
    /// Transitions that contributed rows.
    pub window_used: usize,
}

/// Least-squares constant source over the last `window` transitions of `history`.
///
/// For each transition `l -> l+1` the residual `V^{l+1} - B V^l` (with `V^l`
/// mean-filled) is matched by `C S` on the cells observed at both slices.
pub fn estimate_source(history: &MaskedField, op: &PdeOperator, window: usize) -> Result<SourceEstimate> {
    let m = op.cells();
    if history.cells() != m {
        return Err(Error::dim(format!(
            "history has {} cells, operator has {m}",
            history.cells()
        )));
    }
    let filled = fill_slices(history);
    let l_end = history.slices;
    let first = l_end.saturating_sub(window + 1);
    let mut normal = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    let mut used = 0;
    for l in first..l_end.saturating_sub(1) {
        let Some(v) = &filled[l] else { continue };
        let (ma, mb) = (history.slice_mask(l), history.slice_mask(l + 1));
        let rows: Vec<usize> = (0..m).filter(|&i| ma[i] && mb[i]).collect();
        if rows.is_empty() {
            continue;
        }
        used += 1;
        let bv = op.apply_b(v);
        let next = history.slice_values(l + 1);
        for &i in &rows {
            let r = next[i] - bv[i];
            let crow = &op.c[i * m..(i + 1) * m];
            for p in 0..m {
                rhs[p] += crow[p] * r;
                let cp = crow[p];
                if cp != 0.0 {
                    let nrow = &mut normal[p * m..(p + 1) * m];
                    for (q, nv) in nrow.iter_mut().enumerate() {
                        *nv += cp * crow[q];
                    }
                }
            }
        }
    }
    if used == 0 {
        return Ok(SourceEstimate { s: vec![0.0; m], window_used: 0 });
    }
    let s = match cholesky_solve(m, &normal, &rhs) {
        Some(s) => s,
        None => {
            let max_diag = (0..m).map(|i| normal[i * m + i]).fold(0.0, f64::max);
            let lambda = 1e-8 * max_diag.max(f64::MIN_POSITIVE);
            log::info!("source normal equations are rank deficient; ridge {lambda:.3e} applied");
            let mut reg = normal.clone();
            for i in 0..m {
                reg[i * m + i] += lambda;
            }
            cholesky_solve(m, &reg, &rhs)
                .ok_or_else(|| Error::Numerical("source least squares failed after ridge".into()))?
        }
    };
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("source estimate is not finite".into()));
    }
    Ok(SourceEstimate { s, window_used: used })
}

/// Solves `A x = b` for symmetric positive definite `A`; `None` when a pivot
/// falls below `1e-12` of the largest diagonal entry.
fn cholesky_solve(n: usize, a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    let floor = 1e-12 * max_diag;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= floor {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}
