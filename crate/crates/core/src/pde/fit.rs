use std::collections::HashMap;

use super::forecast::fill_slices;
use super::{build_transition, PdeParams};
use crate::error::{Error, Result};
use crate::grid::MaskedField;
use crate::tensor::gemm;

/// Candidate values for the coordinate search.
#[derive(Clone, Debug, PartialEq)]
pub struct FitLattice {
    pub k_values: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl Default for FitLattice {
    fn default() -> Self {
        FitLattice {
            k_values: (0..=40).map(|i| i as f64 * 0.5).collect(),
            p_values: (-3..=3).map(|i| i as f64).collect(),
        }
    }
}

const MIN_PAIRS: usize = 10;

/// Fits scalar `K` and uniform `(Px, Py)` by cyclic coordinate search on the
/// lattice, minimising the masked one-step error with `S = 0`.
///
/// The search starts at the lattice point nearest zero; among equal errors
/// the smaller `‖(K, P)‖` wins.
pub fn fit_pde_params(field: &MaskedField, lattice: &FitLattice) -> Result<PdeParams> {
    if lattice.k_values.is_empty() || lattice.p_values.is_empty() {
        return Err(Error::config("fit lattice is empty"));
    }
    let m = field.cells();
    let filled = fill_slices(field);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for l in 0..field.slices.saturating_sub(1) {
        let Some(v) = &filled[l] else { continue };
        let (ma, mb) = (field.slice_mask(l), field.slice_mask(l + 1));
        if !(0..m).any(|i| ma[i] && mb[i]) {
            continue;
        }
        inputs.extend_from_slice(v);
        targets.extend_from_slice(field.slice_values(l + 1));
        weights.extend(mb.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    let pairs = inputs.len() / m.max(1);
    if pairs < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "PDE fit needs {MIN_PAIRS} slice pairs with joint observations, found {pairs}"
        )));
    }

    let base = PdeParams::uniform(&field.grid, 0.0, 0.0, 0.0);
    let lists = [&lattice.k_values, &lattice.p_values, &lattice.p_values];
    let point = |idx: [usize; 3]| [lists[0][idx[0]], lists[1][idx[1]], lists[2][idx[2]]];
    let mut cache: HashMap<[usize; 3], f64> = HashMap::new();
    let mut error = |idx: [usize; 3]| -> Result<f64> {
        if let Some(&e) = cache.get(&idx) {
            return Ok(e);
        }
        let [k, px, py] = point(idx);
        if k < 0.0 {
            return Ok(f64::INFINITY);
        }
        let mut p = base.clone();
        p.k = k;
        p.px.iter_mut().for_each(|v| *v = px);
        p.py.iter_mut().for_each(|v| *v = py);
        let e = match build_transition(&p) {
            Ok(op) => {
                let mut pred = vec![0.0; pairs * m];
                gemm(pairs, m, m, &inputs, false, &op.b, true, &mut pred, false);
                let sse: f64 = pred
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((p, t), w)| w * (p - t) * (p - t))
                    .sum();
                if sse.is_finite() { sse } else { f64::INFINITY }
            }
            Err(Error::Numerical(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        cache.insert(idx, e);
        Ok(e)
    };
    let norm = |idx: [usize; 3]| point(idx).iter().map(|v| v * v).sum::<f64>();
    let nearest_zero = |vals: &[f64]| {
        (0..vals.len()).min_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs())).expect("non-empty")
    };
    let mut cur = [nearest_zero(lists[0]), nearest_zero(lists[1]), nearest_zero(lists[2])];
    let mut cur_err = error(cur)?;
    let better = |e: f64, n: f64, best_e: f64, best_n: f64| {
        if !best_e.is_finite() || !e.is_finite() {
            return e < best_e || (e == best_e && n < best_n);
        }
        let tol = 1e-12 * best_e.abs().max(e.abs());
        e < best_e - tol || ((e - best_e).abs() <= tol && n < best_n)
    };
    loop {
        let mut changed = false;
        for coord in 0..3 {
            for i in 0..lists[coord].len() {
                let mut cand = cur;
                cand[coord] = i;
                let e = error(cand)?;
                if better(e, norm(cand), cur_err, norm(cur)) {
                    cur = cand;
                    cur_err = e;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let [k, px, py] = point(cur);
    log::debug!("PDE fit: K={k} P=({px}, {py}) sse={cur_err:.6e}");
    Ok(PdeParams::uniform(&field.grid, k, px, py))
}
