use super::source::{estimate_source, SOURCE_WINDOW};
use super::PdeOperator;
use crate::error::{Error, Result};
use crate::grid::MaskedField;

/// Each slice with its gaps set to that slice's observed mean. An empty
/// slice repeats the previous filled slice; empty slices before the first
/// observation stay `None`.
pub fn fill_slices(field: &MaskedField) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(field.slices);
    for l in 0..field.slices {
        let (v, m) = (field.slice_values(l), field.slice_mask(l));
        let n = m.iter().filter(|&&b| b).count();
        if n == 0 {
            let prev = out.last().cloned().flatten();
            out.push(prev);
            continue;
        }
        let mean = v.iter().zip(m).filter(|(_, &b)| b).map(|(x, _)| x).sum::<f64>() / n as f64;
        out.push(Some(v.iter().zip(m).map(|(&x, &b)| if b { x } else { mean }).collect()));
    }
    out
}

/// PDE-only forecast of `horizon` slices after the history `v_co`.
///
/// Returns `horizon * cells` values, slice-major.
pub fn pde_forecast(v_co: &MaskedField, op: &PdeOperator, horizon: usize) -> Result<Vec<f64>> {
    let filled = fill_slices(v_co);
    let mut v = filled
        .last()
        .cloned()
        .flatten()
        .ok_or_else(|| Error::InsufficientData("no observations to anchor forecast".into()))?;
    let s = estimate_source(v_co, op, SOURCE_WINDOW)?.s;
    let mut out = Vec::with_capacity(horizon * v.len());
    for _ in 0..horizon {
        v = op.evolve(&v, &s)?;
        out.extend_from_slice(&v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::pde::{build_transition, PdeParams};

    fn grid() -> GridSpec {
        GridSpec { x: 4, y: 4, ..GridSpec::default() }
    }

    #[test]
    fn constant_field_stays_constant() {
        let g = grid();
        let op = build_transition(&PdeParams::uniform(&g, 0.0, 0.0, 0.0)).unwrap();
        let h = MaskedField::observed(g, 5, vec![30.0; 80]).unwrap();
        let f = pde_forecast(&h, &op, 3).unwrap();
        assert!(f.iter().all(|&v| (v - 30.0).abs() < 1e-12));

        let mut half = h.clone();
        for (i, m) in half.mask.iter_mut().enumerate() {
            *m = i % 2 == 0;
        }
        half.clear_unobserved();
        assert_eq!(pde_forecast(&half, &op, 3).unwrap(), f);
    }

    #[test]
    fn empty_history_is_an_error() {
        let g = grid();
        let op = build_transition(&PdeParams::uniform(&g, 0.0, 0.0, 0.0)).unwrap();
        let err = pde_forecast(&MaskedField::empty(g, 4), &op, 2).unwrap_err();
        assert!(err.to_string().contains("no observations to anchor forecast"));
    }

    #[test]
    fn empty_slices_carry_previous() {
        let g = grid();
        let mut f = MaskedField::empty(g, 3);
        f.mask[0] = true;
        f.values[0] = 8.0;
        let filled = fill_slices(&f);
        assert_eq!(filled[0].as_ref().unwrap(), &vec![8.0; 16]);
        assert_eq!(filled[2], filled[0]);
        assert!(fill_slices(&MaskedField::empty(g, 2)).iter().all(Option::is_none));
    }
}
