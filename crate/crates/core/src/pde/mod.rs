//! Discrete convection–diffusion on the grid.
//!
//! `A` is the five-point stencil with wind terms, `B = exp(Δτ A)` and
//! `C = Δτ φ₁(Δτ A)`, so one slice evolves as `V' = B V + C S`.

mod expm;
mod fit;
mod forecast;
mod source;

pub use expm::{identity, matmul, matrix_exponential, max_abs, norm_inf};
pub use fit::{fit_pde_params, FitLattice};
pub use forecast::{fill_slices, pde_forecast};
pub use source::{estimate_source, SourceEstimate, SOURCE_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::tensor::{gemm, Records, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Concentration outside the grid is zero.
    Absorbing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    /// Diffusion coefficient, m²/s.
    pub k: f64,
    /// Wind components per cell (flat `X*Y`, row-major), m/s.
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    /// Cell edge, meters.
    pub n: f64,
    /// Slice length, seconds.
    pub dt: f64,
    pub x: usize,
    pub y: usize,
    pub boundary: Boundary,
}

impl PdeParams {
    /// Spatially uniform wind on `grid`.
    pub fn uniform(grid: &GridSpec, k: f64, px: f64, py: f64) -> Self {
        let c = grid.cells();
        PdeParams {
            k,
            px: vec![px; c],
            py: vec![py; c],
            n: grid.cell_size,
            dt: grid.slice_length,
            x: grid.x,
            y: grid.y,
            boundary: Boundary::Absorbing,
        }
    }

    pub fn cells(&self) -> usize {
        self.x * self.y
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.k.is_finite()
            && self.n.is_finite()
            && self.dt.is_finite()
            && self.px.iter().chain(&self.py).all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("PDE parameters must be finite"));
        }
        if self.k < 0.0 || self.n <= 0.0 || self.dt <= 0.0 {
            return Err(Error::config(format!(
                "PDE needs K >= 0, n > 0, dt > 0 (got K={}, n={}, dt={})",
                self.k, self.n, self.dt
            )));
        }
        if self.x == 0 || self.y == 0 || self.px.len() != self.cells() || self.py.len() != self.cells() {
            return Err(Error::config(format!(
                "wind fields must have {} entries for a {}x{} grid",
                self.cells(),
                self.x,
                self.y
            )));
        }
        Ok(())
    }

    /// `(K, mean Px, mean Py)`; exact for uniform wind.
    pub fn summary(&self) -> (f64, f64, f64) {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (self.k, m(&self.px), m(&self.py))
    }
}

/// Immutable transition operator.
#[derive(Clone, Debug)]
pub struct PdeOperator {
    pub params: PdeParams,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Stencil matrix `A` (size `XY x XY`, row-major over flat cell index).
pub fn stencil(params: &PdeParams) -> Result<Vec<f64>> {
    params.validate()?;
    let (nx, ny) = (params.x, params.y);
    let m = nx * ny;
    let (k, n) = (params.k, params.n);
    let kn = k / (n * n);
    let idx = |x: usize, y: usize| x * ny + y;
    let px = |x: usize, y: usize| params.px[idx(x.min(nx - 1), y.min(ny - 1))];
    let py = |x: usize, y: usize| params.py[idx(x.min(nx - 1), y.min(ny - 1))];
    let mut a = vec![0.0; m * m];
    for x in 0..nx {
        for y in 0..ny {
            let r = idx(x, y) * m;
            a[r + idx(x, y)] =
                -4.0 * kn - (px(x + 1, y) - 2.0 * px(x, y) + py(x, y + 1) - 2.0 * py(x, y)) / n;
            if y + 1 < ny {
                a[r + idx(x, y + 1)] = kn - py(x, y) / n;
            }
            if x + 1 < nx {
                a[r + idx(x + 1, y)] = kn - px(x, y) / n;
            }
            if y > 0 {
                a[r + idx(x, y - 1)] = kn;
            }
            if x > 0 {
                a[r + idx(x - 1, y)] = kn;
            }
        }
    }
    Ok(a)
}

pub fn build_transition(params: &PdeParams) -> Result<PdeOperator> {
    let a = stencil(params)?;
    let (b, c) = matrix_exponential(params.cells(), &a, params.dt)?;
    if b.iter().chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("transition matrices overflowed".into()));
    }
    Ok(PdeOperator { params: params.clone(), a, b, c })
}

impl PdeOperator {
    pub fn cells(&self) -> usize {
        self.params.cells()
    }

    /// `B v`.
    pub fn apply_b(&self, v: &[f64]) -> Vec<f64> {
        let m = self.cells();
        let mut out = vec![0.0; m];
        gemm(m, m, 1, &self.b, false, v, false, &mut out, false);
        out
    }

    /// One slice forward: `B v + C s`.
    pub fn evolve(&self, v: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let m = self.cells();
        if v.len() != m || s.len() != m {
            return Err(Error::dim(format!(
                "evolve needs slices of {m} cells, got v={} s={}",
                v.len(),
                s.len()
            )));
        }
        let mut out = vec![0.0; m];
        gemm(m, m, 1, &self.b, false, v, false, &mut out, false);
        gemm(m, m, 1, &self.c, false, s, false, &mut out, true);
        Ok(out)
    }

    /// Applies `B` to each of `rows` stacked slices: `out[l] = B v[l]`.
    pub fn apply_b_rows(&self, rows: usize, v: &[f64]) -> Vec<f64> {
        let m = self.cells();
        let mut out = vec![0.0; rows * m];
        gemm(rows, m, m, v, false, &self.b, true, &mut out, false);
        out
    }

    /// `B` transposed, as a `[cells, cells]` tensor (for row-vector products).
    pub fn b_transposed(&self) -> Tensor {
        let m = self.cells();
        let mut t = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                t[j * m + i] = self.b[i * m + j];
            }
        }
        Tensor::new(vec![m, m], t).expect("square")
    }

    /// `max |A C - (B - I)|`.
    pub fn identity_residual(&self) -> f64 {
        let m = self.cells();
        let ac = matmul(m, &self.a, &self.c);
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let bi = self.b[i * m + j] - if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ac[i * m + j] - bi).abs());
            }
        }
        worst
    }

    pub fn to_records(&self) -> Records {
        let m = self.cells();
        let mut r = Records::new();
        for (name, d) in [("pde.A", &self.a), ("pde.B", &self.b), ("pde.C", &self.c)] {
            r.insert(name.to_string(), Tensor::new(vec![m, m], d.clone()).expect("square"));
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(x: usize, y: usize, k: f64, n: f64, px: f64, py: f64) -> PdeParams {
        let g = GridSpec { x, y, cell_size: n, slice_length: 1.0, ..GridSpec::default() };
        PdeParams::uniform(&g, k, px, py)
    }

    #[test]
    fn pure_diffusion_entries() {
        let a = stencil(&params(2, 2, 1.0, 1.0, 0.0, 0.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (xi, yi, xj, yj): (usize, usize, usize, usize) = (i / 2, i % 2, j / 2, j % 2);
                let adj = xi.abs_diff(xj) + yi.abs_diff(yj) == 1;
                let want = if i == j { -4.0 } else if adj { 1.0 } else { 0.0 };
                assert_eq!(a[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn advective_neighbour_entry() {
        let p = params(3, 3, 0.5, 500.0, 2.0, 0.0);
        let a = stencil(&p).unwrap();
        // (x, y) = (0, 1) and its +x neighbour (1, 1).
        let (i, j) = (1, 4);
        assert!((a[i * 9 + j] - (-0.003998)).abs() < 1e-15);
    }

    #[test]
    fn zero_dynamics() {
        let mut p = params(3, 2, 0.0, 500.0, 0.0, 0.0);
        p.dt = 3600.0;
        let op = build_transition(&p).unwrap();
        assert!(op.a.iter().all(|&v| v == 0.0));
        assert_eq!(op.b, identity(6));
        let want: Vec<f64> = identity(6).iter().map(|v| v * 3600.0).collect();
        assert_eq!(op.c, want);
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(op.evolve(&v, &[0.0; 6]).unwrap(), v);
        let grown = op.evolve(&v, &[0.001; 6]).unwrap();
        for (g, v) in grown.iter().zip(&v) {
            assert!((g - v - 3.6).abs() < 1e-12);
        }
    }

    #[test]
    fn hotspot_spreads() {
        let mut p = params(5, 5, 1.0, 1.0, 0.0, 0.0);
        p.dt = 0.05;
        let op = build_transition(&p).unwrap();
        let mut v = vec![0.0; 25];
        v[12] = 10.0;
        let next = op.evolve(&v, &[0.0; 25]).unwrap();
        assert!(next[12] < 10.0);
        for j in [7, 11, 13, 17] {
            assert!(next[j] > 0.0);
        }
        let dense = matmul(25, &op.b, &{
            let mut m = vec![0.0; 625];
            for (i, x) in v.iter().enumerate() {
                m[i * 25] = *x;
            }
            m
        });
        for i in 0..25 {
            assert!((dense[i * 25] - next[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_params_are_config_errors() {
        let mut p = params(2, 2, 1.0, 1.0, 0.0, 0.0);
        p.k = f64::NAN;
        assert!(matches!(build_transition(&p), Err(Error::Config(_))));
        p.k = -1.0;
        assert!(matches!(build_transition(&p), Err(Error::Config(_))));
    }
}
