//! `exp(Z)` and `φ₁(Z) = Σ Zᵏ/(k+1)!` for dense square matrices by scaling
//! and squaring. `φ₁` never forms `Z⁻¹`, so singular matrices are fine.

use crate::error::{Error, Result};
use crate::tensor::gemm;

/// Row-major `n x n` product.
pub fn matmul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    gemm(n, n, n, a, false, b, false, &mut c, false);
    c
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Max absolute row sum.
pub fn norm_inf(n: usize, a: &[f64]) -> f64 {
    a.chunks(n.max(1)).map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `(exp(dt·A), dt·φ₁(dt·A))` for an `n x n` matrix `a` given as `n*n` values.
pub fn matrix_exponential(n: usize, a: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::dim(format!("matrix has {} entries, not square {n}x{n}", a.len())));
    }
    if !dt.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential of non-finite input".into()));
    }
    let norm = norm_inf(n, a) * dt.abs();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let h = dt / f64::powi(2.0, s as i32);
    let y: Vec<f64> = a.iter().map(|v| v * h).collect();

    // exp(Y) = Σ Yᵏ/k!, φ₁(Y) = Σ Yᵏ/(k+1)!; ‖Y‖ ≤ 0.5 so 20 terms reach round-off.
    let mut e = identity(n);
    let mut p = identity(n);
    let mut pow = identity(n);
    let mut fact = 1.0;
    for k in 1..=20 {
        pow = matmul(n, &pow, &y);
        fact *= k as f64;
        let inv_e = 1.0 / fact;
        let inv_p = inv_e / (k + 1) as f64;
        for j in 0..n * n {
            e[j] += pow[j] * inv_e;
            p[j] += pow[j] * inv_p;
        }
        if max_abs(&pow) * inv_e < 1e-18 {
            break;
        }
    }
    // φ₁(2Y) = φ₁(Y)(exp(Y) + I)/2, exp(2Y) = exp(Y)².
    for _ in 0..s {
        let mut ei = e.clone();
        for i in 0..n {
            ei[i * n + i] += 1.0;
        }
        p = matmul(n, &p, &ei);
        p.iter_mut().for_each(|v| *v *= 0.5);
        e = matmul(n, &e, &e);
    }
    p.iter_mut().for_each(|v| *v *= dt);
    Ok((e, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix() {
        let (b, c) = matrix_exponential(3, &[0.0; 9], 7.0).unwrap();
        assert_eq!(b, identity(3));
        let want: Vec<f64> = identity(3).iter().map(|v| v * 7.0).collect();
        assert_eq!(c, want);
    }

    #[test]
    fn diagonal_closed_form() {
        let d = [-3.0, -0.5, 0.0, 0.25, 2.0];
        let n = d.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = d[i];
        }
        let (b, c) = matrix_exponential(n, &a, 1.0).unwrap();
        for i in 0..n {
            let e = d[i].exp();
            let phi = if d[i] == 0.0 { 1.0 } else { (e - 1.0) / d[i] };
            assert!((b[i * n + i] - e).abs() < 1e-13 * e.max(1.0));
            assert!((c[i * n + i] - phi).abs() < 1e-13 * phi.max(1.0));
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(matrix_exponential(2, &[1.0; 5], 1.0), Err(Error::Dimension(_))));
    }
}
