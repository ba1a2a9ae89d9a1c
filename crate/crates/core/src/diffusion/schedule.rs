use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise levels for `T` diffusion steps. Step `t` (1-based) lives at index `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    /// `α̂_t = 1 - β_t`.
    pub alpha_hat: Vec<f64>,
    /// `α_t = Π_{i<=t} α̂_i`.
    pub alpha: Vec<f64>,
    /// Posterior variance; `β̃_1 = β_1`.
    pub beta_tilde: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.5;

/// Quadratic schedule: `β_t` interpolates linearly in `√β` between the ends.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("diffusion needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "schedule needs 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let (a, b) = (beta_min.sqrt(), beta_max.sqrt());
    let beta = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let s = a + f * (b - a);
            s * s
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alpha_hat: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha_hat {
            acc *= a;
            alpha.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| if i == 0 { beta[0] } else { (1.0 - alpha[i - 1]) / (1.0 - alpha[i]) * beta[i] })
            .collect();
        Ok(NoiseSchedule { beta, alpha_hat, alpha, beta_tilde })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    /// `v_t = √α_t v0 + √(1-α_t) ε`.
    pub fn forward_noise(&self, v0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        if v0.len() != eps.len() {
            return Err(Error::dim(format!("v0 has {} entries, noise has {}", v0.len(), eps.len())));
        }
        let (a, s) = (self.alpha[i].sqrt(), (1.0 - self.alpha[i]).sqrt());
        Ok(v0.iter().zip(eps).map(|(v, e)| a * v + s * e).collect())
    }

    /// `(μ, σ)` of `p(v_{t-1} | v_t)` given the predicted noise.
    pub fn reverse_mean(&self, v_t: &[f64], eps_hat: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        let i = self.check(t)?;
        if v_t.len() != eps_hat.len() {
            return Err(Error::dim(format!("v_t has {} entries, eps_hat has {}", v_t.len(), eps_hat.len())));
        }
        let c = self.beta[i] / (1.0 - self.alpha[i]).sqrt();
        let inv = 1.0 / self.alpha_hat[i].sqrt();
        let mu = v_t.iter().zip(eps_hat).map(|(v, e)| inv * (v - c * e)).collect();
        Ok((mu, self.beta_tilde[i].sqrt()))
    }

    /// One ancestral step; `z` is ignored at `t = 1`.
    pub fn reverse_step(&self, v_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        let (mut mu, sigma) = self.reverse_mean(v_t, eps_hat, t)?;
        if t > 1 {
            if z.len() != mu.len() {
                return Err(Error::dim("reverse step noise has the wrong length"));
            }
            mu.iter_mut().zip(z).for_each(|(m, z)| *m += sigma * z);
        }
        Ok(mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_hat[0] - 0.9).abs() < 1e-15 && (s.alpha_hat[1] - 0.8).abs() < 1e-15);
        assert!((s.alpha[0] - 0.9).abs() < 1e-15 && (s.alpha[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.beta_tilde[0], 0.1);
        // (1 - 0.9) / (1 - 0.72) * 0.2
        assert!((s.beta_tilde[1] - 0.1 / 0.28 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn default_schedule() {
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        assert_eq!(s.beta.len(), 50);
        assert!((s.beta[0] - 1e-4).abs() < 1e-18);
        assert!((s.beta[49] - 0.5).abs() < 1e-15);
        assert!(s.alpha.windows(2).all(|w| w[1] < w[0]));
        let last = s.alpha[49];
        assert!(last > 0.0 && last < 0.01, "alpha_T = {last}");
        assert!((last - 3.354078875408495e-5).abs() < 1e-15, "alpha_T = {last}");
        assert_eq!(s.beta_tilde[0], s.beta[0]);
    }

    #[test]
    fn invalid_ranges() {
        assert!(matches!(build_schedule(50, 0.5, 0.1), Err(Error::Config(_))));
        assert!(matches!(build_schedule(50, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(build_schedule(50, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn noise_edge_cases() {
        let s = build_schedule(10, 1e-4, 0.3).unwrap();
        let a = s.alpha[3];
        let v = s.forward_noise(&[2.0, -1.0], 4, &[0.0, 0.0]).unwrap();
        assert_eq!(v, vec![2.0 * a.sqrt(), -a.sqrt()]);
        let v = s.forward_noise(&[0.0], 4, &[1.5]).unwrap();
        assert_eq!(v, vec![1.5 * (1.0 - a).sqrt()]);
        assert!(matches!(s.forward_noise(&[0.0], 0, &[0.0]), Err(Error::Usage(_))));
        assert!(matches!(s.forward_noise(&[0.0], 11, &[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn single_step_inversion() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let v = s.reverse_step(&[0.7, -2.0], &[0.0, 0.0], 1, &[]).unwrap();
        let k = 1.0 / 0.7f64.sqrt();
        assert!((v[0] - 0.7 * k).abs() < 1e-15 && (v[1] + 2.0 * k).abs() < 1e-15);
    }

    #[test]
    fn exact_noise_recovers_v0_at_t1() {
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        let v0 = [1.25, -0.5, 3.0];
        let eps = [0.3, -1.1, 0.7];
        let v1 = s.forward_noise(&v0, 1, &eps).unwrap();
        let back = s.reverse_step(&v1, &eps, 1, &[]).unwrap();
        for (b, v) in back.iter().zip(&v0) {
            assert!((b - v).abs() < 1e-12);
        }
    }
}
