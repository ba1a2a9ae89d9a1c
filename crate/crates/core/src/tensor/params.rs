use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Named parameters with their Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

/// A store bound for one forward pass; `trainable` decides whether the
/// tape tracks gradients for its parameters.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.m.insert(name.to_string(), Tensor::zeros(t.shape()));
        self.v.insert(name.to_string(), Tensor::zeros(t.shape()));
        self.params.insert(name.to_string(), Arc::new(t));
    }

    /// Glorot-uniform weights of shape `[fan_in, fan_out]`.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor { shape: vec![fan_in, fan_out], data });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.params.get(name).cloned()
    }

    /// Replaces a parameter's value, keeping its moments.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(old) if old.shape() == t.shape() => {
                *old = Arc::new(t);
                Ok(())
            }
            Some(old) => Err(Error::dim(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                old.shape(),
                t.shape()
            ))),
            None => Err(Error::Usage(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> Params<'_> {
        Params { store: self, trainable: true }
    }

    pub fn frozen(&self) -> Params<'_> {
        Params { store: self, trainable: false }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// One bias-corrected Adam update. Every parameter must have a gradient.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        for name in self.params.keys() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Usage(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != self.params[name].shape() {
                return Err(Error::dim(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    self.params[name].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            let w = Arc::make_mut(p).data_mut();
            for j in 0..w.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// FNV-1a over names and value bits; equal stores give equal sums.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Parameters as checkpoint records, each name prefixed.
    pub fn to_records(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_ref().clone()))
            .collect()
    }

    /// Loads every record whose name starts with `prefix`, stripping it.
    pub fn from_records(records: &BTreeMap<String, Tensor>, prefix: &str) -> Self {
        let mut s = ParamStore::new();
        for (k, v) in records {
            if let Some(rest) = k.strip_prefix(prefix) {
                s.insert(rest, v.clone());
            }
        }
        s
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn accumulate(&mut self, name: &str, t: Tensor) {
        match self.map.get_mut(name) {
            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(name.to_string(), t);
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.map {
            self.accumulate(&k, v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(3.0);
        let mut g = Grads::default();
        g.insert("w", Tensor::from_vec(vec![0.0]));
        s.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[3.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut g = Grads::default();
        g.insert("w", Tensor::from_vec(vec![1.0]));
        s.adam_step(&g, &AdamConfig::with_lr(0.1)).unwrap();
        assert!((s.get("w").unwrap().item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = scalar_store(0.0);
        let err = s.adam_step(&Grads::default(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn identical_steps_are_bit_identical() {
        let run = || {
            let mut s = scalar_store(0.25);
            let mut g = Grads::default();
            g.insert("w", Tensor::from_vec(vec![0.7]));
            for _ in 0..5 {
                s.adam_step(&g, &AdamConfig::default()).unwrap();
            }
            s.checksum()
        };
        assert_eq!(run(), run());
    }
}
