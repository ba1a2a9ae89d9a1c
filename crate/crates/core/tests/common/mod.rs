//! Test oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grad_suite;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stepdiff::tensor::{ParamStore, Params, Tape, Tensor, Var};

/// Loss value with all parameters frozen.
pub fn eval_loss(store: &ParamStore, f: &dyn Fn(&mut Tape, &Params<'_>) -> Var) -> f64 {
    let mut tape = Tape::new();
    let l = f(&mut tape, &store.frozen());
    tape.value(l).item()
}

/// Central finite difference of the loss along a random direction against
/// the tape gradient projected on the same direction. Returns the relative error.
pub fn directional_check(
    store: &ParamStore,
    f: &dyn Fn(&mut Tape, &Params<'_>) -> Var,
    rng: &mut ChaCha8Rng,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let l = f(&mut tape, &store.trainable());
    let grads = tape.backward(l).expect("scalar loss");
    let mut plus = store.clone();
    let mut minus = store.clone();
    let mut analytic = 0.0;
    for (name, t) in store.iter() {
        let d: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(g) = grads.get(name) {
            analytic += g.data().iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        }
        let shift = |s: f64| {
            let data = t.data().iter().zip(&d).map(|(v, dv)| v + s * h * dv).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        plus.set(name, shift(1.0)).unwrap();
        minus.set(name, shift(-1.0)).unwrap();
    }
    let numeric = (eval_loss(&plus, f) - eval_loss(&minus, f)) / (2.0 * h);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Random tensor with entries in `(-a, a)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry matters.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, 1.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}
