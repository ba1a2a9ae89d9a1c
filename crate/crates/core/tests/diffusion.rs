use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stepdiff::deeponet::{DeepOnet, DeepOnetConfig};
use stepdiff::diffusion::{
    build_schedule, train, ConditionPack, Denoiser, DenoiserBatch, DenoiserConfig, IntegrationMode, Norm,
    TrainRunConfig, MODE_IDS,
};
use stepdiff::grid::{sliding_windows, GridSpec, MaskedField};
use stepdiff::pde::{build_transition, PdeParams};
use stepdiff::pipeline::{fit, PipelineConfig};
use stepdiff::tensor::encode_stpc;

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig { channels: 8, heads: 2, layers: 1, ff: 8, pde_channel: false, seed: 0 }
}

fn tiny_pipeline(mode: &str, iterations: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig { l1: 4, l2: 4, ..PipelineConfig::default() };
    cfg.train.iterations = iterations;
    cfg.train.mode = IntegrationMode::from_id(mode).unwrap();
    cfg.train.denoiser = tiny_denoiser();
    cfg.train.steps = 10;
    cfg.deeponet = DeepOnetConfig { p: 4, hidden: vec![16], epochs: 2, ..DeepOnetConfig::default() };
    cfg
}

fn random_field(seed: u64, slices: usize) -> MaskedField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GridSpec { x: 3, y: 3, ..GridSpec::default() };
    let n = slices * g.cells();
    let values = (0..n).map(|i| 30.0 + 10.0 * ((i / 9) as f64 * 0.3).sin() + rng.random_range(0.0..5.0)).collect();
    let mask = (0..n).map(|_| rng.random_bool(0.6)).collect();
    MaskedField::new(g, slices, values, mask).unwrap()
}

#[test]
fn forward_marginal_matches_gaussian() {
    let s = build_schedule(50, 1e-4, 0.5).unwrap();
    let n = 100_000;
    let v0 = vec![1.7; n];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 25, 50] {
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let vt = s.forward_noise(&v0, t, &eps).unwrap();
        let a = s.alpha[t - 1];
        let mean = vt.iter().sum::<f64>() / n as f64;
        let var = vt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (want_mean, want_var) = (a.sqrt() * 1.7, 1.0 - a);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "t={t} mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "t={t} var {var} vs {want_var}");
    }
}

#[test]
fn zero_iterations_return_the_initialisation() {
    let f = random_field(1, 20);
    let windows = sliding_windows(&f, 4, 4).unwrap();
    let op = build_transition(&PdeParams::uniform(&f.grid, 20.0, -0.1, -0.05)).unwrap();
    let cfg = TrainRunConfig {
        iterations: 0,
        denoiser: tiny_denoiser(),
        mode: IntegrationMode::from_id("diff").unwrap(),
        ..TrainRunConfig::default()
    };
    let out = train(&windows, Norm::from_field(&f).unwrap(), None, &op, &cfg).unwrap();
    // Training seeds the denoiser with `seed + 1`.
    let fresh = Denoiser::new(&DenoiserConfig { seed: 1, ..tiny_denoiser() }, 9).unwrap();
    assert_eq!(out.denoiser.store.checksum(), fresh.store.checksum());
    assert!(out.curve.is_empty());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let f = random_field(2, 30);
    let run = || {
        let fitted = fit(&f, &tiny_pipeline("10", 8)).unwrap();
        encode_stpc(&fitted.model.to_records()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_deeponet_is_not_updated_and_trainable_is() {
    let f = random_field(3, 30);
    let windows = sliding_windows(&f, 4, 4).unwrap();
    let norm = Norm::from_field(&f).unwrap();
    let op = build_transition(&PdeParams::uniform(&f.grid, 20.0, -0.1, -0.05)).unwrap();
    let net = DeepOnet::new(4, 4, 9, &DeepOnetConfig { p: 4, hidden: vec![8], ..DeepOnetConfig::default() }, norm.mean, norm.std)
        .unwrap();
    let before = net.store.checksum();
    for (mode, changes) in [("1", false), ("2", true)] {
        let cfg = TrainRunConfig {
            iterations: 5,
            denoiser: tiny_denoiser(),
            mode: IntegrationMode::from_id(mode).unwrap(),
            ..TrainRunConfig::default()
        };
        let out = train(&windows, norm, Some(net.clone()), &op, &cfg).unwrap();
        let after = out.deeponet.unwrap().store.checksum();
        assert_eq!(after != before, changes, "mode {mode}");
    }
}

#[test]
fn every_mode_completes_a_smoke_run() {
    let f = random_field(4, 40);
    for id in MODE_IDS {
        let fitted = fit(&f, &tiny_pipeline(id, 50)).unwrap_or_else(|e| panic!("mode {id}: {e}"));
        assert_eq!(fitted.curve.len(), 50, "mode {id}");
        assert!(fitted.curve.iter().all(|r| r.loss.is_finite()), "mode {id}");
        let windows = sliding_windows(&f, 4, 4).unwrap();
        let preds = fitted.model.forecast_windows(&windows[..2], 1, 0, 1).unwrap();
        assert!(preds.iter().flatten().all(|v| v.is_finite() && *v >= 0.0), "mode {id}");
    }
}

#[test]
fn constant_field_forecasts_the_constant() {
    let g = GridSpec { x: 2, y: 2, ..GridSpec::default() };
    let f = MaskedField::observed(g, 40, vec![50.0; 160]).unwrap();
    let mut cfg = tiny_pipeline("diff", 1000);
    cfg.train.denoiser.channels = 16;
    cfg.train.steps = 50;
    let fitted = fit(&f, &cfg).unwrap();
    let windows = sliding_windows(&f, 4, 4).unwrap();
    let preds = fitted.model.forecast_windows(&windows[..4], 1, 9, 1).unwrap();
    // Zero spread standardises with unit scale, so ±2 raw is ±2 standardised.
    for v in preds.iter().flatten() {
        assert!((v - 50.0).abs() <= 2.0, "{v}");
    }
}

#[test]
fn trained_model_responds_to_conditioning() {
    let f = random_field(5, 40);
    let fitted = fit(&f, &tiny_pipeline("diff", 30)).unwrap();
    let model = &fitted.model;
    let w = &sliding_windows(&f, 4, 4).unwrap()[0];
    let cond = ConditionPack::build(&w.for_forecast(), &model.norm, None, None).unwrap();
    let batch = |v_co: Vec<f64>| DenoiserBatch {
        batch: 1,
        cells: 9,
        l1: 4,
        l2: 4,
        noisy: vec![0.3; 36],
        v_co,
        m_co: cond.m_co.clone(),
        pde: None,
        t: vec![5],
        step_valid: None,
    };
    let a = model.denoiser.predict(&batch(cond.v_co.clone()), &cond.v_de).unwrap();
    let mut moved = cond.v_co.clone();
    let i = cond.m_co.iter().position(|&m| m).unwrap();
    moved[i] += 1.0;
    let b = model.denoiser.predict(&batch(moved), &cond.v_de).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
}
