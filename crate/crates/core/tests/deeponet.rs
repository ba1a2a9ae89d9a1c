use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepdiff::deeponet::{train_deeponet, DeepOnet, DeepOnetConfig};
use stepdiff::grid::WindowSample;
use stepdiff::tensor::encode_stpc;

fn window(l1: usize, l2: usize, k: usize, v_co: Vec<f64>, v_ta: Vec<f64>) -> WindowSample {
    WindowSample {
        start: 0,
        l1,
        l2,
        cells: k,
        m_co: vec![true; v_co.len()],
        m_ta: vec![true; v_ta.len()],
        v_co,
        v_ta,
        v_de: None,
    }
}

fn masked_mse(net: &DeepOnet, windows: &[WindowSample]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for w in windows {
        for ((p, t), m) in net.forward(w).unwrap().iter().zip(&w.v_ta).zip(&w.m_ta) {
            if *m {
                s += ((p - t) / net.std).powi(2);
                n += 1.0;
            }
        }
    }
    s / n
}

fn small_cfg(epochs: usize) -> DeepOnetConfig {
    DeepOnetConfig { p: 8, hidden: vec![32, 32], epochs, lr: 3e-3, batch: 4, seed: 5, ..DeepOnetConfig::default() }
}

#[test]
fn constant_dataset_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let make = |rng: &mut ChaCha8Rng| {
        let mut w = window(3, 2, 4, vec![50.0; 12], vec![50.0; 8]);
        w.m_co = (0..12).map(|_| rng.random_bool(0.6)).collect();
        w
    };
    let train: Vec<WindowSample> = (0..128).map(|_| make(&mut rng)).collect();
    let held: Vec<WindowSample> = (0..6).map(|_| make(&mut rng)).collect();
    // Off-centre standardisation so the target is not simply the zero output.
    let net = train_deeponet(&train, &small_cfg(40), (45.0, 5.0), None).unwrap();
    for w in &held {
        for v in net.forward(&w.for_forecast()).unwrap() {
            assert!((v - 50.0).abs() <= 1.0, "{v}");
        }
    }
}

#[test]
fn persistence_dataset_loss_drops_tenfold() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (l1, l2, k) = (3, 2, 4);
    let windows: Vec<WindowSample> = (0..32)
        .map(|_| {
            let v_co: Vec<f64> = (0..l1 * k).map(|_| rng.random_range(20.0..80.0)).collect();
            let last = v_co[(l1 - 1) * k..].to_vec();
            let v_ta = last.iter().cycle().take(l2 * k).copied().collect();
            window(l1, l2, k, v_co, v_ta)
        })
        .collect();
    let cfg = small_cfg(150);
    let init = DeepOnet::new(l1, l2, k, &cfg, 50.0, 17.0).unwrap();
    let before = masked_mse(&init, &windows);
    let net = train_deeponet(&windows, &cfg, (50.0, 17.0), None).unwrap();
    let after = masked_mse(&net, &windows);
    assert!(after < 0.1 * before, "masked MSE {before} -> {after}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<WindowSample> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..50.0)).collect();
            window(3, 2, 2, v[..6].to_vec(), v[6..].to_vec())
        })
        .collect();
    let a = train_deeponet(&windows, &small_cfg(3), (25.0, 10.0), None).unwrap();
    let b = train_deeponet(&windows, &small_cfg(3), (25.0, 10.0), None).unwrap();
    assert_eq!(encode_stpc(&a.to_records("deeponet.")).unwrap(), encode_stpc(&b.to_records("deeponet.")).unwrap());
}

#[test]
fn output_shape_holds_across_configurations() {
    for (l1, l2, x, y) in [(1, 1, 1, 1), (4, 2, 3, 2), (12, 12, 2, 5), (2, 7, 1, 3)] {
        let k = x * y;
        let net = DeepOnet::new(l1, l2, k, &small_cfg(1), 0.0, 1.0).unwrap();
        let w = window(l1, l2, k, vec![1.0; l1 * k], vec![0.0; l2 * k]);
        assert_eq!(net.forward(&w).unwrap().len(), l2 * k);
    }
}
