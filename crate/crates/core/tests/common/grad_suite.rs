use std::sync::Arc;

use super::{directional_check, uniform, weighted_sum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stepdiff::tensor::nn::{Activation, Mlp, TransformerLayer};
use stepdiff::tensor::{ParamStore, Params, SeqLayout, Tape, Var};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const TRIALS: usize = 100;

/// Worst relative error over the randomized trials.
fn run(build: impl Fn(&mut ChaCha8Rng) -> ParamStore, f: &dyn Fn(&mut Tape, &Params<'_>) -> Var) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        let store = build(&mut rng);
        worst = worst.max(directional_check(&store, f, &mut rng, H));
    }
    worst
}

fn store_of(rng: &mut ChaCha8Rng, items: &[(&str, &[usize], f64)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape, a) in items {
        s.insert(name, uniform(rng, shape, *a));
    }
    s
}

pub fn dense_and_grouped_bias() -> f64 {
    run(
        |r| store_of(r, &[("x", &[4, 3], 1.0), ("w", &[3, 5], 1.0), ("b", &[5], 1.0), ("g", &[2, 5], 1.0)]),
        &|t, p| {
            let x = t.param(p, "x").unwrap();
            let w = t.param(p, "w").unwrap();
            let b = t.param(p, "b").unwrap();
            let g = t.param(p, "g").unwrap();
            let y = stepdiff::tensor::nn::dense_forward(t, x, w, b).unwrap();
            let y = t.add_bias(y, g).unwrap();
            let y = t.tanh(y);
            weighted_sum(t, y, 1)
        },
    )
}

pub fn elementwise_activations() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        let e = run(
            |r| store_of(r, &[("x", &[3, 4], 2.0), ("y", &[3, 4], 2.0)]),
            &|t, p| {
                let x = t.param(p, "x").unwrap();
                let y = t.param(p, "y").unwrap();
                let z = match i {
                    0 => t.tanh(x),
                    1 => t.sigmoid(x),
                    2 => t.relu(x),
                    3 => t.gelu(x),
                    4 => t.silu(x),
                    _ => t.softmax(x),
                };
                let z = t.mul(z, y).unwrap();
                let z = t.sub(z, x).unwrap();
                let z = t.scale(z, 0.7);
                weighted_sum(t, z, 2)
            },
        );
        worst = worst.max(e);
    }
    worst
}

pub fn layer_norm() -> f64 {
    run(
        |r| store_of(r, &[("x", &[5, 6], 3.0), ("g", &[6], 1.5), ("b", &[6], 1.0)]),
        &|t, p| {
            let x = t.param(p, "x").unwrap();
            let g = t.param(p, "g").unwrap();
            let b = t.param(p, "b").unwrap();
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            weighted_sum(t, y, 3)
        },
    )
}

pub fn masked_multi_head_attention() -> f64 {
    let (batch, cells, steps) = (2, 3, 4);
    let rows = batch * cells * steps;
    let mut worst: f64 = 0.0;
    for layout in [SeqLayout::temporal(batch, cells, steps), SeqLayout::feature(batch, cells, steps)] {
        let n = layout.bases.len() * layout.len;
        let mask: Vec<bool> = (0..n).map(|i| i % layout.len != 1).collect();
        let layout = Arc::new(layout.with_key_mask(mask));
        let e = run(
            |r| store_of(r, &[("q", &[rows, 6], 1.0), ("k", &[rows, 6], 1.0), ("v", &[rows, 6], 1.0)]),
            &|t, p| {
                let q = t.param(p, "q").unwrap();
                let k = t.param(p, "k").unwrap();
                let v = t.param(p, "v").unwrap();
                let o = t.attention(q, k, v, 2, layout.clone()).unwrap();
                weighted_sum(t, o, 4)
            },
        );
        worst = worst.max(e);
    }
    worst
}

pub fn embedding_gather_and_reshapes() -> f64 {
    let idx = Arc::new(vec![2, 0, 2, 1, 3]);
    run(
        |r| store_of(r, &[("e", &[4, 3], 1.0), ("z", &[5, 2], 1.0)]),
        &|t, p| {
            let e = t.param(p, "e").unwrap();
            let z = t.param(p, "z").unwrap();
            let g = t.gather_rows(e, idx.clone()).unwrap();
            let c = t.concat_cols(&[g, z]).unwrap();
            let s = t.slice_cols(c, 1, 3).unwrap();
            let s = t.reshape(s, &[3, 5]).unwrap();
            let s = t.sigmoid(s);
            let m = t.mean(s);
            let w = weighted_sum(t, s, 5);
            t.add(m, w).unwrap()
        },
    )
}

pub fn three_layer_network() -> f64 {
    run(
        |r| {
            let mut s = ParamStore::new();
            Mlp::new(&mut s, "net", &[4, 7, 5, 2], Activation::Tanh, r);
            s.insert("x", uniform(r, &[3, 4], 1.0));
            s
        },
        &|t, p| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut scratch = ParamStore::new();
            let net = Mlp::new(&mut scratch, "net", &[4, 7, 5, 2], Activation::Tanh, &mut r);
            let x = t.param(p, "x").unwrap();
            let y = net.forward(t, p, x).unwrap();
            weighted_sum(t, y, 6)
        },
    )
}

pub fn transformer_layer() -> f64 {
    let layout = Arc::new(SeqLayout::feature(1, 3, 2));
    run(
        |r| {
            let mut s = ParamStore::new();
            TransformerLayer::new(&mut s, "tf", 4, 2, 8, r);
            s.insert("x", uniform(r, &[6, 4], 1.0));
            s
        },
        &|t, p| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut scratch = ParamStore::new();
            let layer = TransformerLayer::new(&mut scratch, "tf", 4, 2, 8, &mut r);
            let x = t.param(p, "x").unwrap();
            let y = layer.forward(t, p, x, layout.clone()).unwrap();
            weighted_sum(t, y, 7)
        },
    )
}

fn randomized(store: &ParamStore, rng: &mut ChaCha8Rng, a: f64) -> ParamStore {
    let mut s = store.clone();
    for (name, t) in store.iter() {
        s.set(name, uniform(rng, t.shape(), a)).unwrap();
    }
    s
}

pub fn deeponet_network() -> f64 {
    use stepdiff::deeponet::{DeepOnet, DeepOnetConfig};
    use stepdiff::grid::WindowSample;
    let cfg = DeepOnetConfig { p: 3, hidden: vec![5], ..DeepOnetConfig::default() };
    let net = DeepOnet::new(2, 2, 3, &cfg, 10.0, 4.0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let windows: Vec<WindowSample> = (0..2)
        .map(|i| {
            let m_co: Vec<bool> = (0..6).map(|j| (i + j) % 3 != 0).collect();
            WindowSample {
                start: i,
                l1: 2,
                l2: 2,
                cells: 3,
                v_co: uniform(&mut r, &[6], 20.0).data().to_vec(),
                m_co,
                v_ta: vec![0.0; 6],
                m_ta: vec![false; 6],
                v_de: None,
            }
        })
        .collect();
    run(|r| randomized(&net.store, r, 0.5), &|t, p| {
        let refs: Vec<&WindowSample> = windows.iter().collect();
        let y = net.forward_tape(t, p, &refs).unwrap();
        weighted_sum(t, y, 8)
    })
}

pub fn denoiser_network_with_pde_loss() -> f64 {
    use stepdiff::diffusion::{step_loss_tape, Denoiser, DenoiserBatch, DenoiserConfig};
    use stepdiff::grid::GridSpec;
    use stepdiff::pde::{build_transition, PdeParams};
    let cfg = DenoiserConfig { channels: 4, heads: 2, layers: 2, ff: 4, pde_channel: true, seed: 3 };
    let (b, k, l1, l2) = (2, 2, 2, 3);
    let model = Denoiser::new(&cfg, k).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let batch = DenoiserBatch {
        batch: b,
        cells: k,
        l1,
        l2,
        noisy: uniform(&mut r, &[b * l2 * k], 1.5).data().to_vec(),
        v_co: uniform(&mut r, &[b * l1 * k], 1.5).data().to_vec(),
        m_co: (0..b * l1 * k).map(|i| i % 3 != 1).collect(),
        pde: Some(uniform(&mut r, &[b * l2 * k], 1.0).data().to_vec()),
        t: vec![3, 41],
        step_valid: Some((0..b * (l1 + l2)).map(|i| i != 0).collect()),
    };
    let v_de = uniform(&mut r, &[b, l2 * k], 1.0);
    let eps = uniform(&mut r, &[b * l2 * k], 1.5).data().to_vec();
    let mask: Vec<f64> = (0..eps.len()).map(|i| (i % 4 != 2) as u8 as f64).collect();
    let g = GridSpec { x: 1, y: 2, cell_size: 1.0, slice_length: 1.0, ..GridSpec::default() };
    let op = build_transition(&PdeParams::uniform(&g, 0.3, -0.2, 0.0)).unwrap();
    let bt = op.b_transposed();
    run(|r| randomized(&model.store, r, 0.4), &|t, p| {
        let vd = t.constant(v_de.clone());
        let out = model.forward(t, p, &batch, vd).unwrap();
        step_loss_tape(t, out, &eps, &mask, &bt, 2.0, b, l2).unwrap().loss
    })
}

type Case = (&'static str, fn() -> f64);

/// Every primitive and network check, by name.
pub const CASES: &[Case] = &[
    ("dense + grouped bias", dense_and_grouped_bias),
    ("elementwise activations", elementwise_activations),
    ("layer norm", layer_norm),
    ("masked attention", masked_multi_head_attention),
    ("gather + reshapes", embedding_gather_and_reshapes),
    ("mlp", three_layer_network),
    ("transformer layer", transformer_layer),
    ("deeponet", deeponet_network),
    ("denoiser + step loss", denoiser_network_with_pde_loss),
];
