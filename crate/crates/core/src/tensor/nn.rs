//! Layers built on the tape. Parameters live in a [`ParamStore`] under
//! dotted names; a layer only remembers the names.

use std::sync::Arc;

use rand::Rng;

use super::{ParamStore, Params, SeqLayout, Tape, Tensor, Var};
use crate::error::Result;

/// `y = xW + b`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Multi-head self-attention where all `n` rows form one sequence.
pub fn attention_forward(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let n = tape.shape(q).first().copied().unwrap_or(0);
    tape.attention(q, k, v, heads, Arc::new(SeqLayout::single(n)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Gelu,
    Silu,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
        Activation::Silu => tape.silu(x),
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: String,
    b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let d = Dense::named(name, fan_in, fan_out);
        store.insert_glorot(&d.w, fan_in, fan_out, rng);
        store.insert(&d.b, Tensor::zeros(&[fan_out]));
        d
    }

    /// All-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let d = Dense::named(name, fan_in, fan_out);
        store.insert(&d.w, Tensor::zeros(&[fan_in, fan_out]));
        store.insert(&d.b, Tensor::zeros(&[fan_out]));
        d
    }

    fn named(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense { w: format!("{name}.w"), b: format!("{name}.b"), fan_in, fan_out }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params<'_>, x: Var) -> Result<Var> {
        let w = tape.param(p, &self.w)?;
        let b = tape.param(p, &self.b)?;
        dense_forward(tape, x, w, b)
    }
}

/// Dense layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], act: Activation, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last {
                x = activate(tape, x, self.act);
            }
        }
        Ok(x)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let ln = LayerNorm { gamma: format!("{name}.gamma"), beta: format!("{name}.beta") };
        store.insert(&ln.gamma, Tensor::full(&[width], 1.0));
        store.insert(&ln.beta, Tensor::zeros(&[width]));
        ln
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params<'_>, x: Var) -> Result<Var> {
        let g = tape.param(p, &self.gamma)?;
        let b = tape.param(p, &self.beta)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    qkv: Dense,
    proj: Dense,
    norm1: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    norm2: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TransformerLayer {
            qkv: Dense::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Dense::new(store, &format!("{name}.proj"), width, width, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ff1: Dense::new(store, &format!("{name}.ff1"), width, ff, rng),
            ff2: Dense::new(store, &format!("{name}.ff2"), ff, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            width,
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params<'_>, x: Var, layout: Arc<SeqLayout>) -> Result<Var> {
        let d = self.width;
        let qkv = self.qkv.forward(tape, p, x)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let a = tape.attention(q, k, v, self.heads, layout)?;
        let a = self.proj.forward(tape, p, a)?;
        let h = tape.add(x, a)?;
        let h = self.norm1.forward(tape, p, h)?;
        let f = self.ff1.forward(tape, p, h)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, p, f)?;
        let y = tape.add(h, f)?;
        self.norm2.forward(tape, p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_dense(x: &[&[f64]], w: &[&[f64]], b: &[f64]) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(x));
        let w = tape.constant(Tensor::from_rows(w));
        let b = tape.constant(Tensor::from_vec(b.to_vec()));
        let y = dense_forward(&mut tape, x, w, b).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn dense_examples() {
        assert_eq!(run_dense(&[&[1.0, 2.0]], &[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]).data(), &[1.0, 2.0]);
        assert_eq!(run_dense(&[&[1.0, 1.0]], &[&[2.0], &[3.0]], &[1.0]).data(), &[6.0]);
        assert_eq!(run_dense(&[&[0.0, 0.0]], &[&[0.3, -2.0], &[7.0, 1.0]], &[5.0, 5.0]).data(), &[5.0, 5.0]);
    }

    #[test]
    fn dense_shape_error_names_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = dense_forward(&mut tape, x, w, b).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[0.3, -1.0]]));
        let k = tape.constant(Tensor::from_rows(&[&[2.0, 5.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[4.0, -7.0]]));
        let o = attention_forward(&mut tape, q, k, v, 1).unwrap();
        assert_eq!(tape.value(o).data(), &[4.0, -7.0]);

        let q = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let k = tape.constant(Tensor::from_rows(&[&[0.4, 0.4], &[0.4, 0.4]]));
        let v = tape.constant(Tensor::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let o = attention_forward(&mut tape, q, k, v, 1).unwrap();
        for (a, b) in tape.value(o).data().iter().zip([3.0, 5.0, 3.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }

        let v = tape.constant(Tensor::zeros(&[2, 2]));
        let o = attention_forward(&mut tape, q, k, v, 2).unwrap();
        assert!(tape.value(o).data().iter().all(|&x| x == 0.0));

        let err = attention_forward(&mut tape, q, k, v, 3).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn transformer_layer_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "t", 8, 2, 16, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[6, 8], 0.5));
        let y = layer
            .forward(&mut tape, &store.frozen(), x, Arc::new(SeqLayout::temporal(1, 2, 3)))
            .unwrap();
        assert_eq!(tape.shape(y), &[6, 8]);
        assert!(tape.value(y).is_finite());
    }
}
