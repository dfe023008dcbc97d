//! Layers built on the autodiff tape: affine maps, layer norm, and a pre-norm
//! transformer encoder over patch tokens.

use std::rc::Rc;

use rand::Rng;

use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map over the last axis, `x @ w + b` with `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization of weight and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[fan_out], bound, rng));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (y, _) = g.standardize(x, LAYER_NORM_EPS, None);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_bias(y, gamma);
        g.add_bias(y, beta)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer encoder with sinusoidal positions and a final norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    dim: usize,
    heads: usize,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), dim),
                    q: Linear::new(store, &format!("{p}.attn.q"), dim, dim, true, rng),
                    k: Linear::new(store, &format!("{p}.attn.k"), dim, dim, true, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), dim, dim, true, rng),
                    o: Linear::new(store, &format!("{p}.attn.o"), dim, dim, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), dim),
                    ff1: Linear::new(store, &format!("{p}.ff1"), dim, 4 * dim, true, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), 4 * dim, dim, true, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_final"), dim);
        Self { blocks, final_ln, dim, heads }
    }

    /// `x: [seqs, tokens, dim]` to the same shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "encoder input must be [seqs, tokens, dim]");
        let (seqs, tokens) = (shape[0], shape[1]);
        assert_eq!(shape[2], self.dim);
        let pos = g.constant(positional_encoding(tokens, self.dim).reshaped(&[tokens * self.dim]));
        let flat = g.reshape(x, &[seqs, tokens * self.dim]);
        let with_pos = g.add_bias(flat, pos);
        let mut h = g.reshape(with_pos, &[seqs, tokens, self.dim]);
        for block in &self.blocks {
            let n1 = block.ln1.forward(g, h);
            let att = self.attention(g, block, n1, seqs, tokens);
            h = g.add(h, att);
            let n2 = block.ln2.forward(g, h);
            let f = block.ff1.forward(g, n2);
            let f = g.gelu(f);
            let f = block.ff2.forward(g, f);
            h = g.add(h, f);
        }
        self.final_ln.forward(g, h)
    }

    fn attention(&self, g: &mut Graph, b: &Block, x: Var, seqs: usize, tokens: usize) -> Var {
        let (heads, dh) = (self.heads, self.dim / self.heads);
        let split = |g: &mut Graph, v: Var| {
            let v = g.reshape(v, &[seqs, tokens, heads, dh]);
            let v = g.permute(v, &[0, 2, 1, 3]);
            g.reshape(v, &[seqs * heads, tokens, dh])
        };
        let q = b.q.forward(g, x);
        let q = split(g, q);
        let k = b.k.forward(g, x);
        let k = split(g, k);
        let v = b.v.forward(g, x);
        let v = split(g, v);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v);
        let ctx = g.reshape(ctx, &[seqs, heads, tokens, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[seqs, tokens, self.dim]);
        b.o.forward(g, ctx)
    }
}

/// Standard sinusoidal position table `[tokens, dim]`.
pub fn positional_encoding(tokens: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; tokens * dim];
    for p in 0..tokens {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[tokens, dim], data)
}

/// Two affine layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; GELU after every layer but the last.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.gelu(x);
            }
        }
        x
    }
}

/// Flat indices that cut every row of `[rows, len]` into `patches` windows of
/// `patch` steps spaced `stride` apart, replicating the final step wherever a
/// window runs past the end. Result is `[rows, patches, patch]`.
pub fn patch_indices(rows: usize, len: usize, patch: usize, stride: usize, patches: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(rows * patches * patch);
    for r in 0..rows {
        for p in 0..patches {
            for j in 0..patch {
                idx.push(r * len + (p * stride + j).min(len - 1));
            }
        }
    }
    Rc::new(idx)
}
