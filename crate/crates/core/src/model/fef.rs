use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FdnError, Result};
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

/// Std of the noise added to the identity initialization of the expert
/// filters. Without it every expert receives the same gradient and the gate
/// never learns to tell them apart.
pub const EXPERT_INIT_NOISE: f64 = 0.01;

/// Learnable frequency enhancement: a gated mixture of per-bin spectral
/// filters, `Σ_m α_m · IFFT(FFT(x) ⊙ softplus(W_f,m))`.
///
/// Because every expert is linear in the spectrum, the mixture is evaluated
/// as one filter with gain `Σ_m α_m softplus(W_f,m)`.
#[derive(Debug, Clone)]
pub struct Fef {
    /// `[M, rows * (L/2 + 1)]`.
    pub w_f: ParamId,
    /// `[rows * L, M]`; absent when the gate is replaced by uniform weights.
    pub w_p: Option<ParamId>,
    experts: usize,
    rows: usize,
    len: usize,
}

impl Fef {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        experts: usize,
        rows: usize,
        len: usize,
        gated: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bins = len / 2 + 1;
        // softplus(ln(e - 1)) = 1: every expert starts as the identity filter.
        let base = (std::f64::consts::E - 1.0).ln();
        let noise = Normal::new(0.0, EXPERT_INIT_NOISE).expect("valid std");
        let data = (0..experts * rows * bins).map(|_| base + noise.sample(rng)).collect();
        let w_f = store.add(format!("{name}.w_f"), Tensor::from_vec(&[experts, rows * bins], data));
        let w_p = (gated && experts > 1)
            .then(|| store.add(format!("{name}.w_p"), Tensor::zeros(&[rows * len, experts])));
        Self { w_f, w_p, experts, rows, len }
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    fn check(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.rows || s[2] != self.len {
            return Err(FdnError::Shape(format!(
                "enhancement filter expects [B, {}, {}], got {s:?}",
                self.rows, self.len
            )));
        }
        Ok(s[0])
    }

    /// Expert weights `[B, M]`: a softmax gate over the flattened input, or
    /// the constant `1/M` without a gate.
    pub fn gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.check(g, x)?;
        Ok(match self.w_p {
            Some(w_p) => {
                let flat = g.reshape(x, &[b, self.rows * self.len]);
                let w = g.param(w_p);
                let logits = g.matmul(flat, w);
                g.softmax(logits)
            }
            None => g.constant(Tensor::full(&[b, self.experts], 1.0 / self.experts as f64)),
        })
    }

    /// Applies the mixture with externally supplied weights `alpha: [B, M]`.
    pub fn forward_with_gate(&self, g: &mut Graph, x: Var, alpha: Var) -> Result<Var> {
        let b = self.check(g, x)?;
        if g.shape(alpha) != [b, self.experts] {
            return Err(FdnError::Shape(format!("gate {:?}, expected [{b}, {}]", g.shape(alpha), self.experts)));
        }
        let bins = self.len / 2 + 1;
        let w_f = g.param(self.w_f);
        let phi = g.softplus(w_f);
        let gain = g.matmul(alpha, phi);
        let gain = g.reshape(gain, &[b * self.rows, bins]);
        let rows = g.reshape(x, &[b * self.rows, self.len]);
        let y = g.spectral_scale(rows, gain);
        Ok(g.reshape(y, &[b, self.rows, self.len]))
    }

    /// `x: [B, rows, L]` to the same shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let alpha = self.gate(g, x)?;
        self.forward_with_gate(g, x, alpha)
    }
}
