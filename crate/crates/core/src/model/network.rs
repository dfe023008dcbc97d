use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{collapsed_cutoff, Ablation, ModelConfig, LOGVAR_FLOOR, LOGVAR_MAX, LOGVAR_MIN};
use super::fef::Fef;
use super::forecast::ForecastDistribution;
use super::revin::{revin_invert, revin_norm, stats_block};
use crate::dataset::{Batch, NormStats, WRENCH};
use crate::error::{FdnError, Result};
use crate::nn::{Linear, Mlp, TransformerEncoder};
use crate::spectral::ZeroPhaseFilter;
use crate::tape::{Graph, ParamStore, Tensor, Var};

/// Parameter-name prefixes of the four modality encoders.
pub const MODALITIES: [&str; 4] = ["enc.dq", "enc.dqd", "enc.dqdd", "enc.u"];
pub const SHARED_ENCODER: &str = "enc.shared";
pub const Q0_ENCODER: &str = "q0_enc";

#[derive(Debug, Clone)]
struct ModalityEncoder {
    embed: Linear,
    encoder: TransformerEncoder,
}

impl ModalityEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), cfg.patch, cfg.d_model, true, rng),
            encoder: TransformerEncoder::new(store, &format!("{name}.tf"), cfg.d_model, cfg.layers, cfg.heads, rng),
        }
    }
}

/// Dense zero-phase operators for the horizon, applied as `y = x M^T`.
#[derive(Debug, Clone)]
struct OutputFilters {
    low: Tensor,
    band: Tensor,
    collapsed: Tensor,
}

impl OutputFilters {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let t = cfg.horizon;
        let dense = |f: ZeroPhaseFilter| Tensor::from_vec(&[t, t], f.matrix());
        Ok(Self {
            low: dense(ZeroPhaseFilter::lowpass(t, cfg.spec.f_c, &cfg.spec)?),
            band: dense(ZeroPhaseFilter::highpass(t, &cfg.spec)?),
            collapsed: dense(ZeroPhaseFilter::lowpass(t, collapsed_cutoff(&cfg.spec), &cfg.spec)?),
        })
    }
}

fn apply_filter(g: &mut Graph, x: Var, m: &Tensor) -> Var {
    let mv = g.constant(m.clone());
    g.matmul_nt(x, mv)
}

/// Normalized, filtered network outputs, each `[B, 6, T]`.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub trend: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Loss node plus its components as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub trend: f64,
    pub res: f64,
}

impl Loss {
    pub fn value(&self) -> f64 {
        self.trend + self.res
    }

    /// Fails on a non-finite component, naming it.
    pub fn check(&self, step: usize) -> Result<()> {
        if !self.trend.is_finite() {
            return Err(FdnError::NonFiniteLoss { step, component: "trend" });
        }
        if !self.res.is_finite() {
            return Err(FdnError::NonFiniteLoss { step, component: "residual" });
        }
        Ok(())
    }
}

/// Splits `[B, 5n, L]` into the time-varying rows `[B, 4n, L]` and the
/// initial configuration `[B, n]`. Rows of joints beyond each sample's DoF are
/// zeroed, as are the actuation rows when `mask_u`. Also returns the RevIN
/// skip mask over the `B * 4n` varying rows.
fn split_input(x: &Tensor, n: usize, history: usize, dofs: &[usize], mask_u: bool) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let s = x.shape();
    if s.len() != 3 || s[1] != 5 * n || s[2] != history {
        return Err(FdnError::Shape(format!("model expects input [B, {}, {history}], got {s:?}", 5 * n)));
    }
    let b = s[0];
    if dofs.len() != b {
        return Err(FdnError::Shape(format!("{} DoF entries for a batch of {b}", dofs.len())));
    }
    let l = history;
    let mut varying = Vec::with_capacity(b * 4 * n * l);
    let mut q0 = Vec::with_capacity(b * n);
    let mut skip = Vec::with_capacity(b * 4 * n);
    let data = x.data();
    for (bi, &dof) in dofs.iter().enumerate() {
        let sample = &data[bi * 5 * n * l..(bi + 1) * 5 * n * l];
        for r in 0..4 * n {
            let masked = r % n >= dof || (mask_u && r >= 3 * n);
            skip.push(masked);
            let row = &sample[r * l..(r + 1) * l];
            if masked {
                varying.extend(std::iter::repeat_n(0.0, l));
            } else {
                varying.extend_from_slice(row);
            }
        }
        for j in 0..n {
            q0.push(if j < dof { sample[(4 * n + j) * l + l - 1] } else { 0.0 });
        }
    }
    Ok((Tensor::from_vec(&[b, 4 * n, l], varying), Tensor::from_vec(&[b, n], q0), skip))
}

/// Zeroes the actuation rows of a `[B, 5n, L]` input and every row of joints
/// beyond each sample's DoF, as done for masked pretraining.
pub fn mask_for_pretraining(x: &Tensor, dofs: &[usize], cfg: &ModelConfig) -> Result<Tensor> {
    if !cfg.mask_u {
        return Err(FdnError::Config("actuation masking requested for a model with mask_u = false".into()));
    }
    let (varying, q0, _) = split_input(x, cfg.n, cfg.history, dofs, true)?;
    let (n, l) = (cfg.n, cfg.history);
    let mut out = Vec::with_capacity(x.len());
    for (bi, block) in varying.data().chunks(4 * n * l).enumerate() {
        out.extend_from_slice(block);
        for j in 0..n {
            out.extend(std::iter::repeat_n(q0.data()[bi * n + j], l));
        }
    }
    Ok(Tensor::from_vec(x.shape(), out))
}

/// Flat indices cutting rows `[first, first + count)` of every sample of a
/// `[B, rows, L]` tensor into `[B * count, N, P]` patches.
fn modality_patches(cfg: &ModelConfig, batch: usize, rows: usize, first: usize, count: usize) -> Rc<Vec<usize>> {
    let (l, p, s, np) = (cfg.history, cfg.patch, cfg.stride(), cfg.num_patches());
    let mut idx = Vec::with_capacity(batch * count * np * p);
    for b in 0..batch {
        for j in 0..count {
            let base = (b * rows + first + j) * l;
            for k in 0..np {
                for i in 0..p {
                    idx.push(base + (k * s + i).min(l - 1));
                }
            }
        }
    }
    Rc::new(idx)
}

/// The frequency-aware decomposition network.
#[derive(Debug, Clone)]
pub struct FdnModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// Statistics the inputs and targets were normalized with.
    pub norm: NormStats,
    fef: Option<Fef>,
    encoders: Vec<ModalityEncoder>,
    q0: Mlp,
    mix: Linear,
    trend_head: Option<Linear>,
    mu_head: Option<Linear>,
    logvar_head: Option<Linear>,
    filters: OutputFilters,
}

impl FdnModel {
    /// Builds freshly initialized parameters. Under `mask_u` with modality
    /// encoders, the actuation encoder is frozen from the start.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rows = cfg.varying_rows();
        let fef = (!cfg.has(Ablation::NoFef)).then(|| {
            let gated = !cfg.has(Ablation::NoFefWeights);
            Fef::new(&mut store, "fef", cfg.effective_experts(), rows, cfg.history, gated, &mut rng)
        });
        let encoders = if cfg.has(Ablation::SharedEncoder) {
            vec![ModalityEncoder::new(&mut store, SHARED_ENCODER, &cfg, &mut rng)]
        } else {
            MODALITIES.iter().map(|name| ModalityEncoder::new(&mut store, name, &cfg, &mut rng)).collect()
        };
        let d = cfg.d_model;
        let q0 = Mlp::new(&mut store, Q0_ENCODER, &[cfg.n, d, d], &mut rng);
        let mix = Linear::new(&mut store, "mix", rows, WRENCH, true, &mut rng);
        let flat = cfg.num_patches() * d;
        let head = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Linear::new(store, &format!("head.{name}"), flat, cfg.horizon, true, rng)
        };
        let trend_head = (!cfg.has(Ablation::NoTrendHead)).then(|| head(&mut store, &mut rng, "trend"));
        let (mu_head, logvar_head) = if cfg.has(Ablation::NoResHead) {
            (None, None)
        } else {
            (Some(head(&mut store, &mut rng, "mu")), Some(head(&mut store, &mut rng, "logvar")))
        };
        if cfg.mask_u && !cfg.has(Ablation::SharedEncoder) {
            store.set_trainable_prefix(&[&format!("{}.", MODALITIES[3])], false);
        }
        let filters = OutputFilters::new(&cfg)?;
        let norm = NormStats::identity(cfg.n);
        Ok(Self { cfg, store, norm, fef, encoders, q0, mix, trend_head, mu_head, logvar_head, filters })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Latent set `[B, 6, N, D]` from a normalized input `[B, 5n, L]`.
    pub fn encode(&self, g: &mut Graph, x: &Tensor, dofs: &[usize]) -> Result<Var> {
        let cfg = &self.cfg;
        let (n, d, np) = (cfg.n, cfg.d_model, cfg.num_patches());
        let rows = cfg.varying_rows();
        let (varying, q0, skip) = split_input(x, n, cfg.history, dofs, cfg.mask_u)?;
        let b = varying.shape()[0];
        let xv = g.constant(varying);
        let (xn, stats) = revin_norm(g, xv, Some(Rc::new(skip)));
        let xf = match &self.fef {
            Some(fef) => fef.forward(g, xn)?,
            None => xn,
        };

        let mut parts = Vec::with_capacity(4);
        for k in 0..4 {
            if k == 3 && cfg.mask_u {
                parts.push(g.constant(Tensor::zeros(&[b, n, np, d])));
                continue;
            }
            let enc = &self.encoders[k.min(self.encoders.len() - 1)];
            let idx = modality_patches(cfg, b, rows, k * n, n);
            let patches = g.gather(xf, idx, &[b * n, np, cfg.patch]);
            let e = enc.embed.forward(g, patches);
            let z = enc.encoder.forward(g, e);
            let z = revin_invert(g, z, &stats_block(&stats, b, rows, k * n, n));
            parts.push(g.reshape(z, &[b, n, np, d]));
        }

        let q0v = g.constant(q0);
        let h = self.q0.forward(g, q0v);
        let z_dq = g.reshape(parts[0], &[b, n * np, d]);
        let z_dq = g.add_mid(z_dq, h, b, n * np, d);
        parts[0] = g.reshape(z_dq, &[b, n, np, d]);

        let z = g.concat(&parts, 1);
        let z = g.permute(z, &[0, 2, 3, 1]);
        let z = self.mix.forward(g, z);
        Ok(g.permute(z, &[0, 3, 1, 2]))
    }

    /// Raw head outputs `[B, 6, T]` from the latent set; an ablated head
    /// yields `None`.
    pub fn heads(&self, g: &mut Graph, z: Var) -> (Option<Var>, Option<Var>, Option<Var>) {
        let s = g.shape(z).to_vec();
        let flat = g.reshape(z, &[s[0], s[1], s[2] * s[3]]);
        let run = |g: &mut Graph, h: &Option<Linear>| h.as_ref().map(|h| h.forward(g, flat));
        (run(g, &self.trend_head), run(g, &self.mu_head), run(g, &self.logvar_head))
    }

    /// Band filtering of the trend and residual mean. When a head is ablated
    /// the surviving output, which then carries the full wrench, is
    /// low-passed at the denoising cutoff.
    pub fn output_filter(&self, g: &mut Graph, trend: Option<Var>, mu: Option<Var>) -> (Option<Var>, Option<Var>) {
        if self.cfg.has(Ablation::NoFpf) {
            return (trend, mu);
        }
        let f = &self.filters;
        match (trend, mu) {
            (Some(t), Some(m)) => (Some(apply_filter(g, t, &f.low)), Some(apply_filter(g, m, &f.band))),
            (Some(t), None) => (Some(apply_filter(g, t, &f.collapsed)), None),
            (None, Some(m)) => (None, Some(apply_filter(g, m, &f.collapsed))),
            (None, None) => (None, None),
        }
    }

    /// Full forward pass in normalized units.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, dofs: &[usize]) -> Result<Outputs> {
        let z = self.encode(g, x, dofs)?;
        let (trend, mu, logvar) = self.heads(g, z);
        let (trend, mu) = self.output_filter(g, trend, mu);
        let b = g.shape(z)[0];
        let shape = [b, WRENCH, self.cfg.horizon];
        let trend = trend.unwrap_or_else(|| g.constant(Tensor::zeros(&shape)));
        let mu = mu.unwrap_or_else(|| g.constant(Tensor::zeros(&shape)));
        let logvar = match logvar {
            Some(v) => g.clamp(v, LOGVAR_MIN, LOGVAR_MAX),
            None => g.constant(Tensor::full(&shape, LOGVAR_FLOOR)),
        };
        Ok(Outputs { trend, mu, logvar })
    }

    /// Trend MSE plus residual Gaussian NLL on the filtered outputs. With a
    /// head removed, the surviving term is fit to the full wrench.
    pub fn loss(&self, g: &mut Graph, out: &Outputs, batch: &Batch) -> Loss {
        if self.cfg.has(Ablation::NoTrendHead) {
            let total = g.gaussian_nll(out.mu, out.logvar, Rc::new(batch.w.clone()));
            return Loss { total, trend: 0.0, res: g.value(total).item() };
        }
        if self.cfg.has(Ablation::NoResHead) {
            let total = g.mse(out.trend, Rc::new(batch.w.clone()));
            return Loss { total, trend: g.value(total).item(), res: 0.0 };
        }
        let lt = g.mse(out.trend, Rc::new(batch.trend.clone()));
        let lr = g.gaussian_nll(out.mu, out.logvar, Rc::new(batch.res.clone()));
        let (trend, res) = (g.value(lt).item(), g.value(lr).item());
        let total = g.add(lt, lr);
        Loss { total, trend, res }
    }

    /// Forward pass and loss on a batch.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Loss> {
        let out = self.forward(g, &batch.x, &batch.dofs)?;
        Ok(self.loss(g, &out, batch))
    }

    /// Predictive distributions in physical units, one per sample of a
    /// normalized input `[B, 5n, L]`.
    pub fn forecast(&self, x: &Tensor, dofs: &[usize]) -> Result<Vec<ForecastDistribution>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, x, dofs)?;
        let t = self.cfg.horizon;
        let (trend, mu, logvar) = (g.value(out.trend).data(), g.value(out.mu).data(), g.value(out.logvar).data());
        let w = &self.norm;
        let no_trend = self.cfg.has(Ablation::NoTrendHead);
        Ok((0..dofs.len())
            .map(|b| {
                let mut f = ForecastDistribution::zeros(t);
                for c in 0..WRENCH {
                    let (mean, std) = (w.w_mean[c], w.w_std[c]);
                    let lv_shift = 2.0 * std.ln();
                    for k in 0..t {
                        let i = (b * WRENCH + c) * t + k;
                        f.trend[[c, k]] = if no_trend { mean } else { trend[i] * std + mean };
                        f.mu_res[[c, k]] = mu[i] * std;
                        f.logvar_res[[c, k]] = logvar[i] + lv_shift;
                    }
                }
                f
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::model::Ablations;

    pub(crate) fn tiny(ablations: &str) -> ModelConfig {
        ModelConfig {
            n: 2,
            history: 16,
            horizon: 16,
            d_model: 8,
            patch: 4,
            experts: 2,
            layers: 1,
            heads: 2,
            ablations: Ablations::parse_list(ablations).unwrap(),
            ..ModelConfig::default()
        }
    }

    fn random_x(b: usize, n: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..b * 5 * n * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        // q0 rows are constant along the history.
        for bi in 0..b {
            for j in 0..n {
                let r = (bi * 5 * n + 4 * n + j) * l;
                let v = data[r];
                data[r..r + l].iter_mut().for_each(|x| *x = v);
            }
        }
        Tensor::from_vec(&[b, 5 * n, l], data)
    }

    #[test]
    fn default_latent_shape() {
        let cfg = ModelConfig { layers: 1, ..ModelConfig::default() };
        let m = FdnModel::new(cfg, 0).unwrap();
        let mut g = Graph::new(&m.store);
        let z = m.encode(&mut g, &random_x(1, 6, 100, 1), &[6]).unwrap();
        assert_eq!(g.shape(z), &[1, 6, 5, 128]);
        let flat = g.reshape(z, &[1, 6, 640]);
        assert_eq!(g.shape(flat)[2], 640);
    }

    #[test]
    fn masked_actuation_does_not_change_latents() {
        let cfg = ModelConfig { mask_u: true, ..tiny("") };
        let m = FdnModel::new(cfg, 4).unwrap();
        let x = random_x(2, 2, 16, 5);
        let mut y = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for bi in 0..2 {
            for r in 6..8 {
                for k in 0..16 {
                    y.data_mut()[(bi * 10 + r) * 16 + k] = rng.random_range(-50.0..50.0);
                }
            }
        }
        let z = |x: &Tensor| {
            let mut g = Graph::new(&m.store);
            let v = m.encode(&mut g, x, &[2, 2]).unwrap();
            g.value(v).data().to_vec()
        };
        assert_eq!(z(&x), z(&y));
    }

    #[test]
    fn shared_encoder_has_fewer_parameters() {
        let full = FdnModel::new(tiny(""), 0).unwrap();
        let shared = FdnModel::new(tiny("shared_encoder"), 0).unwrap();
        assert!(shared.num_parameters() < full.num_parameters());
    }

    #[test]
    fn ablated_heads_are_not_built() {
        let m = FdnModel::new(tiny("no_res_head"), 0).unwrap();
        assert!(m.store.id("head.mu.w").is_none() && m.store.id("head.logvar.w").is_none());
        let m = FdnModel::new(tiny("no_trend_head"), 0).unwrap();
        assert!(m.store.id("head.trend.w").is_none());
        let m = FdnModel::new(tiny("no_fef_moe"), 0).unwrap();
        assert_eq!(m.store.get(m.store.id("fef.w_f").unwrap()).shape()[0], 1);
        assert!(m.store.id("fef.w_p").is_none());
        assert!(FdnModel::new(tiny("no_fef"), 0).unwrap().store.id("fef.w_f").is_none());
    }

    #[test]
    fn heads_are_zero_for_zero_latents() {
        let mut m = FdnModel::new(tiny(""), 0).unwrap();
        for name in ["head.trend.b", "head.mu.b", "head.logvar.b"] {
            let id = m.store.id(name).unwrap();
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&m.store);
        let z = g.constant(Tensor::zeros(&[1, 6, 5, 8]));
        let (a, b, c) = m.heads(&mut g, z);
        for v in [a, b, c] {
            assert!(g.value(v.unwrap()).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn heads_are_channel_separable() {
        let m = FdnModel::new(tiny(""), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..6 * 40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        b[3 * 40..4 * 40].iter_mut().for_each(|v| *v += 0.7);
        let run = |data: Vec<f64>| {
            let mut g = Graph::new(&m.store);
            let z = g.constant(Tensor::from_vec(&[1, 6, 5, 8], data));
            let (t, mu, lv) = m.heads(&mut g, z);
            [t, mu, lv].map(|v| g.value(v.unwrap()).data().to_vec())
        };
        let (ra, rb) = (run(a), run(b));
        for (ha, hb) in ra.iter().zip(&rb) {
            for c in 0..6 {
                let same = ha[c * 16..(c + 1) * 16] == hb[c * 16..(c + 1) * 16];
                assert_eq!(same, c != 3, "channel {c}");
            }
        }
    }

    #[test]
    fn output_filter_dc_behaviour() {
        let cfg = ModelConfig { horizon: 64, ..tiny("") };
        let m = FdnModel::new(cfg, 0).unwrap();
        let mut g = Graph::new(&m.store);
        let c = g.constant(Tensor::full(&[1, 6, 64], 2.5));
        let (t, mu) = m.output_filter(&mut g, Some(c), Some(c));
        assert!(g.value(t.unwrap()).data().iter().all(|v| (v - 2.5).abs() < 1e-9));
        let mu = g.value(mu.unwrap()).data();
        for row in mu.chunks(64) {
            assert!(row[16..48].iter().all(|v| v.abs() < 1e-6));
        }
        let m = FdnModel::new(ModelConfig { horizon: 64, ..tiny("no_fpf") }, 0).unwrap();
        let mut g = Graph::new(&m.store);
        let c = g.constant(Tensor::full(&[1, 6, 64], 2.5));
        let (t, mu) = m.output_filter(&mut g, Some(c), Some(c));
        assert_eq!((t, mu), (Some(c), Some(c)));
    }

    #[test]
    fn forecast_mean_and_shapes() {
        let cfg = ModelConfig { layers: 1, d_model: 16, heads: 2, experts: 4, ..ModelConfig::default() };
        let m = FdnModel::new(cfg, 1).unwrap();
        let f = m.forecast(&random_x(2, 6, 100, 3), &[6, 6]).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].trend.dim(), (6, 100));
        assert_eq!(f[0].mu_res.dim(), (6, 100));
        assert_eq!(f[0].logvar_res.dim(), (6, 100));
        assert_eq!(f[0].mean(), &f[0].trend + &f[0].mu_res);
        assert!(f[0].sigma().iter().all(|s| s.is_finite() && *s > 0.0));
    }

    #[test]
    fn no_res_head_forecast_is_the_trend() {
        let m = FdnModel::new(tiny("no_res_head"), 1).unwrap();
        let f = &m.forecast(&random_x(1, 2, 16, 3), &[2]).unwrap()[0];
        assert!(f.mu_res.iter().all(|&v| v == 0.0));
        assert!(f.logvar_res.iter().all(|&v| v == LOGVAR_FLOOR));
        assert_eq!(f.mean(), f.trend);
        assert!(f.sample(5).iter().zip(f.trend.iter()).all(|(a, b)| (a - b).abs() <= 1e-15));
    }

    #[test]
    fn forecasts_are_deterministic() {
        let a = FdnModel::new(tiny(""), 8).unwrap();
        let b = FdnModel::new(tiny(""), 8).unwrap();
        let x = random_x(3, 2, 16, 1);
        let fa = a.forecast(&x, &[2, 1, 2]).unwrap();
        let fb = b.forecast(&x, &[2, 1, 2]).unwrap();
        for (p, q) in fa.iter().zip(&fb) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn pretraining_mask_layout() {
        let cfg = ModelConfig { n: 7, mask_u: true, ..tiny("") };
        let x = random_x(1, 7, 16, 2);
        let masked = mask_for_pretraining(&x, &[6], &cfg).unwrap();
        let d = masked.data();
        for r in [6, 13, 20, 34] {
            assert!(d[r * 16..(r + 1) * 16].iter().all(|&v| v == 0.0), "row {r}");
        }
        assert!(d[21 * 16..28 * 16].iter().all(|&v| v == 0.0));
        assert_eq!(d[..16], x.data()[..16]);
        assert!(mask_for_pretraining(&x, &[6], &ModelConfig { n: 7, ..tiny("") }).is_err());
    }

    #[test]
    fn actuation_encoder_is_frozen_under_masking() {
        let cfg = ModelConfig { mask_u: true, ..tiny("") };
        let m = FdnModel::new(cfg, 0).unwrap();
        let frozen: Vec<_> = m.store.iter().filter(|(id, _)| !m.store.is_trainable(*id)).map(|(_, p)| p.name.clone()).collect();
        assert!(!frozen.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("enc.u.")));
    }
}
