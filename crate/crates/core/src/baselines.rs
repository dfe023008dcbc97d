//! Comparison models sharing the data pipeline of the main network: a
//! pointwise feed-forward estimator and a patch-transformer forecaster in a
//! deterministic and a Gaussian variant.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Batch, NormStats, WRENCH};
use crate::error::{FdnError, Result};
use crate::model::{revin_invert, revin_norm, ForecastDistribution, Loss, ModelConfig, LOGVAR_FLOOR, LOGVAR_MAX, LOGVAR_MIN};
use crate::nn::{patch_indices, Linear, Mlp, TransformerEncoder};
use crate::tape::{Graph, ParamStore, Tensor, Var};

/// Hidden width and depth of the pointwise estimator.
pub const POINT_WIDTH: usize = 256;
pub const POINT_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    PointMlp,
    Seq2SeqPatch,
    Seq2SeqPatchGaussian,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] =
        [BaselineKind::PointMlp, BaselineKind::Seq2SeqPatch, BaselineKind::Seq2SeqPatchGaussian];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::PointMlp => "point_mlp",
            BaselineKind::Seq2SeqPatch => "seq2seq_patch",
            BaselineKind::Seq2SeqPatchGaussian => "seq2seq_patch_gaussian",
        }
    }

    /// Forecasters predict a horizon; the point estimator maps one state to
    /// one wrench.
    pub fn is_forecaster(self) -> bool {
        self != BaselineKind::PointMlp
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = FdnError;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| FdnError::Config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Debug, Clone)]
struct SeqNet {
    embed: Linear,
    encoder: TransformerEncoder,
    mix: Linear,
    head: Linear,
    logvar: Option<Linear>,
}

#[derive(Debug, Clone)]
enum Net {
    Point(Mlp),
    Seq(SeqNet),
}

/// A trained or freshly initialized baseline. Shapes (`n`, `L`, `T`, `D`,
/// `P`, encoder depth) come from the same [`ModelConfig`] as the main model.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub norm: NormStats,
    net: Net,
}

impl Baseline {
    pub fn new(kind: BaselineKind, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rows = cfg.varying_rows();
        let net = match kind {
            BaselineKind::PointMlp => {
                let mut widths = vec![rows];
                widths.extend(std::iter::repeat_n(POINT_WIDTH, POINT_DEPTH));
                widths.push(WRENCH);
                Net::Point(Mlp::new(&mut store, "point", &widths, &mut rng))
            }
            _ => {
                let d = cfg.d_model;
                let flat = cfg.num_patches() * d;
                let embed = Linear::new(&mut store, "seq.embed", cfg.patch, d, true, &mut rng);
                let encoder = TransformerEncoder::new(&mut store, "seq.tf", d, cfg.layers, cfg.heads, &mut rng);
                let mix = Linear::new(&mut store, "seq.mix", rows, WRENCH, true, &mut rng);
                let head = Linear::new(&mut store, "seq.head", flat, cfg.horizon, true, &mut rng);
                let logvar = (kind == BaselineKind::Seq2SeqPatchGaussian)
                    .then(|| Linear::new(&mut store, "seq.logvar", flat, cfg.horizon, true, &mut rng));
                Net::Seq(SeqNet { embed, encoder, mix, head, logvar })
            }
        };
        let norm = NormStats::identity(cfg.n);
        Ok(Self { kind, cfg, store, norm, net })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Sets the weights and bias of the output layer of the point estimator
    /// to zero.
    pub fn zero_output_layer(&mut self) {
        let layer = match &self.net {
            Net::Point(mlp) => mlp.layers.last().expect("non-empty mlp").clone(),
            Net::Seq(s) => s.head.clone(),
        };
        self.store.get_mut(layer.w).data_mut().fill(0.0);
        if let Some(b) = layer.b {
            self.store.get_mut(b).data_mut().fill(0.0);
        }
    }

    /// Normalized wrench `[B, 6]` from normalized states `[B, 4n]`.
    pub fn point_forward(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let Net::Point(mlp) = &self.net else {
            return Err(FdnError::Invalid(format!("{} is not a point estimator", self.kind)));
        };
        let rows = self.cfg.varying_rows();
        if x.shape().len() != 2 || x.shape()[1] != rows {
            return Err(FdnError::Shape(format!("point estimator expects [B, {rows}], got {:?}", x.shape())));
        }
        let xv = g.constant(x.clone());
        Ok(mlp.forward(g, xv))
    }

    /// Normalized mean and, for the Gaussian variant, clamped log-variance,
    /// each `[B, 6, T]`, from the absolute history `[B, 4n, L]`.
    pub fn seq_forward(&self, g: &mut Graph, x_abs: &Tensor, dofs: &[usize]) -> Result<(Var, Option<Var>)> {
        let Net::Seq(net) = &self.net else {
            return Err(FdnError::Invalid(format!("{} is not a forecaster", self.kind)));
        };
        let cfg = &self.cfg;
        let (n, l, d, np) = (cfg.n, cfg.history, cfg.d_model, cfg.num_patches());
        let rows = cfg.varying_rows();
        let s = x_abs.shape();
        if s.len() != 3 || s[1] != rows || s[2] != l || dofs.len() != s[0] {
            return Err(FdnError::Shape(format!("forecaster expects [B, {rows}, {l}], got {s:?}")));
        }
        let b = s[0];
        let skip: Vec<bool> = dofs.iter().flat_map(|&dof| (0..rows).map(move |r| r % n >= dof)).collect();
        let xv = g.constant(x_abs.clone());
        let (xn, stats) = revin_norm(g, xv, Some(Rc::new(skip)));
        let idx = patch_indices(b * rows, l, cfg.patch, cfg.stride(), np);
        let patches = g.gather(xn, idx, &[b * rows, np, cfg.patch]);
        let e = net.embed.forward(g, patches);
        let z = net.encoder.forward(g, e);
        let z = revin_invert(g, z, &stats);
        let z = g.reshape(z, &[b, rows, np, d]);
        let z = g.permute(z, &[0, 2, 3, 1]);
        let z = net.mix.forward(g, z);
        let z = g.permute(z, &[0, 3, 1, 2]);
        let flat = g.reshape(z, &[b, WRENCH, np * d]);
        let mu = net.head.forward(g, flat);
        let logvar = net.logvar.as_ref().map(|h| {
            let v = h.forward(g, flat);
            g.clamp(v, LOGVAR_MIN, LOGVAR_MAX)
        });
        Ok((mu, logvar))
    }

    /// Training loss in normalized units. The MSE of deterministic models is
    /// reported as the trend component, the Gaussian NLL as the residual one.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Loss> {
        match self.kind {
            BaselineKind::PointMlp => {
                let y = self.point_forward(g, &batch.point_in)?;
                let total = g.mse(y, Rc::new(batch.w_now.clone()));
                Ok(Loss { total, trend: g.value(total).item(), res: 0.0 })
            }
            BaselineKind::Seq2SeqPatch => {
                let (mu, _) = self.seq_forward(g, &batch.x_abs, &batch.dofs)?;
                let total = g.mse(mu, Rc::new(batch.w.clone()));
                Ok(Loss { total, trend: g.value(total).item(), res: 0.0 })
            }
            BaselineKind::Seq2SeqPatchGaussian => {
                let (mu, logvar) = self.seq_forward(g, &batch.x_abs, &batch.dofs)?;
                let logvar = logvar.expect("gaussian head");
                let total = g.gaussian_nll(mu, logvar, Rc::new(batch.w.clone()));
                Ok(Loss { total, trend: 0.0, res: g.value(total).item() })
            }
        }
    }

    /// Physical wrench estimates `[B][6]` from normalized states `[B, 4n]`.
    pub fn point_estimate(&self, x: &Tensor) -> Result<Vec<[f64; WRENCH]>> {
        let mut g = Graph::new(&self.store);
        let y = self.point_forward(&mut g, x)?;
        Ok(g.value(y)
            .data()
            .chunks(WRENCH)
            .map(|row| std::array::from_fn(|c| row[c] * self.norm.w_std[c] + self.norm.w_mean[c]))
            .collect())
    }

    /// Physical forecasts from the absolute history `[B, 4n, L]`. The whole
    /// prediction is carried in `trend`; the deterministic variant reports the
    /// log-variance floor.
    pub fn forecast(&self, x_abs: &Tensor, dofs: &[usize]) -> Result<Vec<ForecastDistribution>> {
        let mut g = Graph::new(&self.store);
        let (mu, logvar) = self.seq_forward(&mut g, x_abs, dofs)?;
        let t = self.cfg.horizon;
        let mu = g.value(mu).data();
        let logvar = logvar.map(|v| g.value(v).data());
        let w = &self.norm;
        Ok((0..dofs.len())
            .map(|b| {
                let mut f = ForecastDistribution::zeros(t);
                for c in 0..WRENCH {
                    let (mean, std) = (w.w_mean[c], w.w_std[c]);
                    for k in 0..t {
                        let i = (b * WRENCH + c) * t + k;
                        f.trend[[c, k]] = mu[i] * std + mean;
                        f.logvar_res[[c, k]] = logvar.map_or(LOGVAR_FLOOR, |v| v[i]) + 2.0 * std.ln();
                    }
                }
                f
            })
            .collect())
    }

    /// Whether forecasts carry a non-degenerate variance.
    pub fn is_distributional(&self) -> bool {
        self.kind == BaselineKind::Seq2SeqPatchGaussian
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::model::Ablations;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n: 2,
            history: 16,
            horizon: 12,
            d_model: 8,
            patch: 4,
            layers: 1,
            heads: 2,
            ablations: Ablations::none(),
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zeroed_point_output_is_zero() {
        let mut m = Baseline::new(BaselineKind::PointMlp, cfg(), 0).unwrap();
        m.zero_output_layer();
        let out = m.point_estimate(&random(&[3, 8], 1)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn forecast_shapes() {
        let c = ModelConfig { n: 6, history: 100, horizon: 100, d_model: 16, heads: 2, layers: 1, ..cfg() };
        for kind in [BaselineKind::Seq2SeqPatch, BaselineKind::Seq2SeqPatchGaussian] {
            let m = Baseline::new(kind, c.clone(), 0).unwrap();
            let f = m.forecast(&random(&[2, 24, 100], 2), &[6, 6]).unwrap();
            assert_eq!(f[0].trend.dim(), (6, 100));
            assert_eq!(f[1].logvar_res.dim(), (6, 100));
        }
        let m = Baseline::new(BaselineKind::PointMlp, c, 0).unwrap();
        assert!(m.forecast(&random(&[1, 24, 100], 2), &[6]).is_err());
    }

    #[test]
    fn gaussian_variant_at_the_floor_is_deterministic() {
        let c = cfg();
        let det = Baseline::new(BaselineKind::Seq2SeqPatch, c.clone(), 4).unwrap();
        let mut gauss = Baseline::new(BaselineKind::Seq2SeqPatchGaussian, c, 4).unwrap();
        // Same seed, same construction order: only the extra head differs.
        for (id, p) in det.store.iter() {
            let gid = gauss.store.id(&p.name).unwrap();
            *gauss.store.get_mut(gid) = det.store.get(id).clone();
        }
        let x = random(&[2, 8, 16], 5);
        let fd = det.forecast(&x, &[2, 2]).unwrap();
        let fg = gauss.forecast(&x, &[2, 2]).unwrap();
        for (a, b) in fd.iter().zip(&fg) {
            assert_eq!(a.mean(), b.mean());
            assert!(a.sigma().iter().all(|&s| s < 1e-17));
        }
    }

    #[test]
    fn point_mlp_overfits_small_set() {
        let c = cfg();
        let mut m = Baseline::new(BaselineKind::PointMlp, c, 0).unwrap();
        let x = random(&[64, 8], 7);
        let y = random(&[64, 6], 8);
        let mut adam = crate::training::Adam::new(&m.store, 1e-3);
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let mut g = Graph::new(&m.store);
            let p = m.point_forward(&mut g, &x).unwrap();
            let l = g.mse(p, Rc::new(y.clone()));
            last = g.value(l).item();
            let grads = g.backward(l).into_param_grads();
            drop(g);
            adam.step(&mut m.store, &grads);
        }
        assert!(last < 1e-3, "final training MSE {last}");
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("lstm".parse::<BaselineKind>().is_err());
    }
}
