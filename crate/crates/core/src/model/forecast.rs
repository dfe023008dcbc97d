use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::WRENCH;

/// Predictive distribution over a horizon in physical units: a deterministic
/// trend plus an independent Gaussian residual per step and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    /// `[6 x T]`.
    pub trend: Array2<f64>,
    pub mu_res: Array2<f64>,
    pub logvar_res: Array2<f64>,
}

impl ForecastDistribution {
    pub fn zeros(horizon: usize) -> Self {
        let z = Array2::zeros((WRENCH, horizon));
        Self { trend: z.clone(), mu_res: z.clone(), logvar_res: z }
    }

    pub fn horizon(&self) -> usize {
        self.trend.ncols()
    }

    /// Predictive mean `trend + mu_res`.
    pub fn mean(&self) -> Array2<f64> {
        &self.trend + &self.mu_res
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.logvar_res.mapv(|v| (0.5 * v).exp())
    }

    /// One sampled trajectory: the trend plus a sampled residual.
    pub fn sample(&self, seed: u64) -> Array2<f64> {
        &self.trend + &sample_residual(&self.mu_res, &self.logvar_res, seed)
    }
}

/// `mu + ε ⊙ exp(logvar / 2)` with independent standard normal `ε`.
pub fn sample_residual(mu: &Array2<f64>, logvar: &Array2<f64>, seed: u64) -> Array2<f64> {
    assert_eq!(mu.dim(), logvar.dim(), "residual parameter shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mu.clone();
    for (o, &v) in out.iter_mut().zip(logvar.iter()) {
        let eps: f64 = StandardNormal.sample(&mut rng);
        *o += eps * (0.5 * v).exp();
    }
    out
}
