//! Band-specific error metrics and the continuous ranked probability score.
//!
//! Series are `[channels x steps]`; per-channel metrics return one value per
//! row.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{ArrayView1, ArrayView2};
use statrs::function::erf::erfc;

use crate::error::{FdnError, Result};

/// Sliding window of the windowed-RMS metric, in steps.
pub const WRMSE_WINDOW: usize = 10;

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(FdnError::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_window(w: usize, steps: usize) -> Result<()> {
    if w == 0 || w > steps {
        return Err(FdnError::Invalid(format!("window {w} does not fit {steps} steps")));
    }
    Ok(())
}

/// Sliding-window RMS of one row, given per-step squared magnitudes.
fn window_rms(sq: impl Iterator<Item = f64>, w: usize) -> Vec<f64> {
    let sq: Vec<f64> = sq.collect();
    sq.windows(w).map(|win| (win.iter().sum::<f64>() / w as f64).sqrt()).collect()
}

fn rmse<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.into_iter().zip(b) {
        sum += (x - y) * (x - y);
        n += 1;
    }
    (sum / n as f64).sqrt()
}

/// RMSE between the sliding-window RMS tracks of predicted and true
/// residuals, per channel.
pub fn wrmse(pred: ArrayView2<f64>, truth: ArrayView2<f64>, w: usize) -> Result<Vec<f64>> {
    same_shape(pred, truth, "wrmse")?;
    check_window(w, pred.ncols())?;
    Ok(pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(p, t)| {
            let rp = window_rms(p.iter().map(|v| v * v), w);
            let rt = window_rms(t.iter().map(|v| v * v), w);
            rmse(&rp, &rt)
        })
        .collect())
}

/// As [`wrmse`], with the predicted window RMS taken from the expected
/// square `mu^2 + sigma^2` of a Gaussian residual.
pub fn wrmse_expected(mu: ArrayView2<f64>, sigma: ArrayView2<f64>, truth: ArrayView2<f64>, w: usize) -> Result<Vec<f64>> {
    same_shape(mu, truth, "wrmse_expected")?;
    same_shape(sigma, truth, "wrmse_expected sigma")?;
    check_window(w, mu.ncols())?;
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(FdnError::Invalid("negative or NaN sigma".into()));
    }
    Ok(mu
        .rows()
        .into_iter()
        .zip(sigma.rows())
        .zip(truth.rows())
        .map(|((m, s), t)| {
            let rp = window_rms(m.iter().zip(s).map(|(m, s)| m * m + s * s), w);
            let rt = window_rms(t.iter().map(|v| v * v), w);
            rmse(&rp, &rt)
        })
        .collect())
}

/// Pointwise RMSE of trends, per channel.
pub fn prmse(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Vec<f64>> {
    same_shape(pred, truth, "prmse")?;
    if pred.ncols() == 0 {
        return Err(FdnError::Invalid("prmse of an empty series".into()));
    }
    Ok(pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(p, t)| rmse(p, t))
        .collect())
}

/// CRPS of a point forecast: the absolute error.
pub fn crps_deterministic(value: f64, obs: f64) -> f64 {
    (obs - value).abs()
}

/// Closed-form CRPS of `N(mu, sigma^2)`. A zero `sigma` gives the absolute
/// error.
pub fn crps_gaussian(mu: f64, sigma: f64, obs: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(FdnError::Invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(crps_deterministic(mu, obs));
    }
    let z = (obs - mu) / sigma;
    let cdf = 0.5 * erfc(-z * FRAC_1_SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    Ok(sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / PI.sqrt()))
}

/// CRPS of the empirical distribution of `samples`:
/// `E|X - y| - E|X - X'| / 2`, evaluated exactly from the sorted samples.
pub fn crps_samples(samples: ArrayView1<f64>, obs: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(FdnError::Invalid("CRPS of an empty sample set".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let abs = x.iter().map(|v| (v - obs).abs()).sum::<f64>() / n;
    // sum_{i<j} (x_j - x_i) = sum_i (2i - n + 1) x_i with 0-based ranks.
    let spread: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v).sum();
    Ok(abs - spread / (n * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};

    #[test]
    fn identical_series_score_zero() {
        let a = Array2::from_shape_fn((2, 50), |(c, t)| ((c + 1) as f64 * t as f64 * 0.3).sin());
        assert_eq!(wrmse(a.view(), a.view(), 10).unwrap(), vec![0.0, 0.0]);
        assert_eq!(prmse(a.view(), a.view()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_truth_against_zero() {
        let z = Array2::zeros((1, 30));
        let c = Array2::from_elem((1, 30), -2.5);
        assert!((wrmse(z.view(), c.view(), 10).unwrap()[0] - 2.5).abs() < 1e-12);
        assert!((prmse(z.view(), c.view()).unwrap()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn window_must_fit() {
        let a = Array2::zeros((1, 5));
        assert!(wrmse(a.view(), a.view(), 6).is_err());
        assert!(wrmse(a.view(), a.view(), 0).is_err());
        assert!(wrmse_expected(a.view(), (-&a - 1.0).view(), a.view(), 2).is_err());
    }

    #[test]
    fn zero_sigma_reduces_to_wrmse() {
        let m = Array2::from_shape_fn((3, 40), |(c, t)| (t as f64 * 0.7 + c as f64).cos());
        let t = Array2::from_shape_fn((3, 40), |(c, t)| (t as f64 * 0.2 - c as f64).sin());
        let s = Array2::zeros((3, 40));
        assert_eq!(wrmse_expected(m.view(), s.view(), t.view(), 10).unwrap(), wrmse(m.view(), t.view(), 10).unwrap());
    }

    #[test]
    fn crps_point_and_degenerate_limits() {
        assert_eq!(crps_deterministic(3.0, 5.0), 2.0);
        assert!((crps_gaussian(1.0, 1e-12, 4.0).unwrap() - 3.0).abs() < 1e-9);
        assert!((crps_gaussian(0.0, 1.0, 0.0).unwrap() - 0.233_695).abs() < 1e-5);
        assert!(crps_gaussian(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn crps_of_samples() {
        assert!(crps_samples(arr1(&[]).view(), 0.0).is_err());
        assert_eq!(crps_samples(arr1(&[2.0]).view(), 5.0).unwrap(), 3.0);
        // Brute force E|X - y| - E|X - X'| / 2 over all pairs.
        let x = arr1(&[0.3f64, -1.2, 2.2, 0.9, 0.0]);
        let y = 0.4f64;
        let n = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
        let b: f64 = x.iter().flat_map(|u| x.iter().map(move |v| (u - v).abs())).sum::<f64>() / (n * n);
        assert!((crps_samples(x.view(), y).unwrap() - (a - b / 2.0)).abs() < 1e-14);
    }
}
