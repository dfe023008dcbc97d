//! Independent reference computations shared by the integration tests and the
//! acceptance runner. Everything here is written from the definitions with
//! plain loops, without calling the code under test.

#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, Normal};

/// Low-pass amplitude `1 / sqrt(1 + (f / c)^(2r))`, with the power taken as
/// `exp(2r ln(f / c))` instead of repeated multiplication.
pub fn lowpass(f: f64, cutoff: f64, order: u32) -> f64 {
    if f == 0.0 {
        return 1.0;
    }
    let p = (2.0 * order as f64 * (f / cutoff).ln()).exp();
    1.0 / (1.0 + p).sqrt()
}

/// Residual band: complement of the trend low-pass times the denoising low-pass.
pub fn highpass(f: f64, f_c: f64, f_c_dn: f64, order: u32) -> f64 {
    (1.0 - lowpass(f, f_c, order)) * lowpass(f, f_c_dn, order)
}

/// Windowed RMS track by direct summation.
pub fn window_rms(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..=x.len() - w {
        let mut s = 0.0;
        for i in t..t + w {
            s += x[i] * x[i];
        }
        out.push((s / w as f64).sqrt());
    }
    out
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s / a.len() as f64).sqrt()
}

pub fn wrmse(pred: &[f64], truth: &[f64], w: usize) -> f64 {
    rmse(&window_rms(pred, w), &window_rms(truth, w))
}

/// Windowed RMS with the prediction's per-step square replaced by `mu^2 + sigma^2`.
pub fn wrmse_expected(mu: &[f64], sigma: &[f64], truth: &[f64], w: usize) -> f64 {
    let mut rp = Vec::new();
    for t in 0..=mu.len() - w {
        let mut s = 0.0;
        for i in t..t + w {
            s += mu[i] * mu[i] + sigma[i] * sigma[i];
        }
        rp.push((s / w as f64).sqrt());
    }
    rmse(&rp, &window_rms(truth, w))
}

/// CRPS as the integral of `(F(x) - 1{x >= y})^2`, trapezoid rule with step
/// `h` over `[lo, hi]`, split at the observation so the jump is not smeared.
pub fn crps_integral(mu: f64, sigma: f64, y: f64, lo: f64, hi: f64, h: f64) -> f64 {
    let normal = Normal::new(mu, sigma).unwrap();
    let integrate = |a: f64, b: f64, above: bool| {
        if b <= a {
            return 0.0;
        }
        let n = ((b - a) / h).ceil() as usize;
        let dx = (b - a) / n as f64;
        let f = |x: f64| {
            let c = normal.cdf(x) - if above { 1.0 } else { 0.0 };
            c * c
        };
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * dx);
        }
        s * dx
    };
    let y = y.clamp(lo, hi);
    integrate(lo, y, false) + integrate(y, hi, true)
}

/// `E|X - y| - E|X - X'| / 2` over all sample pairs.
pub fn crps_pairs(samples: &[f64], y: f64) -> f64 {
    let n = samples.len() as f64;
    let a: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let mut b = 0.0;
    for x in samples {
        for z in samples {
            b += (x - z).abs();
        }
    }
    a - b / (2.0 * n * n)
}
