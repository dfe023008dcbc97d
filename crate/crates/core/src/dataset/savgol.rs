//! Causal Savitzky–Golay smoothing and differentiation.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{FdnError, Result};
use crate::spectral::Series;

/// Weights that evaluate the `deriv`-th derivative at the newest sample of a
/// least-squares polynomial of degree `order` through `len` trailing samples
/// (unit step spacing). Oldest sample first.
fn weights(len: usize, order: usize, deriv: usize) -> Vec<f64> {
    let order = order.min(len - 1);
    if deriv > order {
        return vec![0.0; len];
    }
    // Sample offsets relative to the newest sample: -(len-1), ..., 0.
    let v = DMatrix::from_fn(len, order + 1, |i, j| (i as f64 - (len - 1) as f64).powi(j as i32));
    let pinv = v.pseudo_inverse(1e-12).expect("SVD of a Vandermonde block");
    let fact: f64 = (1..=deriv).map(|k| k as f64).product();
    (0..len).map(|i| pinv[(deriv, i)] * fact).collect()
}

/// Trailing-window polynomial fit evaluated at each step.
///
/// Output at step `t` uses samples `[t - window + 1, t]` only. The first
/// `window - 1` steps use the truncated prefix with the polynomial order
/// reduced to fit; derivatives are returned in units per second.
pub fn savitzky_golay_causal(s: &Series, window: usize, order: usize, deriv: usize) -> Result<Series> {
    if window < order + 1 {
        return Err(FdnError::Config(format!("window {window} too short for order {order}")));
    }
    if deriv > order {
        return Err(FdnError::Config(format!("derivative {deriv} exceeds order {order}")));
    }
    if window > s.steps() {
        return Err(FdnError::TooShort { steps: s.steps(), min: window });
    }
    let scale = s.sample_rate().powi(deriv as i32);
    let full: Vec<f64> = weights(window, order, deriv).into_iter().map(|w| w * scale).collect();
    let prefix: Vec<Vec<f64>> = (1..window)
        .map(|len| weights(len, order, deriv).into_iter().map(|w| w * scale).collect())
        .collect();
    let values = s.values();
    let mut out = Array2::zeros(values.raw_dim());
    for (row, mut out_row) in values.rows().into_iter().zip(out.rows_mut()) {
        let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
        for t in 0..row.len() {
            let (w, start) = if t + 1 >= window { (&full, t + 1 - window) } else { (&prefix[t], 0) };
            out_row[t] = w.iter().zip(&row[start..=t]).map(|(a, b)| a * b).sum();
        }
    }
    Series::new(out, s.sample_rate())
}
