use ndarray::Array2;

use super::{WindowIndex, WindowSource, WRENCH};
use crate::error::{FdnError, Result};

/// Smallest standard deviation used for an active row.
pub const MIN_STD: f64 = 1e-8;

/// Per-row statistics of the model input layout, absolute joint positions and
/// the wrench.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub layout_n: usize,
    /// `5n` rows `[Δq; q̇; q̈; u; q0]`.
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Absolute joint positions, used by the baselines.
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
    pub w_mean: Vec<f64>,
    pub w_std: Vec<f64>,
}

impl NormStats {
    /// Zero mean, unit scale everywhere.
    pub fn identity(layout_n: usize) -> Self {
        Self {
            layout_n,
            x_mean: vec![0.0; 5 * layout_n],
            x_std: vec![1.0; 5 * layout_n],
            q_mean: vec![0.0; layout_n],
            q_std: vec![1.0; layout_n],
            w_mean: vec![0.0; WRENCH],
            w_std: vec![1.0; WRENCH],
        }
    }

    /// Mean and std of row `r` of the absolute layout `[q; q̇; q̈; u]`.
    pub fn abs_row(&self, r: usize, m: usize) -> (f64, f64) {
        if r < m {
            (self.q_mean[r], self.q_std[r])
        } else {
            (self.x_mean[r], self.x_std[r])
        }
    }

    pub fn apply_x(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| (v - self.x_mean[r]) / self.x_std[r]);
        }
        out
    }

    pub fn invert_x(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * self.x_std[r] + self.x_mean[r]);
        }
        out
    }

    /// Physical wrench from normalized channel values `[6 x T]`.
    pub fn invert_w(&self, w: &Array2<f64>) -> Array2<f64> {
        let mut out = w.clone();
        for (c, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * self.w_std[c] + self.w_mean[c]);
        }
        out
    }

    /// Statistics for a downstream model initialized from pretraining: joint
    /// rows keep the pretraining statistics, while the actuation rows (masked
    /// during pretraining) and the wrench come from the downstream data.
    pub fn for_transfer(pretrain: &NormStats, downstream: &NormStats) -> Result<NormStats> {
        let m = pretrain.layout_n;
        if downstream.layout_n != m {
            return Err(FdnError::Shape(format!(
                "downstream layout {} differs from pretraining layout {m}",
                downstream.layout_n
            )));
        }
        let mut out = pretrain.clone();
        out.x_mean[3 * m..4 * m].copy_from_slice(&downstream.x_mean[3 * m..4 * m]);
        out.x_std[3 * m..4 * m].copy_from_slice(&downstream.x_std[3 * m..4 * m]);
        out.q_mean.clone_from(&downstream.q_mean);
        out.q_std.clone_from(&downstream.q_std);
        out.w_mean.clone_from(&downstream.w_mean);
        out.w_std.clone_from(&downstream.w_std);
        Ok(out)
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    n: f64,
    sum: f64,
    sq: f64,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sq += v * v;
    }

    fn finish(&self, what: &str) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.sum / self.n;
        let var = (self.sq / self.n - mean * mean).max(0.0);
        let std = var.sqrt();
        if std < MIN_STD {
            log::warn!("{what} has zero variance; clamping its std to {MIN_STD}");
            return (mean, MIN_STD);
        }
        (mean, std)
    }
}

/// Fits statistics over the given training windows: every history column of
/// every window counts once for the inputs, every future column for the
/// wrench. Rows of inactive joints are skipped; rows never active, and the
/// actuation rows when `mask_u`, get mean 0 and std 1.
pub fn fit_norm(source: &WindowSource, indices: &[WindowIndex], mask_u: bool) -> Result<NormStats> {
    if indices.len() < 2 {
        return Err(FdnError::Invalid(format!("need at least 2 windows to fit statistics, got {}", indices.len())));
    }
    let m = source.layout_n();
    let t = source.horizon();
    let mut x_acc = vec![Acc::default(); 5 * m];
    let mut q_acc = vec![Acc::default(); m];
    let mut w_acc = vec![Acc::default(); WRENCH];
    for &idx in indices {
        let dof = source.dof(idx.episode);
        let x = source.x_raw(idx);
        for (r, row) in x.rows().into_iter().enumerate() {
            if r % m >= dof || (mask_u && (3 * m..4 * m).contains(&r)) {
                continue;
            }
            row.iter().for_each(|&v| x_acc[r].push(v));
            if r < m {
                let q0 = x[[4 * m + r, 0]];
                row.iter().for_each(|&v| q_acc[r].push(v + q0));
            }
        }
        let w = source.w_raw(idx.episode);
        let end = (idx.t + 1 + t).min(w.ncols());
        for c in 0..WRENCH {
            for k in idx.t + 1..end {
                w_acc[c].push(w[[c, k]]);
            }
        }
    }
    let split = |accs: &[Acc], what: &str| -> (Vec<f64>, Vec<f64>) {
        accs.iter().enumerate().map(|(i, a)| a.finish(&format!("{what} row {i}"))).unzip()
    };
    let (x_mean, x_std) = split(&x_acc, "input");
    let (q_mean, q_std) = split(&q_acc, "joint position");
    let (w_mean, w_std) = split(&w_acc, "wrench");
    Ok(NormStats { layout_n: m, x_mean, x_std, q_mean, q_std, w_mean, w_std })
}
