use ndarray::{s, Array1, Array2, ArrayView2};

use super::{NormStats, ProcessedEpisode, WRENCH};
use crate::error::{FdnError, Result};
use crate::spectral::{FilterSpec, ZeroPhaseFilter};
use crate::tape::Tensor;

/// Position of one training pair inside a [`WindowSource`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowIndex {
    pub episode: usize,
    /// Prediction time: the last history step.
    pub t: usize,
}

/// One materialized (history, future) pair in physical units.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `[5n x L]` rows `[Δq; q̇; q̈; u; q0]`.
    pub x: Array2<f64>,
    pub w_future: Array2<f64>,
    pub w_trend: Array2<f64>,
    pub w_res: Array2<f64>,
    /// Wrench at the prediction time (point-estimation target).
    pub w_now: Array1<f64>,
    pub t_index: usize,
    pub episode: usize,
    /// Active joints; rows of higher joints are zero.
    pub dof: usize,
}

/// A normalized minibatch in tensor form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    /// `[B, 5n, L]`.
    pub x: Tensor,
    /// `[B, 4n, L]` rows `[q; q̇; q̈; u]` with absolute positions.
    pub x_abs: Tensor,
    /// `[B, 6, T]` future wrench and its decomposition.
    pub w: Tensor,
    pub trend: Tensor,
    pub res: Tensor,
    /// `[B, 6]`.
    pub w_now: Tensor,
    /// `[B, 4n]` absolute state at the prediction time.
    pub point_in: Tensor,
    pub dofs: Vec<usize>,
}

struct Stacked {
    /// `[5n, steps]` in the model layout.
    x: Array2<f64>,
    /// `[n, steps]`.
    q_abs: Array2<f64>,
    w: Array2<f64>,
    dof: usize,
}

/// Lazily materializes windows from preprocessed episodes laid out for a
/// model with `layout_n` joints. Episodes with fewer joints occupy the leading
/// rows of every block; the rest stay zero.
pub struct WindowSource {
    episodes: Vec<Stacked>,
    layout_n: usize,
    history: usize,
    horizon: usize,
    low: ZeroPhaseFilter,
    spec: FilterSpec,
}

impl WindowSource {
    pub fn new(
        episodes: &[ProcessedEpisode],
        layout_n: usize,
        history: usize,
        horizon: usize,
        spec: &FilterSpec,
    ) -> Result<Self> {
        let m = layout_n;
        let stacked = episodes
            .iter()
            .map(|p| {
                let e = &p.episode;
                let n = e.n();
                if n > m {
                    return Err(FdnError::Shape(format!("episode has {n} joints, layout has {m}")));
                }
                let steps = e.steps();
                let q0 = e.q0();
                let mut x = Array2::zeros((5 * m, steps));
                let mut q_abs = Array2::zeros((m, steps));
                for j in 0..n {
                    for t in 0..steps {
                        x[[j, t]] = e.q[[j, t]] - q0[j];
                        x[[m + j, t]] = p.qd[[j, t]];
                        x[[2 * m + j, t]] = p.qdd[[j, t]];
                        x[[3 * m + j, t]] = e.u[[j, t]];
                        x[[4 * m + j, t]] = q0[j];
                    }
                    q_abs.row_mut(j).assign(&e.q.row(j));
                }
                Ok(Stacked { x, q_abs, w: e.w.clone(), dof: n })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            episodes: stacked,
            layout_n,
            history,
            horizon,
            low: ZeroPhaseFilter::lowpass(horizon, spec.f_c, spec)?,
            spec: *spec,
        })
    }

    pub fn layout_n(&self) -> usize {
        self.layout_n
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode_steps(&self, episode: usize) -> usize {
        self.episodes[episode].x.ncols()
    }

    pub fn dof(&self, episode: usize) -> usize {
        self.episodes[episode].dof
    }

    /// Window positions of every episode with the given stride. Episodes
    /// shorter than `L + T` contribute nothing and log a warning.
    pub fn indices(&self, stride: usize) -> Vec<WindowIndex> {
        let stride = stride.max(1);
        let (l, t) = (self.history, self.horizon);
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            let steps = ep.x.ncols();
            if steps < l + t {
                log::warn!("episode {e} has {steps} steps, fewer than L + T = {}; no windows", l + t);
                continue;
            }
            let count = (steps - l - t) / stride + 1;
            out.extend((0..count).map(|k| WindowIndex { episode: e, t: l - 1 + k * stride }));
        }
        out
    }

    /// Every prediction time of an episode with a full history, regardless of
    /// whether the future is available.
    pub fn prediction_times(&self, episode: usize) -> std::ops::Range<usize> {
        self.history - 1..self.episode_steps(episode)
    }

    pub fn x_raw(&self, idx: WindowIndex) -> ArrayView2<'_, f64> {
        let ep = &self.episodes[idx.episode];
        ep.x.slice(s![.., idx.t + 1 - self.history..=idx.t])
    }

    fn x_abs_raw(&self, idx: WindowIndex) -> Array2<f64> {
        let m = self.layout_n;
        let ep = &self.episodes[idx.episode];
        let (lo, hi) = (idx.t + 1 - self.history, idx.t + 1);
        let mut out = Array2::zeros((4 * m, self.history));
        out.slice_mut(s![..m, ..]).assign(&ep.q_abs.slice(s![.., lo..hi]));
        out.slice_mut(s![m.., ..]).assign(&ep.x.slice(s![m..4 * m, lo..hi]));
        out
    }

    pub fn w_raw(&self, episode: usize) -> ArrayView2<'_, f64> {
        self.episodes[episode].w.view()
    }

    /// Materializes one window in physical units.
    pub fn sample(&self, idx: WindowIndex) -> WindowSample {
        let ep = &self.episodes[idx.episode];
        let future = ep.w.slice(s![.., idx.t + 1..idx.t + 1 + self.horizon]).to_owned();
        let trend = self.low.apply(future.view());
        let res = &future - &trend;
        WindowSample {
            x: self.x_raw(idx).to_owned(),
            w_future: future,
            w_trend: trend,
            w_res: res,
            w_now: ep.w.column(idx.t).to_owned(),
            t_index: idx.t,
            episode: idx.episode,
            dof: ep.dof,
        }
    }

    /// Normalized batch. Windows without a complete future get zero targets.
    pub fn batch(&self, indices: &[WindowIndex], norm: &NormStats) -> Batch {
        self.build(indices, norm, true)
    }

    /// Normalized inputs only; the future targets are left at zero.
    pub fn inputs(&self, indices: &[WindowIndex], norm: &NormStats) -> Batch {
        self.build(indices, norm, false)
    }

    fn build(&self, indices: &[WindowIndex], norm: &NormStats, targets: bool) -> Batch {
        let (m, l, t) = (self.layout_n, self.history, self.horizon);
        let b = indices.len();
        let mut x = Vec::with_capacity(b * 5 * m * l);
        let mut x_abs = Vec::with_capacity(b * 4 * m * l);
        let mut w = vec![0.0; b * WRENCH * t];
        let mut w_now = Vec::with_capacity(b * WRENCH);
        let mut point_in = Vec::with_capacity(b * 4 * m);
        let mut dofs = Vec::with_capacity(b);
        for (bi, &idx) in indices.iter().enumerate() {
            let ep = &self.episodes[idx.episode];
            let dof = ep.dof;
            dofs.push(dof);
            let raw = self.x_raw(idx);
            for (r, row) in raw.rows().into_iter().enumerate() {
                let active = r % m < dof;
                let (mean, std) = (norm.x_mean[r], norm.x_std[r]);
                x.extend(row.iter().map(|&v| if active { (v - mean) / std } else { 0.0 }));
            }
            let abs = self.x_abs_raw(idx);
            for (r, row) in abs.rows().into_iter().enumerate() {
                let active = r % m < dof;
                let (mean, std) = norm.abs_row(r, m);
                let start = x_abs.len();
                x_abs.extend(row.iter().map(|&v| if active { (v - mean) / std } else { 0.0 }));
                point_in.push(x_abs[start + l - 1]);
            }
            for c in 0..WRENCH {
                let (mean, std) = (norm.w_mean[c], norm.w_std[c]);
                w_now.push((ep.w[[c, idx.t]] - mean) / std);
                if !targets {
                    continue;
                }
                let avail = ep.w.ncols().saturating_sub(idx.t + 1).min(t);
                let dst = &mut w[(bi * WRENCH + c) * t..(bi * WRENCH + c + 1) * t];
                for k in 0..avail {
                    dst[k] = (ep.w[[c, idx.t + 1 + k]] - mean) / std;
                }
            }
        }
        let mut trend = vec![0.0; w.len()];
        if targets {
            for (src, dst) in w.chunks(t).zip(trend.chunks_mut(t)) {
                self.low.apply_slice(src, dst);
            }
        }
        let res: Vec<f64> = w.iter().zip(&trend).map(|(a, b)| a - b).collect();
        Batch {
            size: b,
            x: Tensor::from_vec(&[b, 5 * m, l], x),
            x_abs: Tensor::from_vec(&[b, 4 * m, l], x_abs),
            w: Tensor::from_vec(&[b, WRENCH, t], w),
            trend: Tensor::from_vec(&[b, WRENCH, t], trend),
            res: Tensor::from_vec(&[b, WRENCH, t], res),
            w_now: Tensor::from_vec(&[b, WRENCH], w_now),
            point_in: Tensor::from_vec(&[b, 4 * m], point_in),
            dofs,
        }
    }
}

/// All windows of one episode in its own joint layout.
pub fn make_windows(
    e: &ProcessedEpisode,
    history: usize,
    horizon: usize,
    stride: usize,
    spec: &FilterSpec,
) -> Result<Vec<WindowSample>> {
    let src = WindowSource::new(std::slice::from_ref(e), e.n(), history, horizon, spec)?;
    Ok(src.indices(stride).into_iter().map(|i| src.sample(i)).collect())
}
