//! Episodes, synthetic generation, preprocessing, windowing, normalization,
//! and train/test splitting.

mod io;
mod norm;
mod preprocess;
mod savgol;
mod split;
mod synth;
mod windows;

use ndarray::Array2;

use crate::error::{FdnError, Result};

pub use io::{read_episode, write_episode};
pub use norm::{fit_norm, NormStats};
pub use preprocess::{preprocess_episode, ProcessedEpisode, SgConfig};
pub use savgol::savitzky_golay_causal;
pub use split::{split_episodes, SplitPolicy};
pub use synth::{synth_corpus, synth_episode, SigmaParams, SynthConfig, SynthMeta};
pub use windows::{make_windows, Batch, WindowIndex, WindowSample, WindowSource};

/// Number of wrench channels: three forces followed by three torques.
pub const WRENCH: usize = 6;

/// A uniformly sampled record of joint positions, actuation and wrench.
#[derive(Debug, Clone)]
pub struct Episode {
    pub sample_rate: f64,
    /// Seconds, one per step.
    pub timestamps: Vec<f64>,
    /// Joint positions `[n x steps]` (rad).
    pub q: Array2<f64>,
    /// Actuation `[n x steps]`.
    pub u: Array2<f64>,
    /// Wrench `[6 x steps]`, forces (N) then torques (Nm).
    pub w: Array2<f64>,
    /// Wrench sample times when the sensor runs on its own clock; `None` means
    /// `timestamps`.
    pub w_timestamps: Option<Vec<f64>>,
    pub session: String,
    /// End of the static phase used for offset removal.
    pub static_end_s: Option<f64>,
    /// Ground truth for synthetic episodes.
    pub meta: Option<SynthMeta>,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn steps(&self) -> usize {
        self.q.ncols()
    }

    /// Initial joint position.
    pub fn q0(&self) -> Vec<f64> {
        self.q.column(0).to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if self.u.dim() != (self.n(), steps) {
            return Err(FdnError::Shape(format!("u is {:?}, q is {:?}", self.u.dim(), self.q.dim())));
        }
        if self.w.nrows() != WRENCH {
            return Err(FdnError::Shape(format!("wrench has {} channels", self.w.nrows())));
        }
        let w_steps = self.w_timestamps.as_ref().map_or(steps, Vec::len);
        if self.w.ncols() != w_steps || self.timestamps.len() != steps {
            return Err(FdnError::Shape("step counts of q, u, W and timestamps differ".into()));
        }
        if steps < 2 {
            return Err(FdnError::TooShort { steps, min: 2 });
        }
        let dt = 1.0 / self.sample_rate;
        for pair in self.timestamps.windows(2) {
            if ((pair[1] - pair[0]) - dt).abs() > 1e-9 {
                return Err(FdnError::Invalid(format!(
                    "timestamps not uniform at {} s (expected spacing {dt} s)",
                    pair[0]
                )));
            }
        }
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&self.q) && finite(&self.u) && finite(&self.w)) {
            return Err(FdnError::NonFinite("episode channels".into()));
        }
        Ok(())
    }
}

/// Uniform timestamps `start + i / rate`.
pub fn uniform_timestamps(steps: usize, rate: f64, start: f64) -> Vec<f64> {
    (0..steps).map(|i| start + i as f64 / rate).collect()
}
