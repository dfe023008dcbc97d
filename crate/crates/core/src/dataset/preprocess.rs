use ndarray::{Array1, Array2, Axis};

use super::{savitzky_golay_causal, Episode, WRENCH};
use crate::error::{FdnError, Result};
use crate::spectral::{lowpass_at, FilterSpec, Series};

/// Causal Savitzky–Golay settings for velocity and acceleration estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgConfig {
    pub window: usize,
    pub order: usize,
}

impl Default for SgConfig {
    fn default() -> Self {
        Self { window: 11, order: 3 }
    }
}

/// A denoised, offset-free episode with estimated joint derivatives.
#[derive(Debug, Clone)]
pub struct ProcessedEpisode {
    pub episode: Episode,
    pub qd: Array2<f64>,
    pub qdd: Array2<f64>,
}

impl ProcessedEpisode {
    pub fn n(&self) -> usize {
        self.episode.n()
    }

    pub fn steps(&self) -> usize {
        self.episode.steps()
    }
}

/// Zero-order hold of `values` sampled at `src_t` onto `dst_t`: each target
/// time takes the most recent source sample at or before it (the first sample
/// before the source starts).
pub fn zoh_align(values: &Array2<f64>, src_t: &[f64], dst_t: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((values.nrows(), dst_t.len()));
    let mut j = 0;
    for (i, &t) in dst_t.iter().enumerate() {
        while j + 1 < src_t.len() && src_t[j + 1] <= t + 1e-12 {
            j += 1;
        }
        out.column_mut(i).assign(&values.column(j));
    }
    out
}

/// Denoises q, u and W at `f_c_dn`, estimates q̇ and q̈, aligns the wrench
/// clock and removes the static-phase wrench offset.
pub fn preprocess_episode(raw: &Episode, spec: &FilterSpec, sg: SgConfig) -> Result<ProcessedEpisode> {
    raw.validate()?;
    let static_end = raw.static_end_s.ok_or(FdnError::MissingStaticSegment)?;
    let rate = raw.sample_rate;
    if (spec.sample_rate - rate).abs() > 1e-9 {
        return Err(FdnError::Config(format!(
            "filter sample rate {} Hz differs from episode rate {rate} Hz",
            spec.sample_rate
        )));
    }
    let denoise = |a: &Array2<f64>| -> Result<Array2<f64>> {
        Ok(lowpass_at(&Series::new(a.clone(), rate)?, spec.f_c_dn, spec)?.into_values())
    };
    let q = denoise(&raw.q)?;
    let u = denoise(&raw.u)?;
    let q_series = Series::new(q.clone(), rate)?;
    let qd = savitzky_golay_causal(&q_series, sg.window, sg.order, 1)?.into_values();
    let qdd = savitzky_golay_causal(&q_series, sg.window, sg.order, 2)?.into_values();

    let w_aligned = match &raw.w_timestamps {
        Some(wt) => zoh_align(&raw.w, wt, &raw.timestamps),
        None => raw.w.clone(),
    };
    let mut w = denoise(&w_aligned)?;
    let t0 = raw.timestamps[0];
    let head = raw.timestamps.iter().take_while(|&&t| t - t0 < static_end - 1e-9).count();
    if head == 0 {
        return Err(FdnError::MissingStaticSegment);
    }
    let offset: Array1<f64> = w.slice(ndarray::s![.., ..head]).mean_axis(Axis(1)).expect("non-empty head");
    for c in 0..WRENCH {
        let o = offset[c];
        w.row_mut(c).mapv_inplace(|v| v - o);
    }

    let episode = Episode { q, u, w, w_timestamps: None, ..raw.clone() };
    Ok(ProcessedEpisode { episode, qd, qdd })
}
