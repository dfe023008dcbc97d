//! Delayed-estimation reconstruction of held-out episodes and band-specific
//! scoring: windowed-RMS error of the residual band, pointwise error of the
//! trend band, and CRPS of the full signal.

mod metrics;
mod plot;
mod reconstruct;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, ArrayView2};

pub use metrics::{crps_deterministic, crps_gaussian, crps_samples, prmse, wrmse, wrmse_expected, WRMSE_WINDOW};
pub use plot::plot_reconstruction;
pub use reconstruct::{
    reconstruct_episode, DelayMode, DelaySpec, OracleForecaster, PointOracle, Predictions, Predictor, Reconstruction,
};

use crate::dataset::{WindowSource, WRENCH};
use crate::error::{FdnError, Result};
use crate::spectral::{decompose, FilterSpec, Series};

/// Channel labels: forces then torques.
pub const CHANNELS: [&str; WRENCH] = ["fx", "fy", "fz", "tx", "ty", "tz"];
/// Delays evaluated by default, in milliseconds.
pub const DEFAULT_DELAYS_MS: [f64; 2] = [100.0, 1000.0];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelMetrics {
    pub wrmse: f64,
    pub prmse: f64,
    pub crps: f64,
}

impl ChannelMetrics {
    fn scaled(self, s: f64) -> Self {
        Self { wrmse: self.wrmse / s, prmse: self.prmse / s, crps: self.crps / s }
    }

    fn mean(items: &[ChannelMetrics]) -> Self {
        let n = items.len() as f64;
        Self {
            wrmse: items.iter().map(|m| m.wrmse).sum::<f64>() / n,
            prmse: items.iter().map(|m| m.prmse).sum::<f64>() / n,
            crps: items.iter().map(|m| m.crps).sum::<f64>() / n,
        }
    }

    fn is_valid(&self) -> bool {
        [self.wrmse, self.prmse, self.crps].iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Scores of one model on one episode at one delay, in physical units (N for
/// forces, Nm for torques).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub episode: usize,
    pub delay: DelaySpec,
    pub channels: [ChannelMetrics; WRENCH],
    /// Per-channel divisor of the normalized scale (training wrench std).
    pub scale: [f64; WRENCH],
}

impl MetricsReport {
    pub fn force(&self) -> ChannelMetrics {
        ChannelMetrics::mean(&self.channels[..3])
    }

    pub fn torque(&self) -> ChannelMetrics {
        ChannelMetrics::mean(&self.channels[3..])
    }

    pub fn normalized(&self) -> [ChannelMetrics; WRENCH] {
        std::array::from_fn(|c| self.channels[c].scaled(self.scale[c]))
    }

    pub fn normalized_force(&self) -> ChannelMetrics {
        ChannelMetrics::mean(&self.normalized()[..3])
    }

    pub fn normalized_torque(&self) -> ChannelMetrics {
        ChannelMetrics::mean(&self.normalized()[3..])
    }

    /// Labelled rows: six channels then the force and torque aggregates.
    pub fn rows(&self, normalized: bool) -> Vec<(&'static str, ChannelMetrics)> {
        let (ch, f, t) = if normalized {
            (self.normalized(), self.normalized_force(), self.normalized_torque())
        } else {
            (self.channels, self.force(), self.torque())
        };
        CHANNELS.iter().copied().zip(ch).chain([("force", f), ("torque", t)]).collect()
    }
}

/// Scores a reconstruction against the truth on its valid steps. Both are
/// decomposed over that span with the low-pass at `spec.f_c`; the residual
/// band is scored with the windowed RMS (its expected form when `sigma` is
/// meaningful), the trend band pointwise, and the full signal with CRPS.
pub fn score(rec: &Reconstruction, truth: ArrayView2<f64>, spec: &FilterSpec, distributional: bool) -> Result<[ChannelMetrics; WRENCH]> {
    if truth.dim() != rec.mean.dim() {
        return Err(FdnError::Shape(format!("truth {:?} vs reconstruction {:?}", truth.dim(), rec.mean.dim())));
    }
    let v = rec.valid.clone();
    let mean = rec.mean.slice(s![.., v.clone()]).to_owned();
    let sigma = rec.sigma.slice(s![.., v.clone()]);
    let truth = truth.slice(s![.., v]).to_owned();
    let (trend_hat, res_hat) = decompose(&Series::new(mean.clone(), spec.sample_rate)?, spec)?;
    let (trend, res) = decompose(&Series::new(truth.clone(), spec.sample_rate)?, spec)?;

    let w = if distributional {
        wrmse_expected(res_hat.values().view(), sigma, res.values().view(), WRMSE_WINDOW)?
    } else {
        wrmse(res_hat.values().view(), res.values().view(), WRMSE_WINDOW)?
    };
    let p = prmse(trend_hat.values().view(), trend.values().view())?;
    let mut out = [ChannelMetrics::default(); WRENCH];
    for c in 0..WRENCH {
        let mut crps = 0.0;
        for ((&m, &y), &sd) in mean.row(c).iter().zip(truth.row(c)).zip(sigma.row(c)) {
            crps += if distributional { crps_gaussian(m, sd, y)? } else { crps_deterministic(m, y) };
        }
        out[c] = ChannelMetrics { wrmse: w[c], prmse: p[c], crps: crps / mean.ncols() as f64 };
    }
    Ok(out)
}

/// Reconstructs and scores every episode at every delay; one report per
/// (episode, delay), ordered by episode then delay. `scale` is the training
/// wrench standard deviation used for the normalized view.
pub fn evaluate(
    p: &dyn Predictor,
    source: &WindowSource,
    episodes: &[usize],
    delays: &[DelaySpec],
    scale: &[f64],
    batch_size: usize,
) -> Result<Vec<MetricsReport>> {
    let scale: [f64; WRENCH] = scale
        .try_into()
        .map_err(|_| FdnError::Shape(format!("{} scale entries, expected {WRENCH}", scale.len())))?;
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(FdnError::Invalid("normalization scale must be positive".into()));
    }
    let mut out = Vec::with_capacity(episodes.len() * delays.len());
    for &e in episodes {
        let recs = reconstruct_episode(p, source, e, delays, batch_size)?;
        for rec in recs {
            let channels = score(&rec, source.w_raw(e), source.spec(), p.is_distributional())?;
            if !channels.iter().all(ChannelMetrics::is_valid) {
                return Err(FdnError::NonFinite(format!("metrics of {} on episode {e}", p.id())));
            }
            out.push(MetricsReport { model: p.id(), episode: e, delay: rec.delay, channels, scale });
        }
    }
    Ok(out)
}

/// Writes reports as CSV, one row per channel and aggregate, physical and
/// normalized.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FdnError::Io(e.into()))?;
    let io = |e: csv::Error| FdnError::Io(e.into());
    w.write_record(["model", "episode", "delay_ms", "mode", "channel", "wrmse", "prmse", "crps", "normalized"]).map_err(io)?;
    for r in reports {
        for normalized in [false, true] {
            for (label, m) in r.rows(normalized) {
                w.write_record([
                    r.model.clone(),
                    r.episode.to_string(),
                    r.delay.delay_ms.to_string(),
                    r.delay.mode.to_string(),
                    label.to_string(),
                    m.wrmse.to_string(),
                    m.prmse.to_string(),
                    m.crps.to_string(),
                    normalized.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Episode-averaged force and torque scores per (model, delay), in order of
/// first appearance.
pub fn summarize(reports: &[MetricsReport]) -> Vec<(String, f64, ChannelMetrics, ChannelMetrics)> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in reports {
        let key = (r.model.clone(), r.delay.delay_ms);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, delay)| {
            let sel: Vec<_> = reports.iter().filter(|r| r.model == model && r.delay.delay_ms == delay).collect();
            let f: Vec<_> = sel.iter().map(|r| r.force()).collect();
            let t: Vec<_> = sel.iter().map(|r| r.torque()).collect();
            (model, delay, ChannelMetrics::mean(&f), ChannelMetrics::mean(&t))
        })
        .collect()
}

/// Human-readable table of [`summarize`].
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "model", "delay_ms", "F wRMSE", "F pRMSE", "F CRPS", "T wRMSE", "T pRMSE", "T CRPS"
    );
    for (model, delay, f, t) in summarize(reports) {
        let _ = writeln!(
            s,
            "{model:<32} {delay:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            f.wrmse, f.prmse, f.crps, t.wrmse, t.prmse, t.crps
        );
    }
    s
}

#[cfg(test)]
mod tests;
