//! Episode reconstruction under a constant estimation delay.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2};

use crate::baselines::Baseline;
use crate::dataset::{WindowIndex, WindowSource, WRENCH};
use crate::error::{FdnError, Result};
use crate::model::{FdnModel, ForecastDistribution};

/// How estimates are aligned with the delayed truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayMode {
    /// A point estimate of the current wrench, available `k` steps late.
    ZohPoint,
    /// Horizon step `k` of a forecast issued `k` steps earlier.
    DelayCompensated,
}

impl DelayMode {
    pub fn name(self) -> &'static str {
        match self {
            DelayMode::ZohPoint => "zoh_point",
            DelayMode::DelayCompensated => "delay_compensated",
        }
    }
}

impl fmt::Display for DelayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DelayMode {
    type Err = FdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zoh_point" => Ok(DelayMode::ZohPoint),
            "delay_compensated" => Ok(DelayMode::DelayCompensated),
            other => Err(FdnError::Config(format!("unknown delay mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySpec {
    pub delay_ms: f64,
    pub mode: DelayMode,
}

impl DelaySpec {
    pub fn new(delay_ms: f64, mode: DelayMode) -> Self {
        Self { delay_ms, mode }
    }

    /// Delay in samples; must be a non-negative whole number of periods.
    pub fn steps(&self, sample_rate: f64) -> Result<usize> {
        let k = self.delay_ms * sample_rate / 1000.0;
        if !(k >= 0.0) || (k - k.round()).abs() > 1e-9 {
            return Err(FdnError::Config(format!(
                "delay {} ms is not a non-negative multiple of the {} ms sample period",
                self.delay_ms,
                1000.0 / sample_rate
            )));
        }
        Ok(k.round() as usize)
    }
}

/// Model output for a set of prediction times.
#[derive(Debug, Clone)]
pub enum Predictions {
    Forecasts(Vec<ForecastDistribution>),
    /// Physical wrench estimates at the prediction times.
    Points(Vec<[f64; WRENCH]>),
}

/// Anything that produces estimates from windows of a [`WindowSource`].
pub trait Predictor {
    /// Name used in reports.
    fn id(&self) -> String;
    /// Forecast length, or `None` for pointwise estimators.
    fn horizon(&self) -> Option<usize>;
    /// Whether forecasts carry a meaningful residual variance.
    fn is_distributional(&self) -> bool;
    fn predict(&self, source: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions>;
}

fn check_layout(source: &WindowSource, n: usize, history: usize) -> Result<()> {
    if source.layout_n() != n || source.history() != history {
        return Err(FdnError::Shape(format!(
            "model expects {n} joints and {history} history steps, data has {} and {}",
            source.layout_n(),
            source.history()
        )));
    }
    Ok(())
}

impl Predictor for FdnModel {
    fn id(&self) -> String {
        format!("fdn[{}]", self.cfg.ablations.to_list())
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.cfg.horizon)
    }

    fn is_distributional(&self) -> bool {
        true
    }

    fn predict(&self, source: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        check_layout(source, self.cfg.n, self.cfg.history)?;
        let batch = source.inputs(idx, &self.norm);
        Ok(Predictions::Forecasts(self.forecast(&batch.x, &batch.dofs)?))
    }
}

impl Predictor for Baseline {
    fn id(&self) -> String {
        self.kind.name().into()
    }

    fn horizon(&self) -> Option<usize> {
        self.kind.is_forecaster().then_some(self.cfg.horizon)
    }

    fn is_distributional(&self) -> bool {
        Baseline::is_distributional(self)
    }

    fn predict(&self, source: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        check_layout(source, self.cfg.n, self.cfg.history)?;
        let batch = source.inputs(idx, &self.norm);
        if self.kind.is_forecaster() {
            Ok(Predictions::Forecasts(self.forecast(&batch.x_abs, &batch.dofs)?))
        } else {
            Ok(Predictions::Points(self.point_estimate(&batch.point_in)?))
        }
    }
}

/// Returns the true future of every window.
#[derive(Debug, Clone, Copy)]
pub struct OracleForecaster {
    pub horizon: usize,
}

impl Predictor for OracleForecaster {
    fn id(&self) -> String {
        "oracle_forecaster".into()
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.horizon)
    }

    fn is_distributional(&self) -> bool {
        false
    }

    fn predict(&self, source: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        Ok(Predictions::Forecasts(
            idx.iter()
                .map(|i| {
                    let w = source.w_raw(i.episode);
                    let mut f = ForecastDistribution::zeros(self.horizon);
                    let end = (i.t + 1 + self.horizon).min(w.ncols());
                    let avail = end.saturating_sub(i.t + 1);
                    f.trend.slice_mut(s![.., ..avail]).assign(&w.slice(s![.., i.t + 1..end]));
                    f
                })
                .collect(),
        ))
    }
}

/// Returns the true current wrench of every window.
#[derive(Debug, Clone, Copy)]
pub struct PointOracle;

impl Predictor for PointOracle {
    fn id(&self) -> String {
        "point_oracle".into()
    }

    fn horizon(&self) -> Option<usize> {
        None
    }

    fn is_distributional(&self) -> bool {
        false
    }

    fn predict(&self, source: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        Ok(Predictions::Points(
            idx.iter()
                .map(|i| {
                    let w = source.w_raw(i.episode);
                    std::array::from_fn(|c| w[[c, i.t]])
                })
                .collect(),
        ))
    }
}

/// Delayed estimate tracks of one episode.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub delay: DelaySpec,
    /// Delay in samples.
    pub k: usize,
    /// `[6 x steps]` predictive mean; zero outside `valid`.
    pub mean: Array2<f64>,
    /// `[6 x steps]` residual standard deviation; zero for deterministic models.
    pub sigma: Array2<f64>,
    /// Steps that carry an estimate and are scored.
    pub valid: Range<usize>,
}

fn delay_steps(p: &dyn Predictor, d: &DelaySpec, rate: f64) -> Result<usize> {
    let k = d.steps(rate)?;
    match (d.mode, p.horizon()) {
        (DelayMode::ZohPoint, None) => Ok(k),
        (DelayMode::DelayCompensated, Some(t)) => {
            if k == 0 {
                return Err(FdnError::Config("delay-compensated forecasts start one step ahead; delay 0 is not allowed".into()));
            }
            if k > t {
                return Err(FdnError::Config(format!("delay of {k} steps exceeds the forecast horizon {t}")));
            }
            Ok(k)
        }
        (DelayMode::ZohPoint, Some(_)) => {
            Err(FdnError::Config(format!("{} is a forecaster; use delay-compensated mode", p.id())))
        }
        (DelayMode::DelayCompensated, None) => {
            Err(FdnError::Config(format!("{} is a point estimator; use zoh_point mode", p.id())))
        }
    }
}

/// Reconstructs one episode for every delay from a single pass of
/// predictions: the estimate issued at time `t` for delay `k` lands at
/// `t + k`, using horizon step `k` of a forecast or the point estimate
/// itself. The first `L + k` steps are excluded from `valid`.
pub fn reconstruct_episode(
    p: &dyn Predictor,
    source: &WindowSource,
    episode: usize,
    delays: &[DelaySpec],
    batch_size: usize,
) -> Result<Vec<Reconstruction>> {
    let rate = source.spec().sample_rate;
    let steps = source.episode_steps(episode);
    let ks = delays.iter().map(|d| delay_steps(p, d, rate)).collect::<Result<Vec<_>>>()?;
    let mut recs = delays
        .iter()
        .zip(&ks)
        .map(|(&delay, &k)| {
            let valid = (source.history() + k).min(steps)..steps;
            if valid.len() < 2 {
                return Err(FdnError::TooShort { steps, min: source.history() + k + 2 });
            }
            Ok(Reconstruction {
                delay,
                k,
                mean: Array2::zeros((WRENCH, steps)),
                sigma: Array2::zeros((WRENCH, steps)),
                valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(&k_min) = ks.iter().min() else { return Ok(recs) };
    let times: Vec<WindowIndex> =
        source.prediction_times(episode).filter(|t| t + k_min < steps).map(|t| WindowIndex { episode, t }).collect();
    let distributional = p.is_distributional();
    for chunk in times.chunks(batch_size.max(1)) {
        let preds = p.predict(source, chunk)?;
        for rec in &mut recs {
            let k = rec.k;
            for (i, idx) in chunk.iter().enumerate() {
                let pos = idx.t + k;
                if pos >= steps {
                    continue;
                }
                match &preds {
                    Predictions::Forecasts(f) => {
                        let f = &f[i];
                        for c in 0..WRENCH {
                            rec.mean[[c, pos]] = f.trend[[c, k - 1]] + f.mu_res[[c, k - 1]];
                            if distributional {
                                rec.sigma[[c, pos]] = (0.5 * f.logvar_res[[c, k - 1]]).exp();
                            }
                        }
                    }
                    Predictions::Points(v) => {
                        for c in 0..WRENCH {
                            rec.mean[[c, pos]] = v[i][c];
                        }
                    }
                }
            }
        }
    }
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{preprocess_episode, synth_episode, SgConfig, SynthConfig};
    use crate::spectral::FilterSpec;

    fn source() -> WindowSource {
        let e = synth_episode(&SynthConfig { n: 2, duration_s: 10.0, ..SynthConfig::default() }, 1).unwrap();
        let p = preprocess_episode(&e, &FilterSpec::default(), SgConfig::default()).unwrap();
        WindowSource::new(&[p], 2, 50, 20, &FilterSpec::default()).unwrap()
    }

    #[test]
    fn delay_in_steps() {
        assert_eq!(DelaySpec::new(100.0, DelayMode::ZohPoint).steps(100.0).unwrap(), 10);
        assert_eq!(DelaySpec::new(0.0, DelayMode::ZohPoint).steps(100.0).unwrap(), 0);
        assert!(DelaySpec::new(15.0, DelayMode::ZohPoint).steps(100.0).is_err());
        assert!(DelaySpec::new(-10.0, DelayMode::ZohPoint).steps(100.0).is_err());
        assert_eq!("zoh_point".parse::<DelayMode>().unwrap(), DelayMode::ZohPoint);
    }

    #[test]
    fn oracle_forecasts_rebuild_the_truth() {
        let src = source();
        let truth = src.w_raw(0).to_owned();
        let delays = [DelaySpec::new(10.0, DelayMode::DelayCompensated), DelaySpec::new(200.0, DelayMode::DelayCompensated)];
        let recs = reconstruct_episode(&OracleForecaster { horizon: 20 }, &src, 0, &delays, 64).unwrap();
        for r in &recs {
            assert_eq!(r.valid, 50 + r.k..1000);
            let v = r.valid.clone();
            assert_eq!(r.mean.slice(s![.., v.clone()]), truth.slice(s![.., v]));
        }
    }

    #[test]
    fn point_oracle_is_shifted() {
        let src = source();
        let truth = src.w_raw(0).to_owned();
        let recs = reconstruct_episode(&PointOracle, &src, 0, &[DelaySpec::new(100.0, DelayMode::ZohPoint)], 64).unwrap();
        let r = &recs[0];
        for t in r.valid.clone() {
            for c in 0..WRENCH {
                assert_eq!(r.mean[[c, t]], truth[[c, t - 10]]);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_delays() {
        let src = source();
        let f = OracleForecaster { horizon: 20 };
        let bad = |p: &dyn Predictor, d: DelaySpec| reconstruct_episode(p, &src, 0, &[d], 64).is_err();
        assert!(bad(&f, DelaySpec::new(0.0, DelayMode::DelayCompensated)));
        assert!(bad(&f, DelaySpec::new(210.0, DelayMode::DelayCompensated)));
        assert!(bad(&f, DelaySpec::new(100.0, DelayMode::ZohPoint)));
        assert!(bad(&PointOracle, DelaySpec::new(100.0, DelayMode::DelayCompensated)));
        assert!(!bad(&PointOracle, DelaySpec::new(0.0, DelayMode::ZohPoint)));
    }
}
