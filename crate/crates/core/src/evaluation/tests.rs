use super::*;
use crate::dataset::{preprocess_episode, synth_corpus, SgConfig, SynthConfig, WindowIndex};

fn source(episodes: usize) -> WindowSource {
    source_of(episodes, 12.0)
}

fn source_of(episodes: usize, duration_s: f64) -> WindowSource {
    let spec = FilterSpec::default();
    let processed: Vec<_> = synth_corpus(&SynthConfig { n: 2, duration_s, ..SynthConfig::default() }, episodes, 4, &[2])
        .unwrap()
        .iter()
        .map(|e| preprocess_episode(e, &spec, SgConfig::default()).unwrap())
        .collect();
    WindowSource::new(&processed, 2, 50, 100, &spec).unwrap()
}

fn delays() -> Vec<DelaySpec> {
    DEFAULT_DELAYS_MS.iter().map(|&d| DelaySpec::new(d, DelayMode::DelayCompensated)).collect()
}

/// Predicts zero everywhere.
struct Zero;

impl Predictor for Zero {
    fn id(&self) -> String {
        "zero".into()
    }
    fn horizon(&self) -> Option<usize> {
        Some(100)
    }
    fn is_distributional(&self) -> bool {
        false
    }
    fn predict(&self, _: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        Ok(Predictions::Forecasts(vec![crate::model::ForecastDistribution::zeros(100); idx.len()]))
    }
}

/// Zero forecast plus a 5 Hz tone.
struct Tone;

impl Predictor for Tone {
    fn id(&self) -> String {
        "tone".into()
    }
    fn horizon(&self) -> Option<usize> {
        Some(100)
    }
    fn is_distributional(&self) -> bool {
        false
    }
    fn predict(&self, src: &WindowSource, idx: &[WindowIndex]) -> Result<Predictions> {
        let Predictions::Forecasts(mut f) = Zero.predict(src, idx)? else { unreachable!() };
        for (fc, i) in f.iter_mut().zip(idx) {
            for k in 0..100 {
                let t = (i.t + 1 + k) as f64 / 100.0;
                for c in 0..WRENCH {
                    fc.trend[[c, k]] += 3.0 * (2.0 * std::f64::consts::PI * 5.0 * t).sin();
                }
            }
        }
        Ok(Predictions::Forecasts(f))
    }
}

#[test]
fn oracle_scores_zero_at_both_delays() {
    let src = source(2);
    let reports = evaluate(&OracleForecaster { horizon: 100 }, &src, &[0, 1], &delays(), &[1.0; 6], 128).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert!(r.channels.iter().all(|m| *m == ChannelMetrics::default()), "{r:?}");
    }
}

#[test]
fn zero_forecaster_prmse_is_trend_rms() {
    let src = source(1);
    let reports = evaluate(&Zero, &src, &[0], &delays()[..1], &[1.0; 6], 128).unwrap();
    let v = 60..src.episode_steps(0);
    let truth = src.w_raw(0).slice(s![.., v]).to_owned();
    let (trend, _) = decompose(&Series::new(truth, 100.0).unwrap(), &FilterSpec::default()).unwrap();
    for c in 0..WRENCH {
        let row = trend.values().row(c);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
        assert!((reports[0].channels[c].prmse - rms).abs() <= 1e-9 * rms.max(1.0));
    }
}

#[test]
fn high_band_injection_leaves_prmse() {
    let src = source_of(1, 60.0);
    let d = &delays()[..1];
    let zero = evaluate(&Zero, &src, &[0], d, &[1.0; 6], 128).unwrap().remove(0);
    let tone = evaluate(&Tone, &src, &[0], d, &[1.0; 6], 128).unwrap().remove(0);
    for c in 0..WRENCH {
        let (a, b) = (zero.channels[c], tone.channels[c]);
        assert!((b.prmse - a.prmse).abs() < 1e-3 * a.prmse, "{c}: {a:?} vs {b:?}");
        assert!((b.wrmse - a.wrmse).abs() > 0.1);
    }
}

#[test]
fn normalized_scale_and_aggregates() {
    let src = source(1);
    let scale = [2.0, 2.0, 2.0, 0.5, 0.5, 0.5];
    let r = evaluate(&Zero, &src, &[0], &delays()[..1], &scale, 128).unwrap().remove(0);
    let n = r.normalized();
    assert_eq!(n[0].crps, r.channels[0].crps / 2.0);
    assert_eq!(n[4].wrmse, r.channels[4].wrmse / 0.5);
    let f = r.force();
    assert!((f.prmse - (r.channels[0].prmse + r.channels[1].prmse + r.channels[2].prmse) / 3.0).abs() < 1e-12);
    assert_eq!(r.rows(true).len(), 8);
    assert!(evaluate(&Zero, &src, &[0], &delays()[..1], &[1.0; 5], 128).is_err());
}

#[test]
fn csv_and_summary() {
    let src = source(2);
    let reports = evaluate(&Zero, &src, &[0, 1], &delays(), &[1.0; 6], 128).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_reports_csv(&path, &reports).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 16);
    assert!(text.starts_with("model,episode,delay_ms,mode,channel,wrmse,prmse,crps,normalized"));
    let summary = summarize(&reports);
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[1].1, 1000.0);
    assert!(summary_table(&reports).lines().count() == 3);
}

#[test]
fn plot_writes_svg() {
    let src = source(1);
    let rec = reconstruct_episode(&Zero, &src, 0, &delays()[..1], 128).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fx.svg");
    plot_reconstruction(&path, &rec, src.w_raw(0), 0, Some(100..400), 100.0).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().contains("<svg"));
    assert!(plot_reconstruction(&path, &rec, src.w_raw(0), 6, None, 100.0).is_err());
}
