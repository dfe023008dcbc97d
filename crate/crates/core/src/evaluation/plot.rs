use std::ops::Range;
use std::path::Path;

use ndarray::ArrayView2;
use plotters::prelude::*;

use super::{Reconstruction, CHANNELS};
use crate::error::{FdnError, Result};

fn draw_err(e: impl std::fmt::Display) -> FdnError {
    FdnError::Invalid(format!("plot: {e}"))
}

/// SVG overlay of the truth, the reconstructed mean and its `mean ± 3σ` band
/// for one channel over `span` (the valid steps when `None`).
pub fn plot_reconstruction(
    path: &Path,
    rec: &Reconstruction,
    truth: ArrayView2<f64>,
    channel: usize,
    span: Option<Range<usize>>,
    sample_rate: f64,
) -> Result<()> {
    let span = span.unwrap_or_else(|| rec.valid.clone());
    if channel >= CHANNELS.len() || span.start < rec.valid.start || span.end > rec.valid.end || span.is_empty() {
        return Err(FdnError::Invalid(format!("cannot plot channel {channel} over {span:?}")));
    }
    let t = |i: usize| i as f64 / sample_rate;
    let mean = rec.mean.row(channel);
    let sigma = rec.sigma.row(channel);
    let truth = truth.row(channel);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in span.clone() {
        for v in [truth[i], mean[i] - 3.0 * sigma[i], mean[i] + 3.0 * sigma[i]] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);

    let root = SVGBackend::new(path, (1200, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({} ms, {})", CHANNELS[channel], rec.delay.delay_ms, rec.delay.mode), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(t(span.start)..t(span.end - 1), (lo - pad)..(hi + pad))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("time (s)").draw().map_err(draw_err)?;

    let band: Vec<(f64, f64)> = span
        .clone()
        .map(|i| (t(i), mean[i] + 3.0 * sigma[i]))
        .chain(span.clone().rev().map(|i| (t(i), mean[i] - 3.0 * sigma[i])))
        .collect();
    chart.draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2)))).map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new(span.clone().map(|i| (t(i), truth[i])), &BLACK))
        .map_err(draw_err)?
        .label("truth");
    chart.draw_series(LineSeries::new(span.map(|i| (t(i), mean[i])), &BLUE)).map_err(draw_err)?.label("mean");
    root.present().map_err(draw_err)?;
    Ok(())
}
