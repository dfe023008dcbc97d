//! Zero-phase frequency-domain filtering and trend/residual decomposition.
//!
//! All filters here are non-recursive: a signal is extended by half-sample
//! symmetric reflection on both sides (one full signal length per side),
//! transformed with an FFT, multiplied by a real amplitude response, inverse
//! transformed and center-cropped back to its original length. Because the
//! response is real and even in frequency, every filter is a linear, symmetric
//! operator on the padded signal and therefore trivially differentiable.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{FdnError, Result};

/// Default Butterworth-style order of the amplitude response.
pub const DEFAULT_ORDER: u32 = 8;

/// Cutoffs, order and sampling rate shared by every band filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    /// Trend/residual split frequency in Hz.
    pub f_c: f64,
    /// Denoising cutoff in Hz.
    pub f_c_dn: f64,
    /// Response order `r`.
    pub order: u32,
    /// Sampling frequency in Hz.
    pub sample_rate: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { f_c: 1.0, f_c_dn: 15.0, order: DEFAULT_ORDER, sample_rate: 100.0 }
    }
}

impl FilterSpec {
    pub fn new(f_c: f64, f_c_dn: f64, order: u32, sample_rate: f64) -> Result<Self> {
        let spec = Self { f_c, f_c_dn, order, sample_rate };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_rate.is_finite()
            && self.sample_rate > 0.0
            && self.f_c > 0.0
            && self.f_c <= self.f_c_dn
            && self.f_c_dn < self.nyquist();
        if !ok {
            return Err(FdnError::InvalidFilter(format!(
                "need 0 < f_c ({}) <= f_c_dn ({}) < nyquist ({})",
                self.f_c,
                self.f_c_dn,
                self.nyquist()
            )));
        }
        if self.order == 0 {
            return Err(FdnError::InvalidFilter("order must be >= 1".into()));
        }
        Ok(())
    }

    /// Same order and rate, with both cutoffs placed at `cutoff`.
    ///
    /// Used when a forecasting head is ablated and the surviving output is
    /// only denoised.
    pub fn collapsed(&self, cutoff: f64) -> Self {
        Self { f_c: cutoff, f_c_dn: cutoff, ..*self }
    }

    fn check_freq(&self, f: f64) -> Result<()> {
        if !(0.0..=self.nyquist()).contains(&f) {
            return Err(FdnError::FrequencyDomain { freq: f, nyquist: self.nyquist() });
        }
        Ok(())
    }
}

/// `1 / sqrt(1 + (f / cutoff)^(2r))` without domain checks.
#[inline]
pub fn lowpass_gain(f: f64, cutoff: f64, order: u32) -> f64 {
    let ratio = (f / cutoff).abs();
    // ratio^(2r) overflows to inf for large ratios, which correctly yields 0.
    1.0 / (1.0 + ratio.powi(2 * order as i32)).sqrt()
}

/// Band response `(1 - H_l(f; f_c)) * H_l(f; f_c_dn)` without domain checks.
#[inline]
pub fn highpass_gain(f: f64, spec: &FilterSpec) -> f64 {
    (1.0 - lowpass_gain(f, spec.f_c, spec.order)) * lowpass_gain(f, spec.f_c_dn, spec.order)
}

pub fn lowpass_response(f: f64, spec: &FilterSpec) -> Result<f64> {
    spec.check_freq(f)?;
    Ok(lowpass_gain(f, spec.f_c, spec.order))
}

pub fn highpass_response(f: f64, spec: &FilterSpec) -> Result<f64> {
    spec.check_freq(f)?;
    Ok(highpass_gain(f, spec))
}

/// A multichannel, uniformly sampled signal `[channels x steps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    values: Array2<f64>,
    sample_rate: f64,
}

impl Series {
    pub fn new(values: Array2<f64>, sample_rate: f64) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(FdnError::TooShort { steps: values.ncols(), min: 2 });
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(FdnError::Invalid(format!("sample rate {sample_rate} must be positive")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FdnError::NonFinite("series values".into()));
        }
        Ok(Self { values, sample_rate })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn steps(&self) -> usize {
        self.values.ncols()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(len), p.plan_fft_inverse(len))
    })
}

/// A zero-phase filter bound to one signal length.
///
/// Construction precomputes the FFT plans and the per-bin gains, so applying
/// the same filter to many equally long rows (windows, channels) is cheap.
pub struct ZeroPhaseFilter {
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    gains: Vec<f64>,
    buf: RefCell<(Vec<Complex<f64>>, Vec<Complex<f64>>)>,
}

impl ZeroPhaseFilter {
    /// `response` maps a frequency in Hz on `[0, nyquist]` to a real gain.
    pub fn new(len: usize, sample_rate: f64, response: impl Fn(f64) -> f64) -> Result<Self> {
        if len < 4 {
            return Err(FdnError::TooShort { steps: len, min: 4 });
        }
        let padded = 3 * len;
        let (fwd, inv) = plan(padded);
        let gains = (0..padded)
            .map(|k| {
                let bin = k.min(padded - k);
                response(bin as f64 * sample_rate / padded as f64)
            })
            .collect();
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Ok(Self {
            len,
            fwd,
            inv,
            gains,
            buf: RefCell::new((
                vec![Complex::default(); padded],
                vec![Complex::default(); scratch_len],
            )),
        })
    }

    pub fn lowpass(len: usize, cutoff: f64, spec: &FilterSpec) -> Result<Self> {
        let order = spec.order;
        Self::new(len, spec.sample_rate, move |f| lowpass_gain(f, cutoff, order))
    }

    pub fn highpass(len: usize, spec: &FilterSpec) -> Result<Self> {
        let spec = *spec;
        Self::new(len, spec.sample_rate, move |f| highpass_gain(f, &spec))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Filters one row. `input` and `out` must both have the bound length.
    pub fn apply_row(&self, input: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
        assert_eq!(input.len(), self.len, "filter bound to length {}", self.len);
        assert_eq!(out.len(), self.len);
        let n = self.len;
        let mut guard = self.buf.borrow_mut();
        let (data, scratch) = &mut *guard;
        for (i, &v) in input.iter().enumerate() {
            data[n - 1 - i] = Complex::new(v, 0.0);
            data[n + i] = Complex::new(v, 0.0);
            data[3 * n - 1 - i] = Complex::new(v, 0.0);
        }
        self.fwd.process_with_scratch(data, scratch);
        for (c, g) in data.iter_mut().zip(&self.gains) {
            *c *= *g;
        }
        self.inv.process_with_scratch(data, scratch);
        let scale = 1.0 / (3 * n) as f64;
        for (o, c) in out.iter_mut().zip(&data[n..2 * n]) {
            *o = c.re * scale;
        }
    }

    pub fn apply_slice(&self, input: &[f64], out: &mut [f64]) {
        self.apply_row(ArrayView1::from(input), ArrayViewMut1::from(out));
    }

    /// Filters every row of `values` along the step axis.
    pub fn apply(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(values.raw_dim());
        for (row, out_row) in values.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            self.apply_row(row, out_row);
        }
        out
    }

    /// Dense `[len x len]` matrix `M` of the operator (`y = M x`), row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let n = self.len;
        let mut m = vec![0.0; n * n];
        let mut unit = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            unit[j] = 1.0;
            self.apply_slice(&unit, &mut col);
            unit[j] = 0.0;
            for i in 0..n {
                m[i * n + j] = col[i];
            }
        }
        m
    }
}

fn check_input(s: &Series) -> Result<()> {
    if s.steps() < 4 {
        return Err(FdnError::TooShort { steps: s.steps(), min: 4 });
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(FdnError::NonFinite("filter input".into()));
    }
    Ok(())
}

/// Non-recursive low-pass filter at `spec.f_c`.
pub fn fpf_low(s: &Series, spec: &FilterSpec) -> Result<Series> {
    lowpass_at(s, spec.f_c, spec)
}

/// Low-pass at an arbitrary cutoff with the order of `spec`.
pub fn lowpass_at(s: &Series, cutoff: f64, spec: &FilterSpec) -> Result<Series> {
    check_input(s)?;
    let filter = ZeroPhaseFilter::lowpass(s.steps(), cutoff, spec)?;
    Ok(Series { values: filter.apply(s.values.view()), sample_rate: s.sample_rate })
}

/// Denoising high-pass (band-pass between `f_c` and `f_c_dn`).
pub fn fpf_high(s: &Series, spec: &FilterSpec) -> Result<Series> {
    check_input(s)?;
    let filter = ZeroPhaseFilter::highpass(s.steps(), spec)?;
    Ok(Series { values: filter.apply(s.values.view()), sample_rate: s.sample_rate })
}

/// Splits `w` into a low-frequency trend and the remaining residual.
///
/// The residual is computed by subtraction, so `trend + residual == w`.
pub fn decompose(w: &Series, spec: &FilterSpec) -> Result<(Series, Series)> {
    let trend = fpf_low(w, spec)?;
    let residual = &w.values - &trend.values;
    Ok((trend, Series { values: residual, sample_rate: w.sample_rate }))
}

/// Mean per-channel energy spectrum of a set of equally shaped windows.
#[derive(Debug, Clone)]
pub struct EnergySpectrum {
    /// Bin frequencies in Hz, `k * sample_rate / steps`.
    pub freqs: Vec<f64>,
    /// `[channels x bins]` mean of `|FFT|^2`.
    pub energy: Array2<f64>,
}

impl EnergySpectrum {
    /// Fraction of each channel's energy in bins strictly above `f`.
    pub fn fraction_above(&self, f: f64) -> Vec<f64> {
        self.energy
            .axis_iter(Axis(0))
            .map(|row| {
                let total: f64 = row.iter().sum();
                if total == 0.0 {
                    return 0.0;
                }
                let high: f64 =
                    row.iter().zip(&self.freqs).filter(|(_, &fr)| fr > f).map(|(e, _)| e).sum();
                high / total
            })
            .collect()
    }
}

/// Each window channel is normalized to zero mean and unit variance before the
/// transform; zero-variance channels contribute an all-zero row.
pub fn energy_spectrum(windows: &[Series]) -> Result<EnergySpectrum> {
    let first = windows.first().ok_or_else(|| FdnError::Invalid("no windows".into()))?;
    let (channels, steps) = first.values.dim();
    let rate = first.sample_rate;
    let bins = steps / 2 + 1;
    let (fwd, _) = plan(steps);
    let mut energy = Array2::<f64>::zeros((channels, bins));
    let mut buf = vec![Complex::default(); steps];
    for w in windows {
        if w.values.dim() != (channels, steps) {
            return Err(FdnError::Shape(format!(
                "window {:?} differs from {:?}",
                w.values.dim(),
                (channels, steps)
            )));
        }
        for (c, row) in w.values.axis_iter(Axis(0)).enumerate() {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / steps as f64;
            if var <= f64::EPSILON * mean.abs().max(1.0) {
                continue;
            }
            let sd = var.sqrt();
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = Complex::new((v - mean) / sd, 0.0);
            }
            fwd.process(&mut buf);
            for k in 0..bins {
                energy[[c, k]] += buf[k].norm_sqr();
            }
        }
    }
    energy /= windows.len() as f64;
    let freqs = (0..bins).map(|k| k as f64 * rate / steps as f64).collect();
    Ok(EnergySpectrum { freqs, energy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use std::f64::consts::PI;

    fn sine(freq: f64, steps: usize, rate: f64) -> Array1<f64> {
        Array1::from_iter((0..steps).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()))
    }

    fn row_series(row: Array1<f64>, rate: f64) -> Series {
        let n = row.len();
        Series::new(row.into_shape_with_order((1, n)).unwrap(), rate).unwrap()
    }

    #[test]
    fn response_reference_points() {
        let spec = FilterSpec::default();
        assert_eq!(lowpass_response(0.0, &spec).unwrap(), 1.0);
        assert!((lowpass_response(1.0, &spec).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let expected = 1.0 / (1.0f64 + 65536.0).sqrt();
        assert!((lowpass_response(2.0, &spec).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 3.9062e-3).abs() < 1e-7);
        assert_eq!(highpass_response(0.0, &spec).unwrap(), 0.0);
        // f = f_c_dn: (1 - 1/sqrt(1 + 15^16)) / sqrt(2).
        let h = highpass_response(15.0, &spec).unwrap();
        assert!((h - 0.707_106_780_1).abs() < 1e-9, "{h}");
    }

    #[test]
    fn response_rejects_out_of_band() {
        let spec = FilterSpec::default();
        assert!(matches!(lowpass_response(-0.1, &spec), Err(FdnError::FrequencyDomain { .. })));
        assert!(highpass_response(50.01, &spec).is_err());
        assert!(lowpass_response(50.0, &spec).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(FilterSpec::new(2.0, 1.0, 8, 100.0).is_err());
        assert!(FilterSpec::new(1.0, 50.0, 8, 100.0).is_err());
        assert!(FilterSpec::new(0.0, 10.0, 8, 100.0).is_err());
        assert!(FilterSpec::new(1.0, 15.0, 0, 100.0).is_err());
        assert!(FilterSpec::new(1.0, 1.0, 8, 100.0).is_ok());
    }

    #[test]
    fn constant_passes_lowpass_and_vanishes_in_highpass() {
        let spec = FilterSpec::default();
        let s = Series::new(Array2::from_elem((2, 64), 3.5), 100.0).unwrap();
        let low = fpf_low(&s, &spec).unwrap();
        let high = fpf_high(&s, &spec).unwrap();
        for (&l, &h) in low.values().iter().zip(high.values()) {
            assert!((l - 3.5).abs() < 1e-9);
            assert!(h.abs() < 1e-9);
        }
    }

    #[test]
    fn short_or_non_finite_input_is_rejected() {
        let spec = FilterSpec::default();
        let s = Series::new(Array2::zeros((1, 3)), 100.0).unwrap();
        assert!(matches!(fpf_low(&s, &spec), Err(FdnError::TooShort { .. })));
        assert!(Series::new(Array2::from_elem((1, 8), f64::NAN), 100.0).is_err());
    }

    #[test]
    fn sinusoid_at_twice_cutoff_is_attenuated() {
        let spec = FilterSpec::default();
        let n = 4096;
        let s = row_series(sine(2.0, n, 100.0), 100.0);
        let out = fpf_low(&s, &spec).unwrap();
        let gain = lowpass_gain(2.0, 1.0, 8);
        let (lo, hi) = (n / 4, 3 * n / 4);
        let num: f64 = (lo..hi).map(|i| out.values()[[0, i]].powi(2)).sum();
        let den: f64 = (lo..hi).map(|i| (gain * s.values()[[0, i]]).powi(2)).sum();
        assert!(((num / den).sqrt() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn band_split_sums_to_denoised_lowpass() {
        // H_l(f; f_c) + H_h(f) = H_l(f; f_c_dn) + H_l(f; f_c)(1 - H_l(f; f_c_dn)), and the
        // correction vanishes wherever either factor does.
        let spec = FilterSpec::default();
        for i in 0..=5000 {
            let f = i as f64 * 0.01;
            let l = lowpass_gain(f, spec.f_c, spec.order);
            let h = highpass_gain(f, &spec);
            let dn = lowpass_gain(f, spec.f_c_dn, spec.order);
            assert!(l + h <= 1.0 + 1e-12);
            assert!((dn - (l + h)).abs() <= l * (1.0 - dn) + 1e-15);
        }
    }

    #[test]
    fn decomposition_of_slow_sine_is_all_trend() {
        let spec = FilterSpec::default();
        let n = 4000;
        let s = row_series(sine(0.1, n, 100.0), 100.0);
        let (trend, res) = decompose(&s, &spec).unwrap();
        let c = n / 4..3 * n / 4;
        let rms = |v: &Array2<f64>| (c.clone().map(|i| v[[0, i]].powi(2)).sum::<f64>() / c.len() as f64).sqrt();
        assert!(rms(res.values()) < 0.01 * rms(s.values()));
        let sum = trend.values() + res.values();
        assert!(sum.iter().zip(s.values()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn matrix_matches_fft_path() {
        let spec = FilterSpec::default();
        let f = ZeroPhaseFilter::highpass(20, &spec).unwrap();
        let m = f.matrix();
        let x: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let mut y = vec![0.0; 20];
        f.apply_slice(&x, &mut y);
        for i in 0..20 {
            let my: f64 = (0..20).map(|j| m[i * 20 + j] * x[j]).sum();
            assert!((my - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_spectrum_concentrates_pure_tone() {
        let steps = 200;
        let rate = 100.0;
        // bin 10 -> 5 Hz
        let s = row_series(sine(10.0 * rate / steps as f64, steps, rate), rate);
        let spec = energy_spectrum(&[s]).unwrap();
        let row = spec.energy.row(0);
        let total: f64 = row.sum();
        assert!(row[10] / total > 0.99);
        assert!((spec.freqs[10] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn energy_spectrum_guards() {
        assert!(energy_spectrum(&[]).is_err());
        let flat = Series::new(Array2::from_elem((2, 32), 7.0), 100.0).unwrap();
        let spec = energy_spectrum(&[flat]).unwrap();
        assert!(spec.energy.iter().all(|&e| e == 0.0));
        let a = Series::new(Array2::zeros((1, 32)), 100.0).unwrap();
        let b = Series::new(Array2::zeros((1, 16)), 100.0).unwrap();
        assert!(matches!(energy_spectrum(&[a, b]), Err(FdnError::Shape(_))));
    }
}
