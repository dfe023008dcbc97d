//! Synthetic vibration-rich episodes.
//!
//! Joint motion is a smooth sum of slow sinusoids after a static head. The
//! wrench is a low-frequency nonlinear function of the motion plus a
//! band-limited residual whose amplitude envelope is itself a function of the
//! motion, so both the trend and the residual scale are predictable from the
//! proprioceptive history while the residual phase is not.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{uniform_timestamps, Episode, WRENCH};
use crate::error::{FdnError, Result};
use crate::spectral::{FilterSpec, ZeroPhaseFilter};

/// Joint layout of the fixed random maps; episodes with fewer joints use the
/// leading columns.
const MAP_JOINTS: usize = 7;
/// Typical magnitudes of Δq, q̇, q̈ used to scale the random maps.
const FEATURE_SCALE: [f64; 3] = [0.4, 0.5, 0.8];
const SINUSOIDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    /// Total length including the static head (s).
    pub duration_s: f64,
    pub sample_rate: f64,
    pub static_s: f64,
    /// Duration of the smooth motion onset (s).
    pub ramp_s: f64,
    pub trend_map_seed: u64,
    pub envelope_seed: u64,
    /// Highest motion frequency (Hz).
    pub trend_band_hz: f64,
    /// Residual pass band `(f_c, f_c_dn]` (Hz).
    pub residual_band: (f64, f64),
    pub filter_order: u32,
    /// Trend amplitude of the force channels (N).
    pub force_scale: f64,
    /// Trend amplitude of the torque channels (Nm).
    pub torque_scale: f64,
    /// Residual envelope peak relative to the channel scale.
    pub residual_peak: f64,
    /// Envelope floor as a fraction of the peak.
    pub sigma_base: f64,
    /// Motion-dependent envelope gain as a fraction of the peak.
    pub sigma_gain: f64,
    pub u_noise: f64,
    /// White sensor noise on W relative to the channel scale.
    pub w_sensor_noise: f64,
    /// Standard deviation of the per-episode wrench bias relative to the scale.
    pub offset_std: f64,
    pub session: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 6,
            duration_s: 180.0,
            sample_rate: 100.0,
            static_s: 5.0,
            ramp_s: 2.0,
            trend_map_seed: 17,
            envelope_seed: 29,
            trend_band_hz: 0.4,
            residual_band: (1.0, 15.0),
            filter_order: 8,
            force_scale: 100.0,
            torque_scale: 30.0,
            residual_peak: 6.5,
            sigma_base: 0.05,
            sigma_gain: 0.3,
            u_noise: 0.01,
            w_sensor_noise: 0.005,
            offset_std: 0.05,
            session: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    /// Pretraining surrogate: seven joints and a low-frequency-dominant wrench.
    pub fn surrogate() -> Self {
        Self {
            n: 7,
            residual_peak: 0.6,
            envelope_seed: 31,
            session: "surrogate".into(),
            ..Self::default()
        }
    }

    pub fn residual_spec(&self) -> Result<FilterSpec> {
        FilterSpec::new(self.residual_band.0, self.residual_band.1, self.filter_order, self.sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.residual_spec()?;
        if !(self.trend_band_hz > 0.0 && self.trend_band_hz <= spec.f_c) {
            return Err(FdnError::Config(format!(
                "trend band edge {} Hz must lie in (0, f_c = {} Hz]",
                self.trend_band_hz, spec.f_c
            )));
        }
        if self.n == 0 || self.n > MAP_JOINTS {
            return Err(FdnError::Config(format!("n = {} outside 1..={MAP_JOINTS}", self.n)));
        }
        if self.static_s <= 0.0 || self.ramp_s <= 0.0 || self.duration_s <= self.static_s + self.ramp_s {
            return Err(FdnError::Config("duration must exceed static head plus ramp".into()));
        }
        for (name, v) in [
            ("force_scale", self.force_scale),
            ("torque_scale", self.torque_scale),
            ("residual_peak", self.residual_peak),
            ("sigma_base", self.sigma_base),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FdnError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("sigma_gain", self.sigma_gain),
            ("u_noise", self.u_noise),
            ("w_sensor_noise", self.w_sensor_noise),
            ("offset_std", self.offset_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FdnError::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    fn channel_scale(&self) -> [f64; WRENCH] {
        let (f, t) = (self.force_scale, self.torque_scale);
        [f, f, f, t, t, t]
    }
}

/// Parameters of the residual envelope `sigma(t) = ramp(t) * peak * (base +
/// gain * sigmoid(B [Δq; q̇]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaParams {
    pub base: f64,
    pub gain: f64,
    pub peak: Vec<f64>,
    /// `[6 x 2n]`, row-major, already divided by the feature scales.
    pub b: Vec<f64>,
}

/// Ground truth recorded by the generator.
#[derive(Debug, Clone)]
pub struct SynthMeta {
    pub seed: u64,
    /// Residual standard deviation envelope `[6 x steps]`.
    pub sigma: Array2<f64>,
    pub sigma_params: SigmaParams,
    pub w_trend: Array2<f64>,
    pub w_res: Array2<f64>,
    /// Analytic joint velocity and acceleration.
    pub qd: Array2<f64>,
    pub qdd: Array2<f64>,
    /// Constant sensor bias added to W.
    pub offset: [f64; WRENCH],
}

struct Maps {
    /// `[6 x 3n]` trend map.
    a: Array2<f64>,
    /// `[n x 3n]` actuation map from motion.
    c: Array2<f64>,
    /// `[n x 6]` actuation map from the normalized wrench.
    d: Array2<f64>,
    /// `[6 x 2n]` envelope map.
    b: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Selects the columns of the first `n` joints from a map laid out in blocks of
/// `MAP_JOINTS` columns.
fn restrict(full: &Array2<f64>, n: usize, blocks: usize) -> Array2<f64> {
    let mut out = Array2::zeros((full.nrows(), blocks * n));
    for b in 0..blocks {
        for j in 0..n {
            out.column_mut(b * n + j).assign(&full.column(b * MAP_JOINTS + j));
        }
    }
    out
}

fn maps(cfg: &SynthConfig) -> Maps {
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trend_map_seed);
    let a_full = normal_matrix(&mut rng, WRENCH, 3 * MAP_JOINTS);
    let c_full = normal_matrix(&mut rng, MAP_JOINTS, 3 * MAP_JOINTS);
    let d_full = normal_matrix(&mut rng, MAP_JOINTS, WRENCH);
    let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.envelope_seed);
    let b_full = normal_matrix(&mut env_rng, WRENCH, 2 * MAP_JOINTS);

    let mut a = restrict(&a_full, n, 3);
    let mut c = restrict(&c_full, n, 3).slice(ndarray::s![..n, ..]).to_owned();
    let mut b = restrict(&b_full, n, 2);
    for blk in 0..3 {
        let s = 1.0 / (FEATURE_SCALE[blk] * ((3 * n) as f64).sqrt());
        a.slice_mut(ndarray::s![.., blk * n..(blk + 1) * n]).mapv_inplace(|v| v * s);
        c.slice_mut(ndarray::s![.., blk * n..(blk + 1) * n]).mapv_inplace(|v| v * s);
        if blk < 2 {
            let sb = 2.0 / (FEATURE_SCALE[blk] * ((2 * n) as f64).sqrt());
            b.slice_mut(ndarray::s![.., blk * n..(blk + 1) * n]).mapv_inplace(|v| v * sb);
        }
    }
    let d = d_full.slice(ndarray::s![..n, ..]).mapv(|v| v * 0.5 / (WRENCH as f64).sqrt());
    Maps { a, c, d, b }
}

/// Smootherstep onset and its first two time derivatives.
fn ramp(tau: f64, width: f64) -> (f64, f64, f64) {
    if tau <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if tau >= width {
        return (1.0, 0.0, 0.0);
    }
    let s = tau / width;
    let r = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let dr = 30.0 * s * s * (1.0 - s) * (1.0 - s) / width;
    let ddr = 60.0 * s * (1.0 - 3.0 * s + 2.0 * s * s) / (width * width);
    (r, dr, ddr)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates one episode; identical `(cfg, seed)` give identical output.
pub fn synth_episode(cfg: &SynthConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let n = cfg.n;
    let fs = cfg.sample_rate;
    let steps = (cfg.duration_s * fs).round() as usize;
    let head = (cfg.static_s * fs).round() as usize;
    let scale = cfg.channel_scale();
    let maps = maps(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Motion.
    let q0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = Array2::zeros((n, steps));
    let mut qd = Array2::zeros((n, steps));
    let mut qdd = Array2::zeros((n, steps));
    let ramps: Vec<(f64, f64, f64)> =
        (0..steps).map(|i| ramp(i as f64 / fs - cfg.static_s, cfg.ramp_s)).collect();
    for j in 0..n {
        let total: f64 = rng.random_range(0.3..1.0);
        let raw: Vec<f64> = (0..SINUSOIDS).map(|_| rng.random_range(0.2..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let comps: Vec<(f64, f64, f64)> = raw
            .iter()
            .map(|a| {
                let f = rng.random_range(0.02..cfg.trend_band_hz);
                let phase = rng.random_range(0.0..TAU);
                (a * total / sum, TAU * f, phase)
            })
            .collect();
        for i in 0..steps {
            let tau = i as f64 / fs - cfg.static_s;
            let (r, dr, ddr) = ramps[i];
            let (mut s, mut ds, mut dds) = (0.0, 0.0, 0.0);
            if r > 0.0 || dr > 0.0 {
                for &(a, w, p) in &comps {
                    let arg = w * tau + p;
                    s += a * arg.sin();
                    ds += a * w * arg.cos();
                    dds -= a * w * w * arg.sin();
                }
            }
            q[[j, i]] = q0[j] + r * s;
            qd[[j, i]] = dr * s + r * ds;
            qdd[[j, i]] = ddr * s + 2.0 * dr * ds + r * dds;
        }
    }

    // Features [Δq; q̇; q̈] per step.
    let mut feats = Array2::zeros((3 * n, steps));
    for j in 0..n {
        for i in 0..steps {
            feats[[j, i]] = q[[j, i]] - q0[j];
            feats[[n + j, i]] = qd[[j, i]];
            feats[[2 * n + j, i]] = qdd[[j, i]];
        }
    }

    // Trend: low-passed saturating map of the motion.
    let mut raw_trend = maps.a.dot(&feats).mapv(f64::tanh);
    for c in 0..WRENCH {
        raw_trend.row_mut(c).mapv_inplace(|v| v * scale[c]);
    }
    let spec = cfg.residual_spec()?;
    let low = ZeroPhaseFilter::lowpass(steps, spec.f_c, &spec)?;
    // The onset ramp keeps the static head exactly constant despite the
    // non-causal filter's ringing.
    let mut w_trend = low.apply(raw_trend.view());
    for mut row in w_trend.rows_mut() {
        for (v, r) in row.iter_mut().zip(&ramps) {
            *v *= r.0;
        }
    }

    // Residual envelope and band-limited noise.
    let peak: Vec<f64> = scale.iter().map(|s| s * cfg.residual_peak).collect();
    let env_in = maps.b.dot(&feats.slice(ndarray::s![..2 * n, ..]));
    let mut sigma = Array2::zeros((WRENCH, steps));
    for c in 0..WRENCH {
        for i in 0..steps {
            let r = ramps[i].0;
            sigma[[c, i]] = r * peak[c] * (cfg.sigma_base + cfg.sigma_gain * sigmoid(env_in[[c, i]]));
        }
    }
    let white = Array2::from_shape_simple_fn((WRENCH, steps), || rng.sample::<f64, _>(StandardNormal));
    let band = ZeroPhaseFilter::highpass(steps, &spec)?;
    let mut noise = band.apply(white.view());
    for mut row in noise.rows_mut() {
        let std = (row.iter().map(|v| v * v).sum::<f64>() / steps as f64).sqrt();
        row.mapv_inplace(|v| v / std);
    }
    let w_res = &sigma * &noise;
    let w_clean = &w_trend + &w_res;

    // Actuation couples motion and wrench.
    let mut w_unit = w_clean.clone();
    for c in 0..WRENCH {
        w_unit.row_mut(c).mapv_inplace(|v| v / scale[c]);
    }
    let mut u = maps.c.dot(&feats) + maps.d.dot(&w_unit);
    for i in 0..steps {
        let r = ramps[i].0;
        for j in 0..n {
            u[[j, i]] += r * cfg.u_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Sensor bias and noise.
    let mut offset = [0.0; WRENCH];
    for c in 0..WRENCH {
        offset[c] = cfg.offset_std * scale[c] * rng.sample::<f64, _>(StandardNormal);
    }
    let mut w = w_clean;
    for c in 0..WRENCH {
        for i in 0..steps {
            let r = ramps[i].0;
            w[[c, i]] += offset[c] + r * cfg.w_sensor_noise * scale[c] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    debug_assert!(head < steps);

    let b_flat = maps.b.iter().copied().collect();
    Ok(Episode {
        sample_rate: fs,
        timestamps: uniform_timestamps(steps, fs, 0.0),
        q,
        u,
        w,
        w_timestamps: None,
        session: cfg.session.clone(),
        static_end_s: Some(cfg.static_s),
        meta: Some(SynthMeta {
            seed,
            sigma,
            sigma_params: SigmaParams { base: cfg.sigma_base, gain: cfg.sigma_gain, peak, b: b_flat },
            w_trend,
            w_res,
            qd,
            qdd,
            offset,
        }),
    })
}

/// Generates `count` episodes with per-episode seeds derived from `seed`.
/// Episode `i` uses `dofs[i % dofs.len()]` joints (same maps, leading joints).
pub fn synth_corpus(cfg: &SynthConfig, count: usize, seed: u64, dofs: &[usize]) -> Result<Vec<Episode>> {
    let dofs = if dofs.is_empty() { std::slice::from_ref(&cfg.n) } else { dofs };
    (0..count)
        .map(|i| {
            let cfg_i = SynthConfig { n: dofs[i % dofs.len()], ..cfg.clone() };
            synth_episode(&cfg_i, episode_seed(seed, i))
        })
        .collect()
}

pub(crate) fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1))
}

/// Centered moving RMS over `w` steps (truncated at the edges).
#[cfg(test)]
fn moving_rms(row: &[f64], w: usize) -> ndarray::Array1<f64> {
    let n = row.len();
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in row.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v * v;
    }
    ndarray::Array1::from_shape_fn(n, |i| {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        ((prefix[hi] - prefix[lo]) / (hi - lo) as f64).sqrt()
    })
}
