mod common;

use fdn_core::spectral::{decompose, fpf_high, fpf_low, highpass_response, lowpass_response, FilterSpec, Series};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn series(values: Vec<f64>, channels: usize) -> Series {
    let steps = values.len() / channels;
    Series::new(Array2::from_shape_vec((channels, steps), values).unwrap(), 100.0).unwrap()
}

#[test]
fn responses_match_reference_formulas() {
    let spec = FilterSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let f = rng.random_range(0.0..=spec.nyquist());
        let lo = lowpass_response(f, &spec).unwrap();
        let hi = highpass_response(f, &spec).unwrap();
        let want_lo = common::lowpass(f, spec.f_c, spec.order);
        let want_hi = common::highpass(f, spec.f_c, spec.f_c_dn, spec.order);
        assert!((lo - want_lo).abs() <= 1e-12 * want_lo.abs().max(f64::MIN_POSITIVE), "{f}");
        assert!((hi - want_hi).abs() <= 1e-12 * want_hi.abs().max(1e-300), "{f}");
    }
    assert!(lowpass_response(-1.0, &spec).is_err());
    assert!(highpass_response(50.1, &spec).is_err());
}

#[test]
fn low_pass_attenuates_twice_the_cutoff() {
    let spec = FilterSpec::default();
    let n = 4096;
    let f = 2.0 * spec.f_c;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / spec.sample_rate).sin()).collect();
    let y = fpf_low(&series(x.clone(), 1), &spec).unwrap();
    let inner = n / 4..3 * n / 4;
    let amp = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
    let gain = amp(&y.values().row(0).to_vec()[inner.clone()]) / amp(&x[inner]);
    let want = 1.0 / (1.0 + 2f64.powi(16)).sqrt();
    assert!((want - 3.906e-3).abs() < 1e-6);
    assert!((gain - want).abs() <= 1e-2 * want, "{gain}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn decomposition_reconstructs_input(
        values in prop::collection::vec(-100.0f64..100.0, 6 * 40..=6 * 200).prop_filter("whole rows", |v| v.len() % 6 == 0),
    ) {
        let s = series(values, 6);
        let (trend, residual) = decompose(&s, &FilterSpec::default()).unwrap();
        for ((a, b), c) in trend.values().iter().zip(residual.values()).zip(s.values()) {
            prop_assert!((a + b - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn filters_are_linear(
        a in prop::collection::vec(-10.0f64..10.0, 128),
        b in prop::collection::vec(-10.0f64..10.0, 128),
        k in -3.0f64..3.0,
    ) {
        let spec = FilterSpec::default();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
        for filter in [fpf_low, fpf_high] {
            let fa = filter(&series(a.clone(), 1), &spec).unwrap();
            let fb = filter(&series(b.clone(), 1), &spec).unwrap();
            let fm = filter(&series(mix.clone(), 1), &spec).unwrap();
            for i in 0..128 {
                let want = fa.values()[[0, i]] + k * fb.values()[[0, i]];
                prop_assert!((fm.values()[[0, i]] - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn constants_pass_the_low_band_untouched(c in -1e3f64..1e3, len in 16usize..300) {
        let s = series(vec![c; len], 1);
        let (trend, residual) = decompose(&s, &FilterSpec::default()).unwrap();
        prop_assert!(trend.values().iter().all(|v| (v - c).abs() <= 1e-9 * (1.0 + c.abs())));
        prop_assert!(residual.values().iter().all(|v| v.abs() <= 1e-9 * (1.0 + c.abs())));
    }
}
