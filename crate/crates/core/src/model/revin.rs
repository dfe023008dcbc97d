use std::rc::Rc;

use crate::tape::{Graph, RowStats, Var};

/// Guard in the RevIN denominator: rows are divided by `sqrt(var + ε²)`, so a
/// constant row is divided by exactly `ε`.
pub const REVIN_EPS: f64 = 1e-5;

/// Per-row instance normalization over the last axis (population variance).
/// Rows flagged in `skip` pass through with mean 0 and std 1.
pub fn revin_norm(g: &mut Graph, x: Var, skip: Option<Rc<Vec<bool>>>) -> (Var, RowStats) {
    g.standardize(x, REVIN_EPS * REVIN_EPS, skip)
}

/// Inverse transform applied to representations: viewing `z` as one block per
/// normalized row, `z * std + mean`.
pub fn revin_invert(g: &mut Graph, z: Var, stats: &RowStats) -> Var {
    g.row_affine(z, Rc::new(stats.std.clone()), &stats.mean)
}

/// Selects the rows `[start, start + count)` of every sample from statistics
/// laid out as `[B, rows]`.
pub(crate) fn stats_block(stats: &RowStats, batch: usize, rows: usize, start: usize, count: usize) -> RowStats {
    let mut out = RowStats { mean: Vec::with_capacity(batch * count), std: Vec::with_capacity(batch * count) };
    for b in 0..batch {
        let lo = b * rows + start;
        out.mean.extend_from_slice(&stats.mean[lo..lo + count]);
        out.std.extend_from_slice(&stats.std[lo..lo + count]);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tape::Tensor;

    #[test]
    fn roundtrip_restores_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[4, 50], (0..200).map(|_| rng.random_range(-3.0..5.0)).collect());
        let mut g = Graph::detached();
        let xv = g.constant(x.clone());
        let (xn, stats) = revin_norm(&mut g, xv, None);
        let back = revin_invert(&mut g, xn, &stats);
        for (a, b) in g.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_row_maps_to_zero_and_back() {
        let mut g = Graph::detached();
        let xv = g.constant(Tensor::full(&[1, 30], 4.25));
        let (xn, stats) = revin_norm(&mut g, xv, None);
        assert!(g.value(xn).data().iter().all(|&v| v == 0.0));
        let back = revin_invert(&mut g, xn, &stats);
        assert!(g.value(back).data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn normalized_rows_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, len) = (6, 100);
        let x = Tensor::from_vec(
            &[rows, len],
            (0..rows * len).map(|i| rng.random_range(-1.0..1.0) * (1 + i / len) as f64 + i as f64 * 0.01).collect(),
        );
        let mut g = Graph::detached();
        let xv = g.constant(x);
        let (xn, _) = revin_norm(&mut g, xv, None);
        for row in g.value(xn).data().chunks(len) {
            let mean = row.iter().sum::<f64>() / len as f64;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-6, "{std}");
        }
    }

    #[test]
    fn skipped_rows_pass_through() {
        let mut g = Graph::detached();
        let xv = g.constant(Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 5.0, 7.0]));
        let (xn, stats) = revin_norm(&mut g, xv, Some(Rc::new(vec![false, true])));
        assert_eq!(&g.value(xn).data()[4..], &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!((stats.mean[1], stats.std[1]), (0.0, 1.0));
    }
}
