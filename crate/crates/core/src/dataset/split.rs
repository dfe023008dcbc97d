use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Episode;
use crate::error::{FdnError, Result};

/// Episode-level train/test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPolicy {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { test_fraction: 1.0 / 3.0, seed: 0 }
    }
}

/// Returns `(train, test)` episode indices. Each session is split on its own
/// so both sides see every session that has at least two episodes; the test
/// share of a session is rounded and kept within `[1, len - 1]`.
pub fn split_episodes(episodes: &[Episode], policy: SplitPolicy) -> Result<(Vec<usize>, Vec<usize>)> {
    if episodes.len() < 2 {
        return Err(FdnError::NotEnoughEpisodes { have: episodes.len(), need: 2 });
    }
    if !(policy.test_fraction > 0.0 && policy.test_fraction < 1.0) {
        return Err(FdnError::Config(format!("test fraction {} outside (0, 1)", policy.test_fraction)));
    }
    let mut sessions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        sessions.entry(e.session.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut ids) in sessions {
        ids.shuffle(&mut rng);
        let k = if ids.len() < 2 {
            0
        } else {
            ((ids.len() as f64 * policy.test_fraction).round() as usize).clamp(1, ids.len() - 1)
        };
        test.extend_from_slice(&ids[..k]);
        train.extend_from_slice(&ids[k..]);
    }
    if test.is_empty() {
        return Err(FdnError::NotEnoughEpisodes { have: episodes.len(), need: 2 });
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::dataset::uniform_timestamps;

    fn dummy(session: &str) -> Episode {
        Episode {
            sample_rate: 100.0,
            timestamps: uniform_timestamps(4, 100.0, 0.0),
            q: Array2::zeros((1, 4)),
            u: Array2::zeros((1, 4)),
            w: Array2::zeros((6, 4)),
            w_timestamps: None,
            session: session.into(),
            static_end_s: Some(0.01),
            meta: None,
        }
    }

    #[test]
    fn twelve_episodes_split_eight_four() {
        let eps: Vec<_> = (0..12).map(|_| dummy("a")).collect();
        let (train, test) = split_episodes(&eps, SplitPolicy::default()).unwrap();
        assert_eq!((train.len(), test.len()), (8, 4));
        assert_eq!(split_episodes(&eps, SplitPolicy::default()).unwrap(), (train, test));
    }

    #[test]
    fn two_episodes_split_one_one() {
        let eps = vec![dummy("a"), dummy("a")];
        let (train, test) = split_episodes(&eps, SplitPolicy::default()).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn errors_on_one_episode() {
        assert!(split_episodes(&[dummy("a")], SplitPolicy::default()).is_err());
    }

    #[test]
    fn sessions_split_separately() {
        let eps: Vec<_> = (0..6).map(|i| dummy(if i < 3 { "a" } else { "b" })).collect();
        let (_, test) = split_episodes(&eps, SplitPolicy::default()).unwrap();
        assert_eq!(test.iter().filter(|&&i| i < 3).count(), 1);
        assert_eq!(test.iter().filter(|&&i| i >= 3).count(), 1);
    }
}
