use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Augmentation, ParallelCorpus};
use crate::error::{Error, Result};

/// Token-level noise. Each operation is enabled per pair with its own probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub p_replace: f64,
    pub p_delete: f64,
    pub p_permute: f64,
    /// Maximum displacement of a token under permutation.
    pub permute_window: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_replace: 0.1,
            p_delete: 0.1,
            p_permute: 0.1,
            permute_window: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NoiseStats {
    pub pairs: usize,
    /// Pairs with at least one operation enabled.
    pub touched: usize,
    pub replaced: usize,
    pub deleted: usize,
    pub permuted: usize,
}

/// Corrupts source sides with replace → delete → permute; targets are untouched.
pub fn make_noisy(corpus: &ParallelCorpus, config: &NoiseConfig) -> (ParallelCorpus, NoiseStats) {
    let vocab: Vec<String> = corpus
        .iter()
        .flat_map(|p| p.source.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = NoiseStats {
        pairs: corpus.len(),
        ..NoiseStats::default()
    };
    let mut out = corpus.clone();
    for pair in &mut out.pairs {
        pair.augmentation = Augmentation::Noisy;
        let replace = rng.gen_bool(config.p_replace);
        let delete = rng.gen_bool(config.p_delete);
        let permute = rng.gen_bool(config.p_permute);
        if replace || delete || permute {
            stats.touched += 1;
        }
        let src = &mut pair.source;
        if replace && !src.is_empty() && !vocab.is_empty() {
            let at = rng.gen_range(0..src.len());
            src[at] = vocab[rng.gen_range(0..vocab.len())].clone();
            stats.replaced += 1;
        }
        if delete && src.len() > 1 {
            let at = rng.gen_range(0..src.len());
            src.remove(at);
            stats.deleted += 1;
        }
        if permute && src.len() > 1 {
            let span = (config.permute_window + 1) as f64;
            let mut keyed: Vec<(f64, String)> = src
                .drain(..)
                .enumerate()
                .map(|(i, t)| (i as f64 + rng.gen::<f64>() * span, t))
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
            *src = keyed.into_iter().map(|(_, t)| t).collect();
            stats.permuted += 1;
        }
    }
    (out, stats)
}

/// Splits into `n` disjoint shards of near-equal size after a seeded shuffle.
/// Each shard keeps the original relative order of its pairs.
pub fn shard(corpus: &ParallelCorpus, n: usize, seed: u64) -> Result<Vec<ParallelCorpus>> {
    if n == 0 || n > corpus.len() {
        return Err(Error::Shard {
            len: corpus.len(),
            shards: n,
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, i) in order.into_iter().enumerate() {
        buckets[k % n].push(i);
    }
    Ok(buckets
        .into_iter()
        .map(|mut b| {
            b.sort_unstable();
            b.into_iter().map(|i| corpus.pairs[i].clone()).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;
    use proptest::prelude::*;

    fn corpus(n: usize) -> ParallelCorpus {
        (0..n)
            .map(|i| {
                let s: Vec<String> = (0..6).map(|j| format!("w{}", (i * 7 + j) % 23)).collect();
                let t: Vec<String> = s.iter().map(|w| w.to_uppercase()).collect();
                SentencePair::new(s, t, crate::corpus::Provenance::Gold)
            })
            .collect()
    }

    #[test]
    fn zero_probabilities_change_nothing_but_the_label() {
        let c = corpus(50);
        let cfg = NoiseConfig { p_replace: 0.0, p_delete: 0.0, p_permute: 0.0, ..NoiseConfig::default() };
        let (noisy, stats) = make_noisy(&c, &cfg);
        assert_eq!(stats.touched, 0);
        assert_eq!(noisy.sources(), c.sources());
        assert!(noisy.iter().all(|p| p.augmentation == Augmentation::Noisy));
    }

    #[test]
    fn enabled_fraction_matches_binomial() {
        let c = corpus(10_000);
        let (noisy, stats) = make_noisy(&c, &NoiseConfig { seed: 3, ..NoiseConfig::default() });
        let frac = stats.touched as f64 / 10_000.0;
        assert!((frac - (1.0 - 0.9f64.powi(3))).abs() < 0.02, "{frac}");
        assert_eq!(noisy.targets(), c.targets());
    }

    #[test]
    fn same_seed_same_output() {
        let c = corpus(200);
        let cfg = NoiseConfig { p_replace: 0.5, p_delete: 0.5, p_permute: 0.5, seed: 11, ..NoiseConfig::default() };
        assert_eq!(make_noisy(&c, &cfg), make_noisy(&c, &cfg));
    }

    #[test]
    fn permutation_stays_within_window() {
        let c = corpus(300);
        let cfg = NoiseConfig { p_replace: 0.0, p_delete: 0.0, p_permute: 1.0, permute_window: 2, seed: 5 };
        let (noisy, _) = make_noisy(&c, &cfg);
        for (a, b) in c.iter().zip(noisy.iter()) {
            for (i, tok) in b.source.iter().enumerate() {
                let orig = a.source.iter().position(|t| t == tok).unwrap();
                assert!(orig.abs_diff(i) <= 2 || a.source.iter().filter(|t| *t == tok).count() > 1);
            }
        }
    }

    #[test]
    fn shard_sizes_and_errors() {
        let c = corpus(9);
        let shards = shard(&c, 3, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 3));
        assert_eq!(shard(&c, 1, 1).unwrap()[0], c);
        assert!(matches!(shard(&c, 10, 1), Err(Error::Shard { .. })));
    }

    proptest! {
        #[test]
        fn shard_is_a_partition(n_pairs in 1usize..80, n in 1usize..6, seed in 0u64..100) {
            prop_assume!(n <= n_pairs);
            let c: ParallelCorpus = (0..n_pairs)
                .map(|i| SentencePair::from_lines(&format!("a{i}"), &format!("b{}", i % 5)))
                .collect();
            let shards = shard(&c, n, seed).unwrap();
            let sizes: Vec<usize> = shards.iter().map(ParallelCorpus::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<String> = shards.iter().flat_map(|s| s.iter().map(|p| p.source[0].clone())).collect();
            all.sort();
            let mut expected: Vec<String> = c.iter().map(|p| p.source[0].clone()).collect();
            expected.sort();
            prop_assert_eq!(all, expected);
        }
    }
}
