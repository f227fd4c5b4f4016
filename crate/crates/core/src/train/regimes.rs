//! Decoder-input corruption used by the scheduled-sampling and denoising finetuners.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::BOS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Fraction of pairs that receive noise.
    pub pair_prob: f64,
    /// Per-token replacement probability inside a chosen pair.
    pub token_prob: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { pair_prob: 0.3, token_prob: 0.15 }
    }
}

/// Running counts of corrupted or mixed decoder inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseCounts {
    pub positions: usize,
    pub changed: usize,
}

impl NoiseCounts {
    pub fn fraction(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.changed as f64 / self.positions as f64
        }
    }

    pub fn add(&mut self, other: NoiseCounts) {
        self.positions += other.positions;
        self.changed += other.changed;
    }
}

/// Corrupts target sentences: a chosen pair has each token replaced, with
/// probability `token_prob`, by a uniformly drawn token of the same sentence.
/// `changed` counts replacement draws, including ones that redraw the same token.
pub fn target_denoise(targets: &[Vec<usize>], config: &DenoiseConfig, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, NoiseCounts) {
    let mut counts = NoiseCounts::default();
    let out = targets
        .iter()
        .map(|t| {
            counts.positions += t.len();
            if t.is_empty() || !rng.gen_bool(config.pair_prob) {
                return t.clone();
            }
            t.iter()
                .map(|&tok| {
                    if rng.gen_bool(config.token_prob) {
                        counts.changed += 1;
                        t[rng.gen_range(0..t.len())]
                    } else {
                        tok
                    }
                })
                .collect()
        })
        .collect();
    (out, counts)
}

/// Second-pass decoder inputs: after BOS, position `t` takes the first-pass
/// prediction for label `t - 1` with probability `mix_ratio`, the gold token otherwise.
pub fn pss_mix(
    gold_inputs: &[Vec<usize>],
    predictions: &[Vec<usize>],
    mix_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, NoiseCounts) {
    let mut counts = NoiseCounts::default();
    let out = gold_inputs
        .iter()
        .zip(predictions)
        .map(|(gold, pred)| {
            let mut mixed = Vec::with_capacity(gold.len());
            mixed.push(BOS);
            for t in 1..gold.len() {
                counts.positions += 1;
                if rng.gen_bool(mix_ratio) {
                    counts.changed += 1;
                    mixed.push(pred[t - 1]);
                } else {
                    mixed.push(gold[t]);
                }
            }
            mixed
        })
        .collect();
    (out, counts)
}
