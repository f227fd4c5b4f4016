use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{length_penalty, DecodeConfig, DecodeMode, Hypothesis, Origin, StepModel};
use crate::error::Result;
use crate::text::{BOS, EOS, PAD};

fn emittable(v: usize) -> bool {
    v != PAD && v != BOS
}

/// Highest log-prob emittable token, lower id on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = EOS;
    for (v, &x) in row.iter().enumerate() {
        if emittable(v) && x > row[best] {
            best = v;
        }
    }
    best
}

/// Decodes every source with `config.mode`; beam mode yields up to `beam_size`
/// hypotheses per source, best first, the other modes exactly one.
/// `first_index` is the corpus position of `sources[0]`, which keys the per-sentence sampling stream.
pub fn decode_batch(
    model: &dyn StepModel,
    sources: &[Vec<usize>],
    config: &DecodeConfig,
    first_index: usize,
) -> Result<Vec<Vec<Hypothesis>>> {
    config.validate()?;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    match config.mode {
        DecodeMode::Greedy => single_path(model, sources, config, |_, row| Ok(argmax(row))),
        DecodeMode::Beam => beams(model, sources, config),
        DecodeMode::Sample => {
            let mut rngs: Vec<ChaCha8Rng> = (0..sources.len())
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream((first_index + i) as u64);
                    rng
                })
                .collect();
            let t = config.temperature;
            single_path(model, sources, config, |i, row| Ok(draw(&mut rngs[i], row, t)))
        }
    }
}

/// Ancestral draw from `softmax(row / t)` restricted to emittable tokens.
fn draw(rng: &mut ChaCha8Rng, row: &[f64], t: f64) -> usize {
    let top = row
        .iter()
        .enumerate()
        .filter(|(v, _)| emittable(*v))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(v, &x)| if emittable(v) { ((x - top) / t).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = EOS;
    for (v, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = v;
            if u < w {
                return v;
            }
            u -= w;
        }
    }
    last
}

/// One hypothesis per source, extended by `choose(source index, log-probs)`.
fn single_path(
    model: &dyn StepModel,
    sources: &[Vec<usize>],
    config: &DecodeConfig,
    mut choose: impl FnMut(usize, &[f64]) -> Result<usize>,
) -> Result<Vec<Vec<Hypothesis>>> {
    let mut session = model.open(sources)?;
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut log_probs = vec![0.0; sources.len()];
    // (source, row in the previous step)
    let mut active: Vec<(usize, Origin)> = (0..sources.len()).map(|i| (i, Origin::Source(i))).collect();
    let mut feed = vec![BOS; sources.len()];
    while !active.is_empty() {
        let origins: Vec<Origin> = active.iter().map(|a| a.1).collect();
        let out = session.advance(&origins, &feed)?;
        let mut next = Vec::with_capacity(active.len());
        feed.clear();
        for (r, &(i, _)) in active.iter().enumerate() {
            let v = choose(i, &out[r])?;
            log_probs[i] += out[r][v];
            if v == EOS {
                continue;
            }
            tokens[i].push(v);
            if tokens[i].len() < config.max_len {
                next.push((i, Origin::Row(r)));
                feed.push(v);
            }
        }
        active = next;
    }
    Ok(tokens
        .into_iter()
        .zip(log_probs)
        .map(|(t, lp)| vec![Hypothesis::new(t, lp, config.alpha)])
        .collect())
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

struct Beam {
    /// (tokens, log-prob, row in the previous step)
    alive: Vec<(Vec<usize>, f64, usize)>,
    finished: Vec<Hypothesis>,
}

impl Beam {
    /// True once no alive hypothesis can still enter the top `size`.
    fn settled(&self, size: usize, config: &DecodeConfig) -> bool {
        if self.alive.is_empty() {
            return true;
        }
        if self.finished.len() < size {
            return false;
        }
        let mut scores: Vec<f64> = self.finished.iter().map(|h| h.score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let kth = scores[size - 1];
        self.alive.iter().all(|(t, lp, _)| {
            let lo = length_penalty(t.len(), config.alpha);
            let hi = length_penalty(config.max_len, config.alpha);
            // log-probs only fall, so the best completion divides by the largest penalty
            lp / lo.max(hi) < kth
        })
    }
}

fn beams(model: &dyn StepModel, sources: &[Vec<usize>], config: &DecodeConfig) -> Result<Vec<Vec<Hypothesis>>> {
    let size = config.beam_size;
    let mut session = model.open(sources)?;
    let mut beams: Vec<Beam> = (0..sources.len())
        .map(|_| Beam { alive: vec![(Vec::new(), 0.0, 0)], finished: Vec::new() })
        .collect();
    let mut origins: Vec<Origin> = (0..sources.len()).map(Origin::Source).collect();
    let mut feed = vec![BOS; sources.len()];
    for (i, b) in beams.iter_mut().enumerate() {
        b.alive[0].2 = i;
    }
    while !origins.is_empty() {
        let out = session.advance(&origins, &feed)?;
        origins.clear();
        feed.clear();
        for beam in beams.iter_mut() {
            if beam.alive.is_empty() {
                continue;
            }
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (j, (_, lp, row)) in beam.alive.iter().enumerate() {
                for (v, &x) in out[*row].iter().enumerate() {
                    if emittable(v) {
                        cands.push((lp + x, j, v));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(size);
            let mut alive = Vec::with_capacity(size);
            for (lp, j, v) in cands {
                let (prefix, _, row) = &beam.alive[j];
                if v == EOS {
                    beam.finished.push(Hypothesis::new(prefix.clone(), lp, config.alpha));
                    continue;
                }
                let mut t = prefix.clone();
                t.push(v);
                if t.len() >= config.max_len {
                    beam.finished.push(Hypothesis::new(t, lp, config.alpha));
                } else {
                    alive.push((t, lp, *row));
                }
            }
            beam.alive = alive;
            if beam.settled(size, config) {
                beam.alive.clear();
            }
            for a in beam.alive.iter_mut() {
                origins.push(Origin::Row(a.2));
                feed.push(*a.0.last().expect("alive hypotheses are non-empty"));
                a.2 = origins.len() - 1;
            }
        }
    }
    Ok(beams
        .into_iter()
        .map(|mut b| {
            b.finished.sort_by(rank);
            b.finished.truncate(size);
            b.finished
        })
        .collect())
}

pub fn greedy_decode(model: &dyn StepModel, source: &[usize], config: &DecodeConfig) -> Result<Hypothesis> {
    let cfg = DecodeConfig { mode: DecodeMode::Greedy, ..config.clone() };
    Ok(decode_batch(model, &[source.to_vec()], &cfg, 0)?.remove(0).remove(0))
}

/// Top `beam_size` hypotheses, best first.
pub fn beam_search(model: &dyn StepModel, source: &[usize], config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let cfg = DecodeConfig { mode: DecodeMode::Beam, ..config.clone() };
    Ok(decode_batch(model, &[source.to_vec()], &cfg, 0)?.remove(0))
}

pub fn sample_decode(model: &dyn StepModel, source: &[usize], config: &DecodeConfig) -> Result<Hypothesis> {
    let cfg = DecodeConfig { mode: DecodeMode::Sample, ..config.clone() };
    Ok(decode_batch(model, &[source.to_vec()], &cfg, 0)?.remove(0).remove(0))
}
