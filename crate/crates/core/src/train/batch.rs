use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model_zoo::{Direction, Model};
use crate::text::{BOS, EOS};

/// One training pair as vocabulary ids; `target` carries neither BOS nor EOS
/// and is already in the model's generation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// `BOS` followed by the target.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.target);
        v
    }

    /// The target followed by `EOS`.
    pub fn labels(&self) -> Vec<usize> {
        let mut v = self.target.clone();
        v.push(EOS);
        v
    }

    /// Padded positions this pair occupies in a batch row.
    pub fn cost(&self) -> usize {
        self.source.len().max(self.target.len() + 1)
    }
}

/// Applies the model's subword codec, vocabularies and direction.
pub fn encode_corpus(model: &Model, corpus: &ParallelCorpus) -> Vec<Example> {
    corpus
        .iter()
        .map(|p| {
            let source = match &model.codec.src_bpe {
                Some(bpe) => model.src_vocab.encode(&bpe.apply_tokens(&p.source)),
                None => model.src_vocab.encode(&p.source),
            };
            let mut target = match &model.codec.tgt_bpe {
                Some(bpe) => model.tgt_vocab.encode(&bpe.apply_tokens(&p.target)),
                None => model.tgt_vocab.encode(&p.target),
            };
            if model.spec.direction == Direction::R2l {
                target.reverse();
            }
            Example { source, target }
        })
        .collect()
}

/// Batches examined together when grouping by length.
const POOL_BATCHES: usize = 16;

/// One epoch of index batches whose padded size stays within `batch_tokens`.
/// Examples are shuffled, grouped by length inside pools, and the batches shuffled again.
pub(crate) fn epoch_batches(examples: &[Example], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(big) = examples.iter().map(Example::cost).max().filter(|&c| c > batch_tokens) {
        return Err(Error::Config(format!(
            "batch_tokens {batch_tokens} below the longest sentence ({big} positions)"
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mean = examples.iter().map(Example::cost).sum::<usize>() / examples.len();
    let pool = (batch_tokens / mean.max(1)).max(1) * POOL_BATCHES;
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(pool) {
        chunk.sort_by_key(|&i| examples[i].cost());
        let mut current: Vec<usize> = Vec::new();
        let mut widest = 0;
        for &i in chunk.iter() {
            let w = widest.max(examples[i].cost());
            if !current.is_empty() && w * (current.len() + 1) > batch_tokens {
                batches.push(std::mem::take(&mut current));
                widest = 0;
            }
            widest = widest.max(examples[i].cost());
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(current);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Flattened `[B·T]` labels for decoder inputs of width `T`; padding is `None`.
pub(crate) fn flat_labels(labels: &[Vec<usize>]) -> (Vec<Option<usize>>, usize) {
    let width = labels.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut flat = Vec::with_capacity(labels.len() * width);
    for l in labels {
        flat.extend(l.iter().map(|&y| Some(y)));
        flat.extend(std::iter::repeat_n(None, width - l.len()));
    }
    (flat, width)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn ex(s: usize, t: usize) -> Example {
        Example { source: vec![4; s], target: vec![5; t] }
    }

    #[test]
    fn batches_cover_every_example_once_within_budget() {
        let examples: Vec<Example> = (0..200).map(|i| ex(1 + i % 9, 1 + (i * 7) % 11)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(&examples, 64, &mut rng).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let w = b.iter().map(|&i| examples[i].cost()).max().unwrap();
            assert!(w * b.len() <= 64);
        }
        let again = epoch_batches(&examples, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, batches);
    }

    #[test]
    fn oversized_sentences_are_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(epoch_batches(&[ex(30, 2)], 16, &mut rng), Err(Error::Config(_))));
        assert!(matches!(epoch_batches(&[], 16, &mut rng), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn decoder_views() {
        let e = Example { source: vec![7], target: vec![8, 9] };
        assert_eq!(e.decoder_input(), vec![BOS, 8, 9]);
        assert_eq!(e.labels(), vec![8, 9, EOS]);
        let (flat, w) = flat_labels(&[vec![1, 2], vec![3]]);
        assert_eq!(w, 2);
        assert_eq!(flat, vec![Some(1), Some(2), Some(3), None]);
    }
}
