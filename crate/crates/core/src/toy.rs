//! Synthetic parallel corpora for exercising the system without external data.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Provenance, SentencePair};
use crate::error::{Error, Result};
use crate::text::RESERVED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Copy,
    Reverse,
    LexiconSwap,
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Copy => "copy",
            ToyTask::Reverse => "reverse",
            ToyTask::LexiconSwap => "lexicon_swap",
        })
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            "lexicon_swap" | "lexicon-swap" => Ok(ToyTask::LexiconSwap),
            _ => Err(Error::Config(format!("unknown toy task {s:?}"))),
        }
    }
}

/// Description of a synthetic task. `vocab_size` counts the reserved ids, so
/// each side has `vocab_size - 4` words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub task: ToyTask,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pairs: usize,
    /// Weight moved from the head of the word-frequency curve to its tail, in `[0, 1]`.
    pub domain_shift: Option<f64>,
    pub seed: u64,
}

/// Zipf exponent of the unshifted word distribution.
const ZIPF: f64 = 1.0;

/// Seed of the lexicon, shared by every corpus of a task so that corpora with
/// different sampling seeds translate with the same mapping.
const LEXICON_SEED: u64 = 0x1e41c0;

impl ToyTaskSpec {
    pub fn new(task: ToyTask, vocab_size: usize, max_len: usize, pairs: usize, seed: u64) -> Self {
        ToyTaskSpec { task, vocab_size, max_len, pairs, domain_shift: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no words after {} reserved ids",
                self.vocab_size,
                RESERVED.len()
            )));
        }
        if self.pairs == 0 || self.max_len == 0 {
            return Err(Error::Config("pairs and max_len must be positive".into()));
        }
        if let Some(d) = self.domain_shift {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("domain_shift {d} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn words(&self) -> usize {
        self.vocab_size - RESERVED.len()
    }

    /// Word probabilities on the source side.
    pub fn unigram(&self) -> Vec<f64> {
        let n = self.words();
        let base: Vec<f64> = (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(ZIPF)).collect();
        let z: f64 = base.iter().sum();
        let d = self.domain_shift.unwrap_or(0.0);
        (0..n).map(|i| ((1.0 - d) * base[i] + d * base[n - 1 - i]) / z).collect()
    }

    /// The source-to-target word permutation; identity for copy and reverse.
    pub fn lexicon(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.words()).collect();
        if self.task == ToyTask::LexiconSwap {
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(LEXICON_SEED ^ self.words() as u64));
        }
        perm
    }

    pub fn source_word(&self, i: usize) -> String {
        match self.task {
            ToyTask::LexiconSwap => format!("s{i}"),
            _ => format!("w{i}"),
        }
    }

    pub fn target_word(&self, i: usize) -> String {
        match self.task {
            ToyTask::LexiconSwap => format!("t{i}"),
            _ => format!("w{i}"),
        }
    }

    /// Reference translation of source word ids.
    pub fn translate(&self, ids: &[usize]) -> Vec<String> {
        let lex = self.lexicon();
        let mut out: Vec<String> = ids.iter().map(|&i| self.target_word(lex[i])).collect();
        if self.task == ToyTask::Reverse {
            out.reverse();
        }
        out
    }

    /// Source word ids of each generated sentence.
    fn sentences(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let weights = WeightedIndex::new(self.unigram()).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.pairs)
            .map(|_| {
                let len = rng.gen_range(1..=self.max_len);
                (0..len).map(|_| weights.sample(&mut rng)).collect()
            })
            .collect())
    }

    pub fn generate(&self) -> Result<ParallelCorpus> {
        Ok(self
            .sentences()?
            .iter()
            .map(|ids| {
                let source = ids.iter().map(|&i| self.source_word(i)).collect();
                SentencePair::new(source, self.translate(ids), Provenance::Gold)
            })
            .collect())
    }

    /// Target-language lines drawn from the same distribution, for back-translation.
    pub fn target_monolingual(&self) -> Result<Vec<Vec<String>>> {
        Ok(self.sentences()?.iter().map(|ids| self.translate(ids)).collect())
    }

    /// Source-language lines drawn from the same distribution.
    pub fn source_monolingual(&self) -> Result<Vec<Vec<String>>> {
        Ok(self
            .sentences()?
            .iter()
            .map(|ids| ids.iter().map(|&i| self.source_word(i)).collect())
            .collect())
    }
}

/// `KL(p || q)` in nats over the words of two token streams, with add-one smoothing.
pub fn unigram_kl<S: AsRef<str>>(p: &[Vec<S>], q: &[Vec<S>]) -> f64 {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for line in p {
        for w in line {
            counts.entry(w.as_ref()).or_default().0 += 1.0;
        }
    }
    for line in q {
        for w in line {
            counts.entry(w.as_ref()).or_default().1 += 1.0;
        }
    }
    let k = counts.len() as f64;
    let (np, nq) = counts.values().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    counts
        .values()
        .map(|&(x, y)| {
            let pp = (x + 1.0) / (np + k);
            let qq = (y + 1.0) / (nq + k);
            pp * (pp / qq).ln()
        })
        .sum()
}
