//! Parallel and monolingual corpora: filtering, LM-based selection,
//! noise augmentation and sharding, plus the on-disk formats.

mod augment;
mod filter;
mod io;
mod lm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{make_noisy, shard, NoiseConfig, NoiseStats};
pub use filter::{dedup, filter_corpus, filter_pair, FilterRules, FilterStats, Reject, Verdict};
pub use io::{read_aligned, read_corpus, read_lines, read_tsv, write_corpus, write_lines, write_tsv, ManifestRecord};
pub use lm::{lm_filter, TrigramLm};

use crate::error::Error;

/// Where a sentence pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    BackTranslated,
    Distilled,
    InDomain,
}

/// Augmentation applied to a pair: none, token noise, or sampled generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Clean,
    Noisy,
    Sample,
}

macro_rules! label_text {
    ($ty:ty, $($variant:ident => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!("unknown label `{other}`"))),
                }
            }
        }
    };
}

label_text!(Provenance, Gold => "gold", BackTranslated => "back_translated", Distilled => "distilled", InDomain => "in_domain");
label_text!(Augmentation, Clean => "clean", Noisy => "noisy", Sample => "sample");

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
    pub augmentation: Augmentation,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>, provenance: Provenance) -> Self {
        SentencePair {
            source,
            target,
            provenance,
            augmentation: Augmentation::Clean,
        }
    }

    /// Builds a gold pair from two whitespace-tokenised lines.
    pub fn from_lines(source: &str, target: &str) -> Self {
        SentencePair::new(split(source), split(target), Provenance::Gold)
    }
}

pub(crate) fn split(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    pub fn extend(&mut self, other: ParallelCorpus) {
        self.pairs.extend(other.pairs);
    }

    pub fn concat(parts: impl IntoIterator<Item = ParallelCorpus>) -> Self {
        let mut out = ParallelCorpus::default();
        for p in parts {
            out.extend(p);
        }
        out
    }

    pub fn with_augmentation(mut self, augmentation: Augmentation) -> Self {
        for p in &mut self.pairs {
            p.augmentation = augmentation;
        }
        self
    }
}

impl FromIterator<SentencePair> for ParallelCorpus {
    fn from_iter<I: IntoIterator<Item = SentencePair>>(iter: I) -> Self {
        ParallelCorpus::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a ParallelCorpus {
    type Item = &'a SentencePair;
    type IntoIter = std::slice::Iter<'a, SentencePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}
