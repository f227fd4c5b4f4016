use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ParallelCorpus, SentencePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    /// Longest allowed side, in tokens.
    pub max_len: usize,
    /// Longest allowed token, in characters.
    pub max_word_chars: usize,
    /// Largest allowed length ratio in either direction; equality is kept.
    pub max_ratio: f64,
    pub dedup: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            max_len: 100,
            max_word_chars: 40,
            max_ratio: 4.0,
            dedup: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reject {
    EmptySide,
    LengthExceeded,
    WordTooLong,
    RatioExceeded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(Reject),
}

/// Checks the rules in a fixed order: empty side, length, word length, ratio.
pub fn filter_pair(pair: &SentencePair, rules: &FilterRules) -> Verdict {
    let (s, t) = (pair.source.len(), pair.target.len());
    if s == 0 || t == 0 {
        return Verdict::Reject(Reject::EmptySide);
    }
    if s > rules.max_len || t > rules.max_len {
        return Verdict::Reject(Reject::LengthExceeded);
    }
    let too_long = |w: &String| w.chars().count() > rules.max_word_chars;
    if pair.source.iter().any(too_long) || pair.target.iter().any(too_long) {
        return Verdict::Reject(Reject::WordTooLong);
    }
    let ratio = s.max(t) as f64 / s.min(t) as f64;
    if ratio > rules.max_ratio {
        return Verdict::Reject(Reject::RatioExceeded);
    }
    Verdict::Keep
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    pub empty: usize,
    pub too_long: usize,
    pub word_too_long: usize,
    pub ratio: usize,
    pub duplicates: usize,
}

/// Keeps the first occurrence of every exact (source, target) pair.
pub fn dedup(corpus: &ParallelCorpus) -> ParallelCorpus {
    let mut seen: HashSet<(String, String)> = HashSet::with_capacity(corpus.len());
    corpus
        .iter()
        .filter(|p| seen.insert((p.source.join(" "), p.target.join(" "))))
        .cloned()
        .collect()
}

pub fn filter_corpus(corpus: &ParallelCorpus, rules: &FilterRules) -> (ParallelCorpus, FilterStats) {
    let mut stats = FilterStats::default();
    let kept: ParallelCorpus = corpus
        .iter()
        .filter(|p| match filter_pair(p, rules) {
            Verdict::Keep => true,
            Verdict::Reject(r) => {
                match r {
                    Reject::EmptySide => stats.empty += 1,
                    Reject::LengthExceeded => stats.too_long += 1,
                    Reject::WordTooLong => stats.word_too_long += 1,
                    Reject::RatioExceeded => stats.ratio += 1,
                }
                false
            }
        })
        .cloned()
        .collect();
    let kept = if rules.dedup {
        let d = dedup(&kept);
        stats.duplicates = kept.len() - d.len();
        d
    } else {
        kept
    };
    stats.kept = kept.len();
    (kept, stats)
}
