//! Cased corpus BLEU, smoothed sentence BLEU and self-BLEU.

mod tokenize;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tokenize::tokenize_v13a;

pub const MAX_ORDER: usize = 4;

/// How raw lines are split before n-gram counting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    V13a,
    /// Lines are already tokenised; split on whitespace only.
    Whitespace,
}

impl Tokenizer {
    pub fn apply(self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::V13a => tokenize_v13a(line),
            Tokenizer::Whitespace => line.split_whitespace().map(String::from).collect(),
        }
    }
}

/// Field order is fixed: it is the JSON layout of reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Sufficient statistics, additive over sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Statistics for one hypothesis against one or more references. Counts are
/// clipped by the maximum count over references; the reference length is the
/// one closest to the hypothesis length, shorter on ties.
pub fn sentence_stats<S: AsRef<str>, R: AsRef<[S]>>(hyp: &[S], refs: &[R]) -> BleuStats {
    let mut st = BleuStats {
        hyp_len: hyp.len(),
        ..BleuStats::default()
    };
    st.ref_len = refs
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        st.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    st
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Unsmoothed BLEU. An order with no hypothesis n-grams at all has precision 1.
pub fn bleu_from_stats(st: &BleuStats) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if st.totals[n] == 0 {
            1.0
        } else {
            st.matches[n] as f64 / st.totals[n] as f64
        };
    }
    let bp = brevity_penalty(st.hyp_len, st.ref_len);
    let score = if precisions.iter().any(|&p| p == 0.0) || bp == 0.0 {
        0.0
    } else {
        100.0 * bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    BleuReport {
        score,
        precisions,
        bp,
        hyp_len: st.hyp_len,
        ref_len: st.ref_len,
    }
}

/// Corpus BLEU over pre-tokenised lines with any number of references per line.
pub fn corpus_bleu_tokens<S: AsRef<str>, R: AsRef<[S]>>(hyps: &[Vec<S>], refs: &[Vec<R>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::Align { hyps: hyps.len(), refs: refs.len() });
    }
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st += sentence_stats(h, r);
    }
    Ok(bleu_from_stats(&st))
}

/// Cased corpus BLEU with a single reference per line.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], tokenizer: Tokenizer) -> Result<BleuReport> {
    let h: Vec<Vec<String>> = hyps.iter().map(|l| tokenizer.apply(l.as_ref())).collect();
    let r: Vec<Vec<Vec<String>>> = refs.iter().map(|l| vec![tokenizer.apply(l.as_ref())]).collect();
    corpus_bleu_tokens(&h, &r)
}

/// 4-gram sentence BLEU in [0, 100]; orders 2..4 use add-one smoothing on both
/// matches and totals.
pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let st = sentence_stats(hyp, &[reference]);
    if st.hyp_len == 0 || st.matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = (st.matches[0] as f64 / st.totals[0] as f64).ln();
    for n in 1..MAX_ORDER {
        log_sum += ((st.matches[n] + 1) as f64 / (st.totals[n] + 1) as f64).ln();
    }
    100.0 * brevity_penalty(st.hyp_len, st.ref_len) * (log_sum / MAX_ORDER as f64).exp()
}

/// Self-BLEU of each system: its lines scored against all other systems' lines
/// as a multi-reference set.
pub fn self_bleu<S: AsRef<str>>(outputs: &[Vec<S>], tokenizer: Tokenizer) -> Result<Vec<f64>> {
    if outputs.len() < 2 {
        return Err(Error::Arity(outputs.len()));
    }
    let lines = outputs[0].len();
    if let Some(bad) = outputs.iter().find(|o| o.len() != lines) {
        return Err(Error::Align { hyps: bad.len(), refs: lines });
    }
    if lines == 0 {
        return Err(Error::EmptyCorpus);
    }
    let tok: Vec<Vec<Vec<String>>> = outputs
        .iter()
        .map(|o| o.iter().map(|l| tokenizer.apply(l.as_ref())).collect())
        .collect();
    (0..tok.len())
        .map(|m| {
            let refs: Vec<Vec<Vec<String>>> = (0..lines)
                .map(|i| (0..tok.len()).filter(|&o| o != m).map(|o| tok[o][i].clone()).collect())
                .collect();
            corpus_bleu_tokens(&tok[m], &refs).map(|r| r.score)
        })
        .collect()
}
