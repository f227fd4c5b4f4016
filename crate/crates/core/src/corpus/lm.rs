use std::collections::HashMap;

/// Token trigram model with additive smoothing.
#[derive(Clone, Debug)]
pub struct TrigramLm {
    ids: HashMap<String, u32>,
    trigrams: HashMap<[u32; 3], u32>,
    bigrams: HashMap<[u32; 2], u32>,
    smoothing: f64,
}

const BOUNDARY: u32 = 0;
const END: u32 = 1;
const OOV: u32 = 2;

impl TrigramLm {
    pub const DEFAULT_SMOOTHING: f64 = 0.1;

    pub fn train<S: AsRef<str>>(lines: &[Vec<S>], smoothing: f64) -> Self {
        let mut lm = TrigramLm {
            ids: HashMap::new(),
            trigrams: HashMap::new(),
            bigrams: HashMap::new(),
            smoothing,
        };
        for line in lines {
            for t in line {
                let next = lm.ids.len() as u32 + 3;
                lm.ids.entry(t.as_ref().to_string()).or_insert(next);
            }
        }
        for line in lines {
            let seq = lm.sequence(line);
            for w in seq.windows(3) {
                *lm.trigrams.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
                *lm.bigrams.entry([w[0], w[1]]).or_insert(0) += 1;
            }
        }
        lm
    }

    fn sequence<S: AsRef<str>>(&self, line: &[S]) -> Vec<u32> {
        let mut seq = vec![BOUNDARY, BOUNDARY];
        seq.extend(line.iter().map(|t| self.ids.get(t.as_ref()).copied().unwrap_or(OOV)));
        seq.push(END);
        seq
    }

    /// Outcomes: every known token, the end marker and the unknown token.
    fn outcomes(&self) -> f64 {
        self.ids.len() as f64 + 2.0
    }

    /// Mean log-probability per predicted token (including the end marker).
    pub fn per_token_logprob<S: AsRef<str>>(&self, line: &[S]) -> f64 {
        let seq = self.sequence(line);
        let k = self.smoothing;
        let total: f64 = seq
            .windows(3)
            .map(|w| {
                let tri = self.trigrams.get(&[w[0], w[1], w[2]]).copied().unwrap_or(0) as f64;
                let bi = self.bigrams.get(&[w[0], w[1]]).copied().unwrap_or(0) as f64;
                ((tri + k) / (bi + k * self.outcomes())).ln()
            })
            .sum();
        total / (seq.len() - 2) as f64
    }
}

/// Keeps the best-scoring `keep_fraction` of lines, in original order.
/// Ties are broken by original position.
pub fn lm_filter<S: AsRef<str> + Clone>(lines: &[Vec<S>], lm: &TrigramLm, keep_fraction: f64) -> Vec<Vec<S>> {
    if lines.is_empty() {
        return Vec::new();
    }
    let keep = ((keep_fraction.clamp(0.0, 1.0) * lines.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let scores: Vec<f64> = lines.iter().map(|l| lm.per_token_logprob(l)).collect();
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| lines[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(text: &[&str]) -> Vec<Vec<String>> {
        text.iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    fn lm() -> TrigramLm {
        TrigramLm::train(
            &lines(&[
                "the market rose today",
                "the market fell today",
                "stocks rose in the market",
                "the bank said stocks fell",
            ]),
            TrigramLm::DEFAULT_SMOOTHING,
        )
    }

    #[test]
    fn keep_all_is_identity() {
        let mono = lines(&["a b", "the market rose", "zz"]);
        assert_eq!(lm_filter(&mono, &lm(), 1.0), mono);
        let empty: Vec<Vec<String>> = vec![];
        assert!(lm_filter(&empty, &lm(), 0.5).is_empty());
    }

    #[test]
    fn gibberish_ranks_below_in_domain() {
        let m = lm();
        let good = m.per_token_logprob(&["the", "market", "fell", "today"]);
        let bad = m.per_token_logprob(&["qx", "vvz", "kkp", "zrr"]);
        assert!(good > bad);
        let mono = lines(&["qx vvz kkp zrr", "the market fell today", "zz yy", "stocks rose today"]);
        let kept = lm_filter(&mono, &m, 0.5);
        assert_eq!(kept, lines(&["the market fell today", "stocks rose today"]));
    }

    #[test]
    fn ties_keep_earlier_lines() {
        let mono = lines(&["qq", "rr", "ss", "tt"]);
        assert_eq!(lm_filter(&mono, &lm(), 0.5), lines(&["qq", "rr"]));
    }
}
