//! Byte-pair encoding over characters, with `@@` marking word-internal pieces.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const SEPARATOR: &str = "@@";

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn merge_word(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn chars(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::format("bpe model", format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    /// Greedy most-frequent-pair learning; ties go to the lexicographically smallest pair.
    pub fn learn<S: AsRef<str>>(lines: &[Vec<S>], merges: usize) -> Self {
        let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for w in line {
                *vocab.entry(w.as_ref().to_string()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> =
            vocab.into_iter().map(|(w, c)| (chars(&w), c)).collect();
        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, count) in &words {
                for w in symbols.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += count;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((l, r), _)| (l.to_string(), r.to_string()));
            let Some(best) = best else { break };
            for (symbols, _) in words.iter_mut() {
                if symbols.len() > 1 {
                    *symbols = merge_word(symbols, &best);
                }
            }
            learned.push(best);
        }
        BpeModel::from_merges(learned).expect("learned merges are unique")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Subword pieces of a single word, without separators.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = chars(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            symbols = merge_word(&symbols, &self.merges[rank]);
        }
        symbols
    }

    pub fn apply_tokens<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for w in words {
            let pieces = self.segment_word(w.as_ref());
            let last = pieces.len().saturating_sub(1);
            for (i, p) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(format!("{p}{SEPARATOR}"));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn apply(&self, line: &str) -> Vec<String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        self.apply_tokens(&words)
    }

    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::format("bpe model", format!("line {}: `{line}`", n + 1)));
            }
            merges.push((parts[0].to_string(), parts[1].to_string()));
        }
        BpeModel::from_merges(merges)
    }
}

/// Rejoins subword pieces into words.
pub fn bpe_undo_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(stem) = t.strip_suffix(SEPARATOR) {
            current.push_str(stem);
        } else {
            current.push_str(t);
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

pub fn bpe_undo<S: AsRef<str>>(tokens: &[S]) -> String {
    bpe_undo_tokens(tokens).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(text: &[&str]) -> Vec<Vec<String>> {
        text.iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    /// Independent pair counter: recount every adjacent pair from scratch and
    /// replay the chosen merges on plain strings.
    fn brute_force_merges(text: &[&str], n: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = text
            .iter()
            .flat_map(|l| l.split_whitespace())
            .map(|w| w.chars().map(String::from).collect())
            .collect();
        let mut out = Vec::new();
        for _ in 0..n {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for w in &words {
                for i in 0..w.len().saturating_sub(1) {
                    *counts.entry((w[i].clone(), w[i + 1].clone())).or_default() += 1;
                }
            }
            let max = counts.values().copied().max().unwrap();
            // BTreeMap iterates in ascending pair order, so the first max wins ties.
            let pair = counts.into_iter().find(|(_, c)| *c == max).unwrap().0;
            for w in words.iter_mut() {
                let mut merged = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                        merged.push(format!("{}{}", w[i], w[i + 1]));
                        i += 2;
                    } else {
                        merged.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = merged;
            }
            out.push(pair);
        }
        out
    }

    #[test]
    fn single_pair_corpus() {
        let m = BpeModel::learn(&lines(&["aa aa"]), 1);
        assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::learn(&lines(&["hello world"]), 0);
        assert_eq!(m.merge_count(), 0);
        assert_eq!(m.apply("hi"), ["h@@", "i"]);
    }

    #[test]
    fn five_line_fixture_matches_pair_counter() {
        let text = [
            "low lower lowest",
            "newer wider newest",
            "low low widest",
            "lower newer",
            "west est",
        ];
        let learned = BpeModel::learn(&lines(&text), 3);
        assert_eq!(learned.merges(), &brute_force_merges(&text, 3)[..]);
    }

    #[test]
    fn traced_merge_order() {
        let m = BpeModel::from_merges(vec![
            ("l".into(), "o".into()),
            ("lo".into(), "w".into()),
        ])
        .unwrap();
        assert_eq!(m.apply("lowest"), ["low@@", "e@@", "s@@", "t"]);
    }

    #[test]
    fn unseen_characters_survive() {
        let m = BpeModel::learn(&lines(&["abc abc"]), 5);
        let pieces = m.apply("abcz");
        assert_eq!(pieces.last().unwrap(), "z");
        assert_eq!(bpe_undo(&pieces), "abcz");
    }

    #[test]
    fn text_format_round_trips() {
        let m = BpeModel::learn(&lines(&["banana bandana"]), 4);
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::from_text("a b c\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn apply_then_undo_is_identity(words in proptest::collection::vec("[a-f]{1,7}", 1..8)) {
            let model = BpeModel::learn(
                &lines(&["fade bead cafe face deaf", "abba dab babe bad cab", "feed beef dead"]),
                20,
            );
            let line = words.join(" ");
            prop_assert_eq!(bpe_undo(&model.apply(&line)), line);
        }
    }
}
