use std::collections::HashMap;

use crate::error::{Error, Result};

/// Corpus statistics deciding whether a sentence-initial token is lowered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TruecaseModel {
    counts: HashMap<String, usize>,
}

fn lowercase_first(token: &str) -> String {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn uppercase_first(token: &str) -> String {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl TruecaseModel {
    /// Counts every surface form in the tokenised corpus.
    pub fn learn<S: AsRef<str>>(lines: &[Vec<S>]) -> Result<Self> {
        let mut counts = HashMap::new();
        for line in lines {
            for tok in line {
                *counts.entry(tok.as_ref().to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(TruecaseModel { counts })
    }

    fn count(&self, form: &str) -> usize {
        self.counts.get(form).copied().unwrap_or(0)
    }

    /// Lowers the first token when its lowercase form is strictly more frequent.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = tokens.to_vec();
        if let Some(first) = out.first_mut() {
            let lower = lowercase_first(first);
            if lower != *first && self.count(&lower) > self.count(first) {
                *first = lower;
            }
        }
        out
    }

    /// `form<TAB>count` lines in form order.
    pub fn to_text(&self) -> String {
        let mut forms: Vec<(&String, &usize)> = self.counts.iter().collect();
        forms.sort();
        forms.into_iter().map(|(f, c)| format!("{f}\t{c}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut counts = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let parsed = line.split_once('\t').and_then(|(f, c)| Some((f, c.parse().ok()?)));
            let (f, c) = parsed.ok_or_else(|| Error::format("truecase model", format!("line {}", n + 1)))?;
            counts.insert(f.to_string(), c);
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(TruecaseModel { counts })
    }
}

/// Restores the capital on the sentence-initial token.
pub fn detruecase(tokens: &[String]) -> Vec<String> {
    let mut out = tokens.to_vec();
    if let Some(first) = out.first_mut() {
        *first = uppercase_first(first);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn fixture() -> TruecaseModel {
        let lines: Vec<Vec<String>> = [
            "The cat sat on the mat",
            "we saw the dog and the cat",
            "Paris is big and Paris is old",
            "in Paris the night is long",
            "The end",
        ]
        .iter()
        .map(|l| toks(l))
        .collect();
        TruecaseModel::learn(&lines).unwrap()
    }

    #[test]
    fn majority_lowercase_is_lowered() {
        let m = fixture();
        assert_eq!(m.apply(&toks("The cat")), toks("the cat"));
        assert_eq!(m.apply(&toks("Paris is big")), toks("Paris is big"));
    }

    #[test]
    fn text_form_round_trips() {
        let m = fixture();
        assert_eq!(TruecaseModel::from_text(&m.to_text()).unwrap(), m);
        assert!(TruecaseModel::from_text("no-tab").is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(TruecaseModel::learn(&empty), Err(Error::EmptyCorpus)));
    }

    proptest! {
        #[test]
        fn round_trip_only_touches_first_token(
            words in proptest::collection::vec(prop::sample::select(vec![
                "The", "the", "cat", "Paris", "Cat", "sat", "end", "We", "we",
            ]), 1..8)
        ) {
            let m = fixture();
            let s: Vec<String> = words.iter().map(|w| w.to_string()).collect();
            let cased = m.apply(&s);
            prop_assert_eq!(m.apply(&cased), cased.clone());
            let back = detruecase(&cased);
            prop_assert_eq!(&back[1..], &s[1..]);
            prop_assert_eq!(back[0].to_lowercase(), s[0].to_lowercase());
        }
    }
}
