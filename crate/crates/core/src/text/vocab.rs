use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id mapping with the four reserved ids at 0..3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from token counts, ordered by count descending then token ascending.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string(), 0);
        }
        for (t, c) in entries {
            v.push(t, c);
        }
        v
    }

    pub fn build<S: AsRef<str>>(lines: &[Vec<S>]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for t in line {
                *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts)
    }

    fn push(&mut self, token: String, count: usize) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.counts.push(count);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocab { id, size: self.tokens.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).map(String::from))
            .collect()
    }

    /// Non-reserved tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// `token<TAB>count` lines for the non-reserved entries.
    pub fn to_text(&self) -> String {
        self.tokens[RESERVED.len()..]
            .iter()
            .zip(&self.counts[RESERVED.len()..])
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (t, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: no tab", n + 1)))?;
            let c = c
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad count", n + 1)))?;
            counts.push((t.to_string(), c));
        }
        Ok(Self::from_counts(counts))
    }
}
