//! Greedy, beam and sampling decoders over one model or an ensemble.

mod search;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{DecoderState, Direction, Memory, Model};
use crate::numerics::log_sum_exp;
use crate::text::{bpe_undo_tokens, detruecase};

pub use search::{beam_search, decode_batch, greedy_decode, sample_decode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    #[default]
    Beam,
    Sample,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
            DecodeMode::Sample => "sample",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            "sample" => Ok(DecodeMode::Sample),
            _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

/// How an ensemble merges member distributions at each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Mean of probabilities.
    #[default]
    Arithmetic,
    /// Mean of log-probabilities, renormalised.
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    pub temperature: f64,
    /// Cap on emitted tokens, EOS excluded.
    pub max_len: usize,
    pub seed: u64,
    pub combine: Combine,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 4,
            alpha: 0.6,
            temperature: 1.0,
            max_len: 200,
            seed: 0,
            combine: Combine::Arithmetic,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, beam_size: 1, ..DecodeConfig::default() }
    }

    pub fn sample(seed: u64) -> Self {
        DecodeConfig { mode: DecodeMode::Sample, beam_size: 1, seed, ..DecodeConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A finished output; `tokens` excludes EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<usize>, log_prob: f64, alpha: f64) -> Self {
        let score = log_prob / length_penalty(tokens.len(), alpha);
        Hypothesis { tokens, log_prob, score }
    }
}

/// Where a decoding row comes from: a fresh start on a source, or a copy of a
/// row from the previous step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Source(usize),
    Row(usize),
}

/// Incremental scorer over a fixed batch of sources.
pub trait Session {
    /// Rebuilds the row set from `origins`, feeds `tokens[r]` to row `r`, and
    /// returns next-token log-probabilities per row.
    fn advance(&mut self, origins: &[Origin], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Anything that can score target prefixes token by token.
pub trait StepModel: Sync {
    fn target_vocab_size(&self) -> usize;
    /// Opens a session over source id sequences.
    fn open<'a>(&'a self, sources: &[Vec<usize>]) -> Result<Box<dyn Session + 'a>>;
}

/// Moves or clones the referenced rows into their new order.
pub(crate) fn regather<S: Clone>(rows: Vec<S>, origins: &[Origin], fresh: impl Fn(usize) -> Result<S>) -> Result<Vec<S>> {
    let mut remaining = vec![0usize; rows.len()];
    for o in origins {
        if let Origin::Row(r) = o {
            if *r >= rows.len() {
                return Err(Error::State(format!("row {r} of {}", rows.len())));
            }
            remaining[*r] += 1;
        }
    }
    let mut slots: Vec<Option<S>> = rows.into_iter().map(Some).collect();
    origins
        .iter()
        .map(|o| match *o {
            Origin::Source(i) => fresh(i),
            Origin::Row(r) => {
                remaining[r] -= 1;
                let s = if remaining[r] == 0 { slots[r].take() } else { slots[r].clone() };
                Ok(s.expect("row is moved only after its last use"))
            }
        })
        .collect()
}

struct ModelSession<'a> {
    model: &'a Model,
    memory: Memory,
    rows: Vec<DecoderState>,
}

impl Session for ModelSession<'_> {
    fn advance(&mut self, origins: &[Origin], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows = std::mem::take(&mut self.rows);
        let (model, memory) = (self.model, &self.memory);
        self.rows = regather(rows, origins, |i| model.init_state(memory, i))?;
        model.step(memory, &mut self.rows, tokens)
    }
}

impl StepModel for Model {
    fn target_vocab_size(&self) -> usize {
        self.tgt_vocab.len()
    }

    fn open<'a>(&'a self, sources: &[Vec<usize>]) -> Result<Box<dyn Session + 'a>> {
        let memory = self.memory(sources)?;
        Ok(Box::new(ModelSession { model: self, memory, rows: Vec::new() }))
    }
}

/// Several models decoded as one.
pub struct Ensemble<'m> {
    members: Vec<&'m dyn StepModel>,
    combine: Combine,
}

impl<'m> Ensemble<'m> {
    pub fn new(members: Vec<&'m dyn StepModel>, combine: Combine) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Ensemble("no members".into()));
        };
        let v = first.target_vocab_size();
        if let Some(bad) = members.iter().find(|m| m.target_vocab_size() != v) {
            return Err(Error::Ensemble(format!(
                "target vocabulary sizes {v} and {} differ",
                bad.target_vocab_size()
            )));
        }
        Ok(Ensemble { members, combine })
    }

    /// Checks that full models agree on vocabularies and direction.
    pub fn of_models(models: &'m [&'m Model], combine: Combine) -> Result<Self> {
        check_compatible(models)?;
        Ensemble::new(models.iter().map(|m| *m as &dyn StepModel).collect(), combine)
    }
}

fn check_compatible(models: &[&Model]) -> Result<()> {
    let Some(first) = models.first() else {
        return Err(Error::Ensemble("no members".into()));
    };
    for m in &models[1..] {
        if m.tgt_vocab != first.tgt_vocab {
            return Err(Error::Ensemble("target vocabularies differ".into()));
        }
        if m.src_vocab != first.src_vocab || m.codec.src_bpe != first.codec.src_bpe {
            return Err(Error::Ensemble("source preprocessing differs".into()));
        }
        if m.spec.direction != first.spec.direction {
            return Err(Error::Ensemble("members decode in different directions".into()));
        }
    }
    Ok(())
}

struct EnsembleSession<'a> {
    sessions: Vec<Box<dyn Session + 'a>>,
    combine: Combine,
}

impl Session for EnsembleSession<'_> {
    fn advance(&mut self, origins: &[Origin], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let outputs = self
            .sessions
            .iter_mut()
            .map(|s| s.advance(origins, tokens))
            .collect::<Result<Vec<_>>>()?;
        if outputs.len() == 1 {
            return Ok(outputs.into_iter().next().expect("one member"));
        }
        let k = outputs.len() as f64;
        let rows = outputs[0].len();
        let width = outputs[0].first().map_or(0, Vec::len);
        let mut merged = Vec::with_capacity(rows);
        let mut column = vec![0.0; outputs.len()];
        for r in 0..rows {
            let mut row = Vec::with_capacity(width);
            for v in 0..width {
                for (m, out) in outputs.iter().enumerate() {
                    column[m] = out[r][v];
                }
                row.push(match self.combine {
                    Combine::Arithmetic => log_sum_exp(&column) - k.ln(),
                    Combine::Geometric => column.iter().sum::<f64>() / k,
                });
            }
            if self.combine == Combine::Geometric {
                let z = log_sum_exp(&row);
                row.iter_mut().for_each(|x| *x -= z);
            }
            merged.push(row);
        }
        Ok(merged)
    }
}

impl StepModel for Ensemble<'_> {
    fn target_vocab_size(&self) -> usize {
        self.members[0].target_vocab_size()
    }

    fn open<'a>(&'a self, sources: &[Vec<usize>]) -> Result<Box<dyn Session + 'a>> {
        let sessions = self.members.iter().map(|m| m.open(sources)).collect::<Result<Vec<_>>>()?;
        Ok(Box::new(EnsembleSession { sessions, combine: self.combine }))
    }
}

/// Source preprocessing of the first model: optional BPE then vocabulary ids.
pub fn encode_source(model: &Model, line: &str) -> Vec<usize> {
    let words: Vec<&str> = line.split_whitespace().collect();
    match &model.codec.src_bpe {
        Some(bpe) => model.src_vocab.encode(&bpe.apply_tokens(&words)),
        None => model.src_vocab.encode(&words),
    }
}

/// Target postprocessing: ids to tokens, BPE undo, direction restore, detruecase.
pub fn decode_target(model: &Model, ids: &[usize]) -> Result<String> {
    let mut tokens = model.tgt_vocab.decode(ids)?;
    if model.codec.tgt_bpe.is_some() {
        tokens = bpe_undo_tokens(&tokens);
    }
    if model.spec.direction == Direction::R2l {
        tokens.reverse();
    }
    if model.codec.truecase.is_some() {
        tokens = detruecase(&tokens);
    }
    Ok(tokens.join(" "))
}

/// Sentences per decoding session.
const CHUNK: usize = 32;

/// Translates whitespace-tokenized lines, preserving order.
pub fn translate_corpus(models: &[&Model], lines: &[String], config: &DecodeConfig) -> Result<Vec<String>> {
    translate_corpus_threads(models, lines, config, 1)
}

/// [`translate_corpus`] spread over `threads` workers; output does not depend on `threads`.
pub fn translate_corpus_threads(
    models: &[&Model],
    lines: &[String],
    config: &DecodeConfig,
    threads: usize,
) -> Result<Vec<String>> {
    config.validate()?;
    let ensemble = Ensemble::of_models(models, config.combine)?;
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    let first = models[0];
    let sources: Vec<Vec<usize>> = lines.iter().map(|l| encode_source(first, l)).collect();
    let chunks: Vec<(usize, &[Vec<usize>])> = sources.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c)).collect();
    let run = |(offset, chunk): &(usize, &[Vec<usize>])| -> Result<Vec<String>> {
        let best = decode_batch(&ensemble, chunk, config, *offset)?;
        best.iter().map(|h| decode_target(first, &h[0].tokens)).collect()
    };
    let threads = threads.max(1).min(chunks.len());
    let mut out = Vec::with_capacity(lines.len());
    if threads == 1 {
        for c in &chunks {
            out.extend(run(c)?);
        }
        return Ok(out);
    }
    let per = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let run = &run;
                s.spawn(move || -> Result<Vec<String>> {
                    let mut part = Vec::new();
                    for c in group {
                        part.extend(run(c)?);
                    }
                    Ok(part)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
