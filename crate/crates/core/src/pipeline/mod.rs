//! Synthetic-data pipeline: back-translation, distillation, iterated in-domain
//! transfer, model pools and ensemble selection, plus the cached experiment runner.

mod config;
mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::{ArchitectureDef, PipelineConfig, Pick, SelectPolicy, StageConfig, StageKind, ToyOutput};
pub use run::{run_experiment, ExperimentReport, ReportRow, RunOptions, StageRecord, CACHE_ENV, CACHE_FORMAT};

use crate::corpus::{filter_corpus, split, Augmentation, FilterRules, ParallelCorpus, Provenance, SentencePair};
use crate::decode::{translate_corpus_threads, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::metrics::{self_bleu, Tokenizer};
use crate::model_zoo::{Direction, Model};
use crate::train::FinetuneMethod;

/// Rounds of in-domain transfer in a full run.
pub const DEFAULT_TRANSFER_ITERATIONS: usize = 2;

/// Models ensembled to produce in-domain pseudo data.
pub const DEFAULT_TRANSFER_K: usize = 4;

/// Largest dev-BLEU gap to the best model tolerated by self-BLEU selection.
pub const DEFAULT_BLEU_FLOOR: f64 = 1.0;

/// One trained model in a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: usize,
    /// Checkpoint file name, relative to the pool directory.
    pub checkpoint: String,
    pub architecture: String,
    pub direction: Direction,
    pub shard: Option<usize>,
    pub augmentation: Augmentation,
    /// `None` before finetuning.
    pub method: Option<FinetuneMethod>,
    pub dev_bleu: Option<f64>,
    pub self_bleu: Option<f64>,
}

impl PoolEntry {
    fn dev(&self) -> Result<f64> {
        self.dev_bleu
            .filter(|b| b.is_finite())
            .ok_or_else(|| Error::Pool(format!("entry {} has no dev BLEU", self.id)))
    }
}

/// A pool entry with its loaded model.
#[derive(Clone, Debug)]
pub struct PoolModel {
    pub entry: PoolEntry,
    pub model: Model,
}

fn require_trained(models: &[&Model], what: &str) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Pool(format!("no {what} models given")));
    }
    match models.iter().position(|m| m.steps == 0) {
        Some(i) => Err(Error::ModelState(format!("{what} model {i} has never been trained"))),
        None => Ok(()),
    }
}

/// Pairs each target line with the sources generated by every reverse model
/// (typically an L2R and an R2L one), then filters. Sampling marks the pairs `Sample`.
pub fn back_translate(
    mono_target: &[String],
    reverse_models: &[&Model],
    decode: &DecodeConfig,
    rules: &FilterRules,
    threads: usize,
) -> Result<ParallelCorpus> {
    require_trained(reverse_models, "reverse")?;
    let augmentation = match decode.mode {
        DecodeMode::Sample => Augmentation::Sample,
        _ => Augmentation::Clean,
    };
    let mut out = ParallelCorpus::default();
    for m in reverse_models {
        let generated = translate_corpus_threads(&[*m], mono_target, decode, threads)?;
        out.pairs.extend(generated.iter().zip(mono_target).map(|(src, tgt)| SentencePair {
            source: split(src),
            target: split(tgt),
            provenance: Provenance::BackTranslated,
            augmentation,
        }));
    }
    Ok(filter_corpus(&out, rules).0)
}

/// Pairs every source line with each teacher's translation, teacher by teacher.
/// The result is not filtered, so each teacher contributes exactly one pair per line.
pub fn knowledge_distill(sources: &[String], teachers: &[&Model], decode: &DecodeConfig, threads: usize) -> Result<ParallelCorpus> {
    let mut out = ParallelCorpus::default();
    for t in teachers {
        let generated = translate_corpus_threads(&[*t], sources, decode, threads)?;
        out.pairs
            .extend(sources.iter().zip(&generated).map(|(s, g)| SentencePair::new(split(s), split(g), Provenance::Distilled)));
    }
    Ok(out)
}

/// The best finetuned model (by dev BLEU, ties by id) of each of the `k` best
/// architectures.
pub fn transfer_ensemble(pool: &[PoolModel], k: usize) -> Result<Vec<&PoolModel>> {
    let mut best: BTreeMap<&str, &PoolModel> = BTreeMap::new();
    for pm in pool.iter().filter(|pm| pm.entry.method.is_some()) {
        let dev = pm.entry.dev()?;
        let slot = best.entry(pm.entry.architecture.as_str()).or_insert(pm);
        let held = slot.entry.dev()?;
        if dev > held || (dev == held && pm.entry.id < slot.entry.id) {
            *slot = pm;
        }
    }
    if k == 0 || best.len() < k {
        return Err(Error::Pool(format!(
            "transfer needs {k} finetuned models of distinct architectures, pool has {}",
            best.len()
        )));
    }
    let mut chosen: Vec<&PoolModel> = best.into_values().collect();
    chosen.sort_by(|a, b| {
        let (da, db) = (a.entry.dev_bleu.unwrap_or(f64::NAN), b.entry.dev_bleu.unwrap_or(f64::NAN));
        db.total_cmp(&da).then(a.entry.id.cmp(&b.entry.id))
    });
    chosen.truncate(k);
    Ok(chosen)
}

/// One round of in-domain transfer: an ensemble of `k` finetuned models of
/// distinct architectures translates in-domain source text into pseudo-parallel data.
pub fn in_domain_transfer_iteration(
    pool: &[PoolModel],
    mono_source: &[String],
    k: usize,
    decode: &DecodeConfig,
    rules: &FilterRules,
    threads: usize,
) -> Result<ParallelCorpus> {
    let chosen = transfer_ensemble(pool, k)?;
    let models: Vec<&Model> = chosen.iter().map(|pm| &pm.model).collect();
    let generated = translate_corpus_threads(&models, mono_source, decode, threads)?;
    let pseudo: ParallelCorpus = mono_source
        .iter()
        .zip(&generated)
        .map(|(s, g)| SentencePair::new(split(s), split(g), Provenance::InDomain))
        .collect();
    Ok(filter_corpus(&pseudo, rules).0)
}

/// Runs `iterations` rounds of transfer. `retrain` receives the round number and
/// that round's pseudo corpus only, and returns the next pool; earlier pseudo
/// corpora are never handed back. Returns the final pool and each round's corpus.
#[allow(clippy::too_many_arguments)]
pub fn iterate_transfer(
    mut pool: Vec<PoolModel>,
    mono_source: &[String],
    k: usize,
    iterations: usize,
    decode: &DecodeConfig,
    rules: &FilterRules,
    threads: usize,
    mut retrain: impl FnMut(usize, &ParallelCorpus) -> Result<Vec<PoolModel>>,
) -> Result<(Vec<PoolModel>, Vec<ParallelCorpus>)> {
    let mut history = Vec::with_capacity(iterations);
    for round in 0..iterations {
        let pseudo = in_domain_transfer_iteration(&pool, mono_source, k, decode, rules, threads)?;
        pool = retrain(round, &pseudo)?;
        history.push(pseudo);
    }
    Ok((pool, history))
}

fn by_dev_then_id(a: &PoolEntry, b: &PoolEntry) -> std::cmp::Ordering {
    let (da, db) = (a.dev_bleu.unwrap_or(f64::NAN), b.dev_bleu.unwrap_or(f64::NAN));
    db.total_cmp(&da).then(a.id.cmp(&b.id))
}

fn check_k(pool: &[PoolEntry], k: usize) -> Result<()> {
    if k == 0 || k > pool.len() {
        return Err(Error::Pool(format!("cannot select {k} of {} models", pool.len())));
    }
    pool.iter().try_for_each(|e| e.dev().map(drop))
}

/// Ids of the `k` entries with the highest dev BLEU, ties by id, best first.
pub fn ensemble_select_normal(pool: &[PoolEntry], k: usize) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    let mut order: Vec<&PoolEntry> = pool.iter().collect();
    order.sort_by(|a, b| by_dev_then_id(a, b));
    Ok(order.iter().take(k).map(|e| e.id).collect())
}

/// Outcome of self-BLEU guided selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfBleuSelection {
    /// Selected ids in selection order.
    pub ids: Vec<usize>,
    /// Self-BLEU of every pool entry, keyed by id.
    pub self_bleu: BTreeMap<usize, f64>,
}

/// Selects `k` entries, preferring low self-BLEU among those within `floor`
/// dev-BLEU points of the best; ties fall back to dev BLEU, then id. If fewer
/// than `k` entries clear the floor, the rest are filled in dev-BLEU order.
/// `translations` holds each entry's dev-set output, keyed by id.
pub fn ensemble_select_self_bleu(
    pool: &[PoolEntry],
    translations: &BTreeMap<usize, Vec<String>>,
    k: usize,
    floor: f64,
) -> Result<SelfBleuSelection> {
    check_k(pool, k)?;
    if !(floor >= 0.0) {
        return Err(Error::Config(format!("BLEU floor {floor} must be non-negative")));
    }
    let outputs: Vec<&Vec<String>> = pool
        .iter()
        .map(|e| translations.get(&e.id).ok_or_else(|| Error::Pool(format!("no dev translations for entry {}", e.id))))
        .collect::<Result<_>>()?;
    let scores = if pool.len() == 1 {
        vec![100.0]
    } else {
        let owned: Vec<Vec<String>> = outputs.into_iter().cloned().collect();
        self_bleu(&owned, Tokenizer::Whitespace).map_err(|e| Error::Pool(format!("self-BLEU: {e}")))?
    };
    let self_bleu: BTreeMap<usize, f64> = pool.iter().zip(&scores).map(|(e, &s)| (e.id, s)).collect();
    let best = pool.iter().map(|e| e.dev_bleu.unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
    let (mut eligible, mut rest): (Vec<&PoolEntry>, Vec<&PoolEntry>) =
        pool.iter().partition(|e| e.dev_bleu.unwrap_or(f64::NAN) >= best - floor);
    eligible.sort_by(|a, b| self_bleu[&a.id].total_cmp(&self_bleu[&b.id]).then_with(|| by_dev_then_id(a, b)));
    rest.sort_by(|a, b| by_dev_then_id(a, b));
    let ids = eligible.iter().chain(&rest).take(k).map(|e| e.id).collect();
    Ok(SelfBleuSelection { ids, self_bleu })
}

#[cfg(test)]
mod tests;
