//! Teacher-forced training and the finetuning regimes.

mod batch;
mod mrt;
mod regimes;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{encode_corpus, Example};
pub use mrt::{candidate_distribution, expected_risk, mrt_objective, CandidateGen, MrtConfig, Risk, ALPHA_GRID};
pub use regimes::{pss_mix, target_denoise, DenoiseConfig, NoiseCounts};

use crate::corpus::ParallelCorpus;
use crate::decode::{decode_batch, translate_corpus, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu_tokens, sentence_bleu};
use crate::model_zoo::{Architecture, Model};
use crate::numerics::{adam_step, AdamState, Graph, OptimizerConfig, Schedule, Tensor};
use crate::text::{bpe_undo_tokens, BOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on padded target-or-source positions per batch.
    pub batch_tokens: usize,
    pub max_steps: usize,
    pub optimizer: OptimizerConfig,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 1024,
            max_steps: 3000,
            optimizer: OptimizerConfig {
                beta1: 0.9,
                beta2: 0.998,
                epsilon: 1e-9,
                base_lr: 1.0,
                warmup_steps: 300,
                schedule: Schedule::Noam { d_model: 64 },
            },
            label_smoothing: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Steps of a normal finetuning run.
pub const FINETUNE_STEPS: usize = 400;

/// Noam scale for DTMT models, which diverge or stall at the Transformer rate.
pub const RECURRENT_BASE_LR: f64 = 0.3;

/// Upper bound on MRT steps for each grid point.
pub const MRT_MAX_STEPS: usize = 1000;

impl TrainConfig {
    /// Defaults with the schedule scaled to `model`'s width; recurrent models
    /// get [`RECURRENT_BASE_LR`].
    pub fn for_model(model: &Model) -> Self {
        let mut c = TrainConfig::default();
        c.optimizer.schedule = Schedule::Noam { d_model: model.spec.hidden() };
        if matches!(model.spec.architecture, Architecture::Dtmt(_)) {
            c.optimizer.base_lr = RECURRENT_BASE_LR;
        }
        c
    }

    /// Constant-rate settings for continuing from a trained checkpoint.
    pub fn finetune() -> Self {
        let mut c = TrainConfig { max_steps: FINETUNE_STEPS, ..TrainConfig::default() };
        c.optimizer.schedule = Schedule::Constant;
        c.optimizer.base_lr = 3e-4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Training signal of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Objective {
    CrossEntropy,
    Pss { mix_ratio: f64 },
    Denoise(DenoiseConfig),
    Mrt(MrtConfig),
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Pss { mix_ratio } if !(0.0..=1.0).contains(mix_ratio) => {
                Err(Error::Config(format!("mix_ratio {mix_ratio} outside [0, 1]")))
            }
            Objective::Denoise(d) if !(0.0..=1.0).contains(&d.pair_prob) || !(0.0..=1.0).contains(&d.token_prob) => {
                Err(Error::Config("denoising probabilities outside [0, 1]".into()))
            }
            Objective::Mrt(m) => m.validate(),
            _ => Ok(()),
        }
    }
}

/// Finetuning methods by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMethod {
    Normal,
    Pss,
    Denoise,
    Mrt,
}

impl FinetuneMethod {
    pub const ALL: [FinetuneMethod; 4] = [FinetuneMethod::Normal, FinetuneMethod::Pss, FinetuneMethod::Denoise, FinetuneMethod::Mrt];

    /// The objective with default settings; PSS mixes half of the inputs.
    pub fn objective(self) -> Objective {
        match self {
            FinetuneMethod::Normal => Objective::CrossEntropy,
            FinetuneMethod::Pss => Objective::Pss { mix_ratio: 0.5 },
            FinetuneMethod::Denoise => Objective::Denoise(DenoiseConfig::default()),
            FinetuneMethod::Mrt => Objective::Mrt(MrtConfig::default()),
        }
    }
}

impl fmt::Display for FinetuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMethod::Normal => "normal",
            FinetuneMethod::Pss => "pss",
            FinetuneMethod::Denoise => "denoise",
            FinetuneMethod::Mrt => "mrt",
        })
    }
}

impl FromStr for FinetuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FinetuneMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown finetune method {s:?}")))
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Target tokens in the batch.
    pub tokens: usize,
}

/// Loss of one batch plus parameter gradients in store order.
struct BatchResult {
    loss: f64,
    tokens: usize,
    grads: Vec<Tensor>,
}

fn collect_grads(model: &Model, g: &Graph<'_>, vars: &[crate::numerics::Var], loss: crate::numerics::Var) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Per-token cross-entropy of `labels` given decoder `inputs`, averaged over real tokens.
fn teacher_forced<'p>(
    g: &mut Graph<'p>,
    p: &crate::numerics::BoundParams<'p>,
    model: &Model,
    sources: &[Vec<usize>],
    inputs: &[Vec<usize>],
    labels: &[Vec<usize>],
    smoothing: f64,
) -> Result<(crate::numerics::Var, usize)> {
    let logits = model.forward(g, p, sources, inputs)?;
    let v = model.tgt_vocab.len();
    let (flat, width) = batch::flat_labels(labels);
    let logits = g.reshape(logits, &[sources.len() * width, v])?;
    let total = g.cross_entropy(logits, &flat, smoothing)?;
    let tokens: usize = labels.iter().map(Vec::len).sum();
    Ok((g.scale(total, 1.0 / tokens as f64)?, tokens))
}

/// First-pass argmax predictions under teacher forcing, without gradients.
fn predictions(model: &Model, sources: &[Vec<usize>], inputs: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let logits = model.forward(&mut g, &p, sources, inputs)?;
    let v = model.tgt_vocab.len();
    let values = g.value(logits);
    let width = values.shape()[1];
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(b, inp)| {
            (0..inp.len())
                .map(|t| {
                    let row = &values.data()[(b * width + t) * v..(b * width + t + 1) * v];
                    let mut best = crate::text::EOS;
                    for (k, &x) in row.iter().enumerate() {
                        if k != PAD && k != BOS && x > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect())
}

/// Scheduled-sampling loss of one batch, with its mixing counts.
pub fn pss_loss(model: &Model, batch: &[Example], mix_ratio: f64, smoothing: f64, rng: &mut ChaCha8Rng) -> Result<(f64, NoiseCounts)> {
    let (r, counts) = pss_batch(model, batch, mix_ratio, smoothing, rng, false)?;
    Ok((r.loss, counts))
}

fn pss_batch(
    model: &Model,
    batch: &[Example],
    mix_ratio: f64,
    smoothing: f64,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<(BatchResult, NoiseCounts)> {
    let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.source.clone()).collect();
    let gold: Vec<Vec<usize>> = batch.iter().map(Example::decoder_input).collect();
    let labels: Vec<Vec<usize>> = batch.iter().map(Example::labels).collect();
    let (inputs, counts) = if mix_ratio > 0.0 {
        let pred = predictions(model, &sources, &gold)?;
        pss_mix(&gold, &pred, mix_ratio, rng)
    } else {
        (gold, NoiseCounts::default())
    };
    Ok((forced_batch(model, &sources, &inputs, &labels, smoothing, want_grads)?, counts))
}

fn forced_batch(
    model: &Model,
    sources: &[Vec<usize>],
    inputs: &[Vec<usize>],
    labels: &[Vec<usize>],
    smoothing: f64,
    want_grads: bool,
) -> Result<BatchResult> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (loss, tokens) = teacher_forced(&mut g, &p, model, sources, inputs, labels, smoothing)?;
    let value = g.value(loss).item()?;
    let grads = if want_grads { collect_grads(model, &g, p.vars(), loss)? } else { Vec::new() };
    Ok(BatchResult { loss: value, tokens, grads })
}

/// Word-level view of target ids for risk computation.
fn target_words(model: &Model, ids: &[usize]) -> Result<Vec<String>> {
    let mut t = model.tgt_vocab.decode(ids)?;
    if model.codec.tgt_bpe.is_some() {
        t = bpe_undo_tokens(&t);
    }
    Ok(t)
}

/// Candidate sets with risks for MRT: `(candidates, risks)` per example.
pub fn mrt_candidates(
    model: &Model,
    batch: &[Example],
    config: &MrtConfig,
    seed: u64,
) -> Result<Vec<(Vec<Vec<usize>>, Vec<f64>)>> {
    let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.source.clone()).collect();
    let max_len = sources.iter().map(Vec::len).max().unwrap_or(1) * 2 + 10;
    let mut sets: Vec<Vec<Vec<usize>>> = vec![Vec::new(); batch.len()];
    match config.candidate_gen {
        CandidateGen::Beam => {
            let cfg = DecodeConfig { mode: DecodeMode::Beam, beam_size: config.num_candidates, max_len, ..DecodeConfig::default() };
            for (set, hyps) in sets.iter_mut().zip(decode_batch(model, &sources, &cfg, 0)?) {
                set.extend(hyps.into_iter().map(|h| h.tokens));
            }
        }
        CandidateGen::Sample => {
            for k in 0..config.num_candidates {
                let cfg = DecodeConfig { max_len, ..DecodeConfig::sample(seed.wrapping_add(k as u64)) };
                for (set, mut hyps) in sets.iter_mut().zip(decode_batch(model, &sources, &cfg, 0)?) {
                    set.push(hyps.remove(0).tokens);
                }
            }
        }
    }
    batch
        .iter()
        .zip(sets)
        .map(|(e, mut set)| {
            if config.include_gold {
                set.push(e.target.clone());
            }
            let mut unique: Vec<Vec<usize>> = Vec::with_capacity(set.len());
            for c in set {
                if !unique.contains(&c) {
                    unique.push(c);
                }
            }
            let gold = target_words(model, &e.target)?;
            let risks = unique
                .iter()
                .map(|c| Ok(-sentence_bleu(&target_words(model, c)?, &gold) / 100.0))
                .collect::<Result<Vec<f64>>>()?;
            Ok((unique, risks))
        })
        .collect()
}

/// MRT risk of a batch given candidate sets, optionally with gradients.
fn mrt_batch(
    model: &Model,
    batch: &[Example],
    sets: &[(Vec<Vec<usize>>, Vec<f64>)],
    config: &MrtConfig,
    want_grads: bool,
) -> Result<BatchResult> {
    let mut sources = Vec::new();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut sizes = Vec::with_capacity(sets.len());
    let mut risks = Vec::new();
    for (e, (cands, r)) in batch.iter().zip(sets) {
        sizes.push(cands.len());
        risks.extend_from_slice(r);
        for c in cands {
            let ex = Example { source: e.source.clone(), target: c.clone() };
            sources.push(e.source.clone());
            inputs.push(ex.decoder_input());
            labels.push(ex.labels());
        }
    }
    if sizes.iter().any(|&s| s == 0) || sizes.is_empty() {
        return Err(Error::Candidate(sizes.iter().position(|&s| s == 0).unwrap_or(0)));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let logits = model.forward(&mut g, &p, &sources, &inputs)?;
    let v = model.tgt_vocab.len();
    let (flat, width) = batch::flat_labels(&labels);
    let logits = g.reshape(logits, &[sources.len() * width, v])?;
    let lp = g.log_softmax(logits)?;
    let index: Vec<usize> = flat.iter().map(|y| y.unwrap_or(0)).collect();
    let picked = g.pick(lp, &index)?;
    let keep = g.constant(Tensor::vector(flat.iter().map(|y| if y.is_some() { 1.0 } else { 0.0 }).collect()));
    let picked = g.mul(picked, keep)?;
    let scores = g.segment_sum(picked, &vec![width; sources.len()])?;
    let loss = mrt_objective(&mut g, scores, &sizes, &risks, config.alpha, config.average)?;
    let value = g.value(loss).item()?;
    let grads = if want_grads { collect_grads(model, &g, p.vars(), loss)? } else { Vec::new() };
    Ok(BatchResult { loss: value, tokens: labels.iter().map(Vec::len).sum(), grads })
}

/// Drives optimisation of one model over one corpus.
pub struct Trainer<'m> {
    model: &'m mut Model,
    examples: Vec<Example>,
    config: TrainConfig,
    objective: Objective,
    adam: AdamState,
    order_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
    step: usize,
    records: Vec<StepRecord>,
    noise: NoiseCounts,
    started: Instant,
    seen_tokens: usize,
}

/// Salt separating the corruption stream from the batching stream.
const NOISE_SALT: u64 = 0x6e6f697365;

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, corpus: &ParallelCorpus, config: TrainConfig, objective: Objective) -> Result<Self> {
        config.validate()?;
        objective.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let examples = encode_corpus(model, corpus);
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            examples,
            order_rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise_rng: ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_SALT),
            config,
            objective,
            adam,
            queue: Vec::new(),
            step: 0,
            records: Vec::new(),
            noise: NoiseCounts::default(),
            started: Instant::now(),
            seen_tokens: 0,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Mixed (PSS) or corrupted (denoising) decoder-input counts so far.
    pub fn noise_counts(&self) -> NoiseCounts {
        self.noise
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Result<Vec<Example>> {
        if self.queue.is_empty() {
            self.queue = batch::epoch_batches(&self.examples, self.config.batch_tokens, &mut self.order_rng)?;
            self.queue.reverse();
        }
        let ids = self.queue.pop().expect("epoch has batches");
        Ok(ids.into_iter().map(|i| self.examples[i].clone()).collect())
    }

    /// Loss of the next batch under the current parameters, with gradients.
    fn evaluate_batch(&mut self, batch: &[Example]) -> Result<BatchResult> {
        let smoothing = self.config.label_smoothing;
        let model = &*self.model;
        match &self.objective {
            Objective::CrossEntropy => {
                let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.source.clone()).collect();
                let inputs: Vec<Vec<usize>> = batch.iter().map(Example::decoder_input).collect();
                let labels: Vec<Vec<usize>> = batch.iter().map(Example::labels).collect();
                forced_batch(model, &sources, &inputs, &labels, smoothing, true)
            }
            Objective::Pss { mix_ratio } => {
                let (r, c) = pss_batch(model, batch, *mix_ratio, smoothing, &mut self.noise_rng, true)?;
                self.noise.add(c);
                Ok(r)
            }
            Objective::Denoise(d) => {
                let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.target.clone()).collect();
                let (noisy, c) = target_denoise(&targets, d, &mut self.noise_rng);
                self.noise.add(c);
                let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.source.clone()).collect();
                let inputs: Vec<Vec<usize>> = noisy
                    .into_iter()
                    .map(|t| Example { source: Vec::new(), target: t }.decoder_input())
                    .collect();
                let labels: Vec<Vec<usize>> = batch.iter().map(Example::labels).collect();
                forced_batch(model, &sources, &inputs, &labels, smoothing, true)
            }
            Objective::Mrt(m) => {
                let seed = self.noise_rng.gen();
                let sets = mrt_candidates(model, batch, m, seed)?;
                mrt_batch(model, batch, &sets, m, true)
            }
        }
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let step = self.step + 1;
        let result = match self.evaluate_batch(&batch) {
            Err(Error::Numeric(_)) => return Err(Error::TrainingDiverged { step, loss: f64::NAN }),
            r => r?,
        };
        if !result.loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: result.loss });
        }
        let lr = adam_step(&mut self.model.params, &result.grads, &mut self.adam, &self.config.optimizer, step)?;
        if self.model.params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::TrainingDiverged { step, loss: f64::NAN });
        }
        self.step = step;
        self.model.steps += 1;
        self.seen_tokens += result.tokens;
        let record = StepRecord { step, loss: result.loss, lr, tokens: result.tokens };
        if step % 100 == 0 {
            let rate = self.seen_tokens as f64 / self.started.elapsed().as_secs_f64().max(1e-9);
            log::info!("step {step} loss {:.4} lr {lr:.3e} tokens/sec {rate:.0}", result.loss);
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Runs up to `steps` updates. Every `check_every` steps (when non-zero),
    /// `check` sees the model and may stop the run by returning `true`.
    pub fn run(&mut self, steps: usize, check_every: usize, mut check: impl FnMut(&Model, usize) -> Result<bool>) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
            if check_every > 0 && self.step % check_every == 0 && check(self.model, self.step)? {
                break;
            }
        }
        Ok(())
    }
}

/// Result of [`train`] and [`finetune`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub noise: NoiseCounts,
    pub checkpoints: Vec<PathBuf>,
}

/// Manifest lines, one JSON object per step.
pub fn manifest_jsonl(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::at(path))?;
    f.write_all(manifest_jsonl(records).as_bytes()).map_err(Error::at(path))
}

/// Checkpoint path for `step` inside `dir`.
pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Runs `objective` for `config.max_steps` steps, appending `label` to the lineage.
/// With `out_dir`, writes periodic checkpoints, the final checkpoint and `train.jsonl`.
pub fn run_objective(
    model: &mut Model,
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    objective: Objective,
    label: &str,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if config.max_steps == 0 {
        return Ok(TrainReport { records: Vec::new(), noise: NoiseCounts::default(), checkpoints: Vec::new() });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let mut checkpoints = Vec::new();
    let (records, noise) = {
        let mut trainer = Trainer::new(model, corpus, config.clone(), objective)?;
        for _ in 0..config.max_steps {
            trainer.step()?;
            let s = trainer.steps_taken();
            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && s % config.checkpoint_every == 0 && s < config.max_steps {
                    let path = checkpoint_path(dir, trainer.model().steps);
                    trainer.model().save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        (trainer.records.clone(), trainer.noise)
    };
    model.lineage.push(format!("{label} steps={}", config.max_steps));
    if let Some(dir) = out_dir {
        let path = checkpoint_path(dir, model.steps);
        model.save(&path)?;
        checkpoints.push(path);
        write_manifest(&dir.join("train.jsonl"), &records)?;
    }
    Ok(TrainReport { records, noise, checkpoints })
}

/// Teacher-forced training with label smoothing.
pub fn train(model: &mut Model, corpus: &ParallelCorpus, config: &TrainConfig) -> Result<TrainReport> {
    run_objective(model, corpus, config, Objective::CrossEntropy, "train", None)
}

/// Continues training `model` on `corpus` with `method`; `config.max_steps`
/// defaults to [`FINETUNE_STEPS`]. Zero steps leaves the model untouched.
pub fn finetune(model: &mut Model, corpus: &ParallelCorpus, objective: Objective, config: &TrainConfig) -> Result<TrainReport> {
    let label = match &objective {
        Objective::CrossEntropy => "finetune method=normal".to_string(),
        Objective::Pss { mix_ratio } => format!("finetune method=pss mix={mix_ratio}"),
        Objective::Denoise(_) => "finetune method=denoise".to_string(),
        Objective::Mrt(m) => format!("finetune method=mrt alpha={}", m.alpha),
    };
    run_objective(model, corpus, config, objective, &label, None)
}

/// Corpus BLEU of `models` (as an ensemble) on `corpus`, on whitespace tokens.
pub fn bleu_on(models: &[&Model], corpus: &ParallelCorpus, decode: &DecodeConfig) -> Result<f64> {
    let lines: Vec<String> = corpus.iter().map(|p| p.source.join(" ")).collect();
    let out = translate_corpus(models, &lines, decode)?;
    let hyps: Vec<Vec<&str>> = out.iter().map(|l| l.split_whitespace().collect()).collect();
    let refs: Vec<Vec<Vec<&str>>> = corpus.iter().map(|p| vec![p.target.iter().map(String::as_str).collect()]).collect();
    Ok(corpus_bleu_tokens(&hyps, &refs)?.score)
}

/// Outcome of a grid search over the MRT sharpness.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSearch {
    pub best: f64,
    /// `(alpha, dev BLEU)` per grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
    pub model: Model,
}

/// Finetunes a copy of `model` with MRT for each `alpha` in `grid` (at most
/// [`MRT_MAX_STEPS`] steps each) and keeps the best on `dev`; ties go to the smaller alpha.
pub fn mrt_alpha_search(
    model: &Model,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    grid: &[f64],
    base: &MrtConfig,
    config: &TrainConfig,
    decode: &DecodeConfig,
) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(Error::Config("empty alpha grid".into()));
    }
    let config = TrainConfig { max_steps: config.max_steps.min(MRT_MAX_STEPS), ..config.clone() };
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Model)> = None;
    for &alpha in grid {
        let mut m = model.clone();
        finetune(&mut m, corpus, Objective::Mrt(MrtConfig { alpha, ..base.clone() }), &config)?;
        let bleu = bleu_on(&[&m], dev, decode)?;
        scores.push((alpha, bleu));
        let better = match &best {
            None => true,
            Some((a, b, _)) => bleu > *b || (bleu == *b && alpha < *a),
        };
        if better {
            best = Some((alpha, bleu, m));
        }
    }
    let (best, _, model) = best.expect("grid is non-empty");
    Ok(AlphaSearch { best, scores, model })
}
