use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{Output, Pick, SelectPolicy, StageConfig, StageKind, ToyOutput};
use super::{
    back_translate, ensemble_select_normal, ensemble_select_self_bleu, in_domain_transfer_iteration, knowledge_distill,
    PipelineConfig, PoolEntry, PoolModel,
};
use crate::corpus::{
    filter_corpus, make_noisy, read_aligned, read_corpus, read_lines, read_tsv, shard, write_corpus, write_lines, Augmentation,
    FilterRules, NoiseConfig, ParallelCorpus, Provenance,
};
use crate::decode::{translate_corpus_threads, DecodeConfig};
use crate::error::{Error, Result};
use crate::model_zoo::{Model, ModelSpec};
use crate::text::{BpeModel, Vocabulary};
use crate::toy::ToyTaskSpec;
use crate::train::{
    bleu_on, finetune, mrt_alpha_search, FinetuneMethod, MrtConfig, Objective, TrainConfig, Trainer, MRT_MAX_STEPS,
};

/// Environment variable naming the cache root when no explicit root is given.
pub const CACHE_ENV: &str = "NMTFORGE_CACHE";

/// Bumped whenever stage outputs change meaning; part of every cache key.
pub const CACHE_FORMAT: &str = "nmtforge-stage-v1";

const ARTIFACT: &str = "artifact.json";
const POOL: &str = "pool.jsonl";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Cache root; falls back to `$NMTFORGE_CACHE`, then `.nmtforge-cache` next to the config.
    pub cache_root: Option<PathBuf>,
    /// Where `report.txt` and `report.jsonl` are written.
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

/// One evaluated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: String,
    pub label: String,
    pub bleu: f64,
    pub models: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub id: String,
    pub kind: &'static str,
    pub key: String,
    /// Hash of the stage's output files.
    pub digest: String,
    pub summary: String,
    pub dir: PathBuf,
    /// Served from the cache rather than computed.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// In config order.
    pub stages: Vec<StageRecord>,
}

impl ExperimentReport {
    /// Ids of the stages that were computed in this run.
    pub fn computed(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| !s.cached).map(|s| s.id.as_str()).collect()
    }

    pub fn stage(&self, id: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.id == id)
    }

    /// BLEU table followed by the stage artifacts.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(6);
        let mut out = format!("experiment {} (seed {})\n\n", self.name, self.seed);
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}", "system", "BLEU", "models");
        let _ = writeln!(out, "{}  {}  {}", "-".repeat(width), "-".repeat(6), "-".repeat(6));
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>6.2}  {:>6}", r.label, r.bleu, r.models);
        }
        let id_w = self.stages.iter().map(|s| s.id.len()).max().unwrap_or(0);
        out.push_str("\nstages\n");
        for s in &self.stages {
            let _ = writeln!(out, "  {:<id_w$}  {:<14}  {}  {}", s.id, s.kind, &s.digest[..12], s.summary);
        }
        out
    }

    /// One JSON object per line: the experiment, each stage, each row.
    pub fn jsonl(&self) -> String {
        let mut lines = vec![json!({"record": "experiment", "name": self.name, "seed": self.seed})];
        lines.extend(self.stages.iter().map(|s| {
            json!({"record": "stage", "id": s.id, "kind": s.kind, "key": s.key, "digest": s.digest, "summary": s.summary})
        }));
        lines.extend(self.rows.iter().map(|r| {
            json!({"record": "row", "stage": r.stage, "label": r.label, "bleu": r.bleu, "models": r.models})
        }));
        lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Vocabularies and subword models shared by every model trained from them.
#[derive(Clone, Debug)]
struct VocabSet {
    src: Vocabulary,
    tgt: Vocabulary,
    src_bpe: Option<BpeModel>,
    tgt_bpe: Option<BpeModel>,
}

#[derive(Clone, Debug)]
enum Artifact {
    Corpus(Vec<ParallelCorpus>),
    Lines(Vec<String>),
    Vocab(Box<VocabSet>),
    Models(Vec<PoolEntry>),
    Score(ReportRow),
}

impl Artifact {
    fn summary(&self) -> String {
        match self {
            Artifact::Corpus(parts) if parts.len() == 1 => format!("{} pairs", parts[0].len()),
            Artifact::Corpus(parts) => {
                let sizes: Vec<String> = parts.iter().map(|p| p.len().to_string()).collect();
                format!("{} shards of {} pairs", parts.len(), sizes.join("/"))
            }
            Artifact::Lines(l) => format!("{} lines", l.len()),
            Artifact::Vocab(v) => format!("vocab {}/{}", v.src.len(), v.tgt.len()),
            Artifact::Models(e) => {
                let devs: Vec<String> = e.iter().map(|e| e.dev_bleu.map_or("-".into(), |b| format!("{b:.2}"))).collect();
                format!("{} models, dev BLEU {}", e.len(), devs.join(" "))
            }
            Artifact::Score(r) => format!("{}: {:.2}", r.label, r.bleu),
        }
    }
}

#[derive(Clone, Debug)]
struct Done {
    record: StageRecord,
    artifact: Artifact,
}

#[derive(Serialize, Deserialize)]
struct ArtifactMeta {
    stage: String,
    output: String,
    key: String,
    digest: String,
    parts: usize,
    summary: String,
}

/// Seed of a stage, derived from the experiment seed and the stage id.
pub(crate) fn stage_seed(seed: u64, id: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{id}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sub_seed(seed: u64, index: usize) -> u64 {
    stage_seed(seed, &index.to_string())
}

/// Hash of every regular file in `dir` except the metadata, by sorted name.
fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(Error::at(dir))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()
        .map_err(Error::at(dir))?;
    names.retain(|n| n != ARTIFACT);
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        let path = dir.join(&n);
        let bytes = fs::read(&path).map_err(Error::at(&path))?;
        h.update(n.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

struct Runner<'c> {
    config: &'c PipelineConfig,
    archs: BTreeMap<String, ModelSpec>,
    root: PathBuf,
}

/// Read-only view of finished stages handed to a running stage.
struct Inputs<'a> {
    done: &'a HashMap<String, Done>,
}

impl Inputs<'_> {
    fn get(&self, id: &str) -> &Done {
        self.done.get(id).expect("validated input is finished")
    }

    fn corpus(&self, id: &str) -> &[ParallelCorpus] {
        match &self.get(id).artifact {
            Artifact::Corpus(parts) => parts,
            _ => unreachable!("validated corpus input"),
        }
    }

    fn merged(&self, ids: &[String]) -> ParallelCorpus {
        ParallelCorpus::concat(ids.iter().flat_map(|id| self.corpus(id).iter().cloned()))
    }

    /// Lines, or the given side of a corpus joined with spaces.
    fn lines(&self, id: &str, target_side: bool) -> Vec<String> {
        match &self.get(id).artifact {
            Artifact::Lines(l) => l.clone(),
            Artifact::Corpus(parts) => parts
                .iter()
                .flat_map(|c| c.iter().map(|p| if target_side { p.target.join(" ") } else { p.source.join(" ") }))
                .collect(),
            _ => unreachable!("validated text input"),
        }
    }

    fn vocab(&self, id: &str) -> &VocabSet {
        match &self.get(id).artifact {
            Artifact::Vocab(v) => v,
            _ => unreachable!("validated vocab input"),
        }
    }

    fn entries(&self, id: &str) -> &[PoolEntry] {
        match &self.get(id).artifact {
            Artifact::Models(e) => e,
            _ => unreachable!("validated models input"),
        }
    }

    fn pool(&self, id: &str) -> Result<Vec<PoolModel>> {
        let dir = &self.get(id).record.dir;
        self.entries(id)
            .iter()
            .map(|e| Ok(PoolModel { entry: e.clone(), model: Model::load(&dir.join(&e.checkpoint))? }))
            .collect()
    }
}

fn swap_sides(c: &ParallelCorpus) -> ParallelCorpus {
    let mut out = c.clone();
    for p in &mut out.pairs {
        std::mem::swap(&mut p.source, &mut p.target);
    }
    out
}

/// Noise on the source side of the synthetic pairs only.
fn noisy_synthetic(c: &ParallelCorpus, seed: u64) -> Result<ParallelCorpus> {
    let (gold, synthetic): (Vec<_>, Vec<_>) = c.pairs.iter().cloned().partition(|p| p.provenance == Provenance::Gold);
    if synthetic.is_empty() {
        return Err(Error::Config("noisy augmentation needs synthetic pairs".into()));
    }
    let (noisy, _) = make_noisy(&ParallelCorpus::new(synthetic), &NoiseConfig { seed, ..NoiseConfig::default() });
    Ok(ParallelCorpus::concat([ParallelCorpus::new(gold), noisy]))
}

fn data_label(c: &ParallelCorpus) -> Augmentation {
    if c.iter().any(|p| p.augmentation == Augmentation::Sample) {
        Augmentation::Sample
    } else {
        Augmentation::Clean
    }
}

fn save_pool(dir: &Path, entries: &[PoolEntry]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
        .collect();
    let path = dir.join(POOL);
    fs::write(&path, text).map_err(Error::at(path))
}

fn checkpoint_name(i: usize) -> String {
    format!("model-{i:03}.ckpt")
}

impl Runner<'_> {
    fn decode(&self) -> &DecodeConfig {
        &self.config.decode
    }

    fn key(&self, stage: &StageConfig, seed: u64, done: &HashMap<String, Done>) -> Result<String> {
        let mut h = Sha256::new();
        h.update(CACHE_FORMAT);
        h.update(stage.id.as_bytes());
        h.update(serde_json::to_string(&stage.kind).expect("stage serializes"));
        h.update(seed.to_le_bytes());
        if stage.kind.decodes() {
            h.update(serde_json::to_string(self.decode()).expect("decode config serializes"));
        }
        match &stage.kind {
            StageKind::Train { architectures, .. } => {
                for a in architectures {
                    h.update(serde_json::to_string(&self.archs[a]).expect("spec serializes"));
                }
            }
            StageKind::Load { tsv, source, target, lines } => {
                for p in [tsv, source, target, lines].into_iter().flatten() {
                    let path = self.config.base_dir.join(p);
                    h.update(fs::read(&path).map_err(Error::at(&path))?);
                }
            }
            _ => {}
        }
        for (input, _) in stage.kind.inputs() {
            h.update(input.as_bytes());
            h.update(done[input].record.digest.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn run_stage(&self, stage: &StageConfig, done: &HashMap<String, Done>, threads: usize) -> Result<Done> {
        let seed = stage_seed(self.config.seed, &stage.id);
        let key = self.key(stage, seed, done)?;
        let dir = self.root.join(format!("{}-{}", stage.id, &key[..16]));
        let meta_path = dir.join(ARTIFACT);
        let record = |digest: String, summary: String, cached: bool| StageRecord {
            id: stage.id.clone(),
            kind: stage.kind.name(),
            key: key.clone(),
            digest,
            summary,
            dir: dir.clone(),
            cached,
        };
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(Error::at(&meta_path))?;
            let meta: ArtifactMeta = serde_json::from_str(&text).map_err(|e| Error::format("stage metadata", e.to_string()))?;
            let artifact = load_artifact(&dir, stage.kind.output(), meta.parts)?;
            log::info!("stage {}: cached", stage.id);
            return Ok(Done { record: record(meta.digest, meta.summary, true), artifact });
        }
        static TMP: AtomicUsize = AtomicUsize::new(0);
        let tmp = self.root.join(format!(
            ".tmp-{}-{}-{}-{}",
            stage.id,
            &key[..16],
            std::process::id(),
            TMP.fetch_add(1, Ordering::Relaxed)
        ));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(Error::at(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(Error::at(&tmp))?;
        log::info!("stage {}: running {}", stage.id, stage.kind.name());
        let artifact = match self.execute(stage, seed, &Inputs { done }, &tmp, threads) {
            Ok(a) => a,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        let digest = dir_digest(&tmp)?;
        let summary = artifact.summary();
        let parts = match &artifact {
            Artifact::Corpus(p) => p.len(),
            _ => 1,
        };
        let meta = ArtifactMeta {
            stage: stage.id.clone(),
            output: stage.kind.output().name().to_string(),
            key: key.clone(),
            digest: digest.clone(),
            parts,
            summary: summary.clone(),
        };
        let tmp_meta = tmp.join(ARTIFACT);
        fs::write(&tmp_meta, serde_json::to_string_pretty(&meta).expect("metadata serializes")).map_err(Error::at(&tmp_meta))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(Error::at(&dir))?;
        }
        fs::rename(&tmp, &dir).map_err(Error::at(&dir))?;
        Ok(Done { record: record(digest, summary, false), artifact })
    }

    fn execute(&self, stage: &StageConfig, seed: u64, inputs: &Inputs<'_>, out: &Path, threads: usize) -> Result<Artifact> {
        let write_parts = |parts: Vec<ParallelCorpus>| -> Result<Artifact> {
            for (i, p) in parts.iter().enumerate() {
                write_corpus(&out.join(format!("part-{i}.tsv")), p, &stage.id)?;
            }
            Ok(Artifact::Corpus(parts))
        };
        let write_lines_out = |lines: Vec<String>| -> Result<Artifact> {
            write_lines(&out.join("lines.txt"), &lines)?;
            Ok(Artifact::Lines(lines))
        };
        let rules = |r: &Option<FilterRules>| r.clone().unwrap_or_default();
        match &stage.kind {
            StageKind::Toy { task, vocab_size, max_len, pairs, domain_shift, seed: local, output } => {
                let spec = ToyTaskSpec {
                    task: *task,
                    vocab_size: *vocab_size,
                    max_len: *max_len,
                    pairs: *pairs,
                    domain_shift: *domain_shift,
                    seed: seed ^ local,
                };
                let join = |lines: Vec<Vec<String>>| lines.into_iter().map(|l| l.join(" ")).collect();
                match output {
                    ToyOutput::Parallel => write_parts(vec![spec.generate()?]),
                    ToyOutput::Source => write_lines_out(join(spec.source_monolingual()?)),
                    ToyOutput::Target => write_lines_out(join(spec.target_monolingual()?)),
                }
            }
            StageKind::Load { tsv, source, target, lines } => {
                let base = &self.config.base_dir;
                if let Some(p) = lines {
                    return write_lines_out(read_lines(&base.join(p))?);
                }
                let corpus = match (tsv, source, target) {
                    (Some(p), _, _) => read_tsv(&base.join(p))?,
                    (None, Some(s), Some(t)) => read_aligned(&base.join(s), &base.join(t))?,
                    _ => unreachable!("validated load stage"),
                };
                write_parts(vec![corpus])
            }
            StageKind::Filter { data, rules: r } => {
                let rules = rules(r);
                let parts = inputs.corpus(data).iter().map(|c| filter_corpus(c, &rules).0).collect();
                write_parts(parts)
            }
            StageKind::Shard { data, parts } => write_parts(shard(&inputs.merged(std::slice::from_ref(data)), *parts, seed)?),
            StageKind::Vocab { sources, targets, bpe_merges } => {
                let side = |ids: &[String], target: bool| -> Vec<Vec<String>> {
                    ids.iter()
                        .flat_map(|id| inputs.lines(id, target))
                        .map(|l| l.split_whitespace().map(String::from).collect())
                        .collect()
                };
                let (src_lines, tgt_lines) = (side(sources, false), side(targets, true));
                let (src_bpe, tgt_bpe) = if *bpe_merges > 0 {
                    (Some(BpeModel::learn(&src_lines, *bpe_merges)), Some(BpeModel::learn(&tgt_lines, *bpe_merges)))
                } else {
                    (None, None)
                };
                let segment = |lines: Vec<Vec<String>>, bpe: &Option<BpeModel>| match bpe {
                    Some(b) => lines.iter().map(|l| b.apply_tokens(l)).collect(),
                    None => lines,
                };
                let set = VocabSet {
                    src: Vocabulary::build(&segment(src_lines, &src_bpe)),
                    tgt: Vocabulary::build(&segment(tgt_lines, &tgt_bpe)),
                    src_bpe,
                    tgt_bpe,
                };
                write_vocab(out, &set)?;
                Ok(Artifact::Vocab(Box::new(set)))
            }
            StageKind::Train { .. } => self.train(stage, seed, inputs, out),
            StageKind::Finetune { .. } => self.finetune(stage, seed, inputs, out),
            StageKind::BackTranslate { models, mono, decode, rules: r } => {
                let pool = inputs.pool(models)?;
                let refs: Vec<&Model> = pool.iter().map(|p| &p.model).collect();
                let decode = decode.clone().unwrap_or_else(|| self.decode().clone());
                let decode = DecodeConfig { seed: decode.seed ^ seed, ..decode };
                write_parts(vec![back_translate(&inputs.lines(mono, true), &refs, &decode, &rules(r), threads)?])
            }
            StageKind::Distill { models, sources, rules: r } => {
                let pool = inputs.pool(models)?;
                let refs: Vec<&Model> = pool.iter().map(|p| &p.model).collect();
                let kd = knowledge_distill(&inputs.lines(sources, false), &refs, self.decode(), threads)?;
                write_parts(vec![filter_corpus(&kd, &rules(r)).0])
            }
            StageKind::Transfer { models, mono, k, rules: r } => {
                let pool = inputs.pool(models)?;
                let pseudo = in_domain_transfer_iteration(&pool, &inputs.lines(mono, false), *k, self.decode(), &rules(r), threads)?;
                write_parts(vec![pseudo])
            }
            StageKind::Select { models, dev, policy, k, floor } => {
                let pool = inputs.pool(models)?;
                let entries: Vec<PoolEntry> = pool.iter().map(|p| p.entry.clone()).collect();
                let (ids, self_bleu) = match policy {
                    SelectPolicy::Normal => (ensemble_select_normal(&entries, *k)?, BTreeMap::new()),
                    SelectPolicy::SelfBleu => {
                        let dev_src = inputs.lines(dev, false);
                        let mut translations = BTreeMap::new();
                        for p in &pool {
                            translations.insert(p.entry.id, translate_corpus_threads(&[&p.model], &dev_src, self.decode(), threads)?);
                        }
                        let s = ensemble_select_self_bleu(&entries, &translations, *k, *floor)?;
                        (s.ids, s.self_bleu)
                    }
                };
                let mut chosen = Vec::with_capacity(ids.len());
                for (i, id) in ids.iter().enumerate() {
                    let p = pool.iter().find(|p| p.entry.id == *id).expect("selected from pool");
                    let entry = PoolEntry {
                        id: i,
                        checkpoint: checkpoint_name(i),
                        self_bleu: self_bleu.get(id).copied(),
                        ..p.entry.clone()
                    };
                    p.model.save(&out.join(&entry.checkpoint))?;
                    chosen.push(entry);
                }
                save_pool(out, &chosen)?;
                Ok(Artifact::Models(chosen))
            }
            StageKind::Evaluate { models, test, label, pick, method, unfinetuned, min_models } => {
                let pool: Vec<PoolModel> = inputs
                    .pool(models)?
                    .into_iter()
                    .filter(|p| method.is_none_or(|m| p.entry.method == Some(m)))
                    .filter(|p| !unfinetuned || p.entry.method.is_none())
                    .collect();
                if pool.len() < *min_models || pool.is_empty() {
                    return Err(Error::Pool(format!("{} matching models, need {}", pool.len(), (*min_models).max(1))));
                }
                let test = ParallelCorpus::concat(inputs.corpus(test).iter().cloned());
                let (bleu, models) = match pick {
                    Pick::Ensemble => {
                        let all: Vec<&Model> = pool.iter().map(|p| &p.model).collect();
                        (bleu_on(&all, &test, self.decode())?, all.len())
                    }
                    Pick::Best => {
                        let entries: Vec<PoolEntry> = pool.iter().map(|p| p.entry.clone()).collect();
                        let best = ensemble_select_normal(&entries, 1)?[0];
                        let m = &pool.iter().find(|p| p.entry.id == best).expect("selected from pool").model;
                        (bleu_on(&[m], &test, self.decode())?, 1)
                    }
                    Pick::Mean => {
                        let scores =
                            pool.iter().map(|p| bleu_on(&[&p.model], &test, self.decode())).collect::<Result<Vec<f64>>>()?;
                        (scores.iter().sum::<f64>() / scores.len() as f64, scores.len())
                    }
                };
                let row = ReportRow { stage: stage.id.clone(), label: label.clone(), bleu, models };
                let path = out.join("score.json");
                fs::write(&path, serde_json::to_string(&row).expect("row serializes")).map_err(Error::at(path))?;
                Ok(Artifact::Score(row))
            }
        }
    }

    fn train(&self, stage: &StageConfig, seed: u64, inputs: &Inputs<'_>, out: &Path) -> Result<Artifact> {
        let StageKind::Train {
            data,
            vocab,
            dev,
            architectures,
            directions,
            reverse,
            augmentations,
            init,
            steps,
            batch_tokens,
            warmup,
            base_lr,
            label_smoothing,
            check_every,
            target_bleu,
        } = &stage.kind
        else {
            unreachable!("train stage")
        };
        let flip = |c: ParallelCorpus| if *reverse { swap_sides(&c) } else { c };
        // the one sharded input (if any) yields one model per shard
        let mut common = Vec::new();
        let mut shards: Option<Vec<ParallelCorpus>> = None;
        for id in data {
            let parts = inputs.corpus(id);
            if parts.len() > 1 {
                if shards.is_some() {
                    return Err(Error::Config("train accepts at most one sharded input".into()));
                }
                shards = Some(parts.to_vec());
            } else {
                common.extend(parts.iter().cloned());
            }
        }
        let common = ParallelCorpus::concat(common);
        let datasets: Vec<(Option<usize>, ParallelCorpus)> = match shards {
            Some(parts) => parts
                .into_iter()
                .enumerate()
                .map(|(i, p)| (Some(i), flip(ParallelCorpus::concat([common.clone(), p]))))
                .collect(),
            None => vec![(None, flip(common))],
        };
        let dev = dev.as_ref().map(|d| flip(ParallelCorpus::concat(inputs.corpus(d).iter().cloned())));
        let v = inputs.vocab(vocab);
        let (src_vocab, tgt_vocab, src_bpe, tgt_bpe) = if *reverse {
            (&v.tgt, &v.src, &v.tgt_bpe, &v.src_bpe)
        } else {
            (&v.src, &v.tgt, &v.src_bpe, &v.tgt_bpe)
        };

        struct Job {
            architecture: String,
            model: Model,
            shard: Option<usize>,
            augmentation: Augmentation,
        }
        let mut jobs = Vec::new();
        match init {
            Some(init) => {
                for p in inputs.pool(init)? {
                    if p.entry.shard.is_some_and(|s| datasets.iter().all(|(d, _)| *d != Some(s))) {
                        return Err(Error::Config(format!("init entry {} refers to a missing shard", p.entry.id)));
                    }
                    jobs.push(Job {
                        architecture: p.entry.architecture.clone(),
                        model: p.model,
                        shard: p.entry.shard,
                        augmentation: p.entry.augmentation,
                    });
                }
            }
            None => {
                for a in architectures {
                    for &d in directions {
                        for (shard, _) in &datasets {
                            for &augmentation in augmentations {
                                let i = jobs.len();
                                let mut model = Model::build(
                                    self.archs[a].clone().with_direction(d),
                                    src_vocab.clone(),
                                    tgt_vocab.clone(),
                                    sub_seed(seed, i),
                                )?;
                                model.codec.src_bpe = src_bpe.clone();
                                model.codec.tgt_bpe = tgt_bpe.clone();
                                jobs.push(Job { architecture: a.clone(), model, shard: *shard, augmentation });
                            }
                        }
                    }
                }
            }
        }
        let greedy = DecodeConfig::greedy();
        let mut entries = Vec::with_capacity(jobs.len());
        for (i, mut job) in jobs.into_iter().enumerate() {
            let job_seed = sub_seed(seed, i);
            let base = match job.shard {
                Some(s) => &datasets.iter().find(|(d, _)| *d == Some(s)).expect("checked shard").1,
                None if datasets.len() == 1 => &datasets[0].1,
                None => return Err(Error::Config("unsharded init model with sharded data".into())),
            };
            let corpus = match job.augmentation {
                Augmentation::Noisy => noisy_synthetic(base, job_seed)?,
                _ => base.clone(),
            };
            let mut cfg = TrainConfig::for_model(&job.model);
            cfg.max_steps = *steps;
            cfg.batch_tokens = *batch_tokens;
            cfg.label_smoothing = *label_smoothing;
            cfg.seed = job_seed;
            cfg.optimizer.warmup_steps = *warmup;
            if let Some(lr) = base_lr {
                cfg.optimizer.base_lr = *lr;
            }
            let taken = {
                let mut trainer = Trainer::new(&mut job.model, &corpus, cfg, Objective::CrossEntropy)?;
                let every = if target_bleu.is_some() && dev.is_some() { *check_every } else { 0 };
                trainer.run(*steps, every, |m, step| {
                    let b = bleu_on(&[m], dev.as_ref().expect("checked dev"), &greedy)?;
                    log::info!("stage {} model {i}: step {step} dev BLEU {b:.2}", stage.id);
                    Ok(b >= target_bleu.expect("checked target"))
                })?;
                trainer.steps_taken()
            };
            job.model.lineage.push(format!("train stage={} steps={taken}", stage.id));
            let dev_bleu = dev.as_ref().map(|d| bleu_on(&[&job.model], d, self.decode())).transpose()?;
            let augmentation = match job.augmentation {
                Augmentation::Noisy => Augmentation::Noisy,
                _ => data_label(&corpus),
            };
            let entry = PoolEntry {
                id: i,
                checkpoint: checkpoint_name(i),
                architecture: job.architecture,
                direction: job.model.spec.direction,
                shard: job.shard,
                augmentation,
                method: None,
                dev_bleu,
                self_bleu: None,
            };
            job.model.save(&out.join(&entry.checkpoint))?;
            entries.push(entry);
        }
        save_pool(out, &entries)?;
        Ok(Artifact::Models(entries))
    }

    fn finetune(&self, stage: &StageConfig, seed: u64, inputs: &Inputs<'_>, out: &Path) -> Result<Artifact> {
        let StageKind::Finetune { models, data, dev, methods, steps, lr, batch_tokens, pss_mix, mrt_alpha, alpha_grid } = &stage.kind
        else {
            unreachable!("finetune stage")
        };
        let corpus = inputs.merged(data);
        let dev = dev.as_ref().map(|d| ParallelCorpus::concat(inputs.corpus(d).iter().cloned()));
        let mut entries = Vec::new();
        for p in inputs.pool(models)? {
            for &method in methods {
                let i = entries.len();
                let mut cfg = TrainConfig::finetune();
                cfg.max_steps = *steps;
                cfg.optimizer.base_lr = *lr;
                cfg.batch_tokens = *batch_tokens;
                cfg.seed = sub_seed(seed, i);
                let mut model = p.model.clone();
                let objective = match method {
                    FinetuneMethod::Normal => Objective::CrossEntropy,
                    FinetuneMethod::Pss => Objective::Pss { mix_ratio: *pss_mix },
                    FinetuneMethod::Denoise => method.objective(),
                    FinetuneMethod::Mrt => {
                        cfg.max_steps = cfg.max_steps.min(MRT_MAX_STEPS);
                        Objective::Mrt(MrtConfig { alpha: *mrt_alpha, ..MrtConfig::default() })
                    }
                };
                match (&objective, alpha_grid, &dev) {
                    (Objective::Mrt(base), Some(grid), Some(dev)) => {
                        model = mrt_alpha_search(&model, &corpus, dev, grid, base, &cfg, self.decode())?.model;
                    }
                    _ => {
                        finetune(&mut model, &corpus, objective, &cfg)?;
                    }
                }
                let dev_bleu = dev.as_ref().map(|d| bleu_on(&[&model], d, self.decode())).transpose()?;
                let entry = PoolEntry {
                    id: i,
                    checkpoint: checkpoint_name(i),
                    method: Some(method),
                    dev_bleu,
                    self_bleu: None,
                    ..p.entry.clone()
                };
                model.save(&out.join(&entry.checkpoint))?;
                entries.push(entry);
            }
        }
        save_pool(out, &entries)?;
        Ok(Artifact::Models(entries))
    }
}

fn write_vocab(dir: &Path, v: &VocabSet) -> Result<()> {
    let mut files = vec![("src.vocab", v.src.to_text()), ("tgt.vocab", v.tgt.to_text())];
    if let (Some(s), Some(t)) = (&v.src_bpe, &v.tgt_bpe) {
        files.push(("src.bpe", s.to_text()));
        files.push(("tgt.bpe", t.to_text()));
    }
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(Error::at(path))?;
    }
    Ok(())
}

fn load_artifact(dir: &Path, output: Output, parts: usize) -> Result<Artifact> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(Error::at(path))
    };
    Ok(match output {
        Output::Corpus => Artifact::Corpus((0..parts).map(|i| read_corpus(&dir.join(format!("part-{i}.tsv")))).collect::<Result<_>>()?),
        Output::Lines => Artifact::Lines(read_lines(&dir.join("lines.txt"))?),
        Output::Vocab => {
            let bpe = |name: &str| -> Result<Option<BpeModel>> {
                if dir.join(name).exists() {
                    Ok(Some(BpeModel::from_text(&read(name)?)?))
                } else {
                    Ok(None)
                }
            };
            Artifact::Vocab(Box::new(VocabSet {
                src: Vocabulary::from_text(&read("src.vocab")?)?,
                tgt: Vocabulary::from_text(&read("tgt.vocab")?)?,
                src_bpe: bpe("src.bpe")?,
                tgt_bpe: bpe("tgt.bpe")?,
            }))
        }
        Output::Models => Artifact::Models(
            read(POOL)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::format("pool entry", e.to_string())))
                .collect::<Result<_>>()?,
        ),
        Output::Score => {
            Artifact::Score(serde_json::from_str(&read("score.json")?).map_err(|e| Error::format("score", e.to_string()))?)
        }
    })
}

fn resolve_root(config: &PipelineConfig, options: &RunOptions) -> PathBuf {
    options
        .cache_root
        .clone()
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| config.base_dir.join(".nmtforge-cache"))
}

/// Executes the stages in dependency order, reusing any stage whose key (its
/// settings, seed and input digests) already has a published output. Independent
/// stages run concurrently when `threads > 1`; results do not depend on `threads`.
pub fn run_experiment(config: &PipelineConfig, options: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let runner = Runner { config, archs: config.architecture_specs()?, root: resolve_root(config, options) };
    fs::create_dir_all(&runner.root).map_err(Error::at(&runner.root))?;
    let threads = options.threads.max(1);
    let mut done: HashMap<String, Done> = HashMap::new();
    let mut pending: Vec<&StageConfig> = config.stages.iter().collect();
    while !pending.is_empty() {
        let (ready, rest): (Vec<&StageConfig>, Vec<&StageConfig>) = pending
            .into_iter()
            .partition(|s| s.kind.inputs().iter().all(|(i, _)| done.contains_key(*i)));
        pending = rest;
        for wave in ready.chunks(threads) {
            let inner = (threads / wave.len()).max(1);
            let results: Vec<(String, Result<Done>)> = if wave.len() == 1 {
                vec![(wave[0].id.clone(), runner.run_stage(wave[0], &done, inner))]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = wave
                        .iter()
                        .map(|stage| {
                            let (runner, done) = (&runner, &done);
                            s.spawn(move || (stage.id.clone(), runner.run_stage(stage, done, inner)))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("stage worker panicked")).collect()
                })
            };
            for (id, r) in results {
                let d = r.map_err(|cause| Error::Stage { stage: id.clone(), cause: Box::new(cause) })?;
                done.insert(id, d);
            }
        }
    }
    let stages: Vec<StageRecord> = config.stages.iter().map(|s| done[&s.id].record.clone()).collect();
    let rows = config
        .stages
        .iter()
        .filter_map(|s| match &done[&s.id].artifact {
            Artifact::Score(r) => Some(r.clone()),
            _ => None,
        })
        .collect();
    let report = ExperimentReport { name: config.name.clone(), seed: config.seed, rows, stages };
    if let Some(out) = &options.out_dir {
        fs::create_dir_all(out).map_err(Error::at(out))?;
        for (name, text) in [("report.txt", report.table()), ("report.jsonl", report.jsonl())] {
            let tmp = out.join(format!(".{name}.tmp"));
            fs::write(&tmp, text).map_err(Error::at(&tmp))?;
            fs::rename(&tmp, out.join(name)).map_err(Error::at(out.join(name)))?;
        }
    }
    Ok(report)
}
