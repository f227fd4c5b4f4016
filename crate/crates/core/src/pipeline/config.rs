use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DEFAULT_BLEU_FLOOR, DEFAULT_TRANSFER_K};
use crate::corpus::{Augmentation, FilterRules};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model_zoo::{Architecture, Direction, ModelSpec, Preset};
use crate::toy::ToyTask;
use crate::train::FinetuneMethod;

/// A whole experiment: named architectures and an ordered list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    /// Mixed into every stage's seed.
    pub seed: u64,
    /// Decoding used for dev and test scoring and for pseudo-data generation.
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default, rename = "architecture")]
    pub architectures: Vec<ArchitectureDef>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
    /// Directory that relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A preset with optional size overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDef {
    pub name: String,
    pub preset: Preset,
    pub hidden: Option<usize>,
    pub filter: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub heads: Option<usize>,
    /// T-GRUs per transition block (DTMT only).
    pub tgru: Option<usize>,
}

impl ArchitectureDef {
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut spec = self.preset.spec();
        match &mut spec.architecture {
            Architecture::Transformer(t) => {
                if self.tgru.is_some() {
                    return Err(Error::Config(format!("architecture {}: tgru applies to dtmt only", self.name)));
                }
                t.hidden = self.hidden.unwrap_or(t.hidden);
                t.filter = self.filter.unwrap_or(t.filter);
                t.enc_layers = self.enc_layers.unwrap_or(t.enc_layers);
                t.dec_layers = self.dec_layers.unwrap_or(t.dec_layers);
                t.heads = self.heads.unwrap_or(t.heads);
            }
            Architecture::Dtmt(d) => {
                if self.filter.is_some() || self.enc_layers.is_some() || self.dec_layers.is_some() || self.heads.is_some() {
                    return Err(Error::Config(format!("architecture {}: only hidden and tgru apply to dtmt", self.name)));
                }
                d.hidden = self.hidden.unwrap_or(d.hidden);
                d.tgru_per_block = self.tgru.unwrap_or(d.tgru_per_block);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub id: String,
    #[serde(flatten)]
    pub kind: StageKind,
}

/// Which part of a generated toy task a stage emits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyOutput {
    #[default]
    Parallel,
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectPolicy {
    #[default]
    Normal,
    SelfBleu,
}

/// How an evaluation stage turns a pool into one system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    /// The entry with the best dev BLEU.
    #[default]
    Best,
    /// All entries as one ensemble.
    Ensemble,
    /// Mean test BLEU of the entries, each decoded alone.
    Mean,
}

fn one() -> usize {
    1
}
fn l2r() -> Vec<Direction> {
    vec![Direction::L2r]
}
fn clean() -> Vec<Augmentation> {
    vec![Augmentation::Clean]
}
fn batch_tokens() -> usize {
    1024
}
fn warmup() -> usize {
    300
}
fn smoothing() -> f64 {
    0.1
}
fn finetune_steps() -> usize {
    crate::train::FINETUNE_STEPS
}
fn finetune_lr() -> f64 {
    3e-4
}
fn pss_mix() -> f64 {
    0.5
}
fn mrt_alpha() -> f64 {
    0.005
}
fn all_methods() -> Vec<FinetuneMethod> {
    FinetuneMethod::ALL.to_vec()
}
fn transfer_k() -> usize {
    DEFAULT_TRANSFER_K
}
fn floor() -> f64 {
    DEFAULT_BLEU_FLOOR
}

/// Stage descriptors. Fields naming other stages hold stage ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageKind {
    /// Generated toy data.
    Toy {
        task: ToyTask,
        vocab_size: usize,
        max_len: usize,
        pairs: usize,
        domain_shift: Option<f64>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        output: ToyOutput,
    },
    /// Data read from disk: a TSV corpus, aligned source/target files, or plain lines.
    Load {
        tsv: Option<PathBuf>,
        source: Option<PathBuf>,
        target: Option<PathBuf>,
        lines: Option<PathBuf>,
    },
    Filter {
        data: String,
        rules: Option<FilterRules>,
    },
    Shard {
        data: String,
        parts: usize,
    },
    /// Shared vocabularies (and optional BPE) built from source-side and target-side inputs.
    Vocab {
        sources: Vec<String>,
        targets: Vec<String>,
        #[serde(default)]
        bpe_merges: usize,
    },
    /// One model per architecture × direction × shard × augmentation, or one per
    /// `init` entry when continuing from an existing pool.
    Train {
        data: Vec<String>,
        vocab: String,
        dev: Option<String>,
        #[serde(default)]
        architectures: Vec<String>,
        #[serde(default = "l2r")]
        directions: Vec<Direction>,
        /// Train target→source models.
        #[serde(default)]
        reverse: bool,
        #[serde(default = "clean")]
        augmentations: Vec<Augmentation>,
        init: Option<String>,
        steps: usize,
        #[serde(default = "batch_tokens")]
        batch_tokens: usize,
        #[serde(default = "warmup")]
        warmup: usize,
        /// Noam scale; defaults to the model family's rate.
        base_lr: Option<f64>,
        #[serde(default = "smoothing")]
        label_smoothing: f64,
        /// Stop early once greedy dev BLEU reaches `target_bleu`, checked this often.
        #[serde(default)]
        check_every: usize,
        target_bleu: Option<f64>,
    },
    /// Every input model finetuned with every method.
    Finetune {
        models: String,
        data: Vec<String>,
        dev: Option<String>,
        #[serde(default = "all_methods")]
        methods: Vec<FinetuneMethod>,
        #[serde(default = "finetune_steps")]
        steps: usize,
        #[serde(default = "finetune_lr")]
        lr: f64,
        #[serde(default = "batch_tokens")]
        batch_tokens: usize,
        #[serde(default = "pss_mix")]
        pss_mix: f64,
        #[serde(default = "mrt_alpha")]
        mrt_alpha: f64,
        /// When set (and `dev` is given), MRT picks its sharpness from this grid.
        alpha_grid: Option<Vec<f64>>,
    },
    BackTranslate {
        models: String,
        mono: String,
        /// Overrides the experiment's decoding for generation; `sample` labels the output.
        decode: Option<DecodeConfig>,
        rules: Option<FilterRules>,
    },
    Distill {
        models: String,
        sources: String,
        rules: Option<FilterRules>,
    },
    Transfer {
        models: String,
        mono: String,
        #[serde(default = "transfer_k")]
        k: usize,
        rules: Option<FilterRules>,
    },
    Select {
        models: String,
        dev: String,
        #[serde(default)]
        policy: SelectPolicy,
        k: usize,
        #[serde(default = "floor")]
        floor: f64,
    },
    Evaluate {
        models: String,
        test: String,
        label: String,
        #[serde(default)]
        pick: Pick,
        /// Only entries finetuned with this method.
        method: Option<FinetuneMethod>,
        /// Restrict to entries without a finetuning method.
        #[serde(default)]
        unfinetuned: bool,
        #[serde(default = "one")]
        min_models: usize,
    },
}

/// What a stage produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Output {
    Corpus,
    Lines,
    Vocab,
    Models,
    Score,
}

impl Output {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Output::Corpus => "corpus",
            Output::Lines => "lines",
            Output::Vocab => "vocab",
            Output::Models => "models",
            Output::Score => "score",
        }
    }
}

const TEXT: &[Output] = &[Output::Corpus, Output::Lines];

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Toy { .. } => "toy",
            StageKind::Load { .. } => "load",
            StageKind::Filter { .. } => "filter",
            StageKind::Shard { .. } => "shard",
            StageKind::Vocab { .. } => "vocab",
            StageKind::Train { .. } => "train",
            StageKind::Finetune { .. } => "finetune",
            StageKind::BackTranslate { .. } => "back_translate",
            StageKind::Distill { .. } => "distill",
            StageKind::Transfer { .. } => "transfer",
            StageKind::Select { .. } => "select",
            StageKind::Evaluate { .. } => "evaluate",
        }
    }

    pub(crate) fn output(&self) -> Output {
        match self {
            StageKind::Toy { output: ToyOutput::Parallel, .. } => Output::Corpus,
            StageKind::Toy { .. } => Output::Lines,
            StageKind::Load { lines: Some(_), .. } => Output::Lines,
            StageKind::Load { .. } => Output::Corpus,
            StageKind::Filter { .. }
            | StageKind::Shard { .. }
            | StageKind::BackTranslate { .. }
            | StageKind::Distill { .. }
            | StageKind::Transfer { .. } => Output::Corpus,
            StageKind::Vocab { .. } => Output::Vocab,
            StageKind::Train { .. } | StageKind::Finetune { .. } | StageKind::Select { .. } => Output::Models,
            StageKind::Evaluate { .. } => Output::Score,
        }
    }

    /// Ids of the stages this one reads, in declaration order.
    pub fn input_ids(&self) -> Vec<&str> {
        self.inputs().into_iter().map(|(id, _)| id).collect()
    }

    /// Referenced stage ids with the outputs each may have.
    pub(crate) fn inputs(&self) -> Vec<(&str, &'static [Output])> {
        const CORPUS: &[Output] = &[Output::Corpus];
        const MODELS: &[Output] = &[Output::Models];
        const VOCAB: &[Output] = &[Output::Vocab];
        let mut v: Vec<(&str, &'static [Output])> = Vec::new();
        match self {
            StageKind::Toy { .. } | StageKind::Load { .. } => {}
            StageKind::Filter { data, .. } | StageKind::Shard { data, .. } => v.push((data, CORPUS)),
            StageKind::Vocab { sources, targets, .. } => {
                v.extend(sources.iter().chain(targets).map(|s| (s.as_str(), TEXT)));
            }
            StageKind::Train { data, vocab, dev, init, .. } => {
                v.extend(data.iter().map(|s| (s.as_str(), CORPUS)));
                v.push((vocab, VOCAB));
                v.extend(dev.iter().map(|s| (s.as_str(), CORPUS)));
                v.extend(init.iter().map(|s| (s.as_str(), MODELS)));
            }
            StageKind::Finetune { models, data, dev, .. } => {
                v.push((models, MODELS));
                v.extend(data.iter().map(|s| (s.as_str(), CORPUS)));
                v.extend(dev.iter().map(|s| (s.as_str(), CORPUS)));
            }
            StageKind::BackTranslate { models, mono, .. } | StageKind::Transfer { models, mono, .. } => {
                v.push((models, MODELS));
                v.push((mono, TEXT));
            }
            StageKind::Distill { models, sources, .. } => {
                v.push((models, MODELS));
                v.push((sources, TEXT));
            }
            StageKind::Select { models, dev, .. } => {
                v.push((models, MODELS));
                v.push((dev, CORPUS));
            }
            StageKind::Evaluate { models, test, .. } => {
                v.push((models, MODELS));
                v.push((test, CORPUS));
            }
        }
        v
    }

    /// Whether the stage decodes with the experiment-wide settings.
    pub(crate) fn decodes(&self) -> bool {
        !matches!(
            self,
            StageKind::Toy { .. } | StageKind::Load { .. } | StageKind::Filter { .. } | StageKind::Shard { .. } | StageKind::Vocab { .. }
        )
    }

    fn validate(&self, archs: &BTreeMap<String, ModelSpec>) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            StageKind::Load { tsv, source, target, lines } => {
                let forms = [tsv.is_some(), source.is_some() && target.is_some(), lines.is_some()];
                if forms.iter().filter(|&&f| f).count() != 1 || source.is_some() != target.is_some() {
                    return bad("load needs exactly one of tsv, source+target, or lines".into());
                }
            }
            StageKind::Shard { parts, .. } if *parts == 0 => return bad("shard parts must be positive".into()),
            StageKind::Train { architectures, init, directions, augmentations, steps, data, .. } => {
                if init.is_none() && architectures.is_empty() {
                    return bad("train needs architectures or init".into());
                }
                if let Some(a) = architectures.iter().find(|a| !archs.contains_key(*a)) {
                    return bad(format!("unknown architecture `{a}`"));
                }
                if directions.is_empty() || augmentations.is_empty() || *steps == 0 || data.is_empty() {
                    return bad("train needs data, directions, augmentations and steps".into());
                }
                if augmentations.contains(&Augmentation::Sample) {
                    return bad("the sample label comes from back-translation, not from training".into());
                }
            }
            StageKind::Finetune { methods, data, .. } if methods.is_empty() || data.is_empty() => {
                return bad("finetune needs data and at least one method".into());
            }
            StageKind::Transfer { k, .. } | StageKind::Select { k, .. } if *k == 0 => return bad("k must be positive".into()),
            _ => {}
        }
        Ok(())
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        let mut config = PipelineConfig::from_toml(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    /// Built-in presets plus the named definitions.
    pub fn architecture_specs(&self) -> Result<BTreeMap<String, ModelSpec>> {
        let mut out: BTreeMap<String, ModelSpec> = Preset::ALL.iter().map(|p| (p.name().to_string(), p.spec())).collect();
        for def in &self.architectures {
            if Preset::ALL.iter().any(|p| p.name() == def.name) || out.insert(def.name.clone(), def.spec()?).is_some() {
                return Err(Error::Config(format!("architecture `{}` defined twice", def.name)));
            }
        }
        Ok(out)
    }

    /// Ids are unique and every input is an earlier stage with a suitable output.
    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        let archs = self.architecture_specs()?;
        let mut outputs: BTreeMap<&str, Output> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        if self.stages.is_empty() {
            return Err(Error::Config("no stages".into()));
        }
        for stage in &self.stages {
            if stage.id.is_empty() || !stage.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("stage id `{}` must be non-empty [A-Za-z0-9_-]", stage.id)));
            }
            if !ids.insert(stage.id.as_str()) {
                return Err(Error::Config(format!("duplicate stage id `{}`", stage.id)));
            }
            for (input, allowed) in stage.kind.inputs() {
                match outputs.get(input) {
                    None => {
                        return Err(Error::Config(format!(
                            "stage `{}` reads `{input}`, which is not produced by an earlier stage",
                            stage.id
                        )))
                    }
                    Some(o) if !allowed.contains(o) => {
                        return Err(Error::Config(format!(
                            "stage `{}` cannot read `{input}`: it produces {}",
                            stage.id,
                            o.name()
                        )))
                    }
                    Some(_) => {}
                }
            }
            stage
                .kind
                .validate(&archs)
                .map_err(|e| Error::Config(format!("stage `{}`: {e}", stage.id)))?;
            outputs.insert(&stage.id, stage.kind.output());
        }
        Ok(())
    }
}
