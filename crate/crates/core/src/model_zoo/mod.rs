//! The four architecture families and the model handle that carries
//! parameters, vocabularies and preprocessing models together.

pub mod dtmt;
mod layers;
mod spec;
pub mod transformer;

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use layers::sinusoid;
pub(crate) use layers::MASKED;
pub use spec::{
    Architecture, Direction, DtmtSpec, ModelSpec, Preset, SelfAttention, TransformerSpec, MAX_POSTNORM_LAYERS,
};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_records, write_records, Record};
use crate::numerics::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::text::{BpeModel, TruecaseModel, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain·sqrt(6 / (fan_in + fan_out))`.
    Xavier { gain: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamDef {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Init gain of the output projection; small so that an untrained model is close to uniform.
pub(crate) const OUTPUT_GAIN: f64 = 0.1;

pub(crate) fn push_linear(out: &mut Vec<ParamDef>, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    out.push(ParamDef::new(format!("{name}.w"), &[fan_in, fan_out], Init::Xavier { gain }));
    out.push(ParamDef::new(format!("{name}.b"), &[fan_out], Init::Zeros));
}

pub(crate) fn push_norm(out: &mut Vec<ParamDef>, name: &str, dim: usize) {
    out.push(ParamDef::new(format!("{name}.gain"), &[dim], Init::Ones));
    out.push(ParamDef::new(format!("{name}.bias"), &[dim], Init::Zeros));
}

/// Draws every parameter in schema order from one seeded stream.
pub fn init_store(defs: &[ParamDef], seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for d in defs {
        let n: usize = d.shape.iter().product();
        let data = match d.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { gain } => {
                let fan_out = *d.shape.last().unwrap_or(&1);
                let fan_in = n / fan_out.max(1);
                let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
        };
        store.insert(d.name.clone(), Tensor::new(d.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Parameter layout implied by a spec and vocabulary sizes.
pub fn schema(spec: &ModelSpec, src_vocab: usize, tgt_vocab: usize) -> Result<Vec<ParamDef>> {
    spec.validate()?;
    Ok(match &spec.architecture {
        Architecture::Transformer(t) => transformer::schema(t, src_vocab, tgt_vocab),
        Architecture::Dtmt(d) => dtmt::schema(d, src_vocab, tgt_vocab),
    })
}

/// Closed-form parameter count of a spec.
pub fn parameter_count(spec: &ModelSpec, src_vocab: usize, tgt_vocab: usize) -> Result<usize> {
    Ok(schema(spec, src_vocab, tgt_vocab)?
        .iter()
        .map(|d| d.shape.iter().product::<usize>())
        .sum())
}

/// Subword and casing models applied around translation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Codec {
    pub src_bpe: Option<BpeModel>,
    pub tgt_bpe: Option<BpeModel>,
    pub truecase: Option<TruecaseModel>,
}

/// Encoder output kept for incremental decoding.
#[derive(Clone, Debug)]
pub enum Memory {
    Transformer(transformer::Memory),
    Dtmt(dtmt::Memory),
}

impl Memory {
    pub fn len(&self) -> usize {
        match self {
            Memory::Transformer(m) => m.rows.len(),
            Memory::Dtmt(m) => m.rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-hypothesis decoder state.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderState {
    Transformer(transformer::State),
    Dtmt(dtmt::State),
}

impl DecoderState {
    /// Number of target tokens consumed so far.
    pub fn position(&self) -> usize {
        match self {
            DecoderState::Transformer(s) => s.pos,
            DecoderState::Dtmt(s) => s.pos,
        }
    }
}

/// A model with its parameters, vocabularies, preprocessing and history.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub codec: Codec,
    /// Free-form history entries, oldest first.
    pub lineage: Vec<String>,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

/// Rows encoded per graph when building decoding memory.
const MEMORY_CHUNK: usize = 64;

impl Model {
    pub fn build(spec: ModelSpec, src_vocab: Vocabulary, tgt_vocab: Vocabulary, seed: u64) -> Result<Model> {
        let defs = schema(&spec, src_vocab.len(), tgt_vocab.len())?;
        let params = init_store(&defs, seed)?;
        Ok(Model {
            spec,
            params,
            src_vocab,
            tgt_vocab,
            codec: Codec::default(),
            lineage: vec![format!("init seed={seed}")],
            steps: 0,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Encoder states `[B, S, H]` (or `[B, S, 2H]` for a bidirectional DTMT).
    pub fn encode<'p>(&self, g: &mut Graph<'p>, p: &BoundParams<'p>, sources: &[Vec<usize>]) -> Result<Var> {
        match &self.spec.architecture {
            Architecture::Transformer(t) => transformer::encode(g, p, t, sources).map(|e| e.states),
            Architecture::Dtmt(d) => dtmt::encode(g, p, d, sources).map(|e| e.states),
        }
    }

    /// Teacher-forced logits `[B, T, V]` for decoder inputs that start with BOS.
    /// Rows shorter than `T` are padded; their trailing logits are meaningless.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &BoundParams<'p>,
        sources: &[Vec<usize>],
        dec_inputs: &[Vec<usize>],
    ) -> Result<Var> {
        if sources.len() != dec_inputs.len() || sources.is_empty() {
            return Err(Error::Shape(format!(
                "{} sources with {} decoder inputs",
                sources.len(),
                dec_inputs.len()
            )));
        }
        match &self.spec.architecture {
            Architecture::Transformer(t) => transformer::forward(g, p, t, sources, dec_inputs),
            Architecture::Dtmt(d) => dtmt::forward(g, p, d, sources, dec_inputs).map(|(l, _)| l),
        }
    }

    /// Parallel log-probabilities `[T, V]` for one pair; a reference for the incremental path.
    pub fn full_log_probs(&self, source: &[usize], dec_input: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let logits = self.forward(&mut g, &p, &[source.to_vec()], &[dec_input.to_vec()])?;
        let lp = g.log_softmax(logits)?;
        let v = g.value(lp).clone();
        let t = dec_input.len();
        v.reshape(&[t, self.tgt_vocab.len()])
    }

    /// Encodes sources for [`Model::step`].
    pub fn memory(&self, sources: &[Vec<usize>]) -> Result<Memory> {
        match &self.spec.architecture {
            Architecture::Transformer(t) => {
                let mut rows = Vec::with_capacity(sources.len());
                for chunk in sources.chunks(MEMORY_CHUNK) {
                    rows.extend(transformer::memory(&self.params, t, chunk)?);
                }
                Ok(Memory::Transformer(transformer::Memory { rows }))
            }
            Architecture::Dtmt(d) => {
                let mut rows = Vec::with_capacity(sources.len());
                for chunk in sources.chunks(MEMORY_CHUNK) {
                    rows.extend(dtmt::memory(&self.params, d, chunk)?);
                }
                Ok(Memory::Dtmt(dtmt::Memory { rows }))
            }
        }
    }

    /// Fresh decoder state for source `index` of `memory`.
    pub fn init_state(&self, memory: &Memory, index: usize) -> Result<DecoderState> {
        if index >= memory.len() {
            return Err(Error::State(format!("source {index} of {}", memory.len())));
        }
        match (&self.spec.architecture, memory) {
            (Architecture::Transformer(t), Memory::Transformer(_)) => {
                Ok(DecoderState::Transformer(transformer::State::new(t, index)))
            }
            (Architecture::Dtmt(_), Memory::Dtmt(m)) => Ok(DecoderState::Dtmt(dtmt::State {
                src: index,
                pos: 0,
                hidden: m.rows[index].init.clone(),
            })),
            _ => Err(Error::State("memory built by a different architecture".into())),
        }
    }

    /// Feeds `prev[r]` to row `r`, returning next-token log-probabilities per row.
    pub fn step(&self, memory: &Memory, states: &mut [DecoderState], prev: &[usize]) -> Result<Vec<Vec<f64>>> {
        if states.len() != prev.len() {
            return Err(Error::State(format!("{} states for {} tokens", states.len(), prev.len())));
        }
        if states.is_empty() {
            return Ok(Vec::new());
        }
        match (&self.spec.architecture, memory) {
            (Architecture::Transformer(t), Memory::Transformer(m)) => {
                let mut rows = Vec::with_capacity(states.len());
                for s in states.iter_mut() {
                    match s {
                        DecoderState::Transformer(s) if s.src < m.rows.len() && s.layers.len() == t.dec_layers => {
                            rows.push(s)
                        }
                        _ => return Err(Error::State("state does not belong to this memory".into())),
                    }
                }
                transformer::step(&self.params, t, m, &mut rows, prev)
            }
            (Architecture::Dtmt(d), Memory::Dtmt(m)) => {
                let mut rows = Vec::with_capacity(states.len());
                for s in states.iter_mut() {
                    match s {
                        DecoderState::Dtmt(s) if s.src < m.rows.len() && s.hidden.len() == d.hidden => rows.push(s),
                        _ => return Err(Error::State("state does not belong to this memory".into())),
                    }
                }
                dtmt::step(&self.params, d, m, &mut rows, prev)
            }
            _ => Err(Error::State("memory built by a different architecture".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = |s: String| Record::Bytes(s.into_bytes());
        let mut records = vec![
            ("meta.spec".to_string(), text(self.spec.to_text())),
            ("meta.src_vocab".to_string(), text(self.src_vocab.to_text())),
            ("meta.tgt_vocab".to_string(), text(self.tgt_vocab.to_text())),
            ("meta.lineage".to_string(), text(self.lineage.join("\n"))),
            ("meta.steps".to_string(), text(self.steps.to_string())),
        ];
        if let Some(b) = &self.codec.src_bpe {
            records.push(("meta.src_bpe".into(), text(b.to_text())));
        }
        if let Some(b) = &self.codec.tgt_bpe {
            records.push(("meta.tgt_bpe".into(), text(b.to_text())));
        }
        if let Some(t) = &self.codec.truecase {
            records.push(("meta.truecase".into(), text(t.to_text())));
        }
        for (name, t) in self.params.iter() {
            records.push((format!("param.{name}"), Record::F64(t.clone())));
        }
        let mut out = Vec::new();
        write_records(&mut out, &records)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let records = read_records(Cursor::new(bytes))?;
        let mut meta = std::collections::HashMap::new();
        let mut tensors = Vec::new();
        for (name, rec) in records {
            match (name.strip_prefix("param."), rec) {
                (Some(p), Record::F64(t)) => tensors.push((p.to_string(), t)),
                (None, Record::Bytes(b)) => {
                    let s = String::from_utf8(b).map_err(|e| Error::format("checkpoint", e.to_string()))?;
                    meta.insert(name, s);
                }
                (_, _) => return Err(Error::format("checkpoint", format!("unexpected record `{name}`"))),
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::format("checkpoint", format!("missing `{k}`")))
        };
        let spec = ModelSpec::from_text(get("meta.spec")?)?;
        let src_vocab = Vocabulary::from_text(get("meta.src_vocab")?)?;
        let tgt_vocab = Vocabulary::from_text(get("meta.tgt_vocab")?)?;
        let defs = schema(&spec, src_vocab.len(), tgt_vocab.len())?;
        if defs.len() != tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, spec expects {}", tensors.len(), defs.len()),
            ));
        }
        let mut params = ParamStore::new();
        for (d, (name, t)) in defs.iter().zip(tensors) {
            if d.name != name || d.shape != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor `{name}` {:?} where `{}` {:?} expected", t.shape(), d.name, d.shape),
                ));
            }
            params.insert(name, t)?;
        }
        let lineage = get("meta.lineage")?
            .lines()
            .map(String::from)
            .collect();
        let steps = get("meta.steps")?
            .parse()
            .map_err(|_| Error::format("checkpoint", "bad step count"))?;
        let codec = Codec {
            src_bpe: meta.get("meta.src_bpe").map(|t| BpeModel::from_text(t)).transpose()?,
            tgt_bpe: meta.get("meta.tgt_bpe").map(|t| BpeModel::from_text(t)).transpose()?,
            truecase: meta.get("meta.truecase").map(|t| TruecaseModel::from_text(t)).transpose()?,
        };
        Ok(Model {
            spec,
            params,
            src_vocab,
            tgt_vocab,
            codec,
            lineage,
            steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(Error::at(path))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(Error::at(path))?;
        Model::from_bytes(&bytes)
    }
}

/// Reverses every target so an ordinary model learns right-to-left generation.
pub fn r2l_wrap(corpus: &ParallelCorpus) -> ParallelCorpus {
    let mut out = corpus.clone();
    for p in &mut out.pairs {
        p.target.reverse();
    }
    out
}

/// Restores left-to-right order of hypotheses produced by an R2L model.
pub fn r2l_unwrap(lines: &[Vec<String>]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.iter().rev().cloned().collect())
        .collect()
}
