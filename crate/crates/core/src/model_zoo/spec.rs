use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder self-attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfAttention {
    Standard,
    /// Cumulative average over the prefix followed by a gated FFN.
    Average,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub hidden: usize,
    pub filter: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub prenorm: bool,
    pub decoder_self_attention: SelfAttention,
    /// Sinusoidal position signal added to embeddings.
    pub positional: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DtmtSpec {
    pub hidden: usize,
    pub lgru_per_block: usize,
    pub tgru_per_block: usize,
    pub bidirectional_encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Transformer(TransformerSpec),
    Dtmt(DtmtSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    L2r,
    R2l,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub direction: Direction,
}

/// Toy-scale configurations of the four families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Deeper,
    Wider,
    Aan,
    Dtmt,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Deeper, Preset::Wider, Preset::Aan, Preset::Dtmt];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Deeper => "deeper",
            Preset::Wider => "wider",
            Preset::Aan => "aan",
            Preset::Dtmt => "dtmt",
        }
    }

    pub fn spec(self) -> ModelSpec {
        let transformer = |filter, enc_layers, attention| {
            Architecture::Transformer(TransformerSpec {
                hidden: 64,
                filter,
                enc_layers,
                dec_layers: 2,
                heads: 4,
                prenorm: true,
                decoder_self_attention: attention,
                positional: true,
            })
        };
        let architecture = match self {
            Preset::Deeper => transformer(512, 12, SelfAttention::Standard),
            Preset::Wider => transformer(1024, 6, SelfAttention::Standard),
            Preset::Aan => transformer(512, 6, SelfAttention::Average),
            Preset::Dtmt => Architecture::Dtmt(DtmtSpec {
                hidden: 64,
                lgru_per_block: 1,
                tgru_per_block: 2,
                bidirectional_encoder: true,
            }),
        };
        ModelSpec {
            architecture,
            direction: Direction::L2r,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown preset `{s}`")))
    }
}

/// Encoders deeper than this must use pre-norm residuals.
pub const MAX_POSTNORM_LAYERS: usize = 6;

impl TransformerSpec {
    /// 30-layer pre-norm encoder at base width.
    pub fn full_size_deep() -> Self {
        TransformerSpec {
            hidden: 512,
            filter: 16384,
            enc_layers: 30,
            dec_layers: 6,
            heads: 8,
            prenorm: true,
            decoder_self_attention: SelfAttention::Standard,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.hidden == 0 || self.filter == 0 || self.heads == 0 {
            return bad("hidden, filter and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.dec_layers == 0 {
            return bad("decoder needs at least one layer".into());
        }
        if !self.prenorm && self.enc_layers > MAX_POSTNORM_LAYERS {
            return bad(format!(
                "{}-layer encoder requires pre-norm residuals",
                self.enc_layers
            ));
        }
        Ok(())
    }
}

impl DtmtSpec {
    pub fn full_size() -> Self {
        DtmtSpec {
            hidden: 1024,
            lgru_per_block: 1,
            tgru_per_block: 4,
            bidirectional_encoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Spec("hidden must be positive".into()));
        }
        if self.lgru_per_block != 1 {
            return Err(Error::Spec(format!(
                "each transition block has exactly one L-GRU, got {}",
                self.lgru_per_block
            )));
        }
        Ok(())
    }

    /// Width of the encoder states seen by attention.
    pub fn context_dim(&self) -> usize {
        if self.bidirectional_encoder {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::Transformer(t) => t.validate(),
            Architecture::Dtmt(d) => d.validate(),
        }
    }

    pub fn hidden(&self) -> usize {
        match &self.architecture {
            Architecture::Transformer(t) => t.hidden,
            Architecture::Dtmt(d) => d.hidden,
        }
    }

    /// Short family tag: `transformer`, `aan` or `dtmt`.
    pub fn family(&self) -> &'static str {
        match &self.architecture {
            Architecture::Transformer(t) if t.decoder_self_attention == SelfAttention::Average => "aan",
            Architecture::Transformer(_) => "transformer",
            Architecture::Dtmt(_) => "dtmt",
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = Vec::new();
        match &self.architecture {
            Architecture::Transformer(t) => {
                kv.push(("architecture", "transformer".into()));
                kv.push(("hidden", t.hidden.to_string()));
                kv.push(("filter", t.filter.to_string()));
                kv.push(("enc_layers", t.enc_layers.to_string()));
                kv.push(("dec_layers", t.dec_layers.to_string()));
                kv.push(("heads", t.heads.to_string()));
                kv.push(("prenorm", t.prenorm.to_string()));
                let sa = match t.decoder_self_attention {
                    SelfAttention::Standard => "standard",
                    SelfAttention::Average => "average",
                };
                kv.push(("decoder_self_attention", sa.into()));
                kv.push(("positional", t.positional.to_string()));
            }
            Architecture::Dtmt(d) => {
                kv.push(("architecture", "dtmt".into()));
                kv.push(("hidden", d.hidden.to_string()));
                kv.push(("lgru_per_block", d.lgru_per_block.to_string()));
                kv.push(("tgru_per_block", d.tgru_per_block.to_string()));
                kv.push(("bidirectional_encoder", d.bidirectional_encoder.to_string()));
            }
        }
        let dir = match self.direction {
            Direction::L2r => "l2r",
            Direction::R2l => "r2l",
        };
        kv.push(("direction", dir.into()));
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("line {}: expected key=value", n + 1)))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Spec(format!("missing `{k}`")));
        fn parse<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Spec(format!("bad value `{v}` for `{k}`")))
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let flag = |k: &str| -> Result<bool> { parse(k, get(k)?) };
        let architecture = match get("architecture")? {
            "transformer" => Architecture::Transformer(TransformerSpec {
                hidden: num("hidden")?,
                filter: num("filter")?,
                enc_layers: num("enc_layers")?,
                dec_layers: num("dec_layers")?,
                heads: num("heads")?,
                prenorm: flag("prenorm")?,
                decoder_self_attention: match get("decoder_self_attention")? {
                    "standard" => SelfAttention::Standard,
                    "average" => SelfAttention::Average,
                    other => return Err(Error::Spec(format!("unknown self-attention `{other}`"))),
                },
                positional: flag("positional")?,
            }),
            "dtmt" => Architecture::Dtmt(DtmtSpec {
                hidden: num("hidden")?,
                lgru_per_block: num("lgru_per_block")?,
                tgru_per_block: num("tgru_per_block")?,
                bidirectional_encoder: flag("bidirectional_encoder")?,
            }),
            other => return Err(Error::Spec(format!("unknown architecture `{other}`"))),
        };
        let direction = match kv.get("direction").copied().unwrap_or("l2r") {
            "l2r" => Direction::L2r,
            "r2l" => Direction::R2l,
            other => return Err(Error::Spec(format!("unknown direction `{other}`"))),
        };
        let spec = ModelSpec {
            architecture,
            direction,
        };
        spec.validate()?;
        Ok(spec)
    }
}
