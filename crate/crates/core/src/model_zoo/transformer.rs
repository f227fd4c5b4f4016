//! Encoder-decoder Transformer with pre- or post-norm residuals and either
//! standard or average-attention decoder self-attention.

use super::layers::{attend, attention_mask, ffn, linear, norm, pad_ids, sinusoid, stack_padded};
use super::spec::{SelfAttention, TransformerSpec};
use super::{push_linear, push_norm, ParamDef, OUTPUT_GAIN};
use crate::error::Result;
use crate::numerics::{BoundParams, Graph, ParamStore, Var};
use crate::text::PAD;

fn push_attention(out: &mut Vec<ParamDef>, name: &str, h: usize, residual_gain: f64) {
    for part in ["q", "k", "v"] {
        push_linear(out, &format!("{name}.{part}"), h, h, 1.0);
    }
    push_linear(out, &format!("{name}.o"), h, h, residual_gain);
}

fn push_ffn(out: &mut Vec<ParamDef>, name: &str, h: usize, f: usize, residual_gain: f64) {
    push_linear(out, &format!("{name}.1"), h, f, 1.0);
    push_linear(out, &format!("{name}.2"), f, h, residual_gain);
}

fn residual_gain(t: &TransformerSpec, depth: usize) -> f64 {
    if t.prenorm {
        1.0 / ((2 * depth.max(1)) as f64).sqrt()
    } else {
        1.0
    }
}

/// Parameters of encoder layer `i`.
pub fn encoder_layer_schema(t: &TransformerSpec, i: usize) -> Vec<ParamDef> {
    let (h, gain) = (t.hidden, residual_gain(t, t.enc_layers));
    let mut out = Vec::new();
    push_norm(&mut out, &format!("enc.{i}.ln1"), h);
    push_attention(&mut out, &format!("enc.{i}.attn"), h, gain);
    push_norm(&mut out, &format!("enc.{i}.ln2"), h);
    push_ffn(&mut out, &format!("enc.{i}.ffn"), h, t.filter, gain);
    out
}

/// Parameters of decoder layer `i`.
pub fn decoder_layer_schema(t: &TransformerSpec, i: usize) -> Vec<ParamDef> {
    let (h, gain) = (t.hidden, residual_gain(t, t.dec_layers));
    let mut out = Vec::new();
    push_norm(&mut out, &format!("dec.{i}.ln1"), h);
    match t.decoder_self_attention {
        SelfAttention::Standard => push_attention(&mut out, &format!("dec.{i}.self"), h, gain),
        SelfAttention::Average => {
            push_ffn(&mut out, &format!("dec.{i}.aan.ffn"), h, t.filter, 1.0);
            push_linear(&mut out, &format!("dec.{i}.aan.gate"), 2 * h, 2 * h, gain);
        }
    }
    push_norm(&mut out, &format!("dec.{i}.ln2"), h);
    push_attention(&mut out, &format!("dec.{i}.cross"), h, gain);
    push_norm(&mut out, &format!("dec.{i}.ln3"), h);
    push_ffn(&mut out, &format!("dec.{i}.ffn"), h, t.filter, gain);
    out
}

pub(crate) fn schema(t: &TransformerSpec, src_vocab: usize, tgt_vocab: usize) -> Vec<ParamDef> {
    let h = t.hidden;
    let mut out = vec![
        ParamDef::new("src.emb", &[src_vocab, h], super::Init::Xavier { gain: 1.0 }),
        ParamDef::new("tgt.emb", &[tgt_vocab, h], super::Init::Xavier { gain: 1.0 }),
    ];
    for i in 0..t.enc_layers {
        out.extend(encoder_layer_schema(t, i));
    }
    if t.prenorm && t.enc_layers > 0 {
        push_norm(&mut out, "enc.ln", h);
    }
    for i in 0..t.dec_layers {
        out.extend(decoder_layer_schema(t, i));
    }
    if t.prenorm {
        push_norm(&mut out, "dec.ln", h);
    }
    push_linear(&mut out, "out", h, tgt_vocab, OUTPUT_GAIN);
    out
}

/// `x + f(LN(x))` for pre-norm, `LN(x + f(x))` otherwise.
fn sublayer<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    x: Var,
    ln: &str,
    f: impl FnOnce(&mut Graph<'p>, Var) -> Result<Var>,
) -> Result<Var> {
    if t.prenorm {
        let h = norm(g, p, x, ln)?;
        let y = f(g, h)?;
        g.add(x, y)
    } else {
        let y = f(g, x)?;
        let s = g.add(x, y)?;
        norm(g, p, s, ln)
    }
}

fn mha<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    q_in: Var,
    kv_in: Var,
    name: &str,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let q = linear(g, p, q_in, &format!("{name}.q"))?;
    let k = linear(g, p, kv_in, &format!("{name}.k"))?;
    let v = linear(g, p, kv_in, &format!("{name}.v"))?;
    let a = attend(g, q, k, v, heads, mask)?;
    linear(g, p, a, &format!("{name}.o"))
}

/// Gated combination of the layer input `h` and its prefix average `avg`.
fn aan_body<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, h: Var, avg: Var, name: &str) -> Result<Var> {
    let dim = *g.shape(h).last().unwrap();
    let axis = g.shape(h).len() - 1;
    let y = ffn(g, p, avg, &format!("{name}.ffn"))?;
    let both = g.concat(&[h, y], axis)?;
    let gates = linear(g, p, both, &format!("{name}.gate"))?;
    let gates = g.sigmoid(gates)?;
    let i = g.slice(gates, axis, 0, dim)?;
    let f = g.slice(gates, axis, dim, 2 * dim)?;
    let a = g.mul(h, i)?;
    let b = g.mul(y, f)?;
    g.add(a, b)
}

/// Scaled embeddings plus position signal, `[ids.len(), H]`.
fn embed<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    table: &str,
    ids: &[usize],
    positions: &[usize],
) -> Result<Var> {
    let e = g.embedding(p.var(table)?, ids)?;
    let e = g.scale(e, (t.hidden as f64).sqrt())?;
    if t.positional {
        let pe = g.constant(sinusoid(positions, t.hidden));
        g.add(e, pe)
    } else {
        Ok(e)
    }
}

/// One encoder layer over `x [B, S, H]`.
pub fn encoder_layer<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    i: usize,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let x = sublayer(g, p, t, x, &format!("enc.{i}.ln1"), |g, h| {
        mha(g, p, h, h, &format!("enc.{i}.attn"), t.heads, mask)
    })?;
    sublayer(g, p, t, x, &format!("enc.{i}.ln2"), |g, h| ffn(g, p, h, &format!("enc.{i}.ffn")))
}

/// One decoder layer over `x [B, T, H]` attending to `memory [B, S, H]`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    i: usize,
    x: Var,
    memory: Var,
    self_mask: Option<Var>,
    cross_mask: Option<Var>,
) -> Result<Var> {
    let x = sublayer(g, p, t, x, &format!("dec.{i}.ln1"), |g, h| match t.decoder_self_attention {
        SelfAttention::Standard => mha(g, p, h, h, &format!("dec.{i}.self"), t.heads, self_mask),
        SelfAttention::Average => {
            let avg = g.cumulative_mean(h)?;
            aan_body(g, p, h, avg, &format!("dec.{i}.aan"))
        }
    })?;
    let x = sublayer(g, p, t, x, &format!("dec.{i}.ln2"), |g, h| {
        mha(g, p, h, memory, &format!("dec.{i}.cross"), t.heads, cross_mask)
    })?;
    sublayer(g, p, t, x, &format!("dec.{i}.ln3"), |g, h| ffn(g, p, h, &format!("dec.{i}.ffn")))
}

pub(crate) struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

pub(crate) fn encode<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    sources: &[Vec<usize>],
) -> Result<Encoded> {
    let (ids, width) = pad_ids(sources, PAD);
    let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
    let positions: Vec<usize> = (0..sources.len()).flat_map(|_| 0..width).collect();
    let x = embed(g, p, t, "src.emb", &ids, &positions)?;
    let mut x = g.reshape(x, &[sources.len(), width, t.hidden])?;
    let mask = g.constant(attention_mask(&lens, width, width, t.heads, None));
    for i in 0..t.enc_layers {
        x = encoder_layer(g, p, t, i, x, Some(mask))?;
    }
    if t.prenorm && t.enc_layers > 0 {
        x = norm(g, p, x, "enc.ln")?;
    }
    Ok(Encoded {
        states: x,
        lens,
        width,
    })
}

pub(crate) fn forward<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    t: &TransformerSpec,
    sources: &[Vec<usize>],
    dec_inputs: &[Vec<usize>],
) -> Result<Var> {
    let enc = encode(g, p, t, sources)?;
    let b = sources.len();
    let (ids, steps) = pad_ids(dec_inputs, PAD);
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..steps).collect();
    let x = embed(g, p, t, "tgt.emb", &ids, &positions)?;
    let mut x = g.reshape(x, &[b, steps, t.hidden])?;
    let dec_lens: Vec<usize> = dec_inputs.iter().map(Vec::len).collect();
    let self_mask = g.constant(attention_mask(&dec_lens, steps, steps, t.heads, Some(0)));
    let cross_mask = g.constant(attention_mask(&enc.lens, steps, enc.width, t.heads, None));
    for i in 0..t.dec_layers {
        x = decoder_layer(g, p, t, i, x, enc.states, Some(self_mask), Some(cross_mask))?;
    }
    if t.prenorm {
        x = norm(g, p, x, "dec.ln")?;
    }
    linear(g, p, x, "out")
}

/// Encoder output of one source, projected for every decoder layer.
#[derive(Clone, Debug)]
pub struct SourceMemory {
    pub len: usize,
    /// Cross-attention keys and values per decoder layer, each `[len, H]`.
    pub cross: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Memory {
    pub rows: Vec<SourceMemory>,
}

/// Self-attention cache of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerCache {
    /// Keys and values of every consumed position, `[pos, H]` each.
    Attention { keys: Vec<f64>, values: Vec<f64> },
    /// Running sum of layer inputs; the count is the position.
    Average { sum: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub src: usize,
    pub pos: usize,
    pub layers: Vec<LayerCache>,
}

impl State {
    pub(crate) fn new(t: &TransformerSpec, src: usize) -> Self {
        let layers = (0..t.dec_layers)
            .map(|_| match t.decoder_self_attention {
                SelfAttention::Standard => LayerCache::Attention {
                    keys: Vec::new(),
                    values: Vec::new(),
                },
                SelfAttention::Average => LayerCache::Average {
                    sum: vec![0.0; t.hidden],
                },
            })
            .collect();
        State { src, pos: 0, layers }
    }
}

pub(crate) fn memory(params: &ParamStore, t: &TransformerSpec, sources: &[Vec<usize>]) -> Result<Vec<SourceMemory>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let enc = encode(&mut g, &p, t, sources)?;
    let h = t.hidden;
    let mut rows: Vec<SourceMemory> = enc
        .lens
        .iter()
        .map(|&len| SourceMemory {
            len,
            cross: Vec::with_capacity(t.dec_layers),
        })
        .collect();
    for i in 0..t.dec_layers {
        let k = linear(&mut g, &p, enc.states, &format!("dec.{i}.cross.k"))?;
        let v = linear(&mut g, &p, enc.states, &format!("dec.{i}.cross.v"))?;
        let (kd, vd) = (g.value(k).data(), g.value(v).data());
        for (b, row) in rows.iter_mut().enumerate() {
            let start = b * enc.width * h;
            let end = start + row.len * h;
            row.cross.push((kd[start..end].to_vec(), vd[start..end].to_vec()));
        }
    }
    Ok(rows)
}

pub(crate) fn step(
    params: &ParamStore,
    t: &TransformerSpec,
    memory: &Memory,
    states: &mut [&mut State],
    prev: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let h = t.hidden;
    let r = states.len();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let positions: Vec<usize> = states.iter().map(|s| s.pos).collect();
    let x = embed(&mut g, &p, t, "tgt.emb", prev, &positions)?;
    let mut x = g.reshape(x, &[r, 1, h])?;
    let src_lens: Vec<usize> = states.iter().map(|s| memory.rows[s.src].len).collect();
    let src_width = src_lens.iter().copied().max().unwrap_or(1).max(1);
    let cross_mask = g.constant(attention_mask(&src_lens, 1, src_width, t.heads, None));
    for i in 0..t.dec_layers {
        x = sublayer(&mut g, &p, t, x, &format!("dec.{i}.ln1"), |g, hv| {
            match t.decoder_self_attention {
                SelfAttention::Standard => {
                    let name = format!("dec.{i}.self");
                    let q = linear(g, &p, hv, &format!("{name}.q"))?;
                    let k = linear(g, &p, hv, &format!("{name}.k"))?;
                    let v = linear(g, &p, hv, &format!("{name}.v"))?;
                    let (kd, vd) = (g.value(k).data().to_vec(), g.value(v).data().to_vec());
                    for (row, s) in states.iter_mut().enumerate() {
                        if let LayerCache::Attention { keys, values } = &mut s.layers[i] {
                            keys.extend_from_slice(&kd[row * h..(row + 1) * h]);
                            values.extend_from_slice(&vd[row * h..(row + 1) * h]);
                        }
                    }
                    let lens: Vec<usize> = states.iter().map(|s| s.pos + 1).collect();
                    let width = lens.iter().copied().max().unwrap_or(1);
                    let (kb, vb): (Vec<&[f64]>, Vec<&[f64]>) = states
                        .iter()
                        .map(|s| match &s.layers[i] {
                            LayerCache::Attention { keys, values } => (keys.as_slice(), values.as_slice()),
                            LayerCache::Average { .. } => unreachable!("cache kind fixed by spec"),
                        })
                        .unzip();
                    let kc = g.constant(stack_padded(&kb, h, width));
                    let vc = g.constant(stack_padded(&vb, h, width));
                    let mask = g.constant(attention_mask(&lens, 1, width, t.heads, None));
                    let a = attend(g, q, kc, vc, t.heads, Some(mask))?;
                    linear(g, &p, a, &format!("{name}.o"))
                }
                SelfAttention::Average => {
                    let hd = g.value(hv).data().to_vec();
                    let mut avg = Vec::with_capacity(r * h);
                    for (row, s) in states.iter_mut().enumerate() {
                        let count = (s.pos + 1) as f64;
                        if let LayerCache::Average { sum } = &mut s.layers[i] {
                            for (acc, v) in sum.iter_mut().zip(&hd[row * h..(row + 1) * h]) {
                                *acc += v;
                            }
                            avg.extend(sum.iter().map(|v| v / count));
                        }
                    }
                    let avg = g.constant(crate::numerics::Tensor::new(vec![r, 1, h], avg)?);
                    aan_body(g, &p, hv, avg, &format!("dec.{i}.aan"))
                }
            }
        })?;
        let (kb, vb): (Vec<&[f64]>, Vec<&[f64]>) = states
            .iter()
            .map(|s| {
                let (k, v) = &memory.rows[s.src].cross[i];
                (k.as_slice(), v.as_slice())
            })
            .unzip();
        let kc = g.constant(stack_padded(&kb, h, src_width));
        let vc = g.constant(stack_padded(&vb, h, src_width));
        x = sublayer(&mut g, &p, t, x, &format!("dec.{i}.ln2"), |g, hv| {
            let name = format!("dec.{i}.cross");
            let q = linear(g, &p, hv, &format!("{name}.q"))?;
            let a = attend(g, q, kc, vc, t.heads, Some(cross_mask))?;
            linear(g, &p, a, &format!("{name}.o"))
        })?;
        x = sublayer(&mut g, &p, t, x, &format!("dec.{i}.ln3"), |g, hv| {
            ffn(g, &p, hv, &format!("dec.{i}.ffn"))
        })?;
    }
    if t.prenorm {
        x = norm(&mut g, &p, x, "dec.ln")?;
    }
    let logits = linear(&mut g, &p, x, "out")?;
    let lp = g.log_softmax(logits)?;
    for s in states.iter_mut() {
        s.pos += 1;
    }
    let v = g.value(lp);
    let width = v.last_dim();
    Ok(v.data().chunks(width).map(<[f64]>::to_vec).collect())
}
