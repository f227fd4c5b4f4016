//! Deep-transition recurrent encoder-decoder built from L-GRU and T-GRU cells.
//!
//! L-GRU, with `[r; z; l] = σ(W_g x + U_g h + b_g)`:
//!
//! ```text
//! h~ = tanh(W_c x + U_c (r ⊙ h) + b_c) + l ⊙ (H x)
//! h' = (1 − z) ⊙ h + z ⊙ h~
//! ```
//!
//! T-GRU drops every input term. Each transition block is one L-GRU followed
//! by `tgru_per_block` T-GRUs.

use super::layers::{linear, pad_ids, stack_padded, MASKED};
use super::spec::DtmtSpec;
use super::{push_linear, Init, ParamDef, OUTPUT_GAIN};
use crate::error::Result;
use crate::numerics::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::text::PAD;

pub fn lgru_schema(name: &str, input: usize, hidden: usize) -> Vec<ParamDef> {
    let h = hidden;
    vec![
        ParamDef::new(format!("{name}.wg"), &[input, 3 * h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.ug"), &[h, 3 * h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.bg"), &[3 * h], Init::Zeros),
        ParamDef::new(format!("{name}.wc"), &[input, h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.uc"), &[h, h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.bc"), &[h], Init::Zeros),
        ParamDef::new(format!("{name}.hl"), &[input, h], Init::Xavier { gain: 1.0 }),
    ]
}

pub fn tgru_schema(name: &str, hidden: usize) -> Vec<ParamDef> {
    let h = hidden;
    vec![
        ParamDef::new(format!("{name}.ug"), &[h, 2 * h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.bg"), &[2 * h], Init::Zeros),
        ParamDef::new(format!("{name}.uc"), &[h, h], Init::Xavier { gain: 1.0 }),
        ParamDef::new(format!("{name}.bc"), &[h], Init::Zeros),
    ]
}

fn block_schema(out: &mut Vec<ParamDef>, name: &str, d: &DtmtSpec, input: usize) {
    out.extend(lgru_schema(&format!("{name}.lgru"), input, d.hidden));
    for k in 0..d.tgru_per_block {
        out.extend(tgru_schema(&format!("{name}.tgru.{k}"), d.hidden));
    }
}

pub(crate) fn schema(d: &DtmtSpec, src_vocab: usize, tgt_vocab: usize) -> Vec<ParamDef> {
    let (h, c) = (d.hidden, d.context_dim());
    let mut out = vec![
        ParamDef::new("src.emb", &[src_vocab, h], Init::Xavier { gain: 1.0 }),
        ParamDef::new("tgt.emb", &[tgt_vocab, h], Init::Xavier { gain: 1.0 }),
    ];
    block_schema(&mut out, "enc.fwd", d, h);
    if d.bidirectional_encoder {
        block_schema(&mut out, "enc.bwd", d, h);
    }
    push_linear(&mut out, "dec.init", c, h, 1.0);
    block_schema(&mut out, "dec.query", d, h);
    out.push(ParamDef::new("dec.att.w", &[h, c], Init::Xavier { gain: 1.0 }));
    block_schema(&mut out, "dec.block", d, c);
    push_linear(&mut out, "dec.readout", h + c + h, h, 1.0);
    push_linear(&mut out, "out", h, tgt_vocab, OUTPUT_GAIN);
    out
}

fn gate_slices(g: &mut Graph<'_>, gates: Var, h: usize, parts: usize) -> Result<Vec<Var>> {
    (0..parts).map(|k| g.slice(gates, 1, k * h, (k + 1) * h)).collect()
}

/// `(1 − z) ⊙ h + z ⊙ cand`, written as `h + z ⊙ (cand − h)`.
fn interpolate(g: &mut Graph<'_>, h: Var, z: Var, cand: Var) -> Result<Var> {
    let diff = g.sub(cand, h)?;
    let step = g.mul(diff, z)?;
    g.add(h, step)
}

/// L-GRU update of `h [B, H]` with input `x [B, In]`.
pub fn lgru_step<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, name: &str, x: Var, h: Var) -> Result<Var> {
    let hidden = g.shape(h)[1];
    let var = |s: &str| p.var(&format!("{name}.{s}"));
    let gx = g.matmul(x, var("wg")?)?;
    let gh = g.matmul(h, var("ug")?)?;
    let gates = g.add(gx, gh)?;
    let gates = g.add(gates, var("bg")?)?;
    let gates = g.sigmoid(gates)?;
    let [r, z, l]: [Var; 3] = gate_slices(g, gates, hidden, 3)?.try_into().expect("three gates");
    let rh = g.mul(h, r)?;
    let cx = g.matmul(x, var("wc")?)?;
    let ch = g.matmul(rh, var("uc")?)?;
    let c = g.add(cx, ch)?;
    let c = g.add(c, var("bc")?)?;
    let c = g.tanh(c)?;
    let lin = g.matmul(x, var("hl")?)?;
    let lin = g.mul(lin, l)?;
    let cand = g.add(c, lin)?;
    interpolate(g, h, z, cand)
}

/// T-GRU update of `h [B, H]`.
pub fn tgru_step<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, name: &str, h: Var) -> Result<Var> {
    let hidden = g.shape(h)[1];
    let var = |s: &str| p.var(&format!("{name}.{s}"));
    let gates = g.matmul(h, var("ug")?)?;
    let gates = g.add(gates, var("bg")?)?;
    let gates = g.sigmoid(gates)?;
    let [r, z]: [Var; 2] = gate_slices(g, gates, hidden, 2)?.try_into().expect("two gates");
    let rh = g.mul(h, r)?;
    let c = g.matmul(rh, var("uc")?)?;
    let c = g.add(c, var("bc")?)?;
    let cand = g.tanh(c)?;
    interpolate(g, h, z, cand)
}

fn transition<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, d: &DtmtSpec, name: &str, x: Var, h: Var) -> Result<Var> {
    let mut h = lgru_step(g, p, &format!("{name}.lgru"), x, h)?;
    for k in 0..d.tgru_per_block {
        h = tgru_step(g, p, &format!("{name}.tgru.{k}"), h)?;
    }
    Ok(h)
}

pub(crate) struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

/// Runs one direction; padded steps leave the state unchanged.
fn directional<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    d: &DtmtSpec,
    name: &str,
    inputs: &[Var],
    lens: &[usize],
    reverse: bool,
) -> Result<Vec<Var>> {
    let (b, h) = (lens.len(), d.hidden);
    let mut state = g.constant(Tensor::zeros(&[b, h]));
    let mut out = vec![state; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let next = transition(g, p, d, name, inputs[t], state)?;
        state = if lens.iter().all(|&l| t < l) {
            next
        } else {
            let m: Vec<f64> = lens
                .iter()
                .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, h))
                .collect();
            let m = g.constant(Tensor::new(vec![b, h], m)?);
            interpolate(g, state, m, next)?
        };
        out[t] = state;
    }
    Ok(out)
}

pub(crate) fn encode<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, d: &DtmtSpec, sources: &[Vec<usize>]) -> Result<Encoded> {
    let (ids, width) = pad_ids(sources, PAD);
    let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
    let (b, h, c) = (sources.len(), d.hidden, d.context_dim());
    let emb = g.embedding(p.var("src.emb")?, &ids)?;
    let emb = g.reshape(emb, &[b, width, h])?;
    let inputs: Vec<Var> = (0..width)
        .map(|t| {
            let x = g.slice(emb, 1, t, t + 1)?;
            g.reshape(x, &[b, h])
        })
        .collect::<Result<_>>()?;
    let fwd = directional(g, p, d, "enc.fwd", &inputs, &lens, false)?;
    let bwd = if d.bidirectional_encoder {
        Some(directional(g, p, d, "enc.bwd", &inputs, &lens, true)?)
    } else {
        None
    };
    let mut steps = Vec::with_capacity(width);
    for t in 0..width {
        let s = match &bwd {
            Some(bw) => g.concat(&[fwd[t], bw[t]], 1)?,
            None => fwd[t],
        };
        steps.push(g.reshape(s, &[b, 1, c])?);
    }
    let states = g.concat(&steps, 1)?;
    Ok(Encoded { states, lens, width })
}

fn length_mask(lens: &[usize], width: usize) -> Tensor {
    let data = lens
        .iter()
        .flat_map(|&l| (0..width).map(move |j| if j < l { 0.0 } else { MASKED }))
        .collect();
    Tensor::new(vec![lens.len(), 1, width], data).expect("mask shape")
}

/// `tanh(W · mean(enc) + b)` over the valid positions of each row.
fn initial_state<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, enc: &Encoded, c: usize) -> Result<Var> {
    let b = enc.lens.len();
    let w: Vec<f64> = enc
        .lens
        .iter()
        .flat_map(|&l| (0..enc.width).map(move |j| if j < l { 1.0 / l as f64 } else { 0.0 }))
        .collect();
    let w = g.constant(Tensor::new(vec![b, 1, enc.width], w)?);
    let mean = g.batch_matmul(w, enc.states, false)?;
    let mean = g.reshape(mean, &[b, c])?;
    let s = linear(g, p, mean, "dec.init")?;
    g.tanh(s)
}

/// One decoder step: query block, attention, decoder block, readout.
/// Returns `(logits [B, V], new state, attention weights [B, 1, S])`.
fn decoder_step<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    d: &DtmtSpec,
    e: Var,
    s: Var,
    enc: Var,
    mask: Var,
) -> Result<(Var, Var, Var)> {
    let (b, c) = (g.shape(e)[0], d.context_dim());
    let q = transition(g, p, d, "dec.query", e, s)?;
    let a = g.matmul(q, p.var("dec.att.w")?)?;
    let a = g.reshape(a, &[b, 1, c])?;
    let scores = g.batch_matmul(a, enc, true)?;
    let scores = g.add(scores, mask)?;
    let weights = g.softmax(scores)?;
    let ctx = g.batch_matmul(weights, enc, false)?;
    let ctx = g.reshape(ctx, &[b, c])?;
    let s = transition(g, p, d, "dec.block", ctx, q)?;
    let r = g.concat(&[s, ctx, e], 1)?;
    let r = linear(g, p, r, "dec.readout")?;
    let r = g.tanh(r)?;
    let logits = linear(g, p, r, "out")?;
    Ok((logits, s, weights))
}

/// Teacher-forced logits `[B, T, V]` and per-step attention weights.
pub(crate) fn forward<'p>(
    g: &mut Graph<'p>,
    p: &BoundParams<'p>,
    d: &DtmtSpec,
    sources: &[Vec<usize>],
    dec_inputs: &[Vec<usize>],
) -> Result<(Var, Vec<Var>)> {
    let enc = encode(g, p, d, sources)?;
    let b = sources.len();
    let mut s = initial_state(g, p, &enc, d.context_dim())?;
    let mask = g.constant(length_mask(&enc.lens, enc.width));
    let (ids, steps) = pad_ids(dec_inputs, PAD);
    let emb = g.embedding(p.var("tgt.emb")?, &ids)?;
    let emb = g.reshape(emb, &[b, steps, d.hidden])?;
    let mut logits = Vec::with_capacity(steps);
    let mut attention = Vec::with_capacity(steps);
    for t in 0..steps {
        let e = g.slice(emb, 1, t, t + 1)?;
        let e = g.reshape(e, &[b, d.hidden])?;
        let (l, next, w) = decoder_step(g, p, d, e, s, enc.states, mask)?;
        s = next;
        let v = g.shape(l)[1];
        logits.push(g.reshape(l, &[b, 1, v])?);
        attention.push(w);
    }
    Ok((g.concat(&logits, 1)?, attention))
}

/// Attention weights `[T, S]` of a single teacher-forced pair.
pub fn attention_weights(params: &ParamStore, d: &DtmtSpec, source: &[usize], dec_input: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let (_, att) = forward(&mut g, &p, d, &[source.to_vec()], &[dec_input.to_vec()])?;
    Ok(att.iter().map(|&w| g.value(w).data().to_vec()).collect())
}

#[derive(Clone, Debug)]
pub struct SourceMemory {
    pub len: usize,
    /// Encoder states `[len, C]`.
    pub states: Vec<f64>,
    /// Initial decoder state `[H]`.
    pub init: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Memory {
    pub rows: Vec<SourceMemory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub src: usize,
    pub pos: usize,
    pub hidden: Vec<f64>,
}

pub(crate) fn memory(params: &ParamStore, d: &DtmtSpec, sources: &[Vec<usize>]) -> Result<Vec<SourceMemory>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let enc = encode(&mut g, &p, d, sources)?;
    let (h, c) = (d.hidden, d.context_dim());
    let s0 = initial_state(&mut g, &p, &enc, c)?;
    let (sd, id) = (g.value(enc.states).data(), g.value(s0).data());
    Ok(enc
        .lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let start = b * enc.width * c;
            SourceMemory {
                len,
                states: sd[start..start + len * c].to_vec(),
                init: id[b * h..(b + 1) * h].to_vec(),
            }
        })
        .collect())
}

pub(crate) fn step(
    params: &ParamStore,
    d: &DtmtSpec,
    memory: &Memory,
    states: &mut [&mut State],
    prev: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let (r, h, c) = (states.len(), d.hidden, d.context_dim());
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let e = g.embedding(p.var("tgt.emb")?, prev)?;
    let hidden: Vec<f64> = states.iter().flat_map(|s| s.hidden.iter().copied()).collect();
    let s = g.constant(Tensor::new(vec![r, h], hidden)?);
    let lens: Vec<usize> = states.iter().map(|s| memory.rows[s.src].len).collect();
    let width = lens.iter().copied().max().unwrap_or(1).max(1);
    let blocks: Vec<&[f64]> = states.iter().map(|s| memory.rows[s.src].states.as_slice()).collect();
    let enc = g.constant(stack_padded(&blocks, c, width));
    let mask = g.constant(length_mask(&lens, width));
    let (logits, next, _) = decoder_step(&mut g, &p, d, e, s, enc, mask)?;
    let lp = g.log_softmax(logits)?;
    let nd = g.value(next).data();
    for (row, st) in states.iter_mut().enumerate() {
        st.hidden.copy_from_slice(&nd[row * h..(row + 1) * h]);
        st.pos += 1;
    }
    let v = g.value(lp);
    let vocab = v.last_dim();
    Ok(v.data().chunks(vocab).map(<[f64]>::to_vec).collect())
}
