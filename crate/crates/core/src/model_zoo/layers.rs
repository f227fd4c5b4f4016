//! Building blocks shared by the architectures.

use crate::error::Result;
use crate::numerics::{BoundParams, Graph, Tensor, Var};

/// Additive mask value for disallowed attention positions.
pub(crate) const MASKED: f64 = -1e9;

pub(crate) fn linear<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, x: Var, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn norm<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, x: Var, name: &str) -> Result<Var> {
    let gain = p.var(&format!("{name}.gain"))?;
    let bias = p.var(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Position-wise `W2 · relu(W1 · x)`.
pub(crate) fn ffn<'p>(g: &mut Graph<'p>, p: &BoundParams<'p>, x: Var, name: &str) -> Result<Var> {
    let h = linear(g, p, x, &format!("{name}.1"))?;
    let h = g.relu(h)?;
    linear(g, p, h, &format!("{name}.2"))
}

/// Sinusoidal encoding rows for the given positions, `[positions.len(), dim]`.
pub fn sinusoid(positions: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sinusoid shape")
}

/// `[B, T, H] -> [B·heads, T, H/heads]`.
fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, h) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, h / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, h / heads])
}

fn merge_heads(g: &mut Graph<'_>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dh])
}

/// Scaled dot-product attention over projected `q [B,Tq,H]`, `k`/`v [B,Tk,H]`.
/// `mask` is an additive constant of shape `[B·heads, Tq, Tk]`.
pub(crate) fn attend(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let batch = g.shape(q)[0];
    let dh = g.shape(q)[2] / heads;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let scores = g.batch_matmul(qh, kh, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let ctx = g.batch_matmul(weights, vh, false)?;
    merge_heads(g, ctx, batch, heads)
}

/// Mask for `B` rows with `key_lens[b]` valid keys out of `tk`; with `causal`,
/// query `i` additionally sees only keys `j <= i + offset`.
pub(crate) fn attention_mask(key_lens: &[usize], tq: usize, tk: usize, heads: usize, causal: Option<usize>) -> Tensor {
    let mut data = Vec::with_capacity(key_lens.len() * heads * tq * tk);
    for &len in key_lens {
        let mut block = Vec::with_capacity(tq * tk);
        for i in 0..tq {
            for j in 0..tk {
                let visible = j < len && causal.is_none_or(|off| j <= i + off);
                block.push(if visible { 0.0 } else { MASKED });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Tensor::new(vec![key_lens.len() * heads, tq, tk], data).expect("mask shape")
}

/// Pads id sequences to a rectangle, returning the flat ids and the width.
pub(crate) fn pad_ids(rows: &[Vec<usize>], pad: usize) -> (Vec<usize>, usize) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(rows.len() * width);
    for r in rows {
        ids.extend_from_slice(r);
        ids.extend(std::iter::repeat_n(pad, width - r.len()));
    }
    (ids, width)
}

/// Stacks `[len_i, d]` row blocks into a zero-padded `[B, width, d]` tensor.
pub(crate) fn stack_padded(blocks: &[&[f64]], d: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(blocks.len() * width * d);
    for b in blocks {
        data.extend_from_slice(b);
        data.extend(std::iter::repeat_n(0.0, width * d - b.len()));
    }
    Tensor::new(vec![blocks.len(), width, d], data).expect("stack shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoid(&[0, 1], 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((t.row(1)[3] - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn causal_mask_layout() {
        let m = attention_mask(&[2], 3, 3, 1, Some(0));
        let d = m.data();
        assert_eq!(&d[0..3], &[0.0, MASKED, MASKED]);
        assert_eq!(&d[3..6], &[0.0, 0.0, MASKED]);
        assert_eq!(&d[6..9], &[0.0, 0.0, MASKED]);
    }

    #[test]
    fn padding_helpers() {
        let (ids, w) = pad_ids(&[vec![5, 6], vec![7]], 0);
        assert_eq!((ids, w), (vec![5, 6, 7, 0], 2));
        let t = stack_padded(&[&[1.0, 2.0], &[3.0, 4.0, 5.0, 6.0]], 2, 2);
        assert_eq!(t.data(), &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
