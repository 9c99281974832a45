//! Multi-head attention built from tape primitives.

use super::{Graph, Tensor, Val};
use crate::error::{Error, Result};

/// Projection weights for one attention block. All linears are (in, out)
/// matrices applied as `x @ w + b`.
#[derive(Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Val,
    pub bq: Val,
    pub wk: Val,
    pub bk: Val,
    pub wv: Val,
    pub bv: Val,
    pub wo: Val,
    pub bo: Val,
    /// Optional low-rank bypasses on the q and v projections: (a, b) with
    /// a: (C, r), b: (r, C); the effective projection becomes w + a@b.
    pub lora_q: Option<(Val, Val)>,
    pub lora_v: Option<(Val, Val)>,
}

pub const MASK_NEG: f32 = -1e9;

fn project(g: &mut Graph, x: Val, w: Val, b: Val, lora: Option<(Val, Val)>) -> Result<Val> {
    let mut y = g.matmul(x, w)?;
    if let Some((a, bb)) = lora {
        let xa = g.matmul(x, a)?;
        let delta = g.matmul(xa, bb)?;
        y = g.add(y, delta)?;
    }
    g.add(y, b)
}

/// Scaled dot-product attention over (L, C) sequences with `heads` heads.
/// Positions with `key_padding_mask[i] == true` receive zero attention
/// weight as keys (their logits get a large negative additive constant, so
/// the weight underflows to exactly 0).
pub fn attention(
    g: &mut Graph,
    q_in: Val,
    k_in: Val,
    v_in: Val,
    w: &AttentionWeights,
    heads: usize,
    key_padding_mask: &[bool],
) -> Result<Val> {
    let lq = g.shape(q_in)[0];
    let (lk, c) = (g.shape(k_in)[0], g.shape(k_in)[1]);
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {c} not divisible by {heads} heads"
        )));
    }
    if key_padding_mask.len() != lk {
        return Err(Error::Shape {
            op: "attention_mask",
            lhs: vec![lk, c],
            rhs: vec![key_padding_mask.len()],
        });
    }
    if key_padding_mask.iter().all(|&m| m) {
        return Err(Error::Data("attention with every key masked".into()));
    }
    let hd = c / heads;

    let q = project(g, q_in, w.wq, w.bq, w.lora_q)?;
    let k = project(g, k_in, w.wk, w.bk, None)?;
    let v = project(g, v_in, w.wv, w.bv, w.lora_v)?;

    // (L, C) -> (heads, L, hd)
    let split = |g: &mut Graph, x: Val, l: usize| -> Result<Val> {
        let r = g.reshape(x, vec![l, heads, hd])?;
        g.transpose(r, 0, 1)
    };
    let qh = split(g, q, lq)?;
    let kh = split(g, k, lk)?;
    let vh = split(g, v, lk)?;

    let kt = g.transpose(kh, 1, 2)?; // (heads, hd, lk)
    let scores = g.matmul(qh, kt)?; // (heads, lq, lk)
    let scaled = g.scale(scores, 1.0 / (hd as f32).sqrt());
    let bias = Tensor::new(
        vec![lk],
        key_padding_mask
            .iter()
            .map(|&m| if m { MASK_NEG } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let bias = g.constant(bias);
    let masked = g.add(scaled, bias)?;
    let attn = g.softmax_last(masked);

    let ctx = g.matmul(attn, vh)?; // (heads, lq, hd)
    let ctx = g.transpose(ctx, 0, 1)?; // (lq, heads, hd)
    let ctx = g.reshape(ctx, vec![lq, c])?;
    project(g, ctx, w.wo, w.bo, None)
}
