//! Tokenizer/embedder: FPN trajectory embedder, Mini-PointNet lane embedder,
//! positional/semantic embeddings, and token-batch assembly for the
//! pretraining (masked) and finetuning (forecast) pipelines.

use crate::error::{Error, Result};
use crate::model::Binding;
use crate::scene::{MaskPlan, Scene};
use crate::tensor::{Tensor, Val};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    History,
    Future,
    Lane,
}

impl TokenKind {
    /// Row in the semantic embedding table.
    fn semantic_row(self) -> usize {
        match self {
            TokenKind::History => 0,
            TokenKind::Future => 1,
            TokenKind::Lane => 2,
        }
    }

    fn mask_token(self) -> &'static str {
        match self {
            TokenKind::History => "embed.mask_token.history",
            TokenKind::Future => "embed.mask_token.future",
            TokenKind::Lane => "embed.mask_token.lane",
        }
    }
}

/// A sequence of embedded tokens: `x` is the (N, C) embedding matrix;
/// the side arrays share length N.
pub struct TokenBatch {
    pub x: Val,
    pub kinds: Vec<TokenKind>,
    /// Index of the source agent or lane in the scene.
    pub source: Vec<usize>,
    /// Token-level validity; invalid tokens are masked out as attention keys.
    pub valid: Vec<bool>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Ground truth for one mask query, aligned 1:1 with the query batch.
/// Trajectory tokens carry S×2 displacement targets, lane tokens carry
/// centroid-centered P×2 points; `valid` is per coordinate.
#[derive(Clone, Debug)]
pub struct ReconTarget {
    pub kind: TokenKind,
    pub source: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Per-step displacement features (Δx, Δy, valid): a displacement exists
/// only when both endpoints are valid; step 0 has no predecessor.
fn displacement_features(positions: &[[f32; 2]], valid: &[bool]) -> (Vec<f32>, Vec<bool>) {
    let s = positions.len();
    let mut feat = vec![0.0f32; s * 3];
    let mut dvalid = vec![false; s];
    for t in 0..s {
        if t > 0 && valid[t] && valid[t - 1] {
            feat[t * 3] = positions[t][0] - positions[t - 1][0];
            feat[t * 3 + 1] = positions[t][1] - positions[t - 1][1];
            dvalid[t] = true;
        }
        feat[t * 3 + 2] = valid[t] as u8 as f32;
    }
    (feat, dvalid)
}

/// Mean over rows via a constant (1, L) matmul, keeping the op on the tape.
fn mean_rows(b: &mut Binding, x: Val) -> Result<Val> {
    let l = b.g.shape(x)[0];
    let ones = Tensor::full(&[1, l], 1.0 / l as f32);
    let m = b.g.constant(ones);
    b.g.matmul(m, x)
}

/// FPN trajectory embedder: 3 strided conv stages (kernel 3, stride 2,
/// pad 1) with gelu, a lateral 1×1 on each scale, mean-pooled and summed
/// into one (1, C) vector. `prefix` is `embed.hist` or `embed.fut`.
pub fn embed_trajectory(
    b: &mut Binding,
    prefix: &str,
    positions: &[[f32; 2]],
    valid: &[bool],
) -> Result<Val> {
    if positions.len() != valid.len() || positions.is_empty() {
        return Err(Error::Shape {
            op: "embed_trajectory",
            lhs: vec![positions.len()],
            rhs: vec![valid.len()],
        });
    }
    let (feat, _) = displacement_features(positions, valid);
    let x = Tensor::new(vec![positions.len(), 3], feat)?;
    let mut cur = b.g.constant(x);
    let mut fused: Option<Val> = None;
    for i in 0..3 {
        let col = b.g.im2col1d(cur, 3, 2, 1)?;
        let conv = b.linear(col, &format!("{prefix}.conv{i}"))?;
        cur = b.g.gelu(conv);
        let lat = b.linear(cur, &format!("{prefix}.lat{i}"))?;
        let pooled = mean_rows(b, lat)?;
        fused = Some(match fused {
            None => pooled,
            Some(f) => b.g.add(f, pooled)?,
        });
    }
    Ok(fused.unwrap())
}

/// Mini-PointNet lane embedder: pointwise MLP over centroid-centered points,
/// masked max-pool over valid points, linear out. Returns (1, C).
pub fn embed_lane(
    b: &mut Binding,
    points: &[[f32; 2]],
    valid: &[bool],
) -> Result<Val> {
    if points.len() != valid.len() || points.is_empty() {
        return Err(Error::Shape {
            op: "embed_lane",
            lhs: vec![points.len()],
            rhs: vec![valid.len()],
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Data("lane with zero valid points".into()));
    }
    let c = lane_centroid(points, valid);
    let p = points.len();
    let mut feat = vec![0.0f32; p * 3];
    for (i, pt) in points.iter().enumerate() {
        if valid[i] {
            feat[i * 3] = pt[0] - c[0];
            feat[i * 3 + 1] = pt[1] - c[1];
            feat[i * 3 + 2] = 1.0;
        }
    }
    let x = Tensor::new(vec![p, 3], feat)?;
    let x = b.g.constant(x);
    let h = b.linear(x, "embed.lane.mlp1")?;
    let h = b.g.gelu(h);
    let pooled = b.g.masked_max0(h, valid.to_vec())?;
    let pooled = b.g.reshape(pooled, vec![1, b.model.cfg.embed_dim])?;
    b.linear(pooled, "embed.lane.out")
}

fn lane_centroid(points: &[[f32; 2]], valid: &[bool]) -> [f32; 2] {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (p, &v) in points.iter().zip(valid) {
        if v {
            sx += p[0] as f64;
            sy += p[1] as f64;
            n += 1;
        }
    }
    [(sx / n as f64) as f32, (sy / n as f64) as f32]
}

/// Learned 2-layer MLP of a 2-D reference point. Returns (1, C).
pub fn positional_embedding(b: &mut Binding, point: [f32; 2]) -> Result<Val> {
    if !point[0].is_finite() || !point[1].is_finite() {
        return Err(Error::Data("non-finite reference point".into()));
    }
    let x = Tensor::new(vec![1, 2], vec![point[0], point[1]])?;
    let x = b.g.constant(x);
    let h = b.linear(x, "embed.pe.fc1")?;
    let h = b.g.gelu(h);
    b.linear(h, "embed.pe.fc2")
}

fn semantic(b: &mut Binding, kind: TokenKind) -> Result<Val> {
    let table = b.param("embed.semantic")?;
    b.g.gather_rows(table, vec![kind.semantic_row()])
}

/// Embedded token = content + PE(reference) + semantic(kind). (1, C).
fn token(b: &mut Binding, content: Val, reference: [f32; 2], kind: TokenKind) -> Result<Val> {
    let pe = positional_embedding(b, reference)?;
    let sem = semantic(b, kind)?;
    let y = b.g.add(content, pe)?;
    b.g.add(y, sem)
}

/// Mask query = learned mask token of the kind + PE of the masked element's
/// reference point. (1, C).
fn mask_query(b: &mut Binding, kind: TokenKind, reference: [f32; 2]) -> Result<Val> {
    let mt = b.param(kind.mask_token())?;
    let c = b.model.cfg.embed_dim;
    let mt = b.g.reshape(mt, vec![1, c])?;
    let pe = positional_embedding(b, reference)?;
    b.g.add(mt, pe)
}

fn stack(b: &mut Binding, rows: Vec<Val>) -> Result<Val> {
    b.g.concat0(&rows)
}

/// Displacement-space target for a masked trajectory segment.
fn trajectory_target(
    kind: TokenKind,
    source: usize,
    positions: &[[f32; 2]],
    valid: &[bool],
) -> ReconTarget {
    let s = positions.len();
    let mut data = vec![0.0f32; s * 2];
    let mut cvalid = vec![false; s * 2];
    let (feat, dvalid) = displacement_features(positions, valid);
    for t in 0..s {
        data[t * 2] = feat[t * 3];
        data[t * 2 + 1] = feat[t * 3 + 1];
        cvalid[t * 2] = dvalid[t];
        cvalid[t * 2 + 1] = dvalid[t];
    }
    ReconTarget {
        kind,
        source,
        data,
        valid: cvalid,
    }
}

/// Centroid-centered target for a masked lane.
fn lane_target(source: usize, points: &[[f32; 2]], valid: &[bool]) -> ReconTarget {
    let c = lane_centroid(points, valid);
    let p = points.len();
    let mut data = vec![0.0f32; p * 2];
    let mut cvalid = vec![false; p * 2];
    for (i, pt) in points.iter().enumerate() {
        if valid[i] {
            data[i * 2] = pt[0] - c[0];
            data[i * 2 + 1] = pt[1] - c[1];
            cvalid[i * 2] = true;
            cvalid[i * 2 + 1] = true;
        }
    }
    ReconTarget {
        kind: TokenKind::Lane,
        source,
        data,
        valid: cvalid,
    }
}

/// Pretraining tokenization under a complementary mask plan: visible tokens
/// (unmasked halves + unmasked lanes), mask queries for every masked
/// element, and the aligned reconstruction targets.
pub fn build_pretrain_tokens(
    b: &mut Binding,
    scene: &Scene,
    plan: &MaskPlan,
) -> Result<(TokenBatch, TokenBatch, Vec<ReconTarget>)> {
    if plan.history_masked.len() != scene.agents.len()
        || plan.lane_masked.len() != scene.lanes.len()
    {
        return Err(Error::Data("mask plan does not match scene".into()));
    }
    let mut vis_rows = Vec::new();
    let mut vis_kinds = Vec::new();
    let mut vis_source = Vec::new();
    let mut vis_valid = Vec::new();
    let mut q_rows = Vec::new();
    let mut q_kinds = Vec::new();
    let mut q_source = Vec::new();
    let mut targets = Vec::new();

    for (i, a) in scene.agents.iter().enumerate() {
        let reference = a.present();
        // the visible half becomes an embedded token; the masked half a query
        let hist_visible = !plan.history_masked[i];
        if hist_visible {
            let e = embed_trajectory(b, "embed.hist", &a.history, &a.history_valid)?;
            vis_rows.push(token(b, e, reference, TokenKind::History)?);
            vis_kinds.push(TokenKind::History);
            vis_source.push(i);
            vis_valid.push(a.history_valid.iter().any(|&v| v));
        } else {
            q_rows.push(mask_query(b, TokenKind::History, reference)?);
            q_kinds.push(TokenKind::History);
            q_source.push(i);
            targets.push(trajectory_target(
                TokenKind::History,
                i,
                &a.history,
                &a.history_valid,
            ));
        }
        if !hist_visible {
            // history masked -> future stays visible
            let e = embed_trajectory(b, "embed.fut", &a.future, &a.future_valid)?;
            vis_rows.push(token(b, e, reference, TokenKind::Future)?);
            vis_kinds.push(TokenKind::Future);
            vis_source.push(i);
            vis_valid.push(a.future_valid.iter().any(|&v| v));
        } else {
            q_rows.push(mask_query(b, TokenKind::Future, reference)?);
            q_kinds.push(TokenKind::Future);
            q_source.push(i);
            targets.push(trajectory_target(
                TokenKind::Future,
                i,
                &a.future,
                &a.future_valid,
            ));
        }
    }
    for (j, l) in scene.lanes.iter().enumerate() {
        let reference = l.centroid();
        if plan.lane_masked[j] {
            q_rows.push(mask_query(b, TokenKind::Lane, reference)?);
            q_kinds.push(TokenKind::Lane);
            q_source.push(j);
            targets.push(lane_target(j, &l.points, &l.point_valid));
        } else {
            let e = embed_lane(b, &l.points, &l.point_valid)?;
            vis_rows.push(token(b, e, reference, TokenKind::Lane)?);
            vis_kinds.push(TokenKind::Lane);
            vis_source.push(j);
            vis_valid.push(true);
        }
    }
    let visible = TokenBatch {
        x: stack(b, vis_rows)?,
        kinds: vis_kinds,
        source: vis_source,
        valid: vis_valid,
    };
    let n_q = q_kinds.len();
    let queries = TokenBatch {
        x: stack(b, q_rows)?,
        kinds: q_kinds,
        source: q_source,
        valid: vec![true; n_q],
    };
    Ok((visible, queries, targets))
}

/// Finetuning tokenization: encoder sees history + lane tokens only; one
/// M_F-initialized future query per agent.
pub fn build_finetune_tokens(
    b: &mut Binding,
    scene: &Scene,
) -> Result<(TokenBatch, TokenBatch)> {
    let mut rows = Vec::new();
    let mut kinds = Vec::new();
    let mut source = Vec::new();
    let mut valid = Vec::new();
    let mut q_rows = Vec::new();
    let mut q_source = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        let reference = a.present();
        let e = embed_trajectory(b, "embed.hist", &a.history, &a.history_valid)?;
        rows.push(token(b, e, reference, TokenKind::History)?);
        kinds.push(TokenKind::History);
        source.push(i);
        valid.push(a.history_valid.iter().any(|&v| v));
        q_rows.push(mask_query(b, TokenKind::Future, reference)?);
        q_source.push(i);
    }
    for (j, l) in scene.lanes.iter().enumerate() {
        let e = embed_lane(b, &l.points, &l.point_valid)?;
        rows.push(token(b, e, l.centroid(), TokenKind::Lane)?);
        kinds.push(TokenKind::Lane);
        source.push(j);
        valid.push(true);
    }
    let encoder_in = TokenBatch {
        x: stack(b, rows)?,
        kinds,
        source,
        valid,
    };
    let n_q = q_source.len();
    let queries = TokenBatch {
        x: stack(b, q_rows)?,
        kinds: vec![TokenKind::Future; n_q],
        source: q_source,
        valid: vec![true; n_q],
    };
    Ok((encoder_in, queries))
}
