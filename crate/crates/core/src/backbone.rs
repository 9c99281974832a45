//! Transformer encoder/decoder with the pretraining forward pass,
//! reconstruction heads, and the reconstruction loss L_RE.
//!
//! Pre-norm layers: x1 = x + MSA(LN1(x)) [+ Adapter(LN1(x))],
//! x2 = x1 + FFN(LN2(x1)) [+ Adapter(LN2(x1))]. Invalid tokens are excluded
//! as attention keys; prompt tokens (CEP/MCP) are prepended in front of the
//! sequence and stripped before results leave this module.

use crate::embed::{self, ReconTarget, TokenBatch, TokenKind};
use crate::error::{Error, Result};
use crate::model::Binding;
use crate::scene::{MaskPlan, Scene};
use crate::tensor::nn::{attention, AttentionWeights};
use crate::tensor::{Tensor, Val};

fn attention_weights(b: &mut Binding, prefix: &str, stack: &str, layer: usize) -> Result<AttentionWeights> {
    let p = |b: &mut Binding, n: &str| b.param(&format!("{prefix}.attn.{n}"));
    let lora = |b: &mut Binding, proj: &str| -> Result<Option<(Val, Val)>> {
        if b.model.lora_rank.is_none() {
            return Ok(None);
        }
        let a = b.param(&format!("lora.{stack}{layer}.{proj}.a"))?;
        let bb = b.param(&format!("lora.{stack}{layer}.{proj}.b"))?;
        Ok(Some((a, bb)))
    };
    Ok(AttentionWeights {
        wq: p(b, "wq")?,
        bq: p(b, "bq")?,
        wk: p(b, "wk")?,
        bk: p(b, "bk")?,
        wv: p(b, "wv")?,
        bv: p(b, "bv")?,
        wo: p(b, "wo")?,
        bo: p(b, "bo")?,
        lora_q: lora(b, "q")?,
        lora_v: lora(b, "v")?,
    })
}

/// Adapter delta Up(GeLU(Down(x))); exactly zero while zero-initialized.
pub fn adapter_forward(b: &mut Binding, x: Val, prefix: &str) -> Result<Val> {
    let d = b.linear(x, &format!("{prefix}.down"))?;
    let d = b.g.gelu(d);
    b.linear(d, &format!("{prefix}.up"))
}

/// Whether the model carries an adapter for this slot.
fn adapter_slot(b: &Binding, stack: &str, layer: usize, slot: &str) -> Option<String> {
    let peft = b.model.peft.as_ref()?;
    let on = match slot {
        "msa" => peft.adapter_msa,
        _ => peft.adapter_ffn,
    };
    on.then(|| format!("peft.adapter.{stack}{layer}.{slot}"))
}

/// One pre-norm transformer layer over an (L, C) sequence.
fn transformer_layer(
    b: &mut Binding,
    x: Val,
    prefix: &str,
    stack: &str,
    layer: usize,
    key_padding_mask: &[bool],
) -> Result<Val> {
    let heads = b.model.cfg.heads;
    let ln1 = b.layer_norm(x, &format!("{prefix}.ln1"))?;
    let w = attention_weights(b, prefix, stack, layer)?;
    let msa = attention(&mut b.g, ln1, ln1, ln1, &w, heads, key_padding_mask)?;
    let mut y = b.g.add(x, msa)?;
    if let Some(ap) = adapter_slot(b, stack, layer, "msa") {
        let delta = adapter_forward(b, ln1, &ap)?;
        y = b.g.add(y, delta)?;
    }
    let ln2 = b.layer_norm(y, &format!("{prefix}.ln2"))?;
    let h = b.linear(ln2, &format!("{prefix}.ffn.fc1"))?;
    let h = b.g.gelu(h);
    let ffn = b.linear(h, &format!("{prefix}.ffn.fc2"))?;
    let mut z = b.g.add(y, ffn)?;
    if let Some(ap) = adapter_slot(b, stack, layer, "ffn") {
        let delta = adapter_forward(b, ln2, &ap)?;
        z = b.g.add(z, delta)?;
    }
    Ok(z)
}

/// Encoder over embedded tokens. With CEPs attached, fresh prompts are
/// prepended at each layer < cep_depth (previous prompt outputs discarded —
/// deep insertion); beyond cep_depth prompt outputs propagate as ordinary
/// tokens.
/// Output: (N, C) in token order, prompts stripped.
pub fn encoder_forward(b: &mut Binding, tokens: &TokenBatch) -> Result<Val> {
    let n = tokens.len();
    let token_mask: Vec<bool> = tokens.valid.iter().map(|&v| !v).collect();
    let mut x = tokens.x;
    let mut n_prompt = 0usize;
    let cep = b
        .model
        .peft
        .as_ref()
        .filter(|p| p.prompt_len > 0)
        .map(|p| (p.cep_depth, p.prompt_len));
    for i in 0..b.model.cfg.enc_layers {
        if let Some((depth, np)) = cep {
            if i < depth {
                if n_prompt > 0 {
                    // discard previous prompt outputs (deep-tuning semantics)
                    x = b.g.slice_rows(x, n_prompt, n)?;
                }
                let p = b.param(&format!("peft.cep.{i}"))?;
                x = b.g.concat0(&[p, x])?;
                n_prompt = np;
            }
        }
        let mut mask = vec![false; n_prompt];
        mask.extend_from_slice(&token_mask);
        x = transformer_layer(b, x, &format!("encoder.layer{i}"), "enc", i, &mask)?;
    }
    let x = b.layer_norm(x, "encoder.norm")?;
    if n_prompt > 0 {
        return b.g.slice_rows(x, n_prompt, n);
    }
    Ok(x)
}

/// Decoder: self-attention over concat(prompts?, latents, queries); returns
/// the transformed query rows. `mcp_mode` selects the MCP slice prepended
/// at the first layer only (shallow insertion); its outputs propagate onward.
pub fn decoder_forward(
    b: &mut Binding,
    latents: Val,
    latents_valid: &[bool],
    queries: Val,
    mcp_mode: Option<usize>,
) -> Result<Val> {
    let n_l = b.g.shape(latents)[0];
    let n_q = b.g.shape(queries)[0];
    if n_q == 0 {
        return Err(Error::Data("decoder with zero queries".into()));
    }
    if latents_valid.len() != n_l {
        return Err(Error::Shape {
            op: "decoder_forward",
            lhs: vec![n_l],
            rhs: vec![latents_valid.len()],
        });
    }
    let mut n_prompt = 0usize;
    let mut x = b.g.concat0(&[latents, queries])?;
    if let Some(k) = mcp_mode {
        let peft = b
            .model
            .peft
            .as_ref()
            .ok_or_else(|| Error::Config("mcp requested without peft modules".into()))?;
        if !peft.mcp_enabled || peft.prompt_len == 0 {
            return Err(Error::Config("mcp requested but disabled".into()));
        }
        if k >= b.model.cfg.modes {
            return Err(Error::Config(format!(
                "mcp mode {k} out of range (K={})",
                b.model.cfg.modes
            )));
        }
        let p = b.param(&format!("peft.mcp.{k}"))?;
        x = b.g.concat0(&[p, x])?;
        n_prompt = peft.prompt_len;
    }
    let mut mask = vec![false; n_prompt];
    mask.extend(latents_valid.iter().map(|&v| !v));
    mask.extend(std::iter::repeat(false).take(n_q));
    for i in 0..b.model.cfg.dec_layers {
        x = transformer_layer(b, x, &format!("decoder.layer{i}"), "dec", i, &mask)?;
    }
    let x = b.layer_norm(x, "decoder.norm")?;
    b.g.slice_rows(x, n_prompt + n_l, n_q)
}

/// Per-token reconstruction predictions, aligned with the query batch.
pub struct ReconPredictions {
    /// (kind, source, (1, S*2) prediction row)
    pub rows: Vec<(TokenKind, usize, Val)>,
}

/// Route each decoded token through its kind's linear head.
pub fn reconstruction_heads(
    b: &mut Binding,
    decoded: Val,
    kinds: &[TokenKind],
    sources: &[usize],
) -> Result<ReconPredictions> {
    let n = b.g.shape(decoded)[0];
    if kinds.len() != n || sources.len() != n {
        return Err(Error::Shape {
            op: "reconstruction_heads",
            lhs: vec![n],
            rhs: vec![kinds.len(), sources.len()],
        });
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = b.g.slice_rows(decoded, i, 1)?;
        let head = match kinds[i] {
            TokenKind::History => "head.recon_hist",
            TokenKind::Future => "head.recon_fut",
            TokenKind::Lane => "head.recon_lane",
        };
        rows.push((kinds[i], sources[i], b.linear(row, head)?));
    }
    Ok(ReconPredictions { rows })
}

/// L_RE = λ_H·L1(history) + λ_F·L1(future) + λ_L·MSE(lane); each term is a
/// mean over its valid scalar coordinates; absent kinds contribute 0.
pub fn loss_reconstruction(
    b: &mut Binding,
    pred: &ReconPredictions,
    targets: &[ReconTarget],
    lambda_h: f32,
    lambda_f: f32,
    lambda_l: f32,
) -> Result<Val> {
    if pred.rows.len() != targets.len() {
        return Err(Error::Shape {
            op: "loss_reconstruction",
            lhs: vec![pred.rows.len()],
            rhs: vec![targets.len()],
        });
    }
    // per kind: (sum node, valid-coordinate count)
    let mut sums: [Option<Val>; 3] = [None, None, None];
    let mut counts = [0usize; 3];
    for ((kind, source, row), tgt) in pred.rows.iter().zip(targets) {
        if *kind != tgt.kind || *source != tgt.source {
            return Err(Error::Data("predictions and targets misaligned".into()));
        }
        let nvalid = tgt.valid.iter().filter(|&&v| v).count();
        if nvalid == 0 {
            continue;
        }
        let s = tgt.data.len();
        let t = b.g.constant(Tensor::new(vec![1, s], tgt.data.clone())?);
        let m = b.g.constant(Tensor::new(
            vec![1, s],
            tgt.valid.iter().map(|&v| v as u8 as f32).collect(),
        )?);
        let diff = b.g.sub(*row, t)?;
        let masked = b.g.mul(diff, m)?;
        let term = match kind {
            TokenKind::Lane => {
                let sq = b.g.mul(masked, masked)?;
                b.g.sum_all(sq)
            }
            _ => {
                let a = b.g.abs(masked);
                b.g.sum_all(a)
            }
        };
        let idx = match kind {
            TokenKind::History => 0,
            TokenKind::Future => 1,
            TokenKind::Lane => 2,
        };
        counts[idx] += nvalid;
        sums[idx] = Some(match sums[idx] {
            None => term,
            Some(acc) => b.g.add(acc, term)?,
        });
    }
    let mut total = b.g.constant(Tensor::scalar(0.0));
    for (idx, lambda) in [(0, lambda_h), (1, lambda_f), (2, lambda_l)] {
        if let Some(s) = sums[idx] {
            let mean = b.g.scale(s, 1.0 / counts[idx] as f32);
            let weighted = b.g.scale(mean, lambda);
            total = b.g.add(total, weighted)?;
        }
    }
    Ok(total)
}

/// Full masked-autoencoding forward for one scene; returns the scene's L_RE.
pub fn pretrain_scene_loss(
    b: &mut Binding,
    scene: &Scene,
    plan: &MaskPlan,
    lambda_h: f32,
    lambda_f: f32,
    lambda_l: f32,
) -> Result<Val> {
    let (visible, queries, targets) = embed::build_pretrain_tokens(b, scene, plan)?;
    let latents = encoder_forward(b, &visible)?;
    let decoded = decoder_forward(b, latents, &visible.valid, queries.x, None)?;
    let preds = reconstruction_heads(b, decoded, &queries.kinds, &queries.source)?;
    loss_reconstruction(b, &preds, &targets, lambda_h, lambda_f, lambda_l)
}

/// Batch L_RE: mean of per-scene losses, built on one tape.
pub fn pretrain_step(
    b: &mut Binding,
    batch: &[(&Scene, MaskPlan)],
    lambda_h: f32,
    lambda_f: f32,
    lambda_l: f32,
) -> Result<Val> {
    if batch.is_empty() {
        return Err(Error::Data("empty pretrain batch".into()));
    }
    let mut total: Option<Val> = None;
    for (scene, plan) in batch {
        let l = pretrain_scene_loss(b, scene, plan, lambda_h, lambda_f, lambda_l)?;
        total = Some(match total {
            None => l,
            Some(acc) => b.g.add(acc, l)?,
        });
    }
    Ok(b.g.scale(total.unwrap(), 1.0 / batch.len() as f32))
}
