//! Parameter store: initialization, grouping, trainability plans, parameter
//! accounting, and the backbone content hash used by plug-in checkpoints.

use crate::config::{BackboneConfig, Mode, PeftConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// The full model: a name-indexed parameter map (sorted, so every iteration
/// is deterministic) plus records of which optional modules are attached.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub peft: Option<PeftConfig>,
    pub lora_rank: Option<usize>,
    pub has_md_head: bool,
    pub params: BTreeMap<String, Param>,
}

/// Parameter groups for accounting and trainability plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Cep,
    Mcp,
    Adapter,
    Lora,
    Head,
    Bias,
    LayerNorm,
    Backbone,
}

impl Group {
    pub fn name(&self) -> &'static str {
        match self {
            Group::Cep => "cep",
            Group::Mcp => "mcp",
            Group::Adapter => "adapter",
            Group::Lora => "lora",
            Group::Head => "head",
            Group::Bias => "bias",
            Group::LayerNorm => "layer_norm",
            Group::Backbone => "backbone",
        }
    }
}

pub fn classify(name: &str) -> Group {
    if name.starts_with("peft.cep.") {
        Group::Cep
    } else if name.starts_with("peft.mcp.") {
        Group::Mcp
    } else if name.starts_with("peft.adapter.") {
        Group::Adapter
    } else if name.starts_with("lora.") {
        Group::Lora
    } else if name.starts_with("head.") {
        Group::Head
    } else if name.ends_with(".gamma") || name.ends_with(".beta") {
        Group::LayerNorm
    } else if name.ends_with(".b") {
        Group::Bias
    } else {
        Group::Backbone
    }
}

/// Parameters created by pretraining (everything except finetune-time
/// attachments); the backbone hash covers exactly this scope.
pub fn pretrain_scope(name: &str) -> bool {
    !(name.starts_with("peft.") || name.starts_with("lora.") || name.starts_with("head.conf")
        || name.starts_with("head.md"))
}

impl Model {
    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Apply the trainability plan for `mode` to every parameter.
    pub fn set_mode(&mut self, mode: Mode) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = Self::plan_trainable(mode, name);
        }
    }

    fn plan_trainable(mode: Mode, name: &str) -> bool {
        let g = classify(name);
        match mode {
            Mode::Pretrain | Mode::FullFt => true,
            Mode::PeftA => matches!(g, Group::Cep | Group::Mcp | Group::Adapter),
            Mode::Peft => {
                matches!(
                    g,
                    Group::Cep | Group::Mcp | Group::Adapter | Group::Bias | Group::LayerNorm
                ) || name.starts_with("head.recon_fut.")
                    || name.starts_with("head.conf.")
            }
            Mode::HeadOnly => name.starts_with("head.md."),
            Mode::Lora => g == Group::Lora || name.starts_with("head.md."),
        }
    }

    /// sha256 over the backbone config and every pretrain-scope parameter,
    /// in name order. Any bit flipped in a pretrained weight changes it.
    pub fn backbone_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        h.update(cfg.as_bytes());
        for (name, p) in &self.params {
            if !pretrain_scope(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Exact parameter census: totals plus a per-group breakdown.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    /// group name -> (total, trainable), sorted by group name.
    pub groups: BTreeMap<&'static str, (usize, usize)>,
}

pub fn count_parameters(model: &Model) -> ParamCounts {
    let mut total = 0;
    let mut trainable = 0;
    let mut groups: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for (name, p) in &model.params {
        let n = p.value.numel();
        total += n;
        let e = groups.entry(classify(name).name()).or_insert((0, 0));
        e.0 += n;
        if p.trainable {
            trainable += n;
            e.1 += n;
        }
    }
    ParamCounts {
        total,
        trainable,
        groups,
    }
}

/// One forward/backward tape bound to a model: parameters enter the graph
/// as leaves (requires_grad = trainable) exactly once each, by name.
pub struct Binding<'m> {
    pub g: crate::tensor::Graph,
    pub model: &'m Model,
    leaves: std::collections::HashMap<String, crate::tensor::Val>,
}

impl<'m> Binding<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            g: crate::tensor::Graph::new(),
            model,
            leaves: std::collections::HashMap::new(),
        }
    }

    /// Leaf for a named parameter (cached per binding).
    pub fn param(&mut self, name: &str) -> Result<crate::tensor::Val> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let p = self.model.get(name)?;
        let v = self.g.leaf(p.value.clone(), p.trainable);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x @ w + b` using parameters `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, x: crate::tensor::Val, prefix: &str) -> Result<crate::tensor::Val> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    /// Layer norm with affine parameters `{prefix}.gamma` / `{prefix}.beta`.
    pub fn layer_norm(&mut self, x: crate::tensor::Val, prefix: &str) -> Result<crate::tensor::Val> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Names and leaf handles of every trainable parameter touched so far.
    pub fn trainable_leaves(&self) -> Vec<(String, crate::tensor::Val)> {
        let mut v: Vec<(String, crate::tensor::Val)> = self
            .leaves
            .iter()
            .filter(|(n, _)| self.model.params[*n].trainable)
            .map(|(n, &h)| (n.clone(), h))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Gradients by parameter name after `g.backward`. Trainable parameters
    /// the loss never touched get zeros (weight decay still applies to them).
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &leaf) in &self.leaves {
            if !self.model.params[name].trainable {
                continue;
            }
            let g = self
                .g
                .grad(leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.model.params[name].value.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

// ---- initialization -----------------------------------------------------

struct Init<'a> {
    params: &'a mut BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn put(&mut self, name: &str, value: Tensor) {
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    /// Linear layer `x @ w + b`: Xavier-uniform weight, zero bias.
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let w = Tensor::xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, &mut self.rng);
        self.put(&format!("{prefix}.w"), w);
        self.put(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    fn layer_norm(&mut self, prefix: &str, c: usize) {
        self.put(&format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
        self.put(&format!("{prefix}.beta"), Tensor::zeros(&[c]));
    }

    fn transformer_layer(&mut self, prefix: &str, c: usize, ffn_mult: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), c);
        for proj in ["wq", "wk", "wv", "wo"] {
            let w = Tensor::xavier_uniform(&[c, c], c, c, &mut self.rng);
            self.put(&format!("{prefix}.attn.{proj}"), w);
            let bias = proj.replace('w', "b");
            self.put(&format!("{prefix}.attn.{bias}"), Tensor::zeros(&[c]));
        }
        self.layer_norm(&format!("{prefix}.ln2"), c);
        self.linear(&format!("{prefix}.ffn.fc1"), c, c * ffn_mult);
        self.linear(&format!("{prefix}.ffn.fc2"), c * ffn_mult, c);
    }

    /// 3-stage strided conv pyramid with lateral 1x1 fusion. Stage weights
    /// are (kernel*in, out) matrices applied to im2col'd inputs.
    fn fpn(&mut self, prefix: &str, in_ch: usize, c: usize) {
        for i in 0..3 {
            let ic = if i == 0 { in_ch } else { c };
            self.linear(&format!("{prefix}.conv{i}"), 3 * ic, c);
            self.linear(&format!("{prefix}.lat{i}"), c, c);
        }
    }
}

/// Fresh pretraining model: embedders, encoder, decoder, reconstruction
/// heads, mask tokens. Deterministic in (cfg, seed).
pub fn init_pretrain_model(cfg: &BackboneConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let mut params = BTreeMap::new();
    let mut init = Init {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    init.fpn("embed.hist", 3, c);
    init.fpn("embed.fut", 3, c);
    init.linear("embed.lane.mlp1", 3, c);
    init.linear("embed.lane.out", c, c);
    init.linear("embed.pe.fc1", 2, c);
    init.linear("embed.pe.fc2", c, c);
    // rows: 0 history, 1 future, 2 lane
    let sem = Tensor::randn(&[3, c], 0.02, &mut init.rng);
    init.put("embed.semantic", sem);
    for kind in ["history", "future", "lane"] {
        let t = Tensor::randn(&[c], 0.02, &mut init.rng);
        init.put(&format!("embed.mask_token.{kind}"), t);
    }

    for i in 0..cfg.enc_layers {
        init.transformer_layer(&format!("encoder.layer{i}"), c, cfg.ffn_mult);
    }
    init.layer_norm("encoder.norm", c);
    for i in 0..cfg.dec_layers {
        init.transformer_layer(&format!("decoder.layer{i}"), c, cfg.ffn_mult);
    }
    init.layer_norm("decoder.norm", c);

    init.linear("head.recon_hist", c, cfg.history_len * 2);
    init.linear("head.recon_fut", c, cfg.future_len * 2);
    init.linear("head.recon_lane", c, cfg.lane_len * 2);

    Ok(Model {
        cfg: cfg.clone(),
        peft: None,
        lora_rank: None,
        has_md_head: false,
        params,
    })
}

/// Attach CEP/MCP prompts (Xavier-uniform), zero-initialized parallel
/// adapters, and the zero-initialized confidence head.
pub fn attach_peft(model: &mut Model, peft: &PeftConfig, seed: u64) -> Result<()> {
    peft.validate(&model.cfg)?;
    if model.peft.is_some() {
        return Err(Error::Config("peft modules already attached".into()));
    }
    let c = model.cfg.embed_dim;
    let mut init = Init {
        params: &mut model.params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    if peft.prompt_len > 0 {
        for i in 0..peft.cep_depth {
            let t = Tensor::xavier_uniform(&[peft.prompt_len, c], c, c, &mut init.rng);
            init.put(&format!("peft.cep.{i}"), t);
        }
        if peft.mcp_enabled {
            for k in 0..model.cfg.modes {
                let t = Tensor::xavier_uniform(&[peft.prompt_len, c], c, c, &mut init.rng);
                init.put(&format!("peft.mcp.{k}"), t);
            }
        }
    }
    let r = peft.adapter_rank;
    let stacks = [("enc", model.cfg.enc_layers), ("dec", model.cfg.dec_layers)];
    for (stack, layers) in stacks {
        for i in 0..layers {
            for (slot, on) in [("msa", peft.adapter_msa), ("ffn", peft.adapter_ffn)] {
                if !on {
                    continue;
                }
                let p = format!("peft.adapter.{stack}{i}.{slot}");
                // zero weights and biases: the adapter delta is exactly 0
                // until trained
                init.put(&format!("{p}.down.w"), Tensor::zeros(&[c, r]));
                init.put(&format!("{p}.down.b"), Tensor::zeros(&[r]));
                init.put(&format!("{p}.up.w"), Tensor::zeros(&[r, c]));
                init.put(&format!("{p}.up.b"), Tensor::zeros(&[c]));
            }
        }
    }
    // confidence head starts at zero: uniform confidences, no behavior change
    init.put("head.conf.w", Tensor::zeros(&[c, 1]));
    init.put("head.conf.b", Tensor::zeros(&[1]));
    model.peft = Some(peft.clone());
    Ok(())
}

/// Attach the MLP multi-modal decoder head (full-FT / head-only / LoRA arms).
pub fn attach_md_head(model: &mut Model, seed: u64) -> Result<()> {
    if model.has_md_head {
        return Err(Error::Config("md head already attached".into()));
    }
    let c = model.cfg.embed_dim;
    let (k, t) = (model.cfg.modes, model.cfg.future_len);
    let mut init = Init {
        params: &mut model.params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    init.linear("head.md.fc1", c, 2 * c);
    init.linear("head.md.traj", 2 * c, k * t * 2);
    init.linear("head.md.conf", 2 * c, k);
    model.has_md_head = true;
    Ok(())
}

/// Attach low-rank bypasses on every attention q and v projection:
/// effective W + A@B with A Gaussian-init and B zero-init, so injection
/// starts as the identity.
pub fn attach_lora(model: &mut Model, rank: usize, seed: u64) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("lora_rank must be >= 1".into()));
    }
    if model.lora_rank.is_some() {
        return Err(Error::Config("lora already attached".into()));
    }
    let c = model.cfg.embed_dim;
    let mut init = Init {
        params: &mut model.params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let stacks = [("enc", model.cfg.enc_layers), ("dec", model.cfg.dec_layers)];
    for (stack, layers) in stacks {
        for i in 0..layers {
            for proj in ["q", "v"] {
                let a = Tensor::randn(&[c, rank], 0.02, &mut init.rng);
                init.put(&format!("lora.{stack}{i}.{proj}.a"), a);
                init.put(&format!("lora.{stack}{i}.{proj}.b"), Tensor::zeros(&[rank, c]));
            }
        }
    }
    model.lora_rank = Some(rank);
    Ok(())
}
