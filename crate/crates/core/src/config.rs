//! Configuration types shared by the model, trainer and CLI.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Transformer backbone dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Embedding dimension C.
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Number of prediction modes K.
    pub modes: usize,
    /// Unified history window H (steps).
    pub history_len: usize,
    /// Unified future window T (steps).
    pub future_len: usize,
    /// Points per lane polyline P.
    pub lane_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl BackboneConfig {
    /// Small config trainable on CPU in minutes.
    pub fn desk_scale() -> Self {
        Self {
            embed_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            ffn_mult: 4,
            modes: 3,
            history_len: 10,
            future_len: 12,
            lane_len: 8,
        }
    }

    /// The configuration used for parameter accounting: C=128, 4+4 layers,
    /// K=6, 5 s history / 6 s future at 10 Hz.
    pub fn reference_scale() -> Self {
        Self {
            embed_dim: 128,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ffn_mult: 4,
            modes: 6,
            history_len: 50,
            future_len: 60,
            lane_len: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.embed_dim,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.ffn_mult,
            self.modes,
            self.history_len,
            self.future_len,
            self.lane_len,
        ]
        .iter()
        .all(|&x| x > 0);
        if !all_positive {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which additive/selective modules exist and which are unfrozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftConfig {
    /// Prompt length N_P for both CEP and MCP.
    pub prompt_len: usize,
    /// Encoder layers that receive fresh CEPs (0 disables CEPs).
    pub cep_depth: usize,
    pub mcp_enabled: bool,
    pub adapter_rank: usize,
    pub adapter_msa: bool,
    pub adapter_ffn: bool,
    pub unfreeze_bias: bool,
    pub unfreeze_layer_norm: bool,
    pub unfreeze_head: bool,
    /// Rank of the LoRA comparison arm (only used in `lora` mode).
    pub lora_rank: Option<usize>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            cep_depth: 2,
            mcp_enabled: true,
            adapter_rank: 8,
            adapter_msa: true,
            adapter_ffn: true,
            unfreeze_bias: true,
            unfreeze_layer_norm: true,
            unfreeze_head: true,
            lora_rank: None,
        }
    }
}

impl PeftConfig {
    /// N_P=50, CEP depth 4, adapter rank 64 — the accounting configuration.
    pub fn reference_scale() -> Self {
        Self {
            prompt_len: 50,
            cep_depth: 4,
            mcp_enabled: true,
            adapter_rank: 64,
            adapter_msa: true,
            adapter_ffn: true,
            unfreeze_bias: true,
            unfreeze_layer_norm: true,
            unfreeze_head: true,
            lora_rank: None,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.cep_depth > backbone.enc_layers {
            return Err(Error::Config(format!(
                "cep_depth {} exceeds encoder layers {}",
                self.cep_depth, backbone.enc_layers
            )));
        }
        if (self.adapter_msa || self.adapter_ffn) && self.adapter_rank == 0 {
            return Err(Error::Config("adapter_rank must be >= 1".into()));
        }
        if self.lora_rank == Some(0) {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training/finetuning regime: which parameters are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    /// Forecast-FT: adapters removed, everything trainable.
    FullFt,
    /// Forecast-PEFT: additive modules + bias/LN/prediction head.
    Peft,
    /// Forecast-PEFT (A): additive modules only.
    PeftA,
    /// Multi-modal-decoder head tuning baseline.
    HeadOnly,
    /// LoRA comparison arm (q/v low-rank bypasses + MD head).
    Lora,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "full_ft" => Ok(Mode::FullFt),
            "peft" => Ok(Mode::Peft),
            "peft_a" => Ok(Mode::PeftA),
            "head_only" => Ok(Mode::HeadOnly),
            "lora" => Ok(Mode::Lora),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::FullFt => "full_ft",
            Mode::Peft => "peft",
            Mode::PeftA => "peft_a",
            Mode::HeadOnly => "head_only",
            Mode::Lora => "lora",
        }
    }

    /// Modes whose trainable set is a plug-in over a frozen backbone.
    pub fn emits_plugin(&self) -> bool {
        matches!(self, Mode::Peft | Mode::PeftA | Mode::HeadOnly | Mode::Lora)
    }
}

/// Complementary-masking knobs for pretraining.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability that an agent's history (rather than future) is masked.
    pub p_mask_history: f64,
    /// Fraction of lane polylines masked.
    pub lane_mask_ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_mask_history: 0.5,
            lane_mask_ratio: 0.5,
        }
    }
}

/// Synthetic scene generator profile; also fixes the unified output windows.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorProfile {
    pub n_scenes: usize,
    /// Native sampling rate of the simulated dataset.
    pub native_rate_hz: u32,
    /// Unified grid rate.
    pub target_rate_hz: u32,
    /// Native history/future lengths, in native steps (present included in
    /// history).
    pub history_native: usize,
    pub future_native: usize,
    /// Inclusive agent/lane count ranges.
    pub n_agents: (usize, usize),
    pub n_lanes: (usize, usize),
    /// Unified window lengths (target-rate steps) and lane point count.
    pub history_len: usize,
    pub future_len: usize,
    pub lane_len: usize,
    pub dataset_tag: String,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Positional jitter scale (meters).
    pub noise_sigma: f64,
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorProfile {
    /// Default desk-scale profile: full-length 10 Hz tracks.
    pub fn desk() -> Self {
        Self {
            n_scenes: 2000,
            native_rate_hz: 10,
            target_rate_hz: 10,
            history_native: 10,
            future_native: 12,
            n_agents: (2, 4),
            n_lanes: (3, 6),
            history_len: 10,
            future_len: 12,
            lane_len: 8,
            dataset_tag: "desk".into(),
            speed_min: 3.0,
            speed_max: 12.0,
            noise_sigma: 0.05,
        }
    }

    /// Shorter native history/future at the same rate (AV1-style padding).
    pub fn desk_short(&self) -> Self {
        Self {
            history_native: (self.history_native * 2).div_ceil(5),
            future_native: self.future_native / 2,
            dataset_tag: format!("{}-short", self.dataset_tag),
            ..self.clone()
        }
    }

    /// Lower native rate (nuScenes-style 1-in-k slot pattern).
    pub fn desk_low_rate(&self, native_rate_hz: u32) -> Self {
        let ratio = (self.target_rate_hz / native_rate_hz) as usize;
        Self {
            native_rate_hz,
            history_native: self.history_len.div_ceil(ratio),
            future_native: self.future_len / ratio,
            dataset_tag: format!("{}-lowrate", self.dataset_tag),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents.0 < 1 || self.n_agents.0 > self.n_agents.1 {
            return Err(Error::Config("empty n_agents range".into()));
        }
        if self.n_lanes.0 < 1 || self.n_lanes.0 > self.n_lanes.1 {
            return Err(Error::Config("empty n_lanes range".into()));
        }
        if self.history_native == 0 || self.future_native == 0 {
            return Err(Error::Config("native window lengths must be > 0".into()));
        }
        if self.native_rate_hz == 0 || self.target_rate_hz % self.native_rate_hz != 0 {
            return Err(Error::Config(format!(
                "native rate {} Hz does not divide target rate {} Hz",
                self.native_rate_hz, self.target_rate_hz
            )));
        }
        Ok(())
    }

    /// Upper bound on the distance between consecutive valid native samples.
    pub fn max_step_displacement(&self) -> f64 {
        // longitudinal speed cap, lateral lane-change speed, bounded jitter
        let v = (self.speed_max * self.speed_max + LANE_CHANGE_LATERAL_SPEED_MAX.powi(2)).sqrt();
        v / self.native_rate_hz as f64 + 4.0 * self.noise_sigma
    }
}

pub const LANE_CHANGE_LATERAL_SPEED_MAX: f64 = 2.0;

/// Full training run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight on the confidence cross-entropy term of the finetune loss
    /// (the Huber term has weight 1).
    pub ce_weight: f32,
    pub lambda_history: f32,
    pub lambda_future: f32,
    pub lambda_lane: f32,
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    pub mask: MaskConfig,
    /// Steps between frozen-parameter audits during finetuning.
    pub freeze_audit_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            ce_weight: 1.0,
            lambda_history: 1.0,
            lambda_future: 1.0,
            lambda_lane: 0.35,
            backbone: BackboneConfig::desk_scale(),
            peft: PeftConfig::default(),
            mask: MaskConfig::default(),
            freeze_audit_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.peft.validate(&self.backbone)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be > 0".into()));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}
