//! Plug-in checkpoints: serialize the trainable-parameter diff of a
//! finetuned model and re-apply it to the pristine pretrained backbone.
//! Also the per-mode module attachment used when finetuning starts.

use crate::config::{Mode, PeftConfig};
use crate::error::{Error, Result};
use crate::io::PluginFile;
use crate::model::{attach_lora, attach_md_head, attach_peft, Model};
use serde::{Deserialize, Serialize};

/// Metadata a plugin needs to rebuild its modules on a fresh backbone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PluginMeta {
    pub mode: Mode,
    pub peft: Option<PeftConfig>,
    pub lora_rank: Option<usize>,
    pub has_md_head: bool,
}

/// Attach the modules a finetuning mode needs and apply its trainability
/// plan. `pretrained` must be a pristine pretraining model.
pub fn prepare_finetune_model(
    pretrained: &Model,
    mode: Mode,
    peft_cfg: &PeftConfig,
    seed: u64,
) -> Result<Model> {
    if pretrained.peft.is_some() || pretrained.lora_rank.is_some() || pretrained.has_md_head {
        return Err(Error::Config(
            "finetuning must start from a pristine pretrained model".into(),
        ));
    }
    let mut m = pretrained.clone();
    match mode {
        Mode::Pretrain => {
            return Err(Error::Config("pretrain is not a finetuning mode".into()))
        }
        Mode::Peft | Mode::PeftA => attach_peft(&mut m, peft_cfg, seed)?,
        Mode::FullFt | Mode::HeadOnly => attach_md_head(&mut m, seed)?,
        Mode::Lora => {
            let rank = peft_cfg
                .lora_rank
                .ok_or_else(|| Error::Config("lora mode requires lora_rank".into()))?;
            attach_lora(&mut m, rank, seed)?;
            attach_md_head(&mut m, seed.wrapping_add(1))?;
        }
    }
    m.set_mode(mode);
    Ok(m)
}

/// Extract the trainable diff of `finetuned` relative to `pretrained`.
pub fn plugin_save(finetuned: &Model, pretrained: &Model, mode: Mode) -> Result<PluginFile> {
    if !mode.emits_plugin() {
        return Err(Error::Config(format!(
            "mode `{}` does not emit a plugin",
            mode.name()
        )));
    }
    if finetuned.cfg != pretrained.cfg {
        return Err(Error::Config("backbone configs differ".into()));
    }
    let meta = PluginMeta {
        mode,
        peft: finetuned.peft.clone(),
        lora_rank: finetuned.lora_rank,
        has_md_head: finetuned.has_md_head,
    };
    let blobs = finetuned
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect();
    Ok(PluginFile {
        backbone_hash: pretrained.backbone_hash(),
        meta_json: serde_json::to_string(&meta)?,
        blobs,
    })
}

/// Rebuild the finetuned model: verify the backbone hash, attach the
/// plugin's modules (deterministic init, fully overwritten where trainable),
/// and load the blobs.
pub fn plugin_load(pretrained: &Model, plugin: &PluginFile) -> Result<Model> {
    if pretrained.backbone_hash() != plugin.backbone_hash {
        return Err(Error::Checkpoint(
            "plugin was trained against a different backbone (hash mismatch)".into(),
        ));
    }
    let meta: PluginMeta = serde_json::from_str(&plugin.meta_json)?;
    let mut m = pretrained.clone();
    if let Some(peft) = &meta.peft {
        attach_peft(&mut m, peft, 0)?;
    }
    if let Some(rank) = meta.lora_rank {
        attach_lora(&mut m, rank, 0)?;
    }
    if meta.has_md_head {
        attach_md_head(&mut m, 0)?;
    }
    m.set_mode(meta.mode);
    for (name, value) in &plugin.blobs {
        let p = m
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("plugin blob `{name}` unknown")))?;
        if !p.trainable {
            return Err(Error::Checkpoint(format!(
                "plugin blob `{name}` is frozen in mode `{}`",
                meta.mode.name()
            )));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "plugin blob `{name}` shape {:?} does not match model {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value.clone();
    }
    // every trainable parameter must be covered, or the rebuild is not
    // the finetuned model
    let missing: Vec<_> = m
        .params
        .iter()
        .filter(|(n, p)| p.trainable && !plugin.blobs.iter().any(|(bn, _)| bn == *n))
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "plugin misses trainable parameters: {missing:?}"
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneConfig;
    use crate::model::{count_parameters, init_pretrain_model};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pretrained() -> Model {
        init_pretrain_model(&BackboneConfig::desk_scale(), 42).unwrap()
    }

    fn scramble_trainable(m: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params.values_mut() {
            if p.trainable {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::randn(&shape, 0.1, &mut rng);
            }
        }
    }

    #[test]
    fn plugin_round_trip_reconstructs_model_bit_exactly() {
        for mode in [Mode::Peft, Mode::PeftA, Mode::HeadOnly, Mode::Lora] {
            let base = pretrained();
            let cfg = PeftConfig {
                lora_rank: Some(4),
                ..PeftConfig::default()
            };
            let mut ft = prepare_finetune_model(&base, mode, &cfg, 7).unwrap();
            scramble_trainable(&mut ft, 1000 + mode as u64);
            let plugin = plugin_save(&ft, &base, mode).unwrap();
            assert_eq!(plugin.blobs.len(), ft.params.values().filter(|p| p.trainable).count());
            let n_plugin: usize = plugin.blobs.iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(n_plugin, count_parameters(&ft).trainable);
            let rebuilt = plugin_load(&base, &plugin).unwrap();
            assert_eq!(rebuilt.params, ft.params, "mode {}", mode.name());
        }
    }

    #[test]
    fn plugin_refuses_wrong_backbone() {
        let base = pretrained();
        let other = init_pretrain_model(&BackboneConfig::desk_scale(), 43).unwrap();
        let ft = prepare_finetune_model(&base, Mode::PeftA, &PeftConfig::default(), 7).unwrap();
        let plugin = plugin_save(&ft, &base, Mode::PeftA).unwrap();
        let err = plugin_load(&other, &plugin).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn plugin_rejects_non_plugin_modes_and_bad_blobs() {
        let base = pretrained();
        let ft = prepare_finetune_model(&base, Mode::FullFt, &PeftConfig::default(), 7).unwrap();
        assert!(plugin_save(&ft, &base, Mode::FullFt).is_err());

        let ft = prepare_finetune_model(&base, Mode::PeftA, &PeftConfig::default(), 7).unwrap();
        let mut plugin = plugin_save(&ft, &base, Mode::PeftA).unwrap();
        plugin.blobs.push(("no.such.param".into(), Tensor::zeros(&[1])));
        assert!(plugin_load(&base, &plugin).is_err());
        let mut plugin = plugin_save(&ft, &base, Mode::PeftA).unwrap();
        plugin.blobs.pop();
        assert!(plugin_load(&base, &plugin).is_err());
    }

    #[test]
    fn prepare_rejects_non_pristine_base() {
        let base = pretrained();
        let ft = prepare_finetune_model(&base, Mode::Peft, &PeftConfig::default(), 7).unwrap();
        assert!(prepare_finetune_model(&ft, Mode::Peft, &PeftConfig::default(), 7).is_err());
        assert!(prepare_finetune_model(&base, Mode::Pretrain, &PeftConfig::default(), 7).is_err());
        // lora mode needs a rank
        assert!(prepare_finetune_model(
            &base,
            Mode::Lora,
            &PeftConfig {
                lora_rank: None,
                ..PeftConfig::default()
            },
            7
        )
        .is_err());
    }
}
