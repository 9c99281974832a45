//! AdamW, the cosine schedule, training/eval loops for every mode, the
//! freeze audit, and checkpoint conversion.

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::heads::{
    aggregate_metrics, forecast_baseline, forecast_peft, loss_finetune, metrics_scene,
    ForecastGraphOut, MetricsReport,
};
use crate::io::{CheckpointFile, PluginFile, PredRecord, PredictionDump};
use crate::model::{init_pretrain_model, Binding, Model};
use crate::peft::{plugin_save, prepare_finetune_model};
use crate::scene::{complementary_mask, MaskPlan, Scene};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// lr_t = lr * 0.5 * (1 + cos(pi * t / T)); exactly lr at t=0 and 0 at t>=T.
pub fn cosine_lr(lr_init: f64, t: u64, t_total: u64) -> f64 {
    if t == 0 {
        return lr_init;
    }
    if t >= t_total {
        return 0.0;
    }
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / t_total as f64).cos())
}

/// AdamW moments, allocated for trainable parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in &model.params {
            if p.trainable {
                m.insert(name.clone(), Tensor::zeros(p.value.shape()));
                v.insert(name.clone(), Tensor::zeros(p.value.shape()));
            }
        }
        AdamState { t: 0, m, v }
    }
}

/// One decoupled-weight-decay Adam step over the trainable parameters.
pub fn adamw_step(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    st: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    st.t += 1;
    let bc1 = 1.0 - BETA1.powi(st.t as i32);
    let bc2 = 1.0 - BETA2.powi(st.t as i32);
    for (name, p) in model.params.iter_mut() {
        if !p.trainable {
            continue;
        }
        // trainable but absent from the graph (e.g. the transformer decoder
        // under the MD head): no gradient, no update — like a None grad
        let Some(g) = grads.get(name) else {
            continue;
        };
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NanGradient(name.clone()));
        }
        let m = st.m.get_mut(name).expect("moment allocated");
        let v = st.v.get_mut(name).expect("moment allocated");
        for i in 0..p.value.numel() {
            let gi = g.data()[i] as f64;
            let mi = BETA1 * m.data()[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] as f64 + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let x = p.value.data()[i] as f64;
            let step = lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * x);
            p.value.data_mut()[i] = (x - step) as f32;
        }
    }
    Ok(())
}

/// Snapshot of every frozen parameter; `check` aborts on any bit drift.
pub struct FreezeAudit {
    frozen: BTreeMap<String, Tensor>,
}

impl FreezeAudit {
    pub fn new(model: &Model) -> Self {
        FreezeAudit {
            frozen: model
                .params
                .iter()
                .filter(|(_, p)| !p.trainable)
                .map(|(n, p)| (n.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        for (name, snap) in &self.frozen {
            let now = model.value(name)?;
            let same = snap.data().len() == now.data().len()
                && snap
                    .data()
                    .iter()
                    .zip(now.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Checkpoint(format!(
                    "frozen parameter `{name}` drifted during training"
                )));
            }
        }
        Ok(())
    }
}

/// Resumable training state. RNG streams are derived from the config seed
/// plus the epoch counter, so the counters alone resume deterministically.
#[derive(Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamState,
    pub epoch: u64,
    pub step: u64,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch + 1))
}

fn batches(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(batch_size))
        .map(|i| (i * batch_size, (i * batch_size + batch_size).min(n)))
        .collect()
}

/// Masked-autoencoder pretraining on the reconstruction loss. Returns the
/// final state and the per-epoch mean losses of the epochs run in this call.
pub fn run_pretrain(
    cfg: &TrainConfig,
    scenes: &[Scene],
    resume: Option<TrainState>,
    max_epochs: Option<u64>,
) -> Result<(TrainState, Vec<f64>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no pretraining scenes".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => {
            let model = init_pretrain_model(&cfg.backbone, cfg.seed)?;
            let opt = AdamState::new(&model);
            TrainState {
                model,
                opt,
                epoch: 0,
                step: 0,
            }
        }
    };
    let steps_per_epoch = batches(scenes.len(), cfg.batch_size).len() as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let audit = FreezeAudit::new(&state.model);
    let mut losses = Vec::new();
    // the schedule always spans cfg.epochs; max_epochs only bounds how many
    // are run in this call (checkpoint-and-resume keeps the same schedule)
    let end = state
        .epoch
        .saturating_add(max_epochs.unwrap_or(u64::MAX))
        .min(cfg.epochs as u64);
    while state.epoch < end {
        let mut rng = epoch_rng(cfg.seed, state.epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let plans: Vec<MaskPlan> = order
            .iter()
            .map(|&i| complementary_mask(&scenes[i], &cfg.mask, &mut rng))
            .collect();
        let mut epoch_loss = 0.0f64;
        for (lo, hi) in batches(scenes.len(), cfg.batch_size) {
            let grads;
            let loss_val;
            {
                let mut b = Binding::new(&state.model);
                let batch: Vec<(&Scene, MaskPlan)> = (lo..hi)
                    .map(|j| (&scenes[order[j]], plans[j].clone()))
                    .collect();
                let loss = crate::backbone::pretrain_step(
                    &mut b,
                    &batch,
                    cfg.lambda_history,
                    cfg.lambda_future,
                    cfg.lambda_lane,
                )?;
                loss_val = b.g.value(loss).item() as f64;
                if !loss_val.is_finite() {
                    return Err(Error::Data("non-finite pretraining loss".into()));
                }
                b.g.backward(loss)?;
                grads = b.grads();
            }
            let lr = cosine_lr(cfg.lr, state.step, total_steps);
            adamw_step(&mut state.model, &grads, &mut state.opt, lr, cfg.weight_decay)?;
            state.step += 1;
            if cfg.freeze_audit_every > 0 && state.step % cfg.freeze_audit_every as u64 == 0 {
                audit.check(&state.model)?;
            }
            epoch_loss += loss_val * (hi - lo) as f64;
        }
        losses.push(epoch_loss / scenes.len() as f64);
        state.epoch += 1;
    }
    Ok((state, losses))
}

/// Forecast with whatever head the model carries: the MLP multi-modal
/// decoder when attached, otherwise the prompt-conditioned PEFT path.
pub fn forecast_scene(b: &mut Binding, scene: &Scene) -> Result<ForecastGraphOut> {
    if b.model.has_md_head {
        forecast_baseline(b, scene)
    } else {
        forecast_peft(b, scene)
    }
}

/// Finetuning in any mode. PEFT modes additionally return the plugin once
/// training reaches the configured epoch count.
pub fn run_finetune(
    cfg: &TrainConfig,
    pretrained: &Model,
    scenes: &[Scene],
    resume: Option<TrainState>,
    max_epochs: Option<u64>,
) -> Result<(TrainState, Vec<f64>, Option<PluginFile>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no finetuning scenes".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => {
            let model = prepare_finetune_model(pretrained, cfg.mode, &cfg.peft, cfg.seed)?;
            let opt = AdamState::new(&model);
            TrainState {
                model,
                opt,
                epoch: 0,
                step: 0,
            }
        }
    };
    let steps_per_epoch = batches(scenes.len(), cfg.batch_size).len() as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let audit = FreezeAudit::new(&state.model);
    let mut losses = Vec::new();
    let end = state
        .epoch
        .saturating_add(max_epochs.unwrap_or(u64::MAX))
        .min(cfg.epochs as u64);
    while state.epoch < end {
        let mut rng = epoch_rng(cfg.seed, state.epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (lo, hi) in batches(scenes.len(), cfg.batch_size) {
            let grads;
            let loss_val;
            {
                let mut b = Binding::new(&state.model);
                let mut per_scene = Vec::with_capacity(hi - lo);
                for j in lo..hi {
                    let scene = &scenes[order[j]];
                    let out = forecast_scene(&mut b, scene)?;
                    let target = &scene.agents[0];
                    let (l, _) = loss_finetune(
                        &mut b,
                        &out.agents[0],
                        &target.future,
                        &target.future_valid,
                        cfg.ce_weight,
                    )?;
                    per_scene.push(l);
                }
                let mut sum = per_scene[0];
                for &l in &per_scene[1..] {
                    sum = b.g.add(sum, l)?;
                }
                let loss = b.g.scale(sum, 1.0 / per_scene.len() as f32);
                loss_val = b.g.value(loss).item() as f64;
                if !loss_val.is_finite() {
                    return Err(Error::Data("non-finite finetuning loss".into()));
                }
                b.g.backward(loss)?;
                grads = b.grads();
            }
            let lr = cosine_lr(cfg.lr, state.step, total_steps);
            adamw_step(&mut state.model, &grads, &mut state.opt, lr, cfg.weight_decay)?;
            state.step += 1;
            if cfg.freeze_audit_every > 0 && state.step % cfg.freeze_audit_every as u64 == 0 {
                audit.check(&state.model)?;
            }
            epoch_loss += loss_val * (hi - lo) as f64;
        }
        losses.push(epoch_loss / scenes.len() as f64);
        state.epoch += 1;
    }
    audit.check(&state.model)?;
    let plugin = if cfg.mode.emits_plugin() && state.epoch >= cfg.epochs as u64 {
        Some(plugin_save(&state.model, pretrained, cfg.mode)?)
    } else {
        None
    };
    Ok((state, losses, plugin))
}

/// Worker-thread cap: `FP_THREADS` if set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Target-agent evaluation over a dataset. `horizon` may be a prefix of the
/// model's future length; the dump stores the evaluated prefix. Scenes are
/// processed in parallel with an ordered reduction.
pub fn run_eval(
    model: &Model,
    scenes: &[Scene],
    horizon: usize,
) -> Result<(MetricsReport, PredictionDump)> {
    let k = model.cfg.modes;
    let t = model.cfg.future_len;
    if horizon == 0 || horizon > t {
        return Err(Error::Config(format!(
            "eval horizon {horizon} outside model future length {t}"
        )));
    }
    let n_workers = worker_threads().min(scenes.len().max(1));
    let eval_one = |idx: usize| -> Result<(crate::heads::SceneMetrics, PredRecord)> {
        let scene = &scenes[idx];
        let mut b = Binding::new(model);
        let out = forecast_scene(&mut b, scene)?;
        let fo = out.materialize(&b.g);
        let trajs = &fo.trajs[..k * t * 2]; // target agent is index 0
        let conf = &fo.conf[..k];
        let sm = metrics_scene(trajs, conf, k, t, &scene.agents[0].future, horizon)?;
        let mut prefix = Vec::with_capacity(k * horizon * 2);
        for mode in 0..k {
            prefix.extend_from_slice(&trajs[mode * t * 2..mode * t * 2 + horizon * 2]);
        }
        Ok((
            sm,
            PredRecord {
                scene_id: idx as u64,
                trajs: prefix,
                conf: conf.to_vec(),
            },
        ))
    };
    let mut results: Vec<Option<Result<_>>> = (0..scenes.len()).map(|_| None).collect();
    if n_workers <= 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(eval_one(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..n_workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= scenes.len() {
                        break;
                    }
                    let r = eval_one(i);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
    }
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut records = Vec::with_capacity(scenes.len());
    for r in results {
        let (sm, rec) = r.expect("all scenes visited")?;
        per_scene.push(sm);
        records.push(rec);
    }
    Ok((
        aggregate_metrics(&per_scene)?,
        PredictionDump {
            modes: k,
            horizon,
            records,
        },
    ))
}

/// Per-scene reconstruction losses under fixed mask plans; f32 values so
/// bit-exact comparison across models is meaningful.
pub fn recon_eval(
    model: &Model,
    scenes: &[Scene],
    plans: &[MaskPlan],
    lambda_h: f32,
    lambda_f: f32,
    lambda_l: f32,
) -> Result<Vec<f32>> {
    if scenes.len() != plans.len() {
        return Err(Error::Data("scene/plan count mismatch".into()));
    }
    scenes
        .iter()
        .zip(plans)
        .map(|(scene, plan)| {
            let mut b = Binding::new(model);
            let l = crate::backbone::pretrain_scene_loss(
                &mut b, scene, plan, lambda_h, lambda_f, lambda_l,
            )?;
            Ok(b.g.value(l).item())
        })
        .collect()
}

// ---- checkpoint conversion ----------------------------------------------

pub fn to_checkpoint(cfg: &TrainConfig, st: &TrainState) -> Result<CheckpointFile> {
    Ok(CheckpointFile {
        config_json: serde_json::to_string(cfg)?,
        seed: cfg.seed,
        epoch: st.epoch,
        step: st.step,
        adam_t: st.opt.t,
        params: st
            .model
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.trainable, p.value.clone()))
            .collect(),
        moments: st
            .opt
            .m
            .iter()
            .map(|(n, m)| {
                (
                    n.clone(),
                    m.clone(),
                    st.opt.v.get(n).expect("paired moment").clone(),
                )
            })
            .collect(),
    })
}

pub fn from_checkpoint(ck: &CheckpointFile) -> Result<(TrainConfig, TrainState)> {
    let cfg: TrainConfig = serde_json::from_str(&ck.config_json)?;
    cfg.validate()?;
    let (peft, lora_rank, has_md_head) = match cfg.mode {
        Mode::Pretrain => (None, None, false),
        Mode::Peft | Mode::PeftA => (Some(cfg.peft.clone()), None, false),
        Mode::FullFt | Mode::HeadOnly => (None, None, true),
        Mode::Lora => (None, cfg.peft.lora_rank, true),
    };
    let mut params = BTreeMap::new();
    for (name, trainable, value) in &ck.params {
        params.insert(
            name.clone(),
            crate::model::Param {
                value: value.clone(),
                trainable: *trainable,
            },
        );
    }
    let model = Model {
        cfg: cfg.backbone.clone(),
        peft,
        lora_rank,
        has_md_head,
        params,
    };
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, mm, vv) in &ck.moments {
        if !model.get(name.as_str()).map(|p| p.trainable).unwrap_or(false) {
            return Err(Error::Checkpoint(format!(
                "optimizer moment for non-trainable parameter `{name}`"
            )));
        }
        m.insert(name.clone(), mm.clone());
        v.insert(name.clone(), vv.clone());
    }
    let opt = AdamState { t: ck.adam_t, m, v };
    Ok((
        cfg,
        TrainState {
            model,
            opt,
            epoch: ck.epoch,
            step: ck.step,
        },
    ))
}
