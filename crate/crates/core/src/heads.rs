//! Finetune-time forecasting heads, the winner-takes-all finetune loss,
//! and the benchmark metrics (minADE, minFDE, MR, b-minFDE).

use crate::backbone::{decoder_forward, encoder_forward};
use crate::embed::build_finetune_tokens;
use crate::error::{Error, Result};
use crate::model::Binding;
use crate::scene::Scene;
use crate::tensor::{Graph, Tensor, Val};
use serde::Serialize;

/// Miss-rate threshold (meters), per the benchmark definition.
pub const MISS_THRESHOLD: f64 = 2.0;
pub const HUBER_DELTA: f32 = 1.0;

/// Per-agent multi-modal forecast, still on the tape.
pub struct AgentForecast {
    /// K vals, each (1, T*2): absolute future positions.
    pub modes_abs: Vec<Val>,
    /// (K,) confidence logits.
    pub conf_logits: Val,
}

pub struct ForecastGraphOut {
    pub k: usize,
    pub t: usize,
    pub agents: Vec<AgentForecast>,
}

/// Materialized forecast: trajectories (N, K, T, 2) row-major, confidences
/// (N, K) rows on the simplex.
#[derive(Clone, Debug, Serialize)]
pub struct ForecastOutput {
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub trajs: Vec<f32>,
    pub conf: Vec<f32>,
}

impl ForecastGraphOut {
    /// Pull values off the tape; confidences via f64 softmax of the logits.
    pub fn materialize(&self, g: &Graph) -> ForecastOutput {
        let (n, k, t) = (self.agents.len(), self.k, self.t);
        let mut trajs = Vec::with_capacity(n * k * t * 2);
        let mut conf = Vec::with_capacity(n * k);
        for a in &self.agents {
            for &m in &a.modes_abs {
                trajs.extend_from_slice(g.value(m).data());
            }
            let logits = g.value(a.conf_logits).data();
            conf.extend(softmax_f64(logits));
        }
        ForecastOutput {
            n,
            k,
            t,
            trajs,
            conf,
        }
    }
}

fn softmax_f64(logits: &[f32]) -> Vec<f32> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| ((x as f64) - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / s) as f32).collect()
}

/// Displacement rows (M, T*2) -> absolute positions for one row, anchored at
/// `present`: cumulative sum via a lower-triangular constant matmul.
fn to_absolute(b: &mut Binding, disp_row: Val, t: usize, present: [f32; 2]) -> Result<Val> {
    let d = b.g.reshape(disp_row, vec![t, 2])?;
    let mut ltri = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..=i {
            ltri.data_mut()[i * t + j] = 1.0;
        }
    }
    let l = b.g.constant(ltri);
    let cum = b.g.matmul(l, d)?;
    let p = b.g.constant(Tensor::new(vec![2], vec![present[0], present[1]])?);
    let abs = b.g.add(cum, p)?;
    b.g.reshape(abs, vec![1, t * 2])
}

/// Confidence logits for one agent from its K decoded query features
/// (each (1, C)). Models without the confidence head get zero logits
/// (uniform confidences).
fn conf_logits(b: &mut Binding, rows: &[Val]) -> Result<Val> {
    let k = rows.len();
    if !b.model.params.contains_key("head.conf.w") {
        return Ok(b.g.constant(Tensor::zeros(&[k])));
    }
    let feats = b.g.concat0(rows)?;
    let logits = b.linear(feats, "head.conf")?;
    b.g.reshape(logits, vec![k])
}

/// Forecast-PEFT forward: encoder (with CEPs) over history+lanes, K decoder
/// passes differing only in the MCP slice, future head per mode, confidence
/// head on each mode's decoded query. Also the pretrained model's forecast
/// path when no PEFT modules are attached (prompts absent, uniform
/// confidences).
pub fn forecast_peft(b: &mut Binding, scene: &Scene) -> Result<ForecastGraphOut> {
    let k = b.model.cfg.modes;
    let t = b.model.cfg.future_len;
    let (enc_in, queries) = build_finetune_tokens(b, scene)?;
    let latents = encoder_forward(b, &enc_in)?;
    let use_mcp = b
        .model
        .peft
        .as_ref()
        .is_some_and(|p| p.mcp_enabled && p.prompt_len > 0);
    let n = scene.agents.len();
    let mut per_mode_decoded = Vec::with_capacity(k);
    let mut per_mode_traj = Vec::with_capacity(k);
    for mode in 0..k {
        let decoded = decoder_forward(
            b,
            latents,
            &enc_in.valid,
            queries.x,
            use_mcp.then_some(mode),
        )?;
        let disp = b.linear(decoded, "head.recon_fut")?; // (N, T*2)
        per_mode_decoded.push(decoded);
        per_mode_traj.push(disp);
    }
    let mut agents = Vec::with_capacity(n);
    for (i, a) in scene.agents.iter().enumerate() {
        let present = a.present();
        let mut modes_abs = Vec::with_capacity(k);
        let mut feat_rows = Vec::with_capacity(k);
        for mode in 0..k {
            let row = b.g.slice_rows(per_mode_traj[mode], i, 1)?;
            modes_abs.push(to_absolute(b, row, t, present)?);
            feat_rows.push(b.g.slice_rows(per_mode_decoded[mode], i, 1)?);
        }
        let logits = conf_logits(b, &feat_rows)?;
        agents.push(AgentForecast {
            modes_abs,
            conf_logits: logits,
        });
    }
    Ok(ForecastGraphOut { k, t, agents })
}

/// MLP multi-modal decoder baseline: encoder over history+lanes, the target
/// token feature maps to K trajectories + K confidence logits.
pub fn forecast_baseline(b: &mut Binding, scene: &Scene) -> Result<ForecastGraphOut> {
    if !b.model.has_md_head {
        return Err(Error::Config("model carries no multi-modal decoder head".into()));
    }
    let k = b.model.cfg.modes;
    let t = b.model.cfg.future_len;
    let (enc_in, _) = build_finetune_tokens(b, scene)?;
    let latents = encoder_forward(b, &enc_in)?;
    let mut agents = Vec::with_capacity(scene.agents.len());
    for (i, a) in scene.agents.iter().enumerate() {
        let feat = b.g.slice_rows(latents, i, 1)?; // history token of agent i
        let h = b.linear(feat, "head.md.fc1")?;
        let h = b.g.gelu(h);
        let traj = b.linear(h, "head.md.traj")?; // (1, K*T*2)
        let traj = b.g.reshape(traj, vec![k, t * 2])?;
        let present = a.present();
        let mut modes_abs = Vec::with_capacity(k);
        for mode in 0..k {
            let row = b.g.slice_rows(traj, mode, 1)?;
            modes_abs.push(to_absolute(b, row, t, present)?);
        }
        let logits = b.linear(h, "head.md.conf")?;
        let logits = b.g.reshape(logits, vec![k])?;
        agents.push(AgentForecast {
            modes_abs,
            conf_logits: logits,
        });
    }
    Ok(ForecastGraphOut { k, t, agents })
}

/// Mean-over-valid-steps L2 of one mode's (1, T*2) prediction value.
fn mode_ade(pred: &[f32], gt: &[[f32; 2]], valid: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for (step, g) in gt.iter().enumerate() {
        if !valid[step] {
            continue;
        }
        let dx = pred[step * 2] as f64 - g[0] as f64;
        let dy = pred[step * 2 + 1] as f64 - g[1] as f64;
        s += (dx * dx + dy * dy).sqrt();
        n += 1;
    }
    s / n as f64
}

/// WTA finetune loss for one agent: Huber (delta 1.0, per-valid-coordinate
/// mean) on the ADE-best mode + ce_weight * CE(logits, best mode). Returns
/// the loss node and the selected mode.
pub fn loss_finetune(
    b: &mut Binding,
    forecast: &AgentForecast,
    gt: &[[f32; 2]],
    valid: &[bool],
    ce_weight: f32,
) -> Result<(Val, usize)> {
    let t = gt.len();
    if valid.len() != t || b.g.value(forecast.modes_abs[0]).numel() != t * 2 {
        return Err(Error::Shape {
            op: "loss_finetune",
            lhs: vec![t],
            rhs: vec![valid.len()],
        });
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Data("agent with no valid future step".into()));
    }
    // winner selection happens on values, outside the tape
    let mut best = 0usize;
    let mut best_ade = f64::INFINITY;
    for (k, &m) in forecast.modes_abs.iter().enumerate() {
        let ade = mode_ade(b.g.value(m).data(), gt, valid);
        if ade < best_ade {
            best_ade = ade;
            best = k;
        }
    }
    let mut gt_flat = vec![0.0f32; t * 2];
    let mut mask = vec![0.0f32; t * 2];
    for (step, g) in gt.iter().enumerate() {
        gt_flat[step * 2] = g[0];
        gt_flat[step * 2 + 1] = g[1];
        if valid[step] {
            mask[step * 2] = 1.0;
            mask[step * 2 + 1] = 1.0;
        }
    }
    let gt_c = b.g.constant(Tensor::new(vec![1, t * 2], gt_flat)?);
    let m_c = b.g.constant(Tensor::new(vec![1, t * 2], mask)?);
    let diff = b.g.sub(forecast.modes_abs[best], gt_c)?;
    let masked = b.g.mul(diff, m_c)?;
    let hub = b.g.huber(masked, HUBER_DELTA);
    let hub_sum = b.g.sum_all(hub);
    let hub_mean = b.g.scale(hub_sum, 1.0 / (2 * n_valid) as f32);
    let ce = b.g.cross_entropy_logits(forecast.conf_logits, best)?;
    let ce_w = b.g.scale(ce, ce_weight);
    Ok((b.g.add(hub_mean, ce_w)?, best))
}

// ---- metrics ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub b_min_fde: f64,
}

/// Metrics for one scene's target agent. `trajs` is (K, T, 2) row-major;
/// evaluation reads the first `horizon` steps.
pub fn metrics_scene(
    trajs: &[f32],
    conf: &[f32],
    k: usize,
    t_model: usize,
    gt: &[[f32; 2]],
    horizon: usize,
) -> Result<SceneMetrics> {
    if horizon == 0 || horizon > t_model || gt.len() < horizon {
        return Err(Error::Config(format!(
            "horizon {horizon} incompatible with model T={t_model}, gt {}",
            gt.len()
        )));
    }
    if trajs.len() != k * t_model * 2 || conf.len() != k {
        return Err(Error::Shape {
            op: "metrics_scene",
            lhs: vec![trajs.len(), conf.len()],
            rhs: vec![k * t_model * 2, k],
        });
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut best_endpoint = 0usize;
    for mode in 0..k {
        let base = mode * t_model * 2;
        let mut s = 0.0f64;
        for step in 0..horizon {
            let dx = trajs[base + step * 2] as f64 - gt[step][0] as f64;
            let dy = trajs[base + step * 2 + 1] as f64 - gt[step][1] as f64;
            s += (dx * dx + dy * dy).sqrt();
        }
        let ade = s / horizon as f64;
        let e = horizon - 1;
        let dx = trajs[base + e * 2] as f64 - gt[e][0] as f64;
        let dy = trajs[base + e * 2 + 1] as f64 - gt[e][1] as f64;
        let fde = (dx * dx + dy * dy).sqrt();
        min_ade = min_ade.min(ade);
        if fde < min_fde {
            min_fde = fde;
            best_endpoint = mode;
        }
    }
    let p = conf[best_endpoint] as f64;
    Ok(SceneMetrics {
        min_ade,
        min_fde,
        miss: min_fde > MISS_THRESHOLD,
        b_min_fde: min_fde + (1.0 - p) * (1.0 - p),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub b_min_fde: f64,
}

/// Average per-scene metrics; MR is the miss fraction.
pub fn aggregate_metrics(per_scene: &[SceneMetrics]) -> Result<MetricsReport> {
    if per_scene.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let n = per_scene.len() as f64;
    Ok(MetricsReport {
        n_scenes: per_scene.len(),
        min_ade: per_scene.iter().map(|m| m.min_ade).sum::<f64>() / n,
        min_fde: per_scene.iter().map(|m| m.min_fde).sum::<f64>() / n,
        miss_rate: per_scene.iter().filter(|m| m.miss).count() as f64 / n,
        b_min_fde: per_scene.iter().map(|m| m.b_min_fde).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneConfig, GeneratorProfile, PeftConfig};
    use crate::gradcheck::check_grads;
    use crate::model::{init_pretrain_model, Binding, Model};
    use crate::peft::prepare_finetune_model;
    use crate::scene::generate_synthetic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Model, Scene) {
        let cfg = BackboneConfig {
            embed_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_mult: 2,
            modes: 3,
            history_len: 4,
            future_len: 5,
            lane_len: 4,
        };
        let m = init_pretrain_model(&cfg, 0).unwrap();
        let p = GeneratorProfile {
            n_scenes: 1,
            history_native: 4,
            future_native: 5,
            history_len: 4,
            future_len: 5,
            lane_len: 4,
            ..GeneratorProfile::desk()
        };
        let scene = generate_synthetic(77, &p).unwrap().remove(0);
        (m, scene)
    }

    #[test]
    fn peft_forecast_shapes_and_simplex() {
        let (base, scene) = tiny();
        let ft = prepare_finetune_model(
            &base,
            crate::config::Mode::Peft,
            &PeftConfig {
                prompt_len: 2,
                cep_depth: 1,
                adapter_rank: 2,
                ..PeftConfig::default()
            },
            3,
        )
        .unwrap();
        let mut b = Binding::new(&ft);
        let out = forecast_peft(&mut b, &scene).unwrap();
        let fo = out.materialize(&b.g);
        assert_eq!(fo.n, scene.agents.len());
        assert_eq!((fo.k, fo.t), (3, 5));
        assert_eq!(fo.trajs.len(), fo.n * 3 * 5 * 2);
        for i in 0..fo.n {
            let s: f32 = fo.conf[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn equal_mcp_slices_make_identical_modes() {
        let (base, scene) = tiny();
        let mut ft = prepare_finetune_model(
            &base,
            crate::config::Mode::Peft,
            &PeftConfig {
                prompt_len: 2,
                cep_depth: 0,
                adapter_rank: 2,
                ..PeftConfig::default()
            },
            3,
        )
        .unwrap();
        let s0 = ft.params["peft.mcp.0"].value.clone();
        for k in 1..3 {
            ft.params.get_mut(&format!("peft.mcp.{k}")).unwrap().value = s0.clone();
        }
        let mut b = Binding::new(&ft);
        let out = forecast_peft(&mut b, &scene).unwrap();
        let fo = out.materialize(&b.g);
        let stride = 5 * 2;
        for i in 0..fo.n {
            let base_t = &fo.trajs[i * 3 * stride..i * 3 * stride + stride];
            for k in 1..3 {
                let t = &fo.trajs[(i * 3 + k) * stride..(i * 3 + k + 1) * stride];
                assert_eq!(t, base_t);
            }
        }
    }

    #[test]
    fn baseline_forecast_shapes_and_grad_check() {
        let (base, scene) = tiny();
        let ft = prepare_finetune_model(
            &base,
            crate::config::Mode::HeadOnly,
            &PeftConfig::default(),
            3,
        )
        .unwrap();
        let mut b = Binding::new(&ft);
        let out = forecast_baseline(&mut b, &scene).unwrap();
        assert_eq!(out.agents.len(), scene.agents.len());
        let a0 = &scene.agents[0];
        let (loss, _) =
            loss_finetune(&mut b, &out.agents[0], &a0.future, &a0.future_valid, 1.0).unwrap();
        let leaves: Vec<_> = b.trainable_leaves().iter().map(|(_, v)| *v).collect();
        assert!(!leaves.is_empty());
        let err = check_grads(&mut b.g, loss, &leaves, 1e-5, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
        // a pristine backbone has no md head
        let mut b2 = Binding::new(&base);
        assert!(forecast_baseline(&mut b2, &scene).is_err());
    }

    fn synthetic_forecast(
        b: &mut Binding,
        modes: &[Vec<f32>],
        logits: Vec<f32>,
        trainable: bool,
    ) -> AgentForecast {
        let k = modes.len();
        let t = modes[0].len() / 2;
        AgentForecast {
            modes_abs: modes
                .iter()
                .map(|m| b.g.leaf(Tensor::new(vec![1, t * 2], m.clone()).unwrap(), trainable))
                .collect(),
            conf_logits: b.g.leaf(Tensor::new(vec![k], logits).unwrap(), trainable),
        }
    }

    #[test]
    fn wta_picks_lowest_ade_mode_and_perfect_loss_vanishes() {
        let (base, _) = tiny();
        let mut b = Binding::new(&base);
        let gt: Vec<[f32; 2]> = (0..5).map(|i| [i as f32, 0.0]).collect();
        let perfect: Vec<f32> = gt.iter().flat_map(|p| [p[0], p[1]]).collect();
        let off: Vec<f32> = gt.iter().flat_map(|p| [p[0] + 2.0, p[1]]).collect();
        // strongly confident logits on the perfect mode
        let f = synthetic_forecast(&mut b, &[off.clone(), perfect.clone()], vec![-40.0, 40.0], false);
        let (loss, best) = loss_finetune(&mut b, &f, &gt, &[true; 5], 1.0).unwrap();
        assert_eq!(best, 1);
        assert!(b.g.value(loss).item() < 1e-6);
        // ADE 1.0 vs 2.0 -> mode 0
        let near: Vec<f32> = gt.iter().flat_map(|p| [p[0] + 1.0, p[1]]).collect();
        let f2 = synthetic_forecast(&mut b, &[near, off], vec![0.0, 0.0], false);
        let (_, best2) = loss_finetune(&mut b, &f2, &gt, &[true; 5], 1.0).unwrap();
        assert_eq!(best2, 0);
        // no valid step -> error (sample skipped by caller)
        let f3 = synthetic_forecast(&mut b, &[perfect.clone()], vec![0.0], false);
        assert!(loss_finetune(&mut b, &f3, &gt, &[false; 5], 1.0).is_err());
    }

    #[test]
    fn gradient_flows_only_through_selected_mode() {
        let (base, _) = tiny();
        let mut b = Binding::new(&base);
        let gt: Vec<[f32; 2]> = (0..5).map(|i| [i as f32, 1.0]).collect();
        let m0: Vec<f32> = gt.iter().flat_map(|p| [p[0] + 0.3, p[1]]).collect();
        let m1: Vec<f32> = gt.iter().flat_map(|p| [p[0] + 5.0, p[1]]).collect();
        let f = synthetic_forecast(&mut b, &[m0, m1], vec![0.1, -0.2], true);
        let (loss, best) = loss_finetune(&mut b, &f, &gt, &[true; 5], 1.0).unwrap();
        assert_eq!(best, 0);
        b.g.backward(loss).unwrap();
        let g0 = b.g.grad(f.modes_abs[0]).unwrap();
        assert!(g0.data().iter().any(|&x| x != 0.0));
        assert!(b.g.grad(f.modes_abs[1]).is_none()
            || b.g.grad(f.modes_abs[1]).unwrap().data().iter().all(|&x| x == 0.0));
        // confidence grads touch all modes via softmax
        let gc = b.g.grad(f.conf_logits).unwrap();
        assert!(gc.data().iter().all(|&x| x != 0.0));
    }

    // independent brute-force metrics used as the oracle
    fn brute_force(
        trajs: &[f32],
        conf: &[f32],
        k: usize,
        t: usize,
        gt: &[[f32; 2]],
        horizon: usize,
    ) -> SceneMetrics {
        let d = |mode: usize, step: usize| -> f64 {
            let x = trajs[mode * t * 2 + step * 2] as f64;
            let y = trajs[mode * t * 2 + step * 2 + 1] as f64;
            ((x - gt[step][0] as f64).powi(2) + (y - gt[step][1] as f64).powi(2)).sqrt()
        };
        let ades: Vec<f64> = (0..k)
            .map(|m| (0..horizon).map(|s| d(m, s)).sum::<f64>() / horizon as f64)
            .collect();
        let fdes: Vec<f64> = (0..k).map(|m| d(m, horizon - 1)).collect();
        let min_ade = ades.iter().cloned().fold(f64::INFINITY, f64::min);
        let min_fde = fdes.iter().cloned().fold(f64::INFINITY, f64::min);
        let best = (0..k).min_by(|&a, &b| fdes[a].partial_cmp(&fdes[b]).unwrap()).unwrap();
        SceneMetrics {
            min_ade,
            min_fde,
            miss: min_fde > 2.0,
            b_min_fde: min_fde + (1.0 - conf[best] as f64).powi(2),
        }
    }

    #[test]
    fn metrics_match_brute_force_and_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, t) = (4, 6);
        for case in 0..300 {
            let trajs: Vec<f32> = (0..k * t * 2).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let logits: Vec<f32> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let conf = super::softmax_f64(&logits);
            let gt: Vec<[f32; 2]> = (0..t)
                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                .collect();
            let horizon = if case % 3 == 0 { t / 2 } else { t };
            let got = metrics_scene(&trajs, &conf, k, t, &gt, horizon).unwrap();
            let want = brute_force(&trajs, &conf, k, t, &gt, horizon);
            assert!((got.min_ade - want.min_ade).abs() < 1e-6);
            assert!((got.min_fde - want.min_fde).abs() < 1e-6);
            assert_eq!(got.miss, want.miss);
            assert!((got.b_min_fde - want.b_min_fde).abs() < 1e-6);
            assert!(got.b_min_fde >= got.min_fde);
            // minADE is a lower bound on each mode's ADE
            for m in 0..k {
                let base = m * t * 2;
                let ade: f64 = (0..horizon)
                    .map(|s| {
                        let dx = trajs[base + s * 2] as f64 - gt[s][0] as f64;
                        let dy = trajs[base + s * 2 + 1] as f64 - gt[s][1] as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .sum::<f64>()
                    / horizon as f64;
                assert!(got.min_ade <= ade + 1e-12);
            }
        }
    }

    #[test]
    fn metric_trivial_identities() {
        let t = 4;
        let gt: Vec<[f32; 2]> = (0..t).map(|i| [i as f32, -(i as f32)]).collect();
        let perfect: Vec<f32> = gt.iter().flat_map(|p| [p[0], p[1]]).collect();
        let far: Vec<f32> = gt.iter().flat_map(|p| [p[0] + 50.0, p[1]]).collect();
        let trajs = [perfect, far].concat();
        let m = metrics_scene(&trajs, &[1.0, 0.0], 2, t, &gt, t).unwrap();
        assert_eq!(m.min_ade, 0.0);
        assert_eq!(m.min_fde, 0.0);
        assert!(!m.miss);
        // p = 1 on the endpoint-best mode -> b-minFDE == minFDE
        assert_eq!(m.b_min_fde, m.min_fde);
        // K=2 with endpoints at 1.5 m and 3.0 m -> minFDE 1.5, not a miss
        let near: Vec<f32> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, p)| if i == t - 1 { [p[0] + 1.5, p[1]] } else { [p[0], p[1]] })
            .collect();
        let off: Vec<f32> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, p)| if i == t - 1 { [p[0] + 3.0, p[1]] } else { [p[0], p[1]] })
            .collect();
        let m2 = metrics_scene(&[near, off].concat(), &[0.5, 0.5], 2, t, &gt, t).unwrap();
        assert!((m2.min_fde - 1.5).abs() < 1e-9);
        assert!(!m2.miss);
        // mode-axis permutation invariance (confidences permuted identically)
        let trajs_p = [
            trajs[t * 2..].to_vec(),
            trajs[..t * 2].to_vec(),
        ]
        .concat();
        let mp = metrics_scene(&trajs_p, &[0.0, 1.0], 2, t, &gt, t).unwrap();
        assert_eq!(mp, m);
        // empty set rejected
        assert!(aggregate_metrics(&[]).is_err());
        // bad horizon rejected
        assert!(metrics_scene(&trajs, &[1.0, 0.0], 2, t, &gt, t + 1).is_err());
    }
}
