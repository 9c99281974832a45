//! Scene representation, deterministic synthetic scene generation, and
//! cross-dataset standardization by padding-with-masking.
//!
//! All coordinates are target-centric: the target agent (index 0) sits at
//! the origin at its last observed step, heading along +x. Rate conversion
//! never interpolates — grid slots without a native sample are marked
//! invalid and carry (0, 0).

use crate::config::{GeneratorProfile, MaskConfig, LANE_CHANGE_LATERAL_SPEED_MAX};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub history: Vec<[f32; 2]>,
    pub future: Vec<[f32; 2]>,
    pub history_valid: Vec<bool>,
    pub future_valid: Vec<bool>,
    pub category: u8,
}

impl AgentTrack {
    /// Last observed (present) position; the reference point of the agent's
    /// trajectory tokens.
    pub fn present(&self) -> [f32; 2] {
        for i in (0..self.history.len()).rev() {
            if self.history_valid[i] {
                return self.history[i];
            }
        }
        [0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanePolyline {
    pub points: Vec<[f32; 2]>,
    pub point_valid: Vec<bool>,
    pub category: u8,
}

impl LanePolyline {
    /// Centroid of the valid points; the lane token's reference point.
    pub fn centroid(&self) -> [f32; 2] {
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
        for (p, &v) in self.points.iter().zip(&self.point_valid) {
            if v {
                sx += p[0] as f64;
                sy += p[1] as f64;
                n += 1;
            }
        }
        if n == 0 {
            return [0.0, 0.0];
        }
        [(sx / n as f64) as f32, (sy / n as f64) as f32]
    }
}

/// One forecasting sample. Agent 0 is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
    pub dataset_tag: String,
    pub sample_rate_hz: u32,
}

/// A variable-length native-rate track. `step` counts native samples
/// relative to the present step (0 = present, negative = history).
#[derive(Clone, Debug)]
pub struct RawTrack {
    pub samples: Vec<(i64, [f32; 2])>,
    pub native_rate_hz: u32,
    pub native_history_len: usize,
    pub native_future_len: usize,
}

/// Per-scene complementary mask: for every agent exactly one of
/// history/future is masked; a subset of lanes is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// true = the agent's history is masked (future stays visible).
    pub history_masked: Vec<bool>,
    pub lane_masked: Vec<bool>,
}

/// Places native samples on the unified `target_rate_hz` grid aligned at the
/// present step. Slots without a native sample become invalid with (0, 0).
pub fn standardize(
    raw: &RawTrack,
    target_rate_hz: u32,
    history_len: usize,
    future_len: usize,
) -> Result<(Vec<[f32; 2]>, Vec<[f32; 2]>, Vec<bool>, Vec<bool>)> {
    if raw.samples.is_empty() {
        return Err(Error::Data("empty raw track".into()));
    }
    for w in raw.samples.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Data("raw track timestamps not increasing".into()));
        }
    }
    if raw.native_rate_hz == 0 || target_rate_hz % raw.native_rate_hz != 0 {
        return Err(Error::Config(format!(
            "native rate {} Hz does not divide target rate {} Hz",
            raw.native_rate_hz, target_rate_hz
        )));
    }
    if history_len == 0 || future_len == 0 {
        return Err(Error::Config("window lengths must be > 0".into()));
    }
    let stride = (target_rate_hz / raw.native_rate_hz) as i64;
    let mut history = vec![[0.0f32; 2]; history_len];
    let mut history_valid = vec![false; history_len];
    let mut future = vec![[0.0f32; 2]; future_len];
    let mut future_valid = vec![false; future_len];
    for &(step, pos) in &raw.samples {
        let off = step * stride; // offset in target-rate steps from present
        if off <= 0 {
            let slot = off + history_len as i64 - 1;
            if slot >= 0 {
                history[slot as usize] = pos;
                history_valid[slot as usize] = true;
            }
        } else if off <= future_len as i64 {
            future[(off - 1) as usize] = pos;
            future_valid[(off - 1) as usize] = true;
        }
    }
    Ok((history, future, history_valid, future_valid))
}

/// Per-agent fair-ish coin (bias `p_mask_history`) picks which side is
/// masked; exactly `round(ratio * n_lanes)` lanes are masked.
pub fn complementary_mask<R: Rng>(scene: &Scene, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let history_masked = scene
        .agents
        .iter()
        .map(|_| rng.gen_bool(cfg.p_mask_history))
        .collect();
    let m = scene.lanes.len();
    let k = (cfg.lane_mask_ratio * m as f64).round() as usize;
    let mut idx: Vec<usize> = (0..m).collect();
    // partial Fisher-Yates: first k entries are the masked lanes
    for i in 0..k.min(m) {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    let mut lane_masked = vec![false; m];
    for &i in idx.iter().take(k.min(m)) {
        lane_masked[i] = true;
    }
    MaskPlan {
        history_masked,
        lane_masked,
    }
}

// ---- synthetic generator ---------------------------------------------

const LANE_POINT_SPACING: f64 = 4.0;

#[derive(Clone, Copy)]
enum LaneShape {
    Straight,
    /// Signed curvature 1/R; positive bends left.
    Arc(f64),
}

#[derive(Clone, Copy)]
struct LaneSpec {
    origin: [f64; 2],
    heading: f64,
    shape: LaneShape,
}

impl LaneSpec {
    /// Centerline position at arclength s from the origin.
    fn pos(&self, s: f64) -> [f64; 2] {
        match self.shape {
            LaneShape::Straight => [
                self.origin[0] + s * self.heading.cos(),
                self.origin[1] + s * self.heading.sin(),
            ],
            LaneShape::Arc(k) => {
                let r = 1.0 / k;
                let cx = self.origin[0] - r * self.heading.sin();
                let cy = self.origin[1] + r * self.heading.cos();
                let phi = self.heading - std::f64::consts::FRAC_PI_2.copysign(k) + s * k;
                [cx + r.abs() * phi.cos(), cy + r.abs() * phi.sin()]
            }
        }
    }

    /// Unit left normal at arclength s.
    fn normal(&self, s: f64) -> [f64; 2] {
        let h = match self.shape {
            LaneShape::Straight => self.heading,
            LaneShape::Arc(k) => self.heading + s * k,
        };
        [-h.sin(), h.cos()]
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct AgentSim {
    lane: usize,
    speed: f64,
    start_s: f64,
    // lane-change lateral blend
    lat_offset: f64,
    lat_start: i64,
    lat_dur: i64,
    // bounded-random-walk jitter state is generated on the fly
    hist_drop: usize,
    fut_keep: usize,
}

/// Deterministic synthetic scenes: straight/arc lanes, lane-following agents
/// with bounded jitter and occasional lane changes, emitted already
/// standardized onto the unified grid in the target-agent frame.
pub fn generate_synthetic(seed: u64, profile: &GeneratorProfile) -> Result<Vec<Scene>> {
    profile.validate()?;
    (0..profile.n_scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            generate_scene(&mut rng, profile)
        })
        .collect()
}

fn generate_scene(rng: &mut ChaCha8Rng, p: &GeneratorProfile) -> Result<Scene> {
    let n_lanes = rng.gen_range(p.n_lanes.0..=p.n_lanes.1);
    let n_agents = rng.gen_range(p.n_agents.0..=p.n_agents.1);

    // lanes form a corridor: near-parallel, laterally offset like a
    // multi-lane road, so visible lanes reveal the masked ones' orientation
    let corridor = rng.gen_range(0.0..std::f64::consts::TAU);
    let (cdx, cdy) = (corridor.cos(), corridor.sin());
    let lanes: Vec<LaneSpec> = (0..n_lanes)
        .map(|i| {
            let lat = (i as f64 - n_lanes as f64 / 2.0) * 3.5 + rng.gen_range(-1.0..1.0);
            let long = rng.gen_range(-20.0..20.0);
            let origin = [long * cdx - lat * cdy, long * cdy + lat * cdx];
            let heading = corridor + rng.gen_range(-0.25..0.25);
            let shape = if rng.gen_bool(0.5) {
                LaneShape::Straight
            } else {
                // radius is kept large so that lateral lane-change offsets
                // barely amplify arclength speed (continuity bound slack)
                let r = rng.gen_range(60.0..120.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                LaneShape::Arc(1.0 / r)
            };
            LaneSpec {
                origin,
                heading,
                shape,
            }
        })
        .collect();

    let h_native = p.history_native as i64;
    let t_native = p.future_native as i64;
    let dt = 1.0 / p.native_rate_hz as f64;

    let sims: Vec<AgentSim> = (0..n_agents)
        .map(|a| {
            let lane = if a == 0 { 0 } else { rng.gen_range(0..n_lanes) };
            let speed = rng.gen_range(p.speed_min..p.speed_max);
            let start_s = rng.gen_range(0.0..LANE_POINT_SPACING * p.lane_len as f64);
            let change = a > 0 && n_lanes > 1 && rng.gen_bool(0.3);
            let (lat_offset, lat_start, lat_dur) = if change {
                let d: f64 = if rng.gen_bool(0.5) { 3.5 } else { -3.5 };
                let dur = ((1.5 * d.abs() * p.native_rate_hz as f64)
                    / LANE_CHANGE_LATERAL_SPEED_MAX)
                    .ceil() as i64;
                let start = rng.gen_range(-h_native / 2..t_native / 2);
                (d, start, dur.max(1))
            } else {
                (0.0, 0, 1)
            };
            let hist_drop = if a > 0 && rng.gen_bool(0.4) {
                rng.gen_range(1..p.history_native)
            } else {
                0
            };
            let fut_keep = if a > 0 && rng.gen_bool(0.2) {
                rng.gen_range(1..=p.future_native)
            } else {
                p.future_native
            };
            AgentSim {
                lane,
                speed,
                start_s,
                lat_offset,
                lat_start,
                lat_dur,
                hist_drop,
                fut_keep,
            }
        })
        .collect();

    // world-frame sample paths (before jitter)
    let mut world: Vec<Vec<(i64, [f64; 2])>> = Vec::with_capacity(n_agents);
    for sim in &sims {
        let spec = &lanes[sim.lane];
        let mut samples = Vec::new();
        for t in -(h_native - 1)..=t_native {
            if t <= 0 && ((t + h_native - 1) as usize) < sim.hist_drop {
                continue;
            }
            if t > 0 && t as usize > sim.fut_keep {
                continue;
            }
            let s = sim.start_s + sim.speed * t as f64 * dt;
            let base = spec.pos(s);
            let n = spec.normal(s);
            let lat =
                sim.lat_offset * smoothstep((t - sim.lat_start) as f64 / sim.lat_dur as f64);
            samples.push((t, [base[0] + n[0] * lat, base[1] + n[1] * lat]));
        }
        // bounded-random-walk jitter keeps step displacements within the
        // documented continuity bound
        let sigma = p.noise_sigma;
        let mut jx = 0.0f64;
        let mut jy = 0.0f64;
        for s in samples.iter_mut() {
            jx = (jx + (crate::tensor::gauss(rng) as f64 * sigma).clamp(-sigma, sigma))
                .clamp(-2.0 * sigma, 2.0 * sigma);
            jy = (jy + (crate::tensor::gauss(rng) as f64 * sigma).clamp(-sigma, sigma))
                .clamp(-2.0 * sigma, 2.0 * sigma);
            s.1[0] += jx;
            s.1[1] += jy;
        }
        world.push(samples);
    }

    // target frame: origin at the target's present sample, +x along its
    // present heading
    let target = &world[0];
    let present_idx = target
        .iter()
        .position(|&(t, _)| t == 0)
        .expect("target is fully observed");
    let origin = target[present_idx].1;
    let prev = target[present_idx.saturating_sub(1)].1;
    let heading = if present_idx > 0 {
        (origin[1] - prev[1]).atan2(origin[0] - prev[0])
    } else {
        lanes[0].heading
    };
    let (cs, sn) = (heading.cos(), heading.sin());
    let to_frame = |p: [f64; 2]| -> [f32; 2] {
        let dx = p[0] - origin[0];
        let dy = p[1] - origin[1];
        [(dx * cs + dy * sn) as f32, (-dx * sn + dy * cs) as f32]
    };

    let mut agents = Vec::with_capacity(n_agents);
    for (a, samples) in world.iter().enumerate() {
        let raw = RawTrack {
            samples: samples.iter().map(|&(t, pos)| (t, to_frame(pos))).collect(),
            native_rate_hz: p.native_rate_hz,
            native_history_len: p.history_native,
            native_future_len: p.future_native,
        };
        let (history, future, history_valid, future_valid) =
            standardize(&raw, p.target_rate_hz, p.history_len, p.future_len)?;
        agents.push(AgentTrack {
            history,
            future,
            history_valid,
            future_valid,
            category: if a == 0 { 0 } else { 1 },
        });
    }

    let lane_polys = lanes
        .iter()
        .map(|spec| {
            let points = (0..p.lane_len)
                .map(|j| to_frame(spec.pos(j as f64 * LANE_POINT_SPACING)))
                .collect();
            LanePolyline {
                points,
                point_valid: vec![true; p.lane_len],
                category: match spec.shape {
                    LaneShape::Straight => 0,
                    LaneShape::Arc(_) => 1,
                },
            }
        })
        .collect();

    Ok(Scene {
        agents,
        lanes: lane_polys,
        dataset_tag: p.dataset_tag.clone(),
        sample_rate_hz: p.target_rate_hz,
    })
}
