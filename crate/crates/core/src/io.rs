//! Little-endian binary containers:
//!
//! * `FPSC` — scene datasets (length-prefixed records)
//! * `FPPL` — plug-in checkpoints (trainable-parameter diffs)
//! * `FPPR` — prediction dumps (scene id + K trajectories + confidences)
//! * `FPCK` — full checkpoints (params, optimizer moments, counters)
//!
//! All multi-byte values are little-endian; f32 payloads round-trip
//! bit-exactly via to/from_le_bytes.

use crate::error::{Error, Result};
use crate::scene::{AgentTrack, LanePolyline, Scene};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const VERSION: u8 = 1;

// ---- primitive helpers -------------------------------------------------

fn w_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn w_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn w_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn w_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn w_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        w_u64(w, d as u64)?;
    }
    w_f32s(w, t.data())
}

fn r_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data("truncated file".into()))
}

fn r_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r_exact(r, &mut b)?;
    Ok(b[0])
}

fn r_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_LEN: usize = 1 << 30; // sanity cap against corrupt headers

fn r_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r_u32(r)? as usize;
    if n > MAX_LEN {
        return Err(Error::Data("corrupt string length".into()));
    }
    let mut b = vec![0u8; n];
    r_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Data("non-utf8 string".into()))
}

fn r_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    if n > MAX_LEN {
        return Err(Error::Data("corrupt payload length".into()));
    }
    let mut bytes = vec![0u8; n * 4];
    r_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn r_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let nd = r_u32(r)? as usize;
    if nd > 8 {
        return Err(Error::Data("corrupt tensor rank".into()));
    }
    let shape: Vec<usize> = (0..nd)
        .map(|_| r_u64(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let data = r_f32s(r, n)?;
    Tensor::new(shape, data)
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b)?;
    if &b != magic {
        return Err(Error::Data(format!(
            "bad magic: expected {:?}, found {:?}",
            std::str::from_utf8(magic).unwrap(),
            b
        )));
    }
    let ver = r_u8(r)?;
    if ver != VERSION {
        return Err(Error::Data(format!(
            "unsupported {} version {ver}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    Ok(())
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Data(format!("cannot create {}: {e}", path.display()))
    })?))
}

// ---- FPSC: scenes -------------------------------------------------------

fn scene_record(scene: &Scene) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    let w = &mut b;
    w_u32(w, scene.sample_rate_hz)?;
    w_str(w, &scene.dataset_tag)?;
    w_u32(w, scene.agents.len() as u32)?;
    w_u32(w, scene.lanes.len() as u32)?;
    for a in &scene.agents {
        w_u8(w, a.category)?;
        w_u32(w, a.history.len() as u32)?;
        w_u32(w, a.future.len() as u32)?;
        for p in a.history.iter().chain(&a.future) {
            w_f32s(w, p)?;
        }
        for &v in a.history_valid.iter().chain(&a.future_valid) {
            w_u8(w, v as u8)?;
        }
    }
    for l in &scene.lanes {
        w_u8(w, l.category)?;
        w_u32(w, l.points.len() as u32)?;
        for p in &l.points {
            w_f32s(w, p)?;
        }
        for &v in &l.point_valid {
            w_u8(w, v as u8)?;
        }
    }
    Ok(b)
}

fn parse_scene(r: &mut impl Read) -> Result<Scene> {
    let sample_rate_hz = r_u32(r)?;
    let dataset_tag = r_str(r)?;
    let n_agents = r_u32(r)? as usize;
    let n_lanes = r_u32(r)? as usize;
    if n_agents == 0 || n_lanes == 0 {
        return Err(Error::Data("scene without agents or lanes".into()));
    }
    fn read_points<R: Read>(r: &mut R, n: usize) -> Result<Vec<[f32; 2]>> {
        (0..n)
            .map(|_| {
                let xy = r_f32s(r, 2)?;
                Ok([xy[0], xy[1]])
            })
            .collect()
    }
    fn read_flags<R: Read>(r: &mut R, n: usize) -> Result<Vec<bool>> {
        (0..n).map(|_| Ok(r_u8(r)? != 0)).collect()
    }
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let category = r_u8(r)?;
        let h = r_u32(r)? as usize;
        let t = r_u32(r)? as usize;
        if h > MAX_LEN || t > MAX_LEN {
            return Err(Error::Data("corrupt track length".into()));
        }
        let history = read_points(r, h)?;
        let future = read_points(r, t)?;
        let history_valid = read_flags(r, h)?;
        let future_valid = read_flags(r, t)?;
        agents.push(AgentTrack {
            history,
            future,
            history_valid,
            future_valid,
            category,
        });
    }
    let mut lanes = Vec::with_capacity(n_lanes);
    for _ in 0..n_lanes {
        let category = r_u8(r)?;
        let p = r_u32(r)? as usize;
        if p > MAX_LEN {
            return Err(Error::Data("corrupt lane length".into()));
        }
        let points = read_points(r, p)?;
        let point_valid = read_flags(r, p)?;
        lanes.push(LanePolyline {
            points,
            point_valid,
            category,
        });
    }
    Ok(Scene {
        agents,
        lanes,
        dataset_tag,
        sample_rate_hz,
    })
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(b"FPSC")?;
    w_u8(&mut w, VERSION)?;
    w_u64(&mut w, scenes.len() as u64)?;
    for scene in scenes {
        let rec = scene_record(scene)?;
        w_u64(&mut w, rec.len() as u64)?;
        w.write_all(&rec)?;
    }
    Ok(w.flush()?)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, b"FPSC")?;
    let n = r_u64(&mut r)? as usize;
    let mut scenes = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = r_u64(&mut r)? as usize;
        if len > MAX_LEN {
            return Err(Error::Data("corrupt record length".into()));
        }
        let mut rec = vec![0u8; len];
        r_exact(&mut r, &mut rec)?;
        let mut slice: &[u8] = &rec;
        let scene = parse_scene(&mut slice)?;
        if !slice.is_empty() {
            return Err(Error::Data("trailing bytes in scene record".into()));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

// ---- FPPL: plug-in checkpoint -------------------------------------------

/// Trainable-parameter diff over a frozen pretrained backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginFile {
    /// sha256 of the pretrain-scope parameters + backbone config the plugin
    /// was trained against.
    pub backbone_hash: [u8; 32],
    /// JSON metadata: mode + peft config the plugin needs to rebuild its
    /// modules.
    pub meta_json: String,
    /// Name-indexed parameter blobs, sorted by name.
    pub blobs: Vec<(String, Tensor)>,
}

pub fn save_plugin(path: &Path, plugin: &PluginFile) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(b"FPPL")?;
    w_u8(&mut w, VERSION)?;
    w.write_all(&plugin.backbone_hash)?;
    w_str(&mut w, &plugin.meta_json)?;
    w_u32(&mut w, plugin.blobs.len() as u32)?;
    for (name, t) in &plugin.blobs {
        w_str(&mut w, name)?;
        w_tensor(&mut w, t)?;
    }
    Ok(w.flush()?)
}

pub fn load_plugin(path: &Path) -> Result<PluginFile> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, b"FPPL")?;
    let mut backbone_hash = [0u8; 32];
    r_exact(&mut r, &mut backbone_hash)?;
    let meta_json = r_str(&mut r)?;
    let n = r_u32(&mut r)? as usize;
    let mut blobs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let name = r_str(&mut r)?;
        let t = r_tensor(&mut r)?;
        blobs.push((name, t));
    }
    Ok(PluginFile {
        backbone_hash,
        meta_json,
        blobs,
    })
}

// ---- FPPR: prediction dump ----------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PredRecord {
    pub scene_id: u64,
    /// (K, T, 2) flattened row-major.
    pub trajs: Vec<f32>,
    /// K confidences.
    pub conf: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDump {
    pub modes: usize,
    pub horizon: usize,
    pub records: Vec<PredRecord>,
}

pub fn save_predictions(path: &Path, dump: &PredictionDump) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(b"FPPR")?;
    w_u8(&mut w, VERSION)?;
    w_u32(&mut w, dump.modes as u32)?;
    w_u32(&mut w, dump.horizon as u32)?;
    w_u64(&mut w, dump.records.len() as u64)?;
    for rec in &dump.records {
        if rec.trajs.len() != dump.modes * dump.horizon * 2 || rec.conf.len() != dump.modes {
            return Err(Error::Data(format!(
                "prediction record for scene {} has wrong arity",
                rec.scene_id
            )));
        }
        w_u64(&mut w, rec.scene_id)?;
        w_f32s(&mut w, &rec.trajs)?;
        w_f32s(&mut w, &rec.conf)?;
    }
    Ok(w.flush()?)
}

pub fn load_predictions(path: &Path) -> Result<PredictionDump> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, b"FPPR")?;
    let modes = r_u32(&mut r)? as usize;
    let horizon = r_u32(&mut r)? as usize;
    if modes == 0 || horizon == 0 || modes * horizon > MAX_LEN {
        return Err(Error::Data("corrupt prediction header".into()));
    }
    let n = r_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let scene_id = r_u64(&mut r)?;
        let trajs = r_f32s(&mut r, modes * horizon * 2)?;
        let conf = r_f32s(&mut r, modes)?;
        records.push(PredRecord {
            scene_id,
            trajs,
            conf,
        });
    }
    Ok(PredictionDump {
        modes,
        horizon,
        records,
    })
}

// ---- FPCK: full checkpoint ----------------------------------------------

/// Full training state. RNG streams are derived from `seed` plus the
/// counters, so storing them is sufficient to resume deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    /// Serialized `TrainConfig`.
    pub config_json: String,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    /// AdamW timestep.
    pub adam_t: u64,
    /// (name, trainable, value), sorted by name.
    pub params: Vec<(String, bool, Tensor)>,
    /// (name, m, v) for trainable parameters, sorted by name.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

pub fn save_checkpoint(path: &Path, ck: &CheckpointFile) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(b"FPCK")?;
    w_u8(&mut w, VERSION)?;
    w_str(&mut w, &ck.config_json)?;
    w_u64(&mut w, ck.seed)?;
    w_u64(&mut w, ck.epoch)?;
    w_u64(&mut w, ck.step)?;
    w_u64(&mut w, ck.adam_t)?;
    w_u32(&mut w, ck.params.len() as u32)?;
    for (name, trainable, t) in &ck.params {
        w_str(&mut w, name)?;
        w_u8(&mut w, *trainable as u8)?;
        w_tensor(&mut w, t)?;
    }
    w_u32(&mut w, ck.moments.len() as u32)?;
    for (name, m, v) in &ck.moments {
        w_str(&mut w, name)?;
        w_tensor(&mut w, m)?;
        w_tensor(&mut w, v)?;
    }
    Ok(w.flush()?)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, b"FPCK")?;
    let config_json = r_str(&mut r)?;
    let seed = r_u64(&mut r)?;
    let epoch = r_u64(&mut r)?;
    let step = r_u64(&mut r)?;
    let adam_t = r_u64(&mut r)?;
    let np = r_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(np.min(1 << 20));
    for _ in 0..np {
        let name = r_str(&mut r)?;
        let trainable = r_u8(&mut r)? != 0;
        params.push((name, trainable, r_tensor(&mut r)?));
    }
    let nm = r_u32(&mut r)? as usize;
    let mut moments = Vec::with_capacity(nm.min(1 << 20));
    for _ in 0..nm {
        let name = r_str(&mut r)?;
        let m = r_tensor(&mut r)?;
        let v = r_tensor(&mut r)?;
        moments.push((name, m, v));
    }
    Ok(CheckpointFile {
        config_json,
        seed,
        epoch,
        step,
        adam_t,
        params,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GeneratorProfile;
    use crate::scene::generate_synthetic;

    #[test]
    fn scenes_round_trip_exactly() {
        let p = GeneratorProfile {
            n_scenes: 7,
            ..GeneratorProfile::desk()
        };
        let scenes = generate_synthetic(11, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.fpsc");
        save_scenes(&path, &scenes).unwrap();
        assert_eq!(load_scenes(&path).unwrap(), scenes);
    }

    #[test]
    fn bad_magic_and_truncation_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fpsc");
        std::fs::write(&path, b"NOPE\x01").unwrap();
        let e = load_scenes(&path).unwrap_err();
        assert!(matches!(e, Error::Data(_)), "{e}");
        std::fs::write(&path, b"FPSC\x01\x05").unwrap();
        assert!(load_scenes(&path).is_err());
    }

    #[test]
    fn plugin_round_trip_bit_exact() {
        let plugin = PluginFile {
            backbone_hash: [7u8; 32],
            meta_json: "{\"mode\":\"peft\"}".into(),
            blobs: vec![
                (
                    "peft.cep.0".into(),
                    Tensor::new(vec![2, 3], vec![1.0, -0.0, 3.5e-8, f32::MIN, 2.0, 0.25])
                        .unwrap(),
                ),
                ("head.conf.b".into(), Tensor::new(vec![1], vec![0.0]).unwrap()),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fppl");
        save_plugin(&path, &plugin).unwrap();
        let back = load_plugin(&path).unwrap();
        assert_eq!(back, plugin);
        // -0.0 survives bit-exactly
        assert!(back.blobs[0].1.data()[1].is_sign_negative());
    }

    #[test]
    fn predictions_round_trip_and_arity_checked() {
        let dump = PredictionDump {
            modes: 2,
            horizon: 3,
            records: vec![PredRecord {
                scene_id: 42,
                trajs: (0..12).map(|i| i as f32 * 0.5).collect(),
                conf: vec![0.75, 0.25],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fppr");
        save_predictions(&path, &dump).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), dump);

        let bad = PredictionDump {
            records: vec![PredRecord {
                scene_id: 0,
                trajs: vec![0.0; 5],
                conf: vec![1.0, 0.0],
            }],
            ..dump
        };
        assert!(save_predictions(&path, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let ck = CheckpointFile {
            config_json: "{}".into(),
            seed: 3,
            epoch: 2,
            step: 117,
            adam_t: 117,
            params: vec![(
                "encoder.layer0.ln1.gamma".into(),
                true,
                Tensor::new(vec![4], vec![1.0, 1.0 + f32::EPSILON, -0.0, 9.0]).unwrap(),
            )],
            moments: vec![(
                "encoder.layer0.ln1.gamma".into(),
                Tensor::new(vec![4], vec![1e-12, 0.0, -3.0, 0.5]).unwrap(),
                Tensor::new(vec![4], vec![1e-24, 0.0, 9.0, 0.25]).unwrap(),
            )],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fpck");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }
}
