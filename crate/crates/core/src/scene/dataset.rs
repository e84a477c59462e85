//! Scene persistence: a manifest plus per-frame binary arrays.
//!
//! Layout of a scene directory:
//!
//! ```text
//! manifest.txt          key = value lines; holds format version and spec
//! frame_0000/
//!   images.dva          u8  [cams, 3, H, W], 0..255
//!   depth.dva           f64 [cams, H, W]
//!   instances.dva       i32 [cams, H, W]
//!   ego_pose.dva        f64 [4, 4], row-major ego-to-world
//!   intrinsics.dva      f64 [cams, 4]: fx, fy, cx, cy
//!   extrinsics.dva      f64 [cams, 4, 4], row-major camera-to-ego
//!   boxes.dva           f64 [K, 11]: cx cy cz l w h yaw vx vy class instance
//!   futures.dva         f64 [K, horizon, 2]
//!   seg.dva             u8  [S, S]
//!   occ.dva             u8  [X, Y, Z]
//!   ego_future.dva      f64 [horizon, 2]
//!   ego_state.dva       f64 [14]: history 4x2, velocity 2, accel 2, waypoint 2
//! ```
//!
//! Array files start with magic `DVA1`, one dtype byte (0 = f64, 1 = u8,
//! 2 = i32), one rank byte, rank u32 little-endian dims, then the payload in
//! little-endian order. Image channels are stored as round(value * 255);
//! loading divides by 255, which reproduces the generator's quantized values
//! bit-exactly.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use duoview_tensor::Array;

use crate::geometry::{Intrinsics, Mat4};
use crate::CoreError;

use super::{BoxGt, EgoState, FrameSequence, GroundTruth, MultiViewFrame, SceneSpec, EGO_HISTORY_LEN};

const MAGIC: [u8; 4] = *b"DVA1";
const FORMAT: &str = "scene-dataset-v1";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U8(_) => 1,
            Payload::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }
}

pub fn write_dva(path: &Path, dims: &[usize], payload: &Payload) -> Result<(), CoreError> {
    let n: usize = dims.iter().product();
    assert_eq!(n, payload.len(), "dims {dims:?} disagree with payload length {}", payload.len());
    let ctx = || path.display().to_string();
    let f = fs::File::create(path).map_err(CoreError::io(ctx()))?;
    let mut w = BufWriter::new(f);
    let mut io = |buf: &[u8]| w.write_all(buf).map_err(CoreError::io(ctx()));
    io(&MAGIC)?;
    io(&[payload.dtype(), dims.len() as u8])?;
    for &d in dims {
        io(&(d as u32).to_le_bytes())?;
    }
    match payload {
        Payload::F64(v) => {
            for x in v {
                io(&x.to_le_bytes())?;
            }
        }
        Payload::U8(v) => io(v)?,
        Payload::I32(v) => {
            for x in v {
                io(&x.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(CoreError::io(ctx()))
}

pub fn read_dva(path: &Path) -> Result<(Vec<usize>, Payload), CoreError> {
    let ctx = || path.display().to_string();
    let f = fs::File::open(path).map_err(CoreError::io(ctx()))?;
    let mut r = BufReader::new(f);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(CoreError::io(ctx()))?;
    if head[..4] != MAGIC {
        return Err(CoreError::Format { path: ctx(), detail: "bad magic".into() });
    }
    let dtype = head[4];
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(CoreError::io(ctx()))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let payload = match dtype {
        0 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(CoreError::io(ctx()))?;
            Payload::F64(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(CoreError::io(ctx()))?;
            Payload::U8(buf)
        }
        2 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(CoreError::io(ctx()))?;
            Payload::I32(buf.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        other => {
            return Err(CoreError::Format { path: ctx(), detail: format!("unknown dtype {other}") })
        }
    };
    Ok((dims, payload))
}

fn mat4_rows(m: &Mat4) -> Vec<f64> {
    let mut out = Vec::with_capacity(16);
    for r in 0..4 {
        for c in 0..4 {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn mat4_from_rows(v: &[f64]) -> Mat4 {
    let mut m = Mat4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = v[r * 4 + c];
        }
    }
    m
}

fn frame_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("frame_{t:04}"))
}

pub fn save_scene(
    root: &Path,
    spec: &SceneSpec,
    seq: &FrameSequence,
    gts: &[GroundTruth],
) -> Result<(), CoreError> {
    fs::create_dir_all(root).map_err(CoreError::io(root.display().to_string()))?;
    let spec_json = serde_json::to_string(spec)
        .map_err(|e| CoreError::Format { path: root.display().to_string(), detail: e.to_string() })?;
    let manifest = format!(
        "format = {FORMAT}\nn_frames = {}\nspec = {}\n",
        seq.frames.len(),
        spec_json
    );
    fs::write(root.join("manifest.txt"), manifest)
        .map_err(CoreError::io(root.join("manifest.txt").display().to_string()))?;

    let (h, w) = spec.image_size;
    let cams = spec.n_cameras;
    for (t, (frame, gt)) in seq.frames.iter().zip(gts).enumerate() {
        let dir = frame_dir(root, t);
        fs::create_dir_all(&dir).map_err(CoreError::io(dir.display().to_string()))?;
        let img_u8: Vec<u8> =
            frame.images.data().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        write_dva(&dir.join("images.dva"), &[cams, 3, h, w], &Payload::U8(img_u8))?;
        write_dva(&dir.join("depth.dva"), &[cams, h, w], &Payload::F64(frame.depths.data().to_vec()))?;
        write_dva(&dir.join("instances.dva"), &[cams, h, w], &Payload::I32(frame.instance_ids.clone()))?;
        write_dva(&dir.join("ego_pose.dva"), &[4, 4], &Payload::F64(mat4_rows(&seq.ego_poses[t])))?;
        let intr: Vec<f64> = frame.intrinsics.iter().flat_map(|i| i.flat()).collect();
        write_dva(&dir.join("intrinsics.dva"), &[cams, 4], &Payload::F64(intr))?;
        let ext: Vec<f64> = frame.cam_to_ego.iter().flat_map(|m| mat4_rows(m)).collect();
        write_dva(&dir.join("extrinsics.dva"), &[cams, 4, 4], &Payload::F64(ext))?;

        let mut boxes = Vec::with_capacity(gt.boxes.len() * 11);
        for b in &gt.boxes {
            boxes.extend_from_slice(&[
                b.center[0],
                b.center[1],
                b.center[2],
                b.size[0],
                b.size[1],
                b.size[2],
                b.yaw,
                b.velocity[0],
                b.velocity[1],
                b.class_id as f64,
                b.instance as f64,
            ]);
        }
        write_dva(&dir.join("boxes.dva"), &[gt.boxes.len(), 11], &Payload::F64(boxes))?;
        let futs: Vec<f64> =
            gt.futures.iter().flatten().flat_map(|p| [p[0], p[1]]).collect();
        write_dva(&dir.join("futures.dva"), &[gt.boxes.len(), spec.horizon_t, 2], &Payload::F64(futs))?;
        let s = spec.seg_grid.side();
        write_dva(&dir.join("seg.dva"), &[s, s], &Payload::U8(gt.bev_seg.clone()))?;
        let [x, y, z] = spec.occ_voxels.dims();
        write_dva(&dir.join("occ.dva"), &[x, y, z], &Payload::U8(gt.occ.clone()))?;
        let ef: Vec<f64> = gt.ego_future.iter().flat_map(|p| [p[0], p[1]]).collect();
        write_dva(&dir.join("ego_future.dva"), &[spec.horizon_t, 2], &Payload::F64(ef))?;
        let st = &gt.ego_state;
        let mut es: Vec<f64> = st.history.iter().flat_map(|p| [p[0], p[1]]).collect();
        es.extend_from_slice(&st.velocity);
        es.extend_from_slice(&st.accel);
        es.extend_from_slice(&st.nav_waypoint);
        write_dva(&dir.join("ego_state.dva"), &[EGO_HISTORY_LEN * 2 + 6], &Payload::F64(es))?;
    }
    Ok(())
}

fn manifest_value<'a>(manifest: &'a str, key: &str, path: &Path) -> Result<&'a str, CoreError> {
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return Ok(v.trim());
            }
        }
    }
    Err(CoreError::Format {
        path: path.display().to_string(),
        detail: format!("manifest missing key {key}"),
    })
}

fn expect_f64(payload: Payload, path: &Path) -> Result<Vec<f64>, CoreError> {
    match payload {
        Payload::F64(v) => Ok(v),
        _ => Err(CoreError::Format { path: path.display().to_string(), detail: "expected f64 payload".into() }),
    }
}

fn expect_u8(payload: Payload, path: &Path) -> Result<Vec<u8>, CoreError> {
    match payload {
        Payload::U8(v) => Ok(v),
        _ => Err(CoreError::Format { path: path.display().to_string(), detail: "expected u8 payload".into() }),
    }
}

fn expect_i32(payload: Payload, path: &Path) -> Result<Vec<i32>, CoreError> {
    match payload {
        Payload::I32(v) => Ok(v),
        _ => Err(CoreError::Format { path: path.display().to_string(), detail: "expected i32 payload".into() }),
    }
}

pub fn load_scene(root: &Path) -> Result<(SceneSpec, FrameSequence, Vec<GroundTruth>), CoreError> {
    let mpath = root.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(CoreError::io(mpath.display().to_string()))?;
    let format = manifest_value(&manifest, "format", &mpath)?;
    if format != FORMAT {
        return Err(CoreError::Format {
            path: mpath.display().to_string(),
            detail: format!("unsupported format {format}"),
        });
    }
    let n_frames: usize = manifest_value(&manifest, "n_frames", &mpath)?
        .parse()
        .map_err(|e| CoreError::Format { path: mpath.display().to_string(), detail: format!("n_frames: {e}") })?;
    let spec: SceneSpec = serde_json::from_str(manifest_value(&manifest, "spec", &mpath)?)
        .map_err(|e| CoreError::Format { path: mpath.display().to_string(), detail: format!("spec: {e}") })?;

    let (h, w) = spec.image_size;
    let cams = spec.n_cameras;
    let mut frames = Vec::with_capacity(n_frames);
    let mut ego_poses = Vec::with_capacity(n_frames);
    let mut timestamps = Vec::with_capacity(n_frames);
    let mut gts = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let dir = frame_dir(root, t);
        let p = dir.join("images.dva");
        let (dims, payload) = read_dva(&p)?;
        if dims != [cams, 3, h, w] {
            return Err(CoreError::Format {
                path: p.display().to_string(),
                detail: format!("image dims {dims:?} disagree with spec"),
            });
        }
        let images = Array::new(
            vec![cams, 3, h, w],
            expect_u8(payload, &p)?.iter().map(|&b| b as f64 / 255.0).collect(),
        )?;
        let p = dir.join("depth.dva");
        let (_, payload) = read_dva(&p)?;
        let depths = Array::new(vec![cams, h, w], expect_f64(payload, &p)?)?;
        let p = dir.join("instances.dva");
        let (_, payload) = read_dva(&p)?;
        let instance_ids = expect_i32(payload, &p)?;
        let p = dir.join("ego_pose.dva");
        let (_, payload) = read_dva(&p)?;
        ego_poses.push(mat4_from_rows(&expect_f64(payload, &p)?));
        let p = dir.join("intrinsics.dva");
        let (_, payload) = read_dva(&p)?;
        let intr_flat = expect_f64(payload, &p)?;
        let intrinsics: Vec<Intrinsics> = intr_flat
            .chunks_exact(4)
            .map(|c| Intrinsics { fx: c[0], fy: c[1], cx: c[2], cy: c[3] })
            .collect();
        let p = dir.join("extrinsics.dva");
        let (_, payload) = read_dva(&p)?;
        let cam_to_ego: Vec<Mat4> = expect_f64(payload, &p)?.chunks_exact(16).map(mat4_from_rows).collect();

        let p = dir.join("boxes.dva");
        let (bdims, payload) = read_dva(&p)?;
        let braw = expect_f64(payload, &p)?;
        let boxes: Vec<BoxGt> = braw
            .chunks_exact(11)
            .map(|c| BoxGt {
                center: [c[0], c[1], c[2]],
                size: [c[3], c[4], c[5]],
                yaw: c[6],
                velocity: [c[7], c[8]],
                class_id: c[9] as usize,
                instance: c[10] as u32,
            })
            .collect();
        let p = dir.join("futures.dva");
        let (_, payload) = read_dva(&p)?;
        let fraw = expect_f64(payload, &p)?;
        let futures: Vec<Vec<[f64; 2]>> = (0..bdims[0])
            .map(|k| {
                (0..spec.horizon_t)
                    .map(|s| {
                        let off = (k * spec.horizon_t + s) * 2;
                        [fraw[off], fraw[off + 1]]
                    })
                    .collect()
            })
            .collect();
        let p = dir.join("seg.dva");
        let (_, payload) = read_dva(&p)?;
        let bev_seg = expect_u8(payload, &p)?;
        let p = dir.join("occ.dva");
        let (_, payload) = read_dva(&p)?;
        let occ = expect_u8(payload, &p)?;
        let p = dir.join("ego_future.dva");
        let (_, payload) = read_dva(&p)?;
        let ef = expect_f64(payload, &p)?;
        let ego_future: Vec<[f64; 2]> = ef.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let p = dir.join("ego_state.dva");
        let (_, payload) = read_dva(&p)?;
        let es = expect_f64(payload, &p)?;
        let nh = EGO_HISTORY_LEN;
        let ego_state = EgoState {
            history: (0..nh).map(|k| [es[2 * k], es[2 * k + 1]]).collect(),
            velocity: [es[2 * nh], es[2 * nh + 1]],
            accel: [es[2 * nh + 2], es[2 * nh + 3]],
            nav_waypoint: [es[2 * nh + 4], es[2 * nh + 5]],
        };

        frames.push(MultiViewFrame { images, depths, instance_ids, intrinsics, cam_to_ego });
        timestamps.push(t as f64 * spec.dt);
        gts.push(GroundTruth { boxes, bev_seg, occ, futures, ego_future, ego_state });
    }
    Ok((spec, FrameSequence { frames, ego_poses, timestamps }, gts))
}
