//! Deterministic synthetic multi-camera driving scenes with dense ground
//! truth: 3D boxes, BEV semantic maps, voxel occupancy, agent futures, and
//! rule-based ego futures.
//!
//! The world is a straight road along world +x. The ego drives in the right
//! lane at constant speed; other agents follow constant-velocity kinematics
//! with per-step Gaussian velocity noise. Images are ray-cast renders of the
//! textured ground plane and colored agent boxes, so depth and geometry are
//! recoverable from pixels.

pub mod dataset;
pub mod render;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use duoview_tensor::Array;

use crate::geometry::{obb_overlap, pose_2d, transform_point, GridSpec, Intrinsics, Mat4, Vec3, VoxelSpec};
use crate::CoreError;

pub const SEG_BACKGROUND: u8 = 0;
pub const SEG_VEHICLE: u8 = 1;
pub const SEG_DRIVABLE: u8 = 2;
pub const SEG_DIVIDER: u8 = 3;
pub const SEG_CLASSES: usize = 4;

pub const OCC_FREE: u8 = 0;
pub const OCC_CAR: u8 = 1;
pub const OCC_PED: u8 = 2;
pub const OCC_DRIVABLE: u8 = 3;
pub const OCC_DIVIDER: u8 = 4;
pub const OCC_CLASSES: usize = 5;

pub const CLASS_CAR: usize = 0;
pub const CLASS_PED: usize = 1;
pub const N_DET_CLASSES: usize = 2;

/// World-frame road layout: road centered on y = 0 along +x.
pub const ROAD_HALF_WIDTH: f64 = 7.0;
pub const DIVIDER_YS: [f64; 3] = [-3.5, 0.0, 3.5];
pub const DIVIDER_HALF_WIDTH: f64 = 0.3;
/// Ego cruises in the right lane.
pub const EGO_LANE_Y: f64 = -1.75;
pub const CAMERA_HEIGHT: f64 = 1.6;

pub const EGO_LENGTH: f64 = 4.0;
pub const EGO_WIDTH: f64 = 1.8;
/// Ego positions fed to the planner: 3 past plus the current one.
pub const EGO_HISTORY_LEN: usize = 4;

/// Candidate speed scalings tried by the ego future rule, in order.
pub const EGO_SPEED_MULTS: [f64; 4] = [1.0, 0.6, 0.3, 0.0];
/// Minimum center-to-center clearance for a candidate ego future to be safe.
pub const SAFE_CLEARANCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapComplexity {
    /// Untextured classes: everything off-road.
    Simple,
    /// Drivable band, no dividers.
    Roads,
    /// Drivable band plus lane dividers.
    RoadsDividers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub n_cameras: usize,
    /// (height, width), both divisible by 16.
    pub image_size: (usize, usize),
    pub n_objects: usize,
    pub map_complexity: MapComplexity,
    /// Uniformly sampled per scene, m/s.
    pub ego_speed_range: (f64, f64),
    /// Future steps for agent and ego trajectories.
    pub horizon_t: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Per-step Gaussian velocity perturbation, m/s.
    #[serde(default = "default_vel_noise")]
    pub vel_noise_std: f64,
    #[serde(default = "default_seg_grid")]
    pub seg_grid: GridSpec,
    #[serde(default = "default_occ_voxels")]
    pub occ_voxels: VoxelSpec,
}

fn default_dt() -> f64 {
    0.5
}

fn default_vel_noise() -> f64 {
    0.2
}

fn default_seg_grid() -> GridSpec {
    GridSpec { extent: 25.6, cell: 0.8 }
}

fn default_occ_voxels() -> VoxelSpec {
    VoxelSpec { xy: GridSpec { extent: 25.6, cell: 0.4 }, z_min: -1.0, z_max: 3.0, z_cell: 1.0 }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if self.n_cameras < 1 {
            problems.push(format!("n_cameras must be >= 1, got {}", self.n_cameras));
        }
        if self.n_frames < 1 {
            problems.push(format!("n_frames must be >= 1, got {}", self.n_frames));
        }
        let (h, w) = self.image_size;
        if h < 16 || h % 16 != 0 {
            problems.push(format!("image height must be a positive multiple of 16, got {h}"));
        }
        if w < 16 || w % 16 != 0 {
            problems.push(format!("image width must be a positive multiple of 16, got {w}"));
        }
        if self.horizon_t < 1 {
            problems.push(format!("horizon_t must be >= 1, got {}", self.horizon_t));
        }
        let (lo, hi) = self.ego_speed_range;
        if !(lo >= 0.0 && hi >= lo) {
            problems.push(format!("ego_speed_range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"));
        }
        if !(self.dt > 0.0) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.vel_noise_std >= 0.0) {
            problems.push(format!("vel_noise_std must be >= 0, got {}", self.vel_noise_std));
        }
        if let Err(CoreError::Validation { problems: p, .. }) = self.seg_grid.validate() {
            problems.extend(p.into_iter().map(|m| format!("seg_grid: {m}")));
        }
        if let Err(CoreError::Validation { problems: p, .. }) = self.occ_voxels.validate() {
            problems.extend(p.into_iter().map(|m| format!("occ_voxels: {m}")));
        }
        if (self.seg_grid.extent - self.occ_voxels.xy.extent).abs() > 1e-9 {
            problems.push(format!(
                "seg grid extent {} must equal occupancy extent {}",
                self.seg_grid.extent, self.occ_voxels.xy.extent
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "scene spec".into(), problems })
        }
    }

    /// Shared BEV half-extent used for ground-truth inclusion.
    pub fn extent(&self) -> f64 {
        self.occ_voxels.xy.extent
    }
}

/// One ground-truth 3D box in the frame's ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxGt {
    /// Center xyz; boxes rest on the ground, so z = height / 2.
    pub center: [f64; 3],
    /// Length (along yaw), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
    /// Ground velocity in the current ego frame's axes.
    pub velocity: [f64; 2],
    pub class_id: usize,
    /// Stable id across frames; matches rendered instance masks.
    pub instance: u32,
}

#[derive(Debug, Clone)]
pub struct MultiViewFrame {
    /// [cams, 3, H, W], values quantized to 1/255 steps.
    pub images: Array,
    /// [cams, H, W] camera-frame z depth; 0 marks sky (no geometry).
    pub depths: Array,
    /// cams*H*W hit instance per pixel; -1 for ground and sky.
    pub instance_ids: Vec<i32>,
    pub intrinsics: Vec<Intrinsics>,
    pub cam_to_ego: Vec<Mat4>,
}

#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<MultiViewFrame>,
    /// Ego-to-world poses.
    pub ego_poses: Vec<Mat4>,
    pub timestamps: Vec<f64>,
}

impl FrameSequence {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if self.frames.len() != self.ego_poses.len() || self.frames.len() != self.timestamps.len() {
            problems.push(format!(
                "frames/ego_poses/timestamps lengths differ: {}/{}/{}",
                self.frames.len(),
                self.ego_poses.len(),
                self.timestamps.len()
            ));
        }
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                problems.push(format!("timestamps not strictly increasing at index {i}"));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            for (c, m) in f.cam_to_ego.iter().enumerate() {
                if m.try_inverse().is_none() {
                    problems.push(format!("frame {i} camera {c} extrinsics not invertible"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "frame sequence".into(), problems })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoState {
    /// EGO_HISTORY_LEN positions in the current ego frame, oldest first; the
    /// last entry is always (0, 0).
    pub history: Vec<[f64; 2]>,
    pub velocity: [f64; 2],
    pub accel: [f64; 2],
    pub nav_waypoint: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub boxes: Vec<BoxGt>,
    /// [S, S] class labels, index ix * S + iy; x right, y up in ego frame.
    pub bev_seg: Vec<u8>,
    /// [X, Y, Z] labels, index (ix * Y + iy) * Z + iz.
    pub occ: Vec<u8>,
    /// Per box: horizon_t future (x, y) in the current ego frame.
    pub futures: Vec<Vec<[f64; 2]>>,
    pub ego_future: Vec<[f64; 2]>,
    pub ego_state: EgoState,
}

impl GroundTruth {
    pub fn validate(&self, spec: &SceneSpec) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        let extent = spec.extent();
        for (i, b) in self.boxes.iter().enumerate() {
            if b.center[0].abs() >= extent || b.center[1].abs() >= extent {
                problems.push(format!("box {i} center outside extent {extent}"));
            }
        }
        if self.occ.len() != spec.occ_voxels.n_voxels() {
            problems.push(format!(
                "occ grid has {} cells, expected {}",
                self.occ.len(),
                spec.occ_voxels.n_voxels()
            ));
        }
        if self.bev_seg.len() != spec.seg_grid.n_cells() {
            problems.push(format!(
                "seg grid has {} cells, expected {}",
                self.bev_seg.len(),
                spec.seg_grid.n_cells()
            ));
        }
        if self.futures.len() != self.boxes.len() {
            problems.push("futures not aligned with boxes".into());
        }
        for (i, f) in self.futures.iter().enumerate() {
            if f.len() != spec.horizon_t {
                problems.push(format!("future {i} has {} steps, expected {}", f.len(), spec.horizon_t));
            }
        }
        if self.ego_future.len() != spec.horizon_t {
            problems.push(format!(
                "ego_future has {} steps, expected {}",
                self.ego_future.len(),
                spec.horizon_t
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "ground truth".into(), problems })
        }
    }
}

/// Surface class of the analytic world map at a world point.
pub fn map_surface(wx: f64, wy: f64, complexity: MapComplexity) -> u8 {
    let _ = wx;
    match complexity {
        MapComplexity::Simple => SEG_BACKGROUND,
        MapComplexity::Roads => {
            if wy.abs() <= ROAD_HALF_WIDTH {
                SEG_DRIVABLE
            } else {
                SEG_BACKGROUND
            }
        }
        MapComplexity::RoadsDividers => {
            for dy in DIVIDER_YS {
                if (wy - dy).abs() <= DIVIDER_HALF_WIDTH {
                    return SEG_DIVIDER;
                }
            }
            if wy.abs() <= ROAD_HALF_WIDTH {
                SEG_DRIVABLE
            } else {
                SEG_BACKGROUND
            }
        }
    }
}

/// Whether (px, py) lies inside the box footprint (same frame as the box).
pub fn point_in_box_xy(px: f64, py: f64, b: &BoxGt) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let dx = px - b.center[0];
    let dy = py - b.center[1];
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0
}

/// Evenly spaced ring of cameras; camera 0 faces ego +x. Horizontal FOV is
/// about 108 degrees (fx = 0.36 * width).
pub fn camera_rig(n_cameras: usize, image_size: (usize, usize)) -> (Vec<Intrinsics>, Vec<Mat4>) {
    let (h, w) = image_size;
    let fx = 0.36 * w as f64;
    let intr = Intrinsics { fx, fy: fx, cx: w as f64 / 2.0, cy: h as f64 / 2.0 };
    let mut intrinsics = Vec::with_capacity(n_cameras);
    let mut extrinsics = Vec::with_capacity(n_cameras);
    for i in 0..n_cameras {
        let yaw = std::f64::consts::TAU * i as f64 / n_cameras as f64;
        // Optical axes map as: camera x -> ego -y, camera y -> ego -z,
        // camera z -> ego +x, then the whole camera is yawed and lifted.
        let base = Mat4::new(
            0.0, 0.0, 1.0, 0.5, //
            -1.0, 0.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, CAMERA_HEIGHT, //
            0.0, 0.0, 0.0, 1.0,
        );
        intrinsics.push(intr);
        extrinsics.push(pose_2d(0.0, 0.0, yaw) * base);
    }
    (intrinsics, extrinsics)
}

struct Agent {
    class_id: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    yaw: f64,
    size: [f64; 3],
}

impl Agent {
    fn half_xy(&self) -> (f64, f64) {
        (self.size[0] / 2.0, self.size[1] / 2.0)
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn spawn_agents(spec: &SceneSpec, rng: &mut ChaCha12Rng, ego_speed: f64) -> Vec<Agent> {
    let extent = spec.extent();
    let mid_x = ego_speed * spec.dt * (spec.n_frames.saturating_sub(1)) as f64 / 2.0;
    let lane_centers = [-5.25, -1.75, 1.75, 5.25];
    let mut agents: Vec<Agent> = Vec::with_capacity(spec.n_objects);
    for i in 0..spec.n_objects {
        let class_id = if i % 3 == 2 { CLASS_PED } else { CLASS_CAR };
        let crosser = class_id == CLASS_CAR && i % 4 == 1;
        let mut candidate = None;
        for _attempt in 0..20 {
            let a = if class_id == CLASS_PED {
                let speed = rng.gen_range(0.5..1.5);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                Agent {
                    class_id,
                    pos: [mid_x + rng.gen_range(-0.8..0.8) * extent, rng.gen_range(-8.0..8.0)],
                    vel: [speed * angle.cos(), speed * angle.sin()],
                    yaw: angle,
                    size: [rng.gen_range(0.5..0.7), rng.gen_range(0.5..0.7), rng.gen_range(1.6..1.8)],
                }
            } else if crosser {
                // Heads across the road ahead of the ego to force avoidance.
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let vel = [rng.gen_range(-0.5..0.5), -side * rng.gen_range(1.0..3.0)];
                Agent {
                    class_id,
                    pos: [rng.gen_range(0.3..0.9) * extent, side * rng.gen_range(4.0..(0.7 * extent))],
                    vel,
                    yaw: vel[1].atan2(vel[0]),
                    size: [rng.gen_range(4.2..4.8), rng.gen_range(1.7..1.9), rng.gen_range(1.4..1.6)],
                }
            } else {
                let lane = lane_centers[rng.gen_range(0..lane_centers.len())];
                let y = lane + rng.gen_range(-0.4..0.4);
                // Right-hand traffic: lanes left of center run the other way.
                let dir = if lane < 0.0 { 1.0 } else { -1.0 };
                let vel = [dir * rng.gen_range(2.0..6.0), 0.0];
                Agent {
                    class_id,
                    pos: [mid_x + rng.gen_range(-0.85..0.85) * extent, y],
                    vel,
                    yaw: vel[1].atan2(vel[0]),
                    size: [rng.gen_range(4.2..4.8), rng.gen_range(1.7..1.9), rng.gen_range(1.4..1.6)],
                }
            };
            let clear_of_ego = !obb_overlap(
                (a.pos[0], a.pos[1]),
                a.half_xy(),
                a.yaw,
                (0.0, EGO_LANE_Y),
                (EGO_LENGTH, EGO_WIDTH),
                0.0,
            );
            let clear_of_agents = agents.iter().all(|b| {
                !obb_overlap((a.pos[0], a.pos[1]), a.half_xy(), a.yaw, (b.pos[0], b.pos[1]), b.half_xy(), b.yaw)
            });
            let accepted = clear_of_ego && clear_of_agents;
            candidate = Some(a);
            if accepted {
                break;
            }
        }
        agents.push(candidate.expect("at least one spawn attempt"));
    }
    agents
}

fn to_ego_xy(world_to_ego: &Mat4, p: [f64; 2]) -> [f64; 2] {
    let q = transform_point(world_to_ego, Vec3::new(p[0], p[1], 0.0));
    [q.x, q.y]
}

/// Rule-based safe ego future: the first speed scaling whose straight-ahead
/// rollout stays at least SAFE_CLEARANCE from every agent future, matched
/// step by step; falls back to a full stop.
fn ego_future_rule(
    ego_world: [f64; 2],
    ego_speed: f64,
    dt: f64,
    horizon: usize,
    agent_futures_world: &[Vec<[f64; 2]>],
) -> Vec<[f64; 2]> {
    for mult in EGO_SPEED_MULTS {
        let mut safe = true;
        'steps: for k in 1..=horizon {
            let ex = ego_world[0] + ego_speed * mult * k as f64 * dt;
            let ey = ego_world[1];
            for fut in agent_futures_world {
                let p = fut[k - 1];
                let d = ((p[0] - ex).powi(2) + (p[1] - ey).powi(2)).sqrt();
                if d < SAFE_CLEARANCE {
                    safe = false;
                    break 'steps;
                }
            }
        }
        if safe || mult == 0.0 {
            return (1..=horizon).map(|k| [ego_speed * mult * k as f64 * dt, 0.0]).collect();
        }
    }
    unreachable!("the zero multiplier always returns")
}

fn rasterize_seg(spec: &SceneSpec, ego_to_world: &Mat4, boxes: &[BoxGt]) -> Vec<u8> {
    let g = spec.seg_grid;
    let side = g.side();
    let mut out = vec![SEG_BACKGROUND; side * side];
    let cars: Vec<&BoxGt> = boxes.iter().filter(|b| b.class_id == CLASS_CAR).collect();
    for ix in 0..side {
        for iy in 0..side {
            let (x, y) = g.cell_center(ix, iy);
            let w = transform_point(ego_to_world, Vec3::new(x, y, 0.0));
            let mut label = map_surface(w.x, w.y, spec.map_complexity);
            // Cells are marked vehicle when the cell rectangle overlaps the
            // footprint, so every car-occupied voxel column maps to a
            // vehicle cell even when the grids have different resolutions.
            let half = g.cell / 2.0;
            for b in &cars {
                if obb_overlap(
                    (x, y),
                    (half, half),
                    0.0,
                    (b.center[0], b.center[1]),
                    (b.size[0] / 2.0, b.size[1] / 2.0),
                    b.yaw,
                ) {
                    label = SEG_VEHICLE;
                    break;
                }
            }
            out[ix * side + iy] = label;
        }
    }
    out
}

fn rasterize_occ(spec: &SceneSpec, ego_to_world: &Mat4, boxes: &[BoxGt]) -> Vec<u8> {
    let v = spec.occ_voxels;
    let side = v.xy.side();
    let layers = v.z_layers();
    let mut out = vec![OCC_FREE; side * side * layers];
    // Road surface occupies the layer just under z = 0.
    let ground_layer = v.z_index(-v.z_cell / 2.0).or_else(|| v.z_index(v.z_cell / 2.0));
    for ix in 0..side {
        for iy in 0..side {
            let (x, y) = v.xy.cell_center(ix, iy);
            let col = (ix * side + iy) * layers;
            let w = transform_point(ego_to_world, Vec3::new(x, y, 0.0));
            if let Some(gl) = ground_layer {
                out[col + gl] = match map_surface(w.x, w.y, spec.map_complexity) {
                    SEG_DRIVABLE => OCC_DRIVABLE,
                    SEG_DIVIDER => OCC_DIVIDER,
                    _ => OCC_FREE,
                };
            }
            for b in boxes {
                if !point_in_box_xy(x, y, b) {
                    continue;
                }
                let z0 = b.center[2] - b.size[2] / 2.0;
                let z1 = b.center[2] + b.size[2] / 2.0;
                let cls = if b.class_id == CLASS_CAR { OCC_CAR } else { OCC_PED };
                for iz in 0..layers {
                    let lz0 = v.z_min + iz as f64 * v.z_cell;
                    let lz1 = lz0 + v.z_cell;
                    if lz1 > z0 && lz0 < z1 && !(out[col + iz] == OCC_CAR && cls == OCC_PED) {
                        out[col + iz] = cls;
                    }
                }
            }
        }
    }
    out
}

/// Generates one scene. Pure function of the spec: identical specs yield
/// bit-identical outputs.
pub fn generate_scene(spec: &SceneSpec) -> Result<(FrameSequence, Vec<GroundTruth>), CoreError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.ego_speed_range;
    let ego_speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let mut agents = spawn_agents(spec, &mut rng, ego_speed);
    let (intrinsics, cam_to_ego) = camera_rig(spec.n_cameras, spec.image_size);

    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut ego_poses = Vec::with_capacity(spec.n_frames);
    let mut timestamps = Vec::with_capacity(spec.n_frames);
    let mut gts = Vec::with_capacity(spec.n_frames);
    let mut ego_world_history: Vec<[f64; 2]> = Vec::with_capacity(spec.n_frames);

    for t in 0..spec.n_frames {
        let ego_world = [ego_speed * t as f64 * spec.dt, EGO_LANE_Y];
        let ego_to_world = pose_2d(ego_world[0], ego_world[1], 0.0);
        let world_to_ego = ego_to_world.try_inverse().expect("pose invertible");
        ego_world_history.push(ego_world);

        // All agents in ego coordinates; rendering sees everything, ground
        // truth keeps only boxes whose center lies inside the BEV extent.
        let all_boxes: Vec<BoxGt> = agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let c = to_ego_xy(&world_to_ego, a.pos);
                BoxGt {
                    center: [c[0], c[1], a.size[2] / 2.0],
                    size: a.size,
                    yaw: a.yaw,
                    velocity: a.vel,
                    class_id: a.class_id,
                    instance: i as u32,
                }
            })
            .collect();
        let extent = spec.extent();
        let kept: Vec<usize> = (0..all_boxes.len())
            .filter(|&i| {
                all_boxes[i].center[0].abs() < extent && all_boxes[i].center[1].abs() < extent
            })
            .collect();
        let boxes: Vec<BoxGt> = kept.iter().map(|&i| all_boxes[i].clone()).collect();

        // Noise-free constant-velocity futures, in world then ego frame.
        let futures_world: Vec<Vec<[f64; 2]>> = agents
            .iter()
            .map(|a| {
                (1..=spec.horizon_t)
                    .map(|k| {
                        let s = k as f64 * spec.dt;
                        [a.pos[0] + a.vel[0] * s, a.pos[1] + a.vel[1] * s]
                    })
                    .collect()
            })
            .collect();
        let futures: Vec<Vec<[f64; 2]>> = kept
            .iter()
            .map(|&i| futures_world[i].iter().map(|p| to_ego_xy(&world_to_ego, *p)).collect())
            .collect();

        let ego_future = ego_future_rule(ego_world, ego_speed, spec.dt, spec.horizon_t, &futures_world);

        let start = ego_world_history.len().saturating_sub(EGO_HISTORY_LEN);
        let mut history: Vec<[f64; 2]> =
            ego_world_history[start..].iter().map(|p| to_ego_xy(&world_to_ego, *p)).collect();
        while history.len() < EGO_HISTORY_LEN {
            history.insert(0, history[0]);
        }

        let gt = GroundTruth {
            bev_seg: rasterize_seg(spec, &ego_to_world, &boxes),
            occ: rasterize_occ(spec, &ego_to_world, &boxes),
            futures,
            ego_future,
            ego_state: EgoState {
                history,
                velocity: [ego_speed, 0.0],
                accel: [0.0, 0.0],
                nav_waypoint: [20.0, 0.0],
            },
            boxes,
        };

        let view = render::render_views(
            &intrinsics,
            &cam_to_ego,
            spec.image_size,
            &all_boxes,
            &ego_to_world,
            spec.map_complexity,
        );
        frames.push(MultiViewFrame {
            images: view.images,
            depths: view.depths,
            instance_ids: view.instances,
            intrinsics: intrinsics.clone(),
            cam_to_ego: cam_to_ego.clone(),
        });
        ego_poses.push(ego_to_world);
        timestamps.push(t as f64 * spec.dt);
        gts.push(gt);

        for a in &mut agents {
            a.vel[0] += spec.vel_noise_std * gauss(&mut rng);
            a.vel[1] += spec.vel_noise_std * gauss(&mut rng);
            a.pos[0] += a.vel[0] * spec.dt;
            a.pos[1] += a.vel[1] * spec.dt;
            if a.vel[0].hypot(a.vel[1]) > 1e-6 {
                a.yaw = a.vel[1].atan2(a.vel[0]);
            }
        }
    }

    Ok((FrameSequence { frames, ego_poses, timestamps }, gts))
}
