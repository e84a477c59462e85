//! Image encoding: residual conv backbones with a feature pyramid, camera
//! aware depth distributions, and depth-weighted lifting of image features
//! into BEV or voxel grids.
//!
//! Two encoder capacities exist. The large one runs on a few recent frames
//! at full resolution, the small one on older frames at reduced resolution;
//! both emit pyramids with the same channel width so their lifted BEV maps
//! can be fused downstream.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use duoview_tensor::nn::{Conv2dLayer, LayerNorm, Linear, ParamStore, Session};
use duoview_tensor::TensorId;
use rand_chacha::ChaCha12Rng;

use crate::geometry::{unproject_from_camera, GridSpec, Intrinsics, Mat4, VoxelSpec};
use crate::scene::{FrameSequence, MultiViewFrame};
use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Large,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub capacity: Capacity,
    /// (height, width); both divisible by 16.
    pub input_resolution: (usize, usize),
    pub channels_per_stage: Vec<usize>,
    pub depth_bins: usize,
    /// Uniform bins over [min, max) meters.
    pub depth_range: (f64, f64),
    pub n_stages: usize,
}

impl EncoderConfig {
    pub fn default_large(input_resolution: (usize, usize)) -> Self {
        Self {
            capacity: Capacity::Large,
            input_resolution,
            channels_per_stage: vec![12, 24, 36, 48],
            depth_bins: 32,
            depth_range: (1.0, 30.0),
            n_stages: 4,
        }
    }

    pub fn default_small(input_resolution: (usize, usize)) -> Self {
        Self {
            capacity: Capacity::Small,
            input_resolution,
            channels_per_stage: vec![8, 16, 48],
            depth_bins: 16,
            depth_range: (1.0, 30.0),
            n_stages: 3,
        }
    }

    /// Residual blocks per stage follow the capacity.
    pub fn blocks_per_stage(&self) -> usize {
        match self.capacity {
            Capacity::Large => 2,
            Capacity::Small => 1,
        }
    }

    /// Channel width of all pyramid levels.
    pub fn fpn_channels(&self) -> usize {
        *self.channels_per_stage.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        let (h, w) = self.input_resolution;
        if h < 16 || h % 16 != 0 {
            problems.push(format!("input height must be a positive multiple of 16, got {h}"));
        }
        if w < 16 || w % 16 != 0 {
            problems.push(format!("input width must be a positive multiple of 16, got {w}"));
        }
        if self.depth_bins < 2 {
            problems.push(format!("depth_bins must be >= 2, got {}", self.depth_bins));
        }
        let (d0, d1) = self.depth_range;
        if !(d0 > 0.0 && d1 > d0) {
            problems.push(format!("depth_range must satisfy 0 < min < max, got ({d0}, {d1})"));
        }
        if !(self.n_stages == 3 || self.n_stages == 4) {
            problems.push(format!("n_stages must be 3 or 4, got {}", self.n_stages));
        }
        if self.channels_per_stage.len() != self.n_stages {
            problems.push(format!(
                "channels_per_stage has {} entries for {} stages",
                self.channels_per_stage.len(),
                self.n_stages
            ));
        }
        if self.channels_per_stage.iter().any(|&c| c == 0) {
            problems.push("channels_per_stage entries must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "encoder config".into(), problems })
        }
    }
}

/// Feature maps at strides 8, 16, 32 of the input. The stride-32 level uses
/// ceiling division when the input is not divisible by 32.
pub struct FeaturePyramid {
    /// (stride, tensor [C, h, w]) sorted by stride.
    pub levels: Vec<(usize, TensorId)>,
    pub source_frame: usize,
    pub source_camera: usize,
}

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> TensorId {
        self.levels
            .iter()
            .find(|(s, _)| *s == stride)
            .map(|(_, t)| *t)
            .unwrap_or_else(|| panic!("pyramid has no stride-{stride} level"))
    }
}

/// Per-pixel categorical depth at stride 16: [bins, h, w].
pub struct DepthDistribution {
    pub probs: TensorId,
    pub bins: usize,
    pub depth_range: (f64, f64),
}

impl DepthDistribution {
    pub fn bin_center(&self, b: usize) -> f64 {
        let (d0, d1) = self.depth_range;
        d0 + (b as f64 + 0.5) * (d1 - d0) / self.bins as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftMode {
    /// [C, X, Y]; contributions inside the z extent are summed over z.
    Bev,
    /// [C, X, Y, Z].
    Voxel,
}

/// Dense BEV features [C, X, Y] in this frame's ego coordinates.
pub struct BevFeatureMap {
    pub data: TensorId,
    pub grid: GridSpec,
    pub frame_index: usize,
}

pub struct VoxelFeatureMap {
    pub data: TensorId,
    pub spec: VoxelSpec,
    pub frame_index: usize,
}

/// Channelwise layer norm for [C, H, W] maps: normalizes each spatial
/// position over channels.
pub(crate) fn channel_norm(s: &mut Session, ln: &LayerNorm, x: TensorId) -> TensorId {
    let sh = s.g.shape(x).to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let x2 = s.g.reshape(x, &[c, h * w]);
    let xt = s.g.transpose2(x2);
    let y = ln.forward(s, xt);
    let yt = s.g.transpose2(y);
    s.g.reshape(yt, &[c, h, w])
}

struct ResBlock {
    ln: LayerNorm,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl ResBlock {
    fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, ch: usize) -> Self {
        Self {
            ln: LayerNorm::init(store, &format!("{name}.ln"), ch),
            conv1: Conv2dLayer::init(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2dLayer::init(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let h = channel_norm(s, &self.ln, x);
        let h = self.conv1.forward(s, h);
        let h = s.g.relu(h);
        let h = self.conv2.forward(s, h);
        s.g.add(x, h)
    }

    fn param_count(&self) -> usize {
        self.ln.param_count() + self.conv1.param_count() + self.conv2.param_count()
    }
}

struct Stage {
    down: Conv2dLayer,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let mut h = self.down.forward(s, x);
        h = s.g.relu(h);
        for b in &self.blocks {
            h = b.forward(s, h);
        }
        h
    }
}

pub struct EncoderNet {
    pub cfg: EncoderConfig,
    pub prefix: String,
    stem: Conv2dLayer,
    stages: Vec<Stage>,
    lat8: Conv2dLayer,
    lat16: Conv2dLayer,
    /// Lateral from the stride-32 stage (4-stage nets) or an extra
    /// downsampling conv from the stride-16 level (3-stage nets).
    lat32: Conv2dLayer,
    out8: Conv2dLayer,
    out16: Conv2dLayer,
    out32: Conv2dLayer,
    depth_conv1: Conv2dLayer,
    depth_conv2: Option<Conv2dLayer>,
    depth_out: Conv2dLayer,
    cam_proj: Linear,
}

impl EncoderNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cfg: EncoderConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let ch = &cfg.channels_per_stage;
        let f = cfg.fpn_channels();
        let stem = Conv2dLayer::init(store, rng, &format!("{prefix}.stem"), 3, ch[0], 3, 2, 1);
        let mut stages = Vec::with_capacity(cfg.n_stages);
        for i in 0..cfg.n_stages {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let name = format!("{prefix}.stage{i}");
            let down = Conv2dLayer::init(store, rng, &format!("{name}.down"), cin, ch[i], 3, 2, 1);
            let blocks = (0..cfg.blocks_per_stage())
                .map(|b| ResBlock::init(store, rng, &format!("{name}.block{b}"), ch[i]))
                .collect();
            stages.push(Stage { down, blocks });
        }
        // Stage strides are 4, 8, 16(, 32), so stages 1 and 2 feed the
        // stride-8 and stride-16 laterals for either stage count.
        let (c8, c16) = (ch[1], ch[2]);
        let lat8 = Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.lat8"), c8, f, 1, 1, 0);
        let lat16 = Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.lat16"), c16, f, 1, 1, 0);
        let lat32 = if cfg.n_stages == 4 {
            Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.lat32"), ch[3], f, 1, 1, 0)
        } else {
            Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.lat32"), f, f, 3, 2, 1)
        };
        let out8 = Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.out8"), f, f, 3, 1, 1);
        let out16 = Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.out16"), f, f, 3, 1, 1);
        let out32 = Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.out32"), f, f, 3, 1, 1);
        let depth_conv1 = Conv2dLayer::init(store, rng, &format!("{prefix}.depth.conv1"), f, f, 3, 1, 1);
        let depth_conv2 = match cfg.capacity {
            Capacity::Large => {
                Some(Conv2dLayer::init(store, rng, &format!("{prefix}.depth.conv2"), f, f, 3, 1, 1))
            }
            Capacity::Small => None,
        };
        let depth_out =
            Conv2dLayer::init(store, rng, &format!("{prefix}.depth.out"), f, cfg.depth_bins, 1, 1, 0);
        let cam_proj = Linear::init(store, rng, &format!("{prefix}.depth.cam_proj"), 20, f);
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            stem,
            stages,
            lat8,
            lat16,
            lat32,
            out8,
            out16,
            out32,
            depth_conv1,
            depth_conv2,
            depth_out,
            cam_proj,
        })
    }

    /// Image [3, H, W] to a pyramid at strides 8, 16, 32.
    pub fn encode_image(
        &self,
        s: &mut Session,
        img: TensorId,
        source_frame: usize,
        source_camera: usize,
    ) -> Result<FeaturePyramid, CoreError> {
        let (h, w) = self.cfg.input_resolution;
        let actual = s.g.shape(img).to_vec();
        if actual != [3, h, w] {
            return Err(CoreError::Shape {
                what: format!("{} input image", self.prefix),
                expected: vec![3, h, w],
                actual,
            });
        }
        let mut x = self.stem.forward(s, img);
        x = s.g.relu(x);
        let mut taps = Vec::with_capacity(self.cfg.n_stages);
        for st in &self.stages {
            x = st.forward(s, x);
            taps.push(x);
        }
        // taps strides: 3 stages -> [4, 8, 16]; 4 stages -> [4, 8, 16, 32].
        let t8 = taps[1];
        let t16 = taps[2];
        let l16 = self.lat16.forward(s, t16);
        let l8 = self.lat8.forward(s, t8);
        let up = s.g.upsample2x_nearest(l16);
        let m8 = s.g.add(l8, up);
        let p8 = self.out8.forward(s, m8);
        let p16 = self.out16.forward(s, l16);
        let l32 = if self.cfg.n_stages == 4 {
            self.lat32.forward(s, taps[3])
        } else {
            self.lat32.forward(s, l16)
        };
        let p32 = self.out32.forward(s, l32);
        Ok(FeaturePyramid {
            levels: vec![(8, p8), (16, p16), (32, p32)],
            source_frame,
            source_camera,
        })
    }

    /// Camera parameters flattened to a conditioning vector: intrinsics
    /// scaled by image size, extrinsic translations by 1/10, so every entry
    /// is O(1).
    fn camera_vector(&self, intr: &Intrinsics, cam_to_ego: &Mat4) -> Vec<f64> {
        let (h, w) = self.cfg.input_resolution;
        let mut v = vec![
            intr.fx / w as f64,
            intr.fy / w as f64,
            intr.cx / w as f64,
            intr.cy / h as f64,
        ];
        for r in 0..4 {
            for c in 0..4 {
                let x = cam_to_ego[(r, c)];
                v.push(if c == 3 { x / 10.0 } else { x });
            }
        }
        v
    }

    /// Per-pixel categorical depth over the stride-16 level.
    pub fn predict_depth(
        &self,
        s: &mut Session,
        pyramid: &FeaturePyramid,
        intr: &Intrinsics,
        cam_to_ego: &Mat4,
    ) -> DepthDistribution {
        let p16 = pyramid.level(16);
        let sh = s.g.shape(p16).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let cam = self.camera_vector(intr, cam_to_ego);
        let cam_t = s.g.constant(cam, &[1, 20]);
        let cond = self.cam_proj.forward(s, cam_t);
        let cond = s.g.reshape(cond, &[c]);
        let mut x = self.depth_conv1.forward(s, p16);
        x = s.g.add_col_broadcast(x, cond);
        x = s.g.relu(x);
        if let Some(conv2) = &self.depth_conv2 {
            x = conv2.forward(s, x);
            x = s.g.relu(x);
        }
        let logits = self.depth_out.forward(s, x);
        let bins = self.cfg.depth_bins;
        let flat = s.g.reshape(logits, &[bins, h * w]);
        let t = s.g.transpose2(flat);
        let sm = s.g.softmax_last(t);
        let back = s.g.transpose2(sm);
        let probs = s.g.reshape(back, &[bins, h, w]);
        DepthDistribution { probs, bins, depth_range: self.cfg.depth_range }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.stem.param_count();
        for st in &self.stages {
            n += st.down.param_count();
            n += st.blocks.iter().map(|b| b.param_count()).sum::<usize>();
        }
        for c in [&self.lat8, &self.lat16, &self.lat32, &self.out8, &self.out16, &self.out32] {
            n += c.param_count();
        }
        n += self.depth_conv1.param_count();
        if let Some(c) = &self.depth_conv2 {
            n += c.param_count();
        }
        n + self.depth_out.param_count() + self.cam_proj.param_count()
    }

    /// Analytic multiply count for one image at the configured resolution.
    pub fn flop_proxy(&self) -> u64 {
        let (h0, w0) = self.cfg.input_resolution;
        let mut total = self.stem.flops(h0, w0);
        let (mut h, mut w) = (h0 / 2, w0 / 2);
        for st in &self.stages {
            total += st.down.flops(h, w);
            h = duoview_tensor::kernels::conv_out(h, 3, 2, 1);
            w = duoview_tensor::kernels::conv_out(w, 3, 2, 1);
            for b in &st.blocks {
                total += b.conv1.flops(h, w) + b.conv2.flops(h, w);
            }
        }
        let (h8, w8) = (h0 / 8, w0 / 8);
        let (h16, w16) = (h0 / 16, w0 / 16);
        let h32 = duoview_tensor::kernels::conv_out(h16, 3, 2, 1);
        let w32 = duoview_tensor::kernels::conv_out(w16, 3, 2, 1);
        total += self.lat8.flops(h8, w8) + self.out8.flops(h8, w8);
        total += self.lat16.flops(h16, w16) + self.out16.flops(h16, w16);
        if self.cfg.n_stages == 4 {
            total += self.lat32.flops(h32, w32);
        } else {
            total += self.lat32.flops(h16, w16);
        }
        total += self.out32.flops(h32, w32);
        total += self.depth_conv1.flops(h16, w16);
        if let Some(c) = &self.depth_conv2 {
            total += c.flops(h16, w16);
        }
        total += self.depth_out.flops(h16, w16);
        total + self.cam_proj.param_count() as u64
    }
}

/// Cell index for every (bin, pixel) pair of a stride-16 feature map, or -1
/// when the unprojected point leaves the grid. Both modes respect the z
/// extent of `vox`; Bev collapses z in the cell index.
pub fn build_lift_map(
    intr: &Intrinsics,
    cam_to_ego: &Mat4,
    h16: usize,
    w16: usize,
    bins: usize,
    depth_range: (f64, f64),
    vox: &VoxelSpec,
    mode: LiftMode,
) -> Vec<i64> {
    let stride = 16.0;
    let (d0, d1) = depth_range;
    let ny = vox.xy.side();
    let nz = vox.z_layers();
    let mut map = vec![-1i64; bins * h16 * w16];
    for b in 0..bins {
        let depth = d0 + (b as f64 + 0.5) * (d1 - d0) / bins as f64;
        for y in 0..h16 {
            for x in 0..w16 {
                let u = (x as f64 + 0.5) * stride;
                let v = (y as f64 + 0.5) * stride;
                let p = unproject_from_camera(u, v, depth, intr, cam_to_ego);
                let Some((ix, iy)) = vox.xy.cell_index(p.x, p.y) else {
                    continue;
                };
                let Some(iz) = vox.z_index(p.z) else {
                    continue;
                };
                let cell = match mode {
                    LiftMode::Bev => (ix * ny + iy) as i64,
                    LiftMode::Voxel => ((ix * ny + iy) * nz + iz) as i64,
                };
                map[(b * h16 + y) * w16 + x] = cell;
            }
        }
    }
    map
}

/// Scatters stride-16 features weighted by depth probabilities into a grid.
pub fn lift_features(
    s: &mut Session,
    feat16: TensorId,
    depth: &DepthDistribution,
    intr: &Intrinsics,
    cam_to_ego: &Mat4,
    vox: &VoxelSpec,
    mode: LiftMode,
) -> TensorId {
    let sh = s.g.shape(feat16).to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let map = build_lift_map(intr, cam_to_ego, h, w, depth.bins, depth.depth_range, vox, mode);
    let feat2 = s.g.reshape(feat16, &[c, h * w]);
    let prob2 = s.g.reshape(depth.probs, &[depth.bins, h * w]);
    let side = vox.xy.side();
    let cells = match mode {
        LiftMode::Bev => side * side,
        LiftMode::Voxel => vox.n_voxels(),
    };
    let lifted = s.g.lift_scatter(feat2, prob2, Arc::new(map), cells);
    match mode {
        LiftMode::Bev => s.g.reshape(lifted, &[c, side, side]),
        LiftMode::Voxel => s.g.reshape(lifted, &[c, side, side, vox.z_layers()]),
    }
}

/// Resamples `bev` (in `pose_src` ego frame) into the `pose_dst` ego frame
/// with bilinear interpolation; cells that fall outside the source extent
/// become zero.
pub fn ego_align(
    s: &mut Session,
    bev: TensorId,
    grid: &GridSpec,
    pose_src: &Mat4,
    pose_dst: &Mat4,
) -> TensorId {
    let sh = s.g.shape(bev).to_vec();
    let (c, nx, ny) = (sh[0], sh[1], sh[2]);
    let src_inv = pose_src.try_inverse().expect("pose invertible");
    let to_src = src_inv * pose_dst;
    let mut pts = Vec::with_capacity(nx * ny * 2);
    for ix in 0..nx {
        for iy in 0..ny {
            let (x, y) = grid.cell_center(ix, iy);
            let p = crate::geometry::transform_point(&to_src, crate::geometry::Vec3::new(x, y, 0.0));
            let (gx, gy) = grid.frac_index(p.x, p.y);
            // bilinear_sample expects (col, row) = (y index, x index).
            pts.push(gy);
            pts.push(gx);
        }
    }
    let pts_t = s.g.constant(pts, &[nx * ny, 2]);
    let sampled = s.g.bilinear_sample(bev, pts_t);
    let t = s.g.transpose2(sampled);
    s.g.reshape(t, &[c, nx, ny])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridEncoderConfig {
    pub large: EncoderConfig,
    pub small: EncoderConfig,
    /// When set the small stream reuses the large encoder's parameters on
    /// downsampled frames instead of owning separate weights.
    #[serde(default)]
    pub share_encoders: bool,
}

impl HybridEncoderConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.large.validate()?;
        self.small.validate()?;
        let mut problems = Vec::new();
        let (lh, lw) = self.large.input_resolution;
        let (sh, sw) = self.small.input_resolution;
        if !(lh > sh && lw > sw) {
            problems.push(format!(
                "large resolution ({lh}, {lw}) must exceed small ({sh}, {sw}) elementwise"
            ));
        }
        if self.large.fpn_channels() != self.small.fpn_channels() {
            problems.push(format!(
                "pyramid channels differ: large {} vs small {}; BEV fusion needs equal widths",
                self.large.fpn_channels(),
                self.small.fpn_channels()
            ));
        }
        if self.share_encoders {
            let same = self.large.channels_per_stage == self.small.channels_per_stage
                && self.large.n_stages == self.small.n_stages
                && self.large.depth_bins == self.small.depth_bins;
            if !same {
                problems.push(
                    "share_encoders requires identical stage/depth configuration".into(),
                );
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "hybrid encoder config".into(), problems })
        }
    }
}

pub struct HybridEncoders {
    pub cfg: HybridEncoderConfig,
    pub large: EncoderNet,
    small: Option<EncoderNet>,
}

/// Per-frame outputs of the hybrid encoder; all lists run oldest first.
pub struct HybridOutput {
    pub short_bevs: Vec<BevFeatureMap>,
    pub long_bevs: Vec<BevFeatureMap>,
    /// Pyramids per short frame, per camera.
    pub short_pyramids: Vec<Vec<FeaturePyramid>>,
    pub long_pyramids: Vec<Vec<FeaturePyramid>>,
    pub short_depths: Vec<Vec<DepthDistribution>>,
    pub long_depths: Vec<Vec<DepthDistribution>>,
}

impl HybridEncoders {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: HybridEncoderConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let large = EncoderNet::init(store, rng, "enc_large", cfg.large.clone())?;
        let small = if cfg.share_encoders {
            None
        } else {
            Some(EncoderNet::init(store, rng, "enc_small", cfg.small.clone())?)
        };
        Ok(Self { cfg, large, small })
    }

    /// The network run on long-term frames: the small encoder, or the large
    /// one when parameters are shared.
    pub fn small_net(&self) -> &EncoderNet {
        self.small.as_ref().unwrap_or(&self.large)
    }

    pub fn param_count_large(&self) -> usize {
        self.large.param_count()
    }

    pub fn param_count_small(&self) -> usize {
        self.small_net().param_count()
    }

    /// Encodes the last `n` frames of `seq`: the `k` most recent through the
    /// large encoder at full resolution, the other n-k through the small
    /// encoder at its reduced resolution. BEV maps are lifted on `vox`'s xy
    /// grid in each frame's own ego coordinates.
    pub fn hybrid_encode(
        &self,
        s: &mut Session,
        seq: &FrameSequence,
        k: usize,
        n: usize,
        vox: &VoxelSpec,
    ) -> Result<HybridOutput, CoreError> {
        let avail = seq.frames.len();
        let mut problems = Vec::new();
        if k < 1 {
            problems.push(format!("k must be >= 1, got {k}"));
        }
        if k > n {
            problems.push(format!("k ({k}) must not exceed n ({n})"));
        }
        if n > avail {
            problems.push(format!("n ({n}) exceeds available frames ({avail})"));
        }
        if !problems.is_empty() {
            return Err(CoreError::Validation { what: "hybrid window".into(), problems });
        }
        let first = avail - n;
        let mut out = HybridOutput {
            short_bevs: Vec::new(),
            long_bevs: Vec::new(),
            short_pyramids: Vec::new(),
            long_pyramids: Vec::new(),
            short_depths: Vec::new(),
            long_depths: Vec::new(),
        };
        for (offset, frame) in seq.frames[first..].iter().enumerate() {
            let frame_index = first + offset;
            let is_short = offset >= n - k;
            let net = if is_short { &self.large } else { self.small_net() };
            let (bev, pyrs, depths) = self.encode_frame(s, net, frame, frame_index, is_short, vox)?;
            if is_short {
                out.short_bevs.push(bev);
                out.short_pyramids.push(pyrs);
                out.short_depths.push(depths);
            } else {
                out.long_bevs.push(bev);
                out.long_pyramids.push(pyrs);
                out.long_depths.push(depths);
            }
        }
        Ok(out)
    }

    fn encode_frame(
        &self,
        s: &mut Session,
        net: &EncoderNet,
        frame: &MultiViewFrame,
        frame_index: usize,
        full_res: bool,
        vox: &VoxelSpec,
    ) -> Result<(BevFeatureMap, Vec<FeaturePyramid>, Vec<DepthDistribution>), CoreError> {
        let cams = frame.intrinsics.len();
        let mut pyrs = Vec::with_capacity(cams);
        let mut depths = Vec::with_capacity(cams);
        let mut bev_sum: Option<TensorId> = None;
        for cam in 0..cams {
            let (img, intr) = frame_image(s, frame, cam, if full_res { None } else { Some(net.cfg.input_resolution) });
            let pyr = net.encode_image(s, img, frame_index, cam)?;
            let depth = net.predict_depth(s, &pyr, &intr, &frame.cam_to_ego[cam]);
            let lifted = lift_features(
                s,
                pyr.level(16),
                &depth,
                &intr,
                &frame.cam_to_ego[cam],
                vox,
                LiftMode::Bev,
            );
            bev_sum = Some(match bev_sum {
                Some(acc) => s.g.add(acc, lifted),
                None => lifted,
            });
            pyrs.push(pyr);
            depths.push(depth);
        }
        let bev = BevFeatureMap {
            data: bev_sum.expect("n_cameras >= 1"),
            grid: vox.xy,
            frame_index,
        };
        Ok((bev, pyrs, depths))
    }
}

/// Rescales pinhole intrinsics from resolution `(h, w)` to `(th, tw)`.
pub fn scaled_intrinsics(intr: &Intrinsics, from: (usize, usize), to: (usize, usize)) -> Intrinsics {
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    Intrinsics { fx: intr.fx * sx, fy: intr.fy * sy, cx: intr.cx * sx, cy: intr.cy * sy }
}

/// Builds the image constant for one camera, optionally downsampled, and
/// returns the intrinsics matching the delivered resolution.
pub fn frame_image(
    s: &mut Session,
    frame: &MultiViewFrame,
    cam: usize,
    target: Option<(usize, usize)>,
) -> (TensorId, Intrinsics) {
    let sh = frame.images.shape();
    let (_cams, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let data = frame.images.data()[cam * c * h * w..(cam + 1) * c * h * w].to_vec();
    let img = s.g.constant(data, &[c, h, w]);
    let intr = frame.intrinsics[cam];
    match target {
        None => (img, intr),
        Some((th, tw)) => {
            let small = s.g.avg_pool_to_2d(img, th, tw);
            (small, scaled_intrinsics(&intr, (h, w), (th, tw)))
        }
    }
}
