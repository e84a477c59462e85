//! Sparse box queries refined against multi-frame image features.
//!
//! A fixed set of learnable queries, each a feature vector plus a reference
//! box, is refined for a number of rounds. Every round runs distance-masked
//! self-attention over the queries, samples stride-16 image features around
//! the boxes in each past frame, mixes the samples with query-generated
//! weights, and nudges the boxes with a small regression head. Two copies of
//! the loop run over the recent and the older frame window; their instance
//! sets are merged afterwards by overlap grouping with channel-wise max
//! feature fusion.
//!
//! Boxes are rows of `(x, y, z, l, w, h, yaw, vx, vy)` in the current ego
//! frame, sizes in meters and velocities in meters per second.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use duoview_tensor::nn::{LayerNorm, Linear, ParamKind, ParamStore, Session};
use duoview_tensor::{Array, TensorId};

use crate::geometry::{bev_iou_axis_aligned, Intrinsics, Mat4};
use crate::CoreError;

/// Width of a box row: (x, y, z, l, w, h, yaw, vx, vy).
pub const BOX_DIMS: usize = 9;

/// Camera-frame depth below which a sample point counts as invisible.
pub const MIN_SAMPLE_DEPTH: f64 = 0.1;

/// Which frame window a refinement stream consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Short,
    Long,
}

impl Horizon {
    fn tag(self) -> &'static str {
        match self {
            Horizon::Short => "short",
            Horizon::Long => "long",
        }
    }
}

/// Layout of the sparse query detector.
///
/// `n_queries` boxes are refined for `n_layers` rounds against two frame
/// windows: the `short_frames` most recent frames and the `long_frames`
/// older ones (zero disables the long stream). Every frame contributes
/// `n_points` sampled features of width `feat_channels` per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseQueryConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub n_layers: usize,
    pub short_frames: usize,
    pub long_frames: usize,
    pub feat_channels: usize,
    /// BEV overlap above which two decoded boxes count as one instance.
    pub dedup_iou: f64,
    pub class_aware_dedup: bool,
    /// Query centers initialize uniformly over `[-extent, extent)` squared.
    pub extent: f64,
}

impl SparseQueryConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if self.n_queries == 0 {
            problems.push("n_queries must be positive".to_string());
        }
        if self.dim == 0 {
            problems.push("dim must be positive".to_string());
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".to_string());
        } else if self.dim % self.n_heads != 0 {
            problems.push(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.n_points == 0 {
            problems.push("n_points must be positive".to_string());
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be positive".to_string());
        }
        if self.short_frames == 0 {
            problems.push("short_frames must be positive".to_string());
        }
        if self.feat_channels == 0 {
            problems.push("feat_channels must be positive".to_string());
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            problems.push(format!("dedup_iou {} must lie in (0, 1]", self.dedup_iou));
        }
        if !(self.extent > 0.0) {
            problems.push("extent must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "sparse query config".to_string(), problems })
        }
    }
}

/// One past frame the samplers can read: stride-16 feature maps plus the
/// geometry needed to land ego-frame points on their pixels.
#[derive(Clone)]
pub struct SampleFrame {
    /// One `[C, H/16, W/16]` map per camera.
    pub feat16: Vec<TensorId>,
    /// Intrinsics matching the resolution the maps were computed at.
    pub intrinsics: Vec<Intrinsics>,
    pub cam_to_ego: Vec<Mat4>,
    /// Ego-to-world pose at capture time.
    pub ego_pose: Mat4,
    pub timestamp: f64,
}

/// Self-attention output with the per-head weight matrices kept around so
/// callers can inspect them.
pub struct AttentionTrace {
    pub out: TensorId,
    /// One row-stochastic `[N, N]` matrix per head.
    pub weights: Vec<TensorId>,
}

/// Intermediate tensors of one adaptive mixing pass.
pub struct MixTrace {
    /// `[N, F*S, C]` after channel mixing, LayerNorm and ReLU.
    pub channel_mixed: TensorId,
    /// `[N, F*S, C]` after point mixing, LayerNorm and ReLU.
    pub point_mixed: TensorId,
    /// `[N, d]` flattened projection.
    pub out: TensorId,
}

/// Final state of one refinement stream.
pub struct InstanceSet {
    /// `[N, d]` refined query features.
    pub features: TensorId,
    /// `[N, 9]` refined boxes.
    pub boxes: TensorId,
    /// Boxes after each refinement round; length equals the layer count.
    pub box_trace: Vec<TensorId>,
}

/// Merged output of the two streams.
pub struct FusedInstances {
    /// `[M, d]` channel-wise max over each group.
    pub features: TensorId,
    /// `[M, 9]` boxes of the group leaders.
    pub boxes: TensorId,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
    /// Candidate indices absorbed into each instance, leader first.
    pub groups: Vec<Vec<usize>>,
}

/// Sampling and point-mixing parameters owned by one horizon.
struct HorizonBranch {
    /// d -> S*3 offsets in box axes; (-1, 1) spans the box.
    offsets: Linear,
    /// d -> (F*S)^2 point-mixing matrix generator.
    point_gen: Linear,
    point_ln: LayerNorm,
    /// F*S*C -> d output projection.
    out: Linear,
    frames: usize,
}

impl HorizonBranch {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &SparseQueryConfig,
        frames: usize,
    ) -> Self {
        let fs = frames * cfg.n_points;
        Self {
            offsets: Linear::init(store, rng, &format!("{name}.offsets"), cfg.dim, cfg.n_points * 3),
            point_gen: Linear::init(store, rng, &format!("{name}.point_gen"), cfg.dim, fs * fs),
            point_ln: LayerNorm::init(store, &format!("{name}.point_ln"), cfg.feat_channels),
            out: Linear::init(store, rng, &format!("{name}.out"), fs * cfg.feat_channels, cfg.dim),
            frames,
        }
    }

    fn param_count(&self) -> usize {
        self.offsets.param_count()
            + self.point_gen.param_count()
            + self.point_ln.param_count()
            + self.out.param_count()
    }
}

struct RefineLayer {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_ln: LayerNorm,
    /// 2d -> C*C channel-mixing generator, shared by both horizons.
    chan_gen: Linear,
    chan_ln: LayerNorm,
    mix_ln: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ffn_ln: LayerNorm,
    /// Zero-initialized so boxes hold still until the head learns.
    reg: Linear,
    short: HorizonBranch,
    long: Option<HorizonBranch>,
}

/// Dual-stream sparse detector over the hybrid frame windows.
pub struct SparseDetector {
    cfg: SparseQueryConfig,
    prefix: String,
    layers: Vec<RefineLayer>,
}

impl SparseDetector {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cfg: SparseQueryConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let n = cfg.n_queries;

        let bound = 1.0 / (cfg.dim as f64).sqrt();
        let feat: Vec<f64> = (0..n * cfg.dim).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(
            &format!("{prefix}.query_feat"),
            Array::new(vec![n, cfg.dim], feat).expect("query feature shape matches data"),
            ParamKind::Other,
        );

        // Car-sized prior at rest; centers cover the BEV extent.
        let mut boxes = Vec::with_capacity(n * BOX_DIMS);
        for _ in 0..n {
            let x = rng.gen_range(-cfg.extent..cfg.extent);
            let y = rng.gen_range(-cfg.extent..cfg.extent);
            boxes.extend_from_slice(&[x, y, 0.75, 4.0, 2.0, 1.5, 0.0, 0.0, 0.0]);
        }
        store.insert(
            &format!("{prefix}.query_boxes"),
            Array::new(vec![n, BOX_DIMS], boxes).expect("query box shape matches data"),
            ParamKind::Other,
        );
        store.insert(&format!("{prefix}.tau"), Array::full(&[n], 1.0), ParamKind::Other);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = format!("{prefix}.layer{l}");
            let short = HorizonBranch::init(store, rng, &format!("{base}.short"), &cfg, cfg.short_frames);
            let long = (cfg.long_frames > 0)
                .then(|| HorizonBranch::init(store, rng, &format!("{base}.long"), &cfg, cfg.long_frames));
            layers.push(RefineLayer {
                sa_q: Linear::init(store, rng, &format!("{base}.sa_q"), cfg.dim, cfg.dim),
                sa_k: Linear::init(store, rng, &format!("{base}.sa_k"), cfg.dim, cfg.dim),
                sa_v: Linear::init(store, rng, &format!("{base}.sa_v"), cfg.dim, cfg.dim),
                sa_ln: LayerNorm::init(store, &format!("{base}.sa_ln"), cfg.dim),
                chan_gen: Linear::init(
                    store,
                    rng,
                    &format!("{base}.chan_gen"),
                    2 * cfg.dim,
                    cfg.feat_channels * cfg.feat_channels,
                ),
                chan_ln: LayerNorm::init(store, &format!("{base}.chan_ln"), cfg.feat_channels),
                mix_ln: LayerNorm::init(store, &format!("{base}.mix_ln"), cfg.dim),
                ffn1: Linear::init(store, rng, &format!("{base}.ffn1"), cfg.dim, 2 * cfg.dim),
                ffn2: Linear::init(store, rng, &format!("{base}.ffn2"), 2 * cfg.dim, cfg.dim),
                ffn_ln: LayerNorm::init(store, &format!("{base}.ffn_ln"), cfg.dim),
                reg: Linear::init_zero(store, &format!("{base}.reg"), cfg.dim, BOX_DIMS),
                short,
                long,
            });
        }
        Ok(Self { cfg, prefix: prefix.to_string(), layers })
    }

    pub fn config(&self) -> &SparseQueryConfig {
        &self.cfg
    }

    pub fn query_feat_name(&self) -> String {
        format!("{}.query_feat", self.prefix)
    }

    pub fn query_boxes_name(&self) -> String {
        format!("{}.query_boxes", self.prefix)
    }

    pub fn tau_name(&self) -> String {
        format!("{}.tau", self.prefix)
    }

    /// Binds the learned query state: (features, boxes, tau).
    pub fn query_state(&self, s: &mut Session) -> (TensorId, TensorId, TensorId) {
        let feat = s.param(&self.query_feat_name());
        let boxes = s.param(&self.query_boxes_name());
        let tau = s.param(&self.tau_name());
        (feat, boxes, tau)
    }

    pub fn param_count(&self) -> usize {
        let n = self.cfg.n_queries;
        let queries = n * self.cfg.dim + n * BOX_DIMS + n;
        let layers: usize = self
            .layers
            .iter()
            .map(|l| {
                l.sa_q.param_count()
                    + l.sa_k.param_count()
                    + l.sa_v.param_count()
                    + l.sa_ln.param_count()
                    + l.chan_gen.param_count()
                    + l.chan_ln.param_count()
                    + l.mix_ln.param_count()
                    + l.ffn1.param_count()
                    + l.ffn2.param_count()
                    + l.ffn_ln.param_count()
                    + l.reg.param_count()
                    + l.short.param_count()
                    + l.long.as_ref().map_or(0, HorizonBranch::param_count)
            })
            .sum();
        queries + layers
    }

    /// Analytic multiply count of one full refinement pass, both streams.
    /// Counts the parameterized layers; the bilinear image reads are not
    /// parameter-dependent and stay out of the proxy.
    pub fn flop_proxy(&self) -> u64 {
        let n = self.cfg.n_queries as u64;
        let d = self.cfg.dim as u64;
        let c = self.cfg.feat_channels as u64;
        let s_pts = self.cfg.n_points as u64;
        let stream = |frames: u64| {
            let fs = frames * s_pts;
            // Self-attention, offset head, the two generated mixings with
            // their batched products, output projection, FFN, regression.
            3 * n * d * d
                + 2 * n * n * d
                + n * d * 3 * s_pts
                + n * 2 * d * c * c
                + n * fs * c * c
                + n * d * fs * fs
                + n * fs * fs * c
                + n * fs * c * d
                + 4 * n * d * d
                + n * d * BOX_DIMS as u64
        };
        let mut per_layer = stream(self.cfg.short_frames as u64);
        if self.cfg.long_frames > 0 {
            per_layer += stream(self.cfg.long_frames as u64);
        }
        per_layer * self.cfg.n_layers as u64
    }

    fn branch(&self, layer: usize, horizon: Horizon) -> Result<&HorizonBranch, CoreError> {
        match horizon {
            Horizon::Short => Ok(&self.layers[layer].short),
            Horizon::Long => self.layers[layer].long.as_ref().ok_or_else(|| CoreError::Validation {
                what: "sample horizon".to_string(),
                problems: vec!["no long-horizon branch was configured".to_string()],
            }),
        }
    }

    /// Distance-masked self-attention over the queries.
    ///
    /// Row i of every head's score matrix is penalized by
    /// `tau[i] * dist(center_i, center_j)` before the softmax, so a large tau
    /// shrinks query i's receptive field around its own box. The output is
    /// `LayerNorm(q + attention)`.
    pub fn self_attention(
        &self,
        s: &mut Session,
        layer: usize,
        q: TensorId,
        boxes: TensorId,
        tau: TensorId,
    ) -> Result<AttentionTrace, CoreError> {
        let lay = &self.layers[layer];
        let (n, d) = (self.cfg.n_queries, self.cfg.dim);
        let qs = s.g.shape(q).to_vec();
        if qs != [n, d] {
            return Err(CoreError::Shape {
                what: "attention queries".to_string(),
                expected: vec![n, d],
                actual: qs,
            });
        }
        let bs = s.g.shape(boxes).to_vec();
        if bs != [n, BOX_DIMS] {
            return Err(CoreError::Shape {
                what: "attention boxes".to_string(),
                expected: vec![n, BOX_DIMS],
                actual: bs,
            });
        }
        let ts = s.g.shape(tau).to_vec();
        if ts != [n] {
            return Err(CoreError::Shape {
                what: "attention tau".to_string(),
                expected: vec![n],
                actual: ts,
            });
        }

        let centers = s.g.slice_cols(boxes, 0, 2);
        let dist = s.g.pairwise_dist(centers);
        let penalty = s.g.mul_col_broadcast(dist, tau);

        let qp = lay.sa_q.forward(s, q);
        let kp = lay.sa_k.forward(s, q);
        let vp = lay.sa_v.forward(s, q);
        let dh = d / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.n_heads);
        let mut weights = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = s.g.slice_cols(qp, h * dh, dh);
            let kh = s.g.slice_cols(kp, h * dh, dh);
            let vh = s.g.slice_cols(vp, h * dh, dh);
            let scores = s.g.matmul_tb(qh, kh);
            let scaled = s.g.mul_scalar(scores, scale);
            let masked = s.g.sub(scaled, penalty);
            let w = s.g.softmax_last(masked);
            weights.push(w);
            outs.push(s.g.matmul(w, vh));
        }
        let atn = s.g.concat_last(&outs);
        let res = s.g.add(q, atn);
        Ok(AttentionTrace { out: lay.sa_ln.forward(s, res), weights })
    }

    /// Places `n_points` learned offsets inside each query box and reads the
    /// stride-16 features under their camera projections in every frame.
    ///
    /// Points ride the box velocity back in time (position minus v times dt),
    /// then move into each frame's ego coordinates through the stored poses.
    /// Per point the nearest-depth camera that sees it wins; points no camera
    /// sees contribute zeros. Returns `[N, F*S, C]` with frames in the order
    /// given.
    pub fn sample_points(
        &self,
        s: &mut Session,
        layer: usize,
        horizon: Horizon,
        q: TensorId,
        boxes: TensorId,
        frames: &[SampleFrame],
        cur_time: f64,
        cur_pose: &Mat4,
    ) -> Result<TensorId, CoreError> {
        let branch = self.branch(layer, horizon)?;
        if frames.len() != branch.frames {
            return Err(CoreError::Validation {
                what: "sample frames".to_string(),
                problems: vec![format!(
                    "{} frames given to the {} horizon, which mixes {}",
                    frames.len(),
                    horizon.tag(),
                    branch.frames
                )],
            });
        }
        let c = self.cfg.feat_channels;
        for (fi, fr) in frames.iter().enumerate() {
            if fr.feat16.is_empty()
                || fr.feat16.len() != fr.intrinsics.len()
                || fr.feat16.len() != fr.cam_to_ego.len()
            {
                return Err(CoreError::Validation {
                    what: "sample frames".to_string(),
                    problems: vec![format!("frame {fi} has mismatched camera lists")],
                });
            }
            for (ci, &f) in fr.feat16.iter().enumerate() {
                let sh = s.g.shape(f).to_vec();
                if sh.len() != 3 || sh[0] != c {
                    return Err(CoreError::Validation {
                        what: "sample frames".to_string(),
                        problems: vec![format!(
                            "frame {fi} camera {ci} features have shape {sh:?}, want {c} channels at rank 3"
                        )],
                    });
                }
            }
        }

        let n = self.cfg.n_queries;
        let s_pts = self.cfg.n_points;
        let p = n * s_pts;

        let off_flat = branch.offsets.forward(s, q);
        let off = s.g.reshape(off_flat, &[p, 3]);

        // Each query's box row repeats once per sampling point.
        let rep: Arc<Vec<i64>> =
            Arc::new((0..n).flat_map(|qi| std::iter::repeat(qi as i64).take(s_pts)).collect());
        let b_rep = s.g.gather_rows(boxes, rep);

        let center = s.g.slice_cols(b_rep, 0, 3);
        let size = s.g.slice_cols(b_rep, 3, 3);
        let yaw = s.g.slice_cols(b_rep, 6, 1);
        let half = s.g.mul_scalar(size, 0.5);
        let scaled = s.g.mul(off, half);
        let sx = s.g.slice_cols(scaled, 0, 1);
        let sy = s.g.slice_cols(scaled, 1, 1);
        let sz = s.g.slice_cols(scaled, 2, 1);
        let co = s.g.cos(yaw);
        let sn = s.g.sin(yaw);
        let sxc = s.g.mul(sx, co);
        let sys = s.g.mul(sy, sn);
        let rx = s.g.sub(sxc, sys);
        let sxs = s.g.mul(sx, sn);
        let syc = s.g.mul(sy, co);
        let ry = s.g.add(sxs, syc);
        let rot = s.g.concat_last(&[rx, ry, sz]);
        // Current-ego sample points, one row per (query, point).
        let pts = s.g.add(center, rot);

        let px = s.g.slice_cols(pts, 0, 1);
        let py = s.g.slice_cols(pts, 1, 1);
        let pz = s.g.slice_cols(pts, 2, 1);
        let vx = s.g.slice_cols(b_rep, 7, 1);
        let vy = s.g.slice_cols(b_rep, 8, 1);

        let mut frame_feats = Vec::with_capacity(frames.len());
        for fr in frames {
            let dt = cur_time - fr.timestamp;
            // The box velocity rewinds each point to where the object was.
            let bx = s.g.mul_scalar(vx, dt);
            let by = s.g.mul_scalar(vy, dt);
            let wx = s.g.sub(px, bx);
            let wy = s.g.sub(py, by);
            let warped = s.g.concat_last(&[wx, wy, pz]);
            let to_frame = fr.ego_pose.try_inverse().expect("ego pose must be invertible") * cur_pose;
            frame_feats.push(self.sample_frame(s, fr, warped, &to_frame));
        }

        // frame_feats[f] rows run (query, point); interleave to
        // (query, frame, point) so a query's samples sit together.
        let f_cnt = frames.len();
        let ordered = if f_cnt == 1 {
            frame_feats[0]
        } else {
            let stacked = s.g.concat_rows(&frame_feats);
            let mut perm = Vec::with_capacity(f_cnt * p);
            for qi in 0..n {
                for f in 0..f_cnt {
                    for sp in 0..s_pts {
                        perm.push(((f * n + qi) * s_pts + sp) as i64);
                    }
                }
            }
            s.g.gather_rows(stacked, Arc::new(perm))
        };
        Ok(s.g.reshape(ordered, &[n, f_cnt * s_pts, c]))
    }

    /// Projects `[P, 3]` current-ego points into one frame's cameras and
    /// blends the per-camera bilinear reads with one-hot visibility masks.
    fn sample_frame(
        &self,
        s: &mut Session,
        fr: &SampleFrame,
        pts: TensorId,
        to_frame: &Mat4,
    ) -> TensorId {
        let p = s.g.shape(pts)[0];
        let mut best: Vec<Option<(usize, f64)>> = vec![None; p];
        let mut cams = Vec::with_capacity(fr.feat16.len());
        for (ci, &feat) in fr.feat16.iter().enumerate() {
            let ego_to_cam =
                fr.cam_to_ego[ci].try_inverse().expect("extrinsics must be invertible");
            let m = ego_to_cam * to_frame;
            let p_cam = apply_rigid(s, pts, &m);
            let xc = s.g.slice_cols(p_cam, 0, 1);
            let yc = s.g.slice_cols(p_cam, 1, 1);
            let zc = s.g.slice_cols(p_cam, 2, 1);
            // Behind-camera points get a tiny clamped depth; the mask below
            // zeroes them, the clamp only keeps the division finite.
            let z_safe = s.g.clamp(zc, 1e-3, 1e12);
            let intr = &fr.intrinsics[ci];
            let xz = s.g.div(xc, z_safe);
            let yz = s.g.div(yc, z_safe);
            let u_col = s.g.mul_scalar(xz, intr.fx);
            let u = s.g.add_scalar(u_col, intr.cx);
            let v_col = s.g.mul_scalar(yz, intr.fy);
            let v = s.g.add_scalar(v_col, intr.cy);
            // Stride-16 cell (i, j) has its center at image pixel
            // ((j + 0.5) * 16, (i + 0.5) * 16).
            let col_raw = s.g.mul_scalar(u, 1.0 / 16.0);
            let col = s.g.add_scalar(col_raw, -0.5);
            let row_raw = s.g.mul_scalar(v, 1.0 / 16.0);
            let row = s.g.add_scalar(row_raw, -0.5);
            let pix = s.g.concat_last(&[col, row]);
            let samp = s.g.bilinear_sample(feat, pix);

            let sh = s.g.shape(feat).to_vec();
            let (h_img, w_img) = (sh[1] as f64 * 16.0, sh[2] as f64 * 16.0);
            let z_data = s.g.data(zc).to_vec();
            let u_data = s.g.data(u).to_vec();
            let v_data = s.g.data(v).to_vec();
            for i in 0..p {
                let visible = z_data[i] >= MIN_SAMPLE_DEPTH
                    && (0.0..w_img).contains(&u_data[i])
                    && (0.0..h_img).contains(&v_data[i]);
                if visible && best[i].map_or(true, |(_, zb)| z_data[i] < zb) {
                    best[i] = Some((ci, z_data[i]));
                }
            }
            cams.push(samp);
        }

        // Constant one-hot masks select the winning camera per point: the
        // feature blend is differentiable, the camera choice itself is not.
        let mut acc: Option<TensorId> = None;
        for (ci, samp) in cams.into_iter().enumerate() {
            let mask: Vec<f64> = (0..p)
                .map(|i| if best[i].map_or(false, |(bc, _)| bc == ci) { 1.0 } else { 0.0 })
                .collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let mc = s.g.constant(mask, &[p]);
            let picked = s.g.mul_col_broadcast(samp, mc);
            acc = Some(match acc {
                Some(a) => s.g.add(a, picked),
                None => picked,
            });
        }
        match acc {
            Some(t) => t,
            // No camera saw any point; an all-zero block keeps shapes intact.
            None => s.g.constant(vec![0.0; p * self.cfg.feat_channels], &[p, self.cfg.feat_channels]),
        }
    }

    /// Query-conditioned mixing of the sampled features for one horizon.
    ///
    /// A shared generator turns each query into a C x C channel-mixing
    /// matrix; a horizon-specific generator produces the (F*S) x (F*S)
    /// point-mixing matrix. Both stages apply LayerNorm then ReLU, and the
    /// flattened result projects back to the query width.
    pub fn adaptive_mix(
        &self,
        s: &mut Session,
        layer: usize,
        horizon: Horizon,
        q: TensorId,
        samples: TensorId,
    ) -> Result<MixTrace, CoreError> {
        let lay = &self.layers[layer];
        let branch = self.branch(layer, horizon)?;
        let (n, c) = (self.cfg.n_queries, self.cfg.feat_channels);
        let fs = branch.frames * self.cfg.n_points;
        let sh = s.g.shape(samples).to_vec();
        if sh != [n, fs, c] {
            return Err(CoreError::Shape {
                what: "sampled features".to_string(),
                expected: vec![n, fs, c],
                actual: sh,
            });
        }

        let qq = s.g.concat_last(&[q, q]);
        let mc_flat = lay.chan_gen.forward(s, qq);
        let mc = s.g.reshape(mc_flat, &[n, c, c]);
        let chan = s.g.bat_matmul(samples, mc);
        let chan_n = lay.chan_ln.forward(s, chan);
        let channel_mixed = s.g.relu(chan_n);

        let mp_flat = branch.point_gen.forward(s, q);
        let mp = s.g.reshape(mp_flat, &[n, fs, fs]);
        let pnt = s.g.bat_matmul(mp, channel_mixed);
        let pnt_n = branch.point_ln.forward(s, pnt);
        let point_mixed = s.g.relu(pnt_n);

        let flat = s.g.reshape(point_mixed, &[n, fs * c]);
        let out = branch.out.forward(s, flat);
        Ok(MixTrace { channel_mixed, point_mixed, out })
    }

    /// Residual box update. Position, yaw and velocity deltas add; size
    /// deltas act in log space so sizes stay positive.
    fn refine_boxes(&self, s: &mut Session, layer: usize, q: TensorId, boxes: TensorId) -> TensorId {
        let delta = self.layers[layer].reg.forward(s, q);
        let d_pos = s.g.slice_cols(delta, 0, 3);
        let d_size = s.g.slice_cols(delta, 3, 3);
        let d_rest = s.g.slice_cols(delta, 6, 3);
        let b_pos = s.g.slice_cols(boxes, 0, 3);
        let b_size = s.g.slice_cols(boxes, 3, 3);
        let b_rest = s.g.slice_cols(boxes, 6, 3);
        let pos = s.g.add(b_pos, d_pos);
        let grow = s.g.exp(d_size);
        let size = s.g.mul(b_size, grow);
        let rest = s.g.add(b_rest, d_rest);
        s.g.concat_last(&[pos, size, rest])
    }

    /// Runs the full dual-stream refinement from the learned query state.
    ///
    /// Both streams start from the same query parameters. `short` and `long`
    /// must match the configured window lengths; pass frames oldest first.
    /// `cur_time` and `cur_pose` describe the ego at the prediction instant.
    /// The long instance set is `None` when no long window is configured.
    pub fn iterate(
        &self,
        s: &mut Session,
        short: &[SampleFrame],
        long: &[SampleFrame],
        cur_time: f64,
        cur_pose: &Mat4,
    ) -> Result<(InstanceSet, Option<InstanceSet>), CoreError> {
        let mut problems = Vec::new();
        if short.len() != self.cfg.short_frames {
            problems.push(format!(
                "{} short-horizon frames given, config wants {}",
                short.len(),
                self.cfg.short_frames
            ));
        }
        if long.len() != self.cfg.long_frames {
            problems.push(format!(
                "{} long-horizon frames given, config wants {}",
                long.len(),
                self.cfg.long_frames
            ));
        }
        if !problems.is_empty() {
            return Err(CoreError::Validation { what: "sparse frame windows".to_string(), problems });
        }

        let (q0, b0, tau) = self.query_state(s);
        let short_set = self.run_stream(s, Horizon::Short, q0, b0, tau, short, cur_time, cur_pose)?;
        let long_set = if self.cfg.long_frames > 0 {
            Some(self.run_stream(s, Horizon::Long, q0, b0, tau, long, cur_time, cur_pose)?)
        } else {
            None
        };
        Ok((short_set, long_set))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stream(
        &self,
        s: &mut Session,
        horizon: Horizon,
        q0: TensorId,
        b0: TensorId,
        tau: TensorId,
        frames: &[SampleFrame],
        cur_time: f64,
        cur_pose: &Mat4,
    ) -> Result<InstanceSet, CoreError> {
        let mut q = q0;
        let mut boxes = b0;
        let mut box_trace = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            q = self.self_attention(s, l, q, boxes, tau)?.out;
            let samples = self.sample_points(s, l, horizon, q, boxes, frames, cur_time, cur_pose)?;
            let mix = self.adaptive_mix(s, l, horizon, q, samples)?;
            let lay = &self.layers[l];
            let mixed = s.g.add(q, mix.out);
            q = lay.mix_ln.forward(s, mixed);
            let h1 = lay.ffn1.forward(s, q);
            let h1r = s.g.relu(h1);
            let h2 = lay.ffn2.forward(s, h1r);
            let res = s.g.add(q, h2);
            q = lay.ffn_ln.forward(s, res);
            boxes = self.refine_boxes(s, l, q, boxes);
            box_trace.push(boxes);
        }
        Ok(InstanceSet { features: q, boxes, box_trace })
    }
}

/// Applies a rigid transform to `[P, 3]` points through constant nodes.
fn apply_rigid(s: &mut Session, pts: TensorId, m: &Mat4) -> TensorId {
    let rot: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    let tr: Vec<f64> = (0..3).map(|r| m[(r, 3)]).collect();
    let rc = s.g.constant(rot, &[3, 3]);
    let tc = s.g.constant(tr, &[3]);
    let rotated = s.g.matmul_tb(pts, rc);
    s.g.add_last(rotated, tc)
}

/// NMS-style grouping of candidate instances with channel-max fusion.
///
/// Candidates are visited best score first. Each joins the first accepted
/// instance whose leader box overlaps it beyond `iou_threshold` in
/// axis-aligned BEV (and shares its class when `class_aware` is set),
/// otherwise it founds a new instance. Matching against leaders keeps the
/// output boxes pairwise at or below the threshold. Each group's features
/// fuse by per-channel max; its box, score and class come from the leader,
/// which is also its highest-scoring member.
pub fn dedup_and_fuse(
    s: &mut Session,
    feats: TensorId,
    boxes: TensorId,
    scores: &[f64],
    classes: &[usize],
    iou_threshold: f64,
    class_aware: bool,
) -> Result<FusedInstances, CoreError> {
    let fsh = s.g.shape(feats).to_vec();
    let bsh = s.g.shape(boxes).to_vec();
    let m0 = scores.len();
    if m0 == 0 || fsh.len() != 2 || fsh[0] != m0 || bsh != [m0, BOX_DIMS] || classes.len() != m0 {
        return Err(CoreError::Validation {
            what: "dedup candidates".to_string(),
            problems: vec![format!(
                "need matching [M, d] features, [M, 9] boxes, M scores and M classes with M > 0; \
                 got features {fsh:?}, boxes {bsh:?}, {m0} scores, {} classes",
                classes.len()
            )],
        });
    }

    let box_data = s.g.data(boxes).to_vec();
    let as_bev = |i: usize| {
        let b = &box_data[i * BOX_DIMS..(i + 1) * BOX_DIMS];
        (b[0], b[1], b[3], b[4])
    };
    let mut order: Vec<usize> = (0..m0).collect();
    // Stable tie-break on the index keeps grouping deterministic.
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &cand in &order {
        let joined = groups.iter_mut().find(|g| {
            let leader = g[0];
            (!class_aware || classes[leader] == classes[cand])
                && bev_iou_axis_aligned(as_bev(leader), as_bev(cand)) > iou_threshold
        });
        match joined {
            Some(g) => g.push(cand),
            None => groups.push(vec![cand]),
        }
    }

    let mut fused_rows = Vec::with_capacity(groups.len());
    for g in &groups {
        let idx: Arc<Vec<i64>> = Arc::new(g.iter().map(|&i| i as i64).collect());
        let members = s.g.gather_rows(feats, idx);
        let maxed = s.g.max_over_rows(members);
        fused_rows.push(s.g.reshape(maxed, &[1, fsh[1]]));
    }
    let features = s.g.concat_rows(&fused_rows);
    let leaders: Vec<usize> = groups.iter().map(|g| g[0]).collect();
    let lead_idx: Arc<Vec<i64>> = Arc::new(leaders.iter().map(|&i| i as i64).collect());
    let out_boxes = s.g.gather_rows(boxes, lead_idx);
    Ok(FusedInstances {
        features,
        boxes: out_boxes,
        scores: leaders.iter().map(|&i| scores[i]).collect(),
        classes: leaders.iter().map(|&i| classes[i]).collect(),
        groups,
    })
}
