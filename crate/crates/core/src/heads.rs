//! Task decoders and the weighted multi-task training loss.
//!
//! Detection comes in two forms: a query head with separate classification
//! and regression MLPs over sparse instance features, and a dense
//! center-heatmap head kept for the grid-based baseline. Segmentation uses a
//! small encoder-decoder that unpools through recorded max indices, occupancy
//! a per-voxel MLP, and depth a binary cross-entropy against binned ground
//! truth. Matching between predicted and ground-truth boxes is an exact
//! minimum-cost assignment.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use duoview_tensor::nn::{Conv2dLayer, Linear, ParamStore, Session};
use duoview_tensor::TensorId;

use crate::encoder::DepthDistribution;
use crate::geometry::GridSpec;
use crate::scene::BoxGt;
use crate::sparse::BOX_DIMS;
use crate::CoreError;

/// Floor and ceiling for probabilities inside log terms.
const PROB_EPS: f64 = 1e-7;

/// Per-task balancing weights of the total training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_depth: f64,
    pub alpha_cls: f64,
    pub alpha_bbox: f64,
    pub alpha_seg: f64,
    pub alpha_occ: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_depth: 3.0, alpha_cls: 2.0, alpha_bbox: 0.25, alpha_seg: 1.0, alpha_occ: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        let named = [
            ("alpha_depth", self.alpha_depth),
            ("alpha_cls", self.alpha_cls),
            ("alpha_bbox", self.alpha_bbox),
            ("alpha_seg", self.alpha_seg),
            ("alpha_occ", self.alpha_occ),
        ];
        let mut problems = Vec::new();
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} must be a nonnegative finite value, got {v}"));
            }
        }
        if named.iter().all(|(_, v)| *v <= 0.0) {
            problems.push("at least one weight must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "loss weights".into(), problems })
        }
    }
}

/// Focusing and balancing parameters of the focal losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Which loss terms the model generation trains with. The dense baseline has
/// no occupancy task; the full model adds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FourTask,
    FiveTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectHeadConfig {
    pub dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl DetectHeadConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        for (name, v) in
            [("dim", self.dim), ("hidden", self.hidden), ("n_classes", self.n_classes)]
        {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "detect head config".into(), problems })
        }
    }
}

/// Class logits and refined boxes for a set of instances, with eager
/// per-instance scores for ranking.
pub struct DetectionOutput {
    /// [N, classes].
    pub logits: TensorId,
    /// [N, 9], same layout as the query boxes.
    pub boxes: TensorId,
    /// Max class probability per instance.
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Two separate MLPs over instance features: one classifies, one regresses a
/// residual box update. They share no parameters.
pub struct DetectHead {
    cfg: DetectHeadConfig,
    cls1: Linear,
    cls2: Linear,
    reg1: Linear,
    reg2: Linear,
}

impl DetectHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: DetectHeadConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let cls1 = Linear::init(store, rng, &format!("{name}.cls1"), cfg.dim, cfg.hidden);
        let cls2 = Linear::init(store, rng, &format!("{name}.cls2"), cfg.hidden, cfg.n_classes);
        let reg1 = Linear::init(store, rng, &format!("{name}.reg1"), cfg.dim, cfg.hidden);
        // Zero-initialized so boxes pass through until the head learns.
        let reg2 = Linear::init_zero(store, &format!("{name}.reg2"), cfg.hidden, BOX_DIMS);
        Ok(Self { cfg, cls1, cls2, reg1, reg2 })
    }

    pub fn config(&self) -> &DetectHeadConfig {
        &self.cfg
    }

    pub fn cls_param_names(&self) -> Vec<String> {
        ["cls1", "cls2"]
            .iter()
            .flat_map(|l| {
                let base = self.cls1.name.rsplit_once('.').map(|(b, _)| b).unwrap_or("");
                [format!("{base}.{l}.weight"), format!("{base}.{l}.bias")]
            })
            .collect()
    }

    pub fn reg_param_names(&self) -> Vec<String> {
        ["reg1", "reg2"]
            .iter()
            .flat_map(|l| {
                let base = self.reg1.name.rsplit_once('.').map(|(b, _)| b).unwrap_or("");
                [format!("{base}.{l}.weight"), format!("{base}.{l}.bias")]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.cls1.param_count()
            + self.cls2.param_count()
            + self.reg1.param_count()
            + self.reg2.param_count()
    }

    /// Analytic multiply count over `rows` instances.
    pub fn flop_proxy(&self, rows: u64) -> u64 {
        let c = self.cfg;
        rows * (c.dim * c.hidden + c.hidden * c.n_classes + c.dim * c.hidden + c.hidden * BOX_DIMS)
            as u64
    }

    /// Classifies each instance and nudges its reference box.
    pub fn forward(
        &self,
        s: &mut Session,
        feats: TensorId,
        ref_boxes: TensorId,
    ) -> Result<DetectionOutput, CoreError> {
        let fs = s.g.shape(feats).to_vec();
        if fs.len() != 2 || fs[1] != self.cfg.dim {
            return Err(CoreError::Shape {
                what: "detect head features".into(),
                expected: vec![fs.first().copied().unwrap_or(0), self.cfg.dim],
                actual: fs,
            });
        }
        let bs = s.g.shape(ref_boxes).to_vec();
        if bs != [fs[0], BOX_DIMS] {
            return Err(CoreError::Shape {
                what: "detect head reference boxes".into(),
                expected: vec![fs[0], BOX_DIMS],
                actual: bs,
            });
        }
        let h_cls = self.cls1.forward(s, feats);
        let h_cls = s.g.relu(h_cls);
        let logits = self.cls2.forward(s, h_cls);
        let h_reg = self.reg1.forward(s, feats);
        let h_reg = s.g.relu(h_reg);
        let delta = self.reg2.forward(s, h_reg);
        let boxes = apply_box_delta(s, ref_boxes, delta);

        let (n, k) = (fs[0], self.cfg.n_classes);
        let ld = s.g.data(logits);
        let mut scores = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (c, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            scores.push(sigmoid(best));
            classes.push(arg);
        }
        Ok(DetectionOutput { logits, boxes, scores, classes })
    }
}

/// Residual box update: centers, yaw, and velocity shift additively; sizes
/// scale by the exponential of the delta so they stay positive.
fn apply_box_delta(s: &mut Session, boxes: TensorId, delta: TensorId) -> TensorId {
    let pos_b = s.g.slice_cols(boxes, 0, 3);
    let size_b = s.g.slice_cols(boxes, 3, 3);
    let rest_b = s.g.slice_cols(boxes, 6, 3);
    let pos_d = s.g.slice_cols(delta, 0, 3);
    let size_d = s.g.slice_cols(delta, 3, 3);
    let rest_d = s.g.slice_cols(delta, 6, 3);
    let pos = s.g.add(pos_b, pos_d);
    let scale = s.g.exp(size_d);
    let size = s.g.mul(size_b, scale);
    let rest = s.g.add(rest_b, rest_d);
    s.g.concat_last(&[pos, size, rest])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum of per-entry sigmoid focal terms over a [N, K] logit matrix against
/// 0/1 targets. Positive entries weigh `alpha (1-p)^gamma`, negatives
/// `(1-alpha) p^gamma`. The caller picks the normalization.
pub fn sigmoid_focal_sum(
    s: &mut Session,
    logits: TensorId,
    targets: &[f64],
    fp: &FocalParams,
) -> Result<TensorId, CoreError> {
    let sh = s.g.shape(logits).to_vec();
    let count: usize = sh.iter().product();
    if sh.len() != 2 || count != targets.len() {
        return Err(CoreError::Shape {
            what: "focal targets".into(),
            expected: sh,
            actual: vec![targets.len()],
        });
    }
    let p = s.g.sigmoid(logits);
    let p = s.g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = s.g.neg(p);
    let q = s.g.add_scalar(q, 1.0);
    let nll_pos = s.g.ln(p);
    let nll_pos = s.g.neg(nll_pos);
    let nll_neg = s.g.ln(q);
    let nll_neg = s.g.neg(nll_neg);
    // gamma = 0 skips the modulating factor entirely: pow has no gradient
    // there and the factor is constant one anyway.
    let (pos, neg) = if fp.gamma == 0.0 {
        (nll_pos, nll_neg)
    } else {
        let wp = s.g.pow_scalar(q, fp.gamma);
        let wn = s.g.pow_scalar(p, fp.gamma);
        (s.g.mul(wp, nll_pos), s.g.mul(wn, nll_neg))
    };
    let t = s.g.constant(targets.to_vec(), &sh);
    let not_t: Vec<f64> = targets.iter().map(|&v| 1.0 - v).collect();
    let nt = s.g.constant(not_t, &sh);
    let pos = s.g.mul(pos, t);
    let pos = s.g.mul_scalar(pos, fp.alpha);
    let neg = s.g.mul(neg, nt);
    let neg = s.g.mul_scalar(neg, 1.0 - fp.alpha);
    let term = s.g.add(pos, neg);
    Ok(s.g.sum_all(term))
}

/// Mean focal loss over rows of a [M, K] logit matrix with one ground-truth
/// class per row: `(1 - p_gt)^gamma * (-log p_gt)`. At gamma 0 this is
/// exactly the cross-entropy.
pub fn softmax_focal_mean(
    s: &mut Session,
    logits: TensorId,
    gt: &[usize],
    gamma: f64,
) -> Result<TensorId, CoreError> {
    let sh = s.g.shape(logits).to_vec();
    if sh.len() != 2 || sh[0] != gt.len() {
        return Err(CoreError::Shape {
            what: "focal class targets".into(),
            expected: sh,
            actual: vec![gt.len()],
        });
    }
    let (m, k) = (sh[0], sh[1]);
    let mut problems = Vec::new();
    for (i, &c) in gt.iter().enumerate() {
        if c >= k {
            problems.push(format!("row {i} labels class {c}, head has {k}"));
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Validation { what: "class labels".into(), problems });
    }
    let mut onehot = vec![0.0; m * k];
    for (i, &c) in gt.iter().enumerate() {
        onehot[i * k + c] = 1.0;
    }
    let mask = s.g.constant(onehot, &[m, k]);
    let lp = s.g.log_softmax_last(logits);
    let picked = s.g.mul(lp, mask);
    let lp_gt = s.g.sum_last(picked);
    let nll = s.g.neg(lp_gt);
    let weighted = if gamma == 0.0 {
        nll
    } else {
        let p_gt = s.g.exp(lp_gt);
        let base = s.g.neg(p_gt);
        let base = s.g.add_scalar(base, 1.0);
        // The clamp floor keeps the pow gradient finite when p_gt saturates.
        let base = s.g.clamp(base, 1e-12, 1.0);
        let w = s.g.pow_scalar(base, gamma);
        s.g.mul(w, nll)
    };
    Ok(s.g.mean_all(weighted))
}

/// Focal loss of [K, ...spatial] logits against per-cell labels laid out in
/// the same spatial order.
pub fn cellwise_focal_loss(
    s: &mut Session,
    logits: TensorId,
    gt: &[u8],
    gamma: f64,
) -> Result<TensorId, CoreError> {
    let sh = s.g.shape(logits).to_vec();
    let k = sh[0];
    let cells: usize = sh[1..].iter().product();
    if sh.len() < 2 || cells != gt.len() {
        return Err(CoreError::Shape {
            what: "cell labels".into(),
            expected: vec![k, gt.len()],
            actual: sh,
        });
    }
    let flat = s.g.reshape(logits, &[k, cells]);
    let rows = s.g.transpose2(flat);
    let labels: Vec<usize> = gt.iter().map(|&c| c as usize).collect();
    softmax_focal_mean(s, rows, &labels, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegDecoderConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl SegDecoderConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "segmentation decoder config".into(), problems })
        }
    }
}

/// Encoder-decoder segmentation head. Two pooling stages record their argmax
/// indices; the decoder unpools through those indices, so the output grid is
/// exactly the input grid.
pub struct SegDecoder {
    cfg: SegDecoderConfig,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    mid: Conv2dLayer,
    dec2: Conv2dLayer,
    dec1: Conv2dLayer,
    out: Conv2dLayer,
}

impl SegDecoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: SegDecoderConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let h = cfg.hidden;
        let enc1 = Conv2dLayer::init(store, rng, &format!("{name}.enc1"), cfg.in_channels, h, 3, 1, 1);
        let enc2 = Conv2dLayer::init(store, rng, &format!("{name}.enc2"), h, h, 3, 1, 1);
        let mid = Conv2dLayer::init(store, rng, &format!("{name}.mid"), h, h, 3, 1, 1);
        let dec2 = Conv2dLayer::init(store, rng, &format!("{name}.dec2"), h, h, 3, 1, 1);
        let dec1 = Conv2dLayer::init(store, rng, &format!("{name}.dec1"), h, h, 3, 1, 1);
        let out = Conv2dLayer::init(store, rng, &format!("{name}.out"), h, cfg.classes, 1, 1, 0);
        Ok(Self { cfg, enc1, enc2, mid, dec2, dec1, out })
    }

    pub fn config(&self) -> &SegDecoderConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        [&self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1, &self.out]
            .iter()
            .map(|c| c.param_count())
            .sum()
    }

    /// Analytic multiply count over a `side x side` grid.
    pub fn flop_proxy(&self, side: usize) -> u64 {
        self.enc1.flops(side, side)
            + self.enc2.flops(side / 2, side / 2)
            + self.mid.flops(side / 4, side / 4)
            + self.dec2.flops(side / 2, side / 2)
            + self.dec1.flops(side, side)
            + self.out.flops(side, side)
    }

    /// [C, H, W] -> [classes, H, W]; H and W must survive two halvings.
    pub fn forward(&self, s: &mut Session, bev: TensorId) -> Result<TensorId, CoreError> {
        let sh = s.g.shape(bev).to_vec();
        if sh.len() != 3 || sh[0] != self.cfg.in_channels || sh[1] % 4 != 0 || sh[2] % 4 != 0 {
            return Err(CoreError::Shape {
                what: "segmentation input".into(),
                expected: vec![self.cfg.in_channels, 4, 4],
                actual: sh,
            });
        }
        let e1 = self.enc1.forward(s, bev);
        let e1 = s.g.relu(e1);
        let p1 = s.g.max_pool2d(e1, 2, 2);
        let e2 = self.enc2.forward(s, p1);
        let e2 = s.g.relu(e2);
        let p2 = s.g.max_pool2d(e2, 2, 2);
        let m = self.mid.forward(s, p2);
        let m = s.g.relu(m);
        let u2 = s.g.max_unpool2d(m, p2);
        let d2 = self.dec2.forward(s, u2);
        let d2 = s.g.relu(d2);
        let u1 = s.g.max_unpool2d(d2, p1);
        let d1 = self.dec1.forward(s, u1);
        let d1 = s.g.relu(d1);
        Ok(self.out.forward(s, d1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccHeadConfig {
    pub in_channels: usize,
    pub hidden: usize,
    /// Semantic classes plus free space.
    pub classes: usize,
}

impl OccHeadConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.classes == 1 {
            problems.push("classes must include at least one semantic class besides free".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "occupancy head config".into(), problems })
        }
    }
}

/// Per-voxel MLP over the channel vector: [C, X, Y, Z] -> [classes, X, Y, Z].
pub struct OccHead {
    cfg: OccHeadConfig,
    l1: Linear,
    l2: Linear,
}

impl OccHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: OccHeadConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let l1 = Linear::init(store, rng, &format!("{name}.l1"), cfg.in_channels, cfg.hidden);
        let l2 = Linear::init(store, rng, &format!("{name}.l2"), cfg.hidden, cfg.classes);
        Ok(Self { cfg, l1, l2 })
    }

    pub fn config(&self) -> &OccHeadConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    /// Analytic multiply count over `n_voxels` channel vectors.
    pub fn flop_proxy(&self, n_voxels: u64) -> u64 {
        n_voxels * (self.cfg.in_channels * self.cfg.hidden + self.cfg.hidden * self.cfg.classes) as u64
    }

    pub fn forward(&self, s: &mut Session, voxels: TensorId) -> Result<TensorId, CoreError> {
        let sh = s.g.shape(voxels).to_vec();
        if sh.len() != 4 || sh[0] != self.cfg.in_channels {
            return Err(CoreError::Shape {
                what: "occupancy input".into(),
                expected: vec![self.cfg.in_channels, 0, 0, 0],
                actual: sh,
            });
        }
        let (c, nx, ny, nz) = (sh[0], sh[1], sh[2], sh[3]);
        let flat = s.g.reshape(voxels, &[c, nx * ny * nz]);
        let rows = s.g.transpose2(flat);
        let h = self.l1.forward(s, rows);
        let h = s.g.relu(h);
        let logits = self.l2.forward(s, h);
        let back = s.g.transpose2(logits);
        Ok(s.g.reshape(back, &[self.cfg.classes, nx, ny, nz]))
    }
}

/// Depth supervision for one camera. `all_masked` flags a frame with no
/// usable depth at all; the loss is then a plain zero.
pub struct DepthSupervision {
    pub loss: TensorId,
    pub n_valid: usize,
    pub all_masked: bool,
}

/// Binary cross-entropy between the predicted bin distribution and one-hot
/// binned ground truth, averaged over valid pixels. A pixel is valid when its
/// depth is positive and falls inside the bin range; everything else carries
/// no gradient.
pub fn depth_loss(
    s: &mut Session,
    pred: &DepthDistribution,
    gt_depth: &[f64],
) -> Result<DepthSupervision, CoreError> {
    let sh = s.g.shape(pred.probs).to_vec();
    if sh.len() != 3 || sh[0] != pred.bins || sh[1] * sh[2] != gt_depth.len() {
        return Err(CoreError::Shape {
            what: "depth ground truth".into(),
            expected: sh,
            actual: vec![pred.bins, gt_depth.len()],
        });
    }
    let (b, hw) = (pred.bins, gt_depth.len());
    let (d0, d1) = pred.depth_range;
    let width = (d1 - d0) / b as f64;
    let mut onehot = vec![0.0; b * hw];
    let mut offbin = vec![0.0; b * hw];
    let mut n_valid = 0usize;
    for (px, &d) in gt_depth.iter().enumerate() {
        if d <= 0.0 || d < d0 || d >= d1 {
            continue;
        }
        let bin = (((d - d0) / width) as usize).min(b - 1);
        n_valid += 1;
        for bi in 0..b {
            if bi == bin {
                onehot[bi * hw + px] = 1.0;
            } else {
                offbin[bi * hw + px] = 1.0;
            }
        }
    }
    if n_valid == 0 {
        return Ok(DepthSupervision {
            loss: s.g.constant_scalar(0.0),
            n_valid: 0,
            all_masked: true,
        });
    }
    let flat = s.g.reshape(pred.probs, &[b, hw]);
    let p = s.g.clamp(flat, PROB_EPS, 1.0 - PROB_EPS);
    let q = s.g.neg(p);
    let q = s.g.add_scalar(q, 1.0);
    let ln_p = s.g.ln(p);
    let ln_q = s.g.ln(q);
    let t = s.g.constant(onehot, &[b, hw]);
    let nt = s.g.constant(offbin, &[b, hw]);
    let hit = s.g.mul(t, ln_p);
    let miss = s.g.mul(nt, ln_q);
    let sum = s.g.add(hit, miss);
    let total = s.g.sum_all(sum);
    let total = s.g.neg(total);
    let loss = s.g.mul_scalar(total, 1.0 / n_valid as f64);
    Ok(DepthSupervision { loss, n_valid, all_masked: false })
}

/// Min-pools a full-resolution depth map to feature resolution, skipping
/// zeros (no geometry). Patches with no geometry stay zero.
pub fn downsample_depth_min(depth: &[f64], h: usize, w: usize, stride: usize) -> Vec<f64> {
    assert_eq!(depth.len(), h * w, "depth map size");
    assert!(stride > 0 && h % stride == 0 && w % stride == 0, "stride must tile the image");
    let (ho, wo) = (h / stride, w / stride);
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut best = f64::INFINITY;
            for dy in 0..stride {
                for dx in 0..stride {
                    let v = depth[(oy * stride + dy) * w + ox * stride + dx];
                    if v > 0.0 && v < best {
                        best = v;
                    }
                }
            }
            if best.is_finite() {
                out[oy * wo + ox] = best;
            }
        }
    }
    out
}

/// Exact minimum-cost one-to-one assignment on a dense `rows x cols` cost
/// matrix. Matches `min(rows, cols)` pairs and returns them as (row, col).
pub fn hungarian_min_cost(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        return hungarian_min_cost(&t, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
    }
    // Potential-based assignment over a virtual column 0; 1-based indices.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| matched[j] != 0).map(|j| (matched[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Ground-truth box as the 9-dim vector the heads regress.
pub fn box_gt_vector(b: &BoxGt) -> [f64; BOX_DIMS] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw,
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Assignment plus the two detection losses it induces.
pub struct MatchOutcome {
    /// (prediction, ground truth) index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub cls: TensorId,
    pub bbox: TensorId,
}

/// Matches predictions to ground truth by minimum cost, then supervises
/// matched boxes with L1 on all 9 dims and every prediction with sigmoid
/// focal classification (unmatched ones as background). Both losses divide by
/// the number of matches, floored at one.
pub fn bbox_matching_and_loss(
    s: &mut Session,
    out: &DetectionOutput,
    gts: &[BoxGt],
    fp: &FocalParams,
) -> Result<MatchOutcome, CoreError> {
    let lsh = s.g.shape(out.logits).to_vec();
    let (n, k) = (lsh[0], lsh[1]);
    let bsh = s.g.shape(out.boxes).to_vec();
    if bsh != [n, BOX_DIMS] {
        return Err(CoreError::Shape {
            what: "matched boxes".into(),
            expected: vec![n, BOX_DIMS],
            actual: bsh,
        });
    }
    let mut problems = Vec::new();
    for (j, g) in gts.iter().enumerate() {
        if g.class_id >= k {
            problems.push(format!("ground truth {j} has class {}, head has {k}", g.class_id));
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Validation { what: "ground truth classes".into(), problems });
    }

    let logits = s.g.data(out.logits).to_vec();
    let boxes = s.g.data(out.boxes).to_vec();
    let m = gts.len();
    let pairs = if m == 0 {
        Vec::new()
    } else {
        let mut cost = vec![0.0; n * m];
        for i in 0..n {
            for (j, g) in gts.iter().enumerate() {
                let p = sigmoid(logits[i * k + g.class_id])
                    .clamp(PROB_EPS, 1.0 - PROB_EPS);
                let pos = fp.alpha * (1.0 - p).powf(fp.gamma) * (-p.ln());
                let neg = (1.0 - fp.alpha) * p.powf(fp.gamma) * (-(1.0 - p).ln());
                let gv = box_gt_vector(g);
                let l1: f64 = (0..BOX_DIMS)
                    .map(|d| (boxes[i * BOX_DIMS + d] - gv[d]).abs())
                    .sum();
                cost[i * m + j] = (pos - neg) + l1;
            }
        }
        hungarian_min_cost(&cost, n, m)
    };
    let n_matched = pairs.len().max(1) as f64;

    let bbox = if pairs.is_empty() {
        s.g.constant_scalar(0.0)
    } else {
        let idx: Vec<i64> = pairs.iter().map(|&(i, _)| i as i64).collect();
        let picked = s.g.gather_rows(out.boxes, std::sync::Arc::new(idx));
        let gt_rows: Vec<f64> =
            pairs.iter().flat_map(|&(_, j)| box_gt_vector(&gts[j])).collect();
        let gt_t = s.g.constant(gt_rows, &[pairs.len(), BOX_DIMS]);
        let diff = s.g.sub(picked, gt_t);
        let l1 = s.g.abs(diff);
        let total = s.g.sum_all(l1);
        s.g.mul_scalar(total, 1.0 / n_matched)
    };

    let mut targets = vec![0.0; n * k];
    for &(i, j) in &pairs {
        targets[i * k + gts[j].class_id] = 1.0;
    }
    let cls_sum = sigmoid_focal_sum(s, out.logits, &targets, fp)?;
    let cls = s.g.mul_scalar(cls_sum, 1.0 / n_matched);
    Ok(MatchOutcome { pairs, cls, bbox })
}

/// Component losses feeding the weighted total. Absent tasks simply do not
/// contribute.
#[derive(Default, Clone, Copy)]
pub struct LossParts {
    pub depth: Option<TensorId>,
    pub cls: Option<TensorId>,
    pub bbox: Option<TensorId>,
    pub seg: Option<TensorId>,
    pub occ: Option<TensorId>,
}

/// Weighted sum of the task losses. The four-task mode ignores occupancy.
/// Terms with zero weight are skipped outright, so their parameters receive
/// no gradient at all.
pub fn total_loss(
    s: &mut Session,
    parts: &LossParts,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<TensorId, CoreError> {
    weights.validate()?;
    let mut terms: Vec<(&str, Option<TensorId>, f64)> = vec![
        ("depth", parts.depth, weights.alpha_depth),
        ("cls", parts.cls, weights.alpha_cls),
        ("bbox", parts.bbox, weights.alpha_bbox),
        ("seg", parts.seg, weights.alpha_seg),
    ];
    if mode == LossMode::FiveTask {
        terms.push(("occ", parts.occ, weights.alpha_occ));
    }
    let mut total: Option<TensorId> = None;
    for (name, part, alpha) in terms {
        let Some(t) = part else { continue };
        let v = s.g.scalar_value(t);
        if !v.is_finite() {
            return Err(CoreError::NonFiniteLoss { component: name.into(), value: v });
        }
        if alpha == 0.0 {
            continue;
        }
        let scaled = s.g.mul_scalar(t, alpha);
        total = Some(match total {
            None => scaled,
            Some(acc) => s.g.add(acc, scaled),
        });
    }
    Ok(total.unwrap_or_else(|| s.g.constant_scalar(0.0)))
}

/// Channels of the dense regression map: sub-cell offset (2), z (1), log
/// sizes (3), yaw as sin/cos (2), velocity (2).
pub const DENSE_REG_CHANNELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseDetectConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl DenseDetectConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "dense detect config".into(), problems })
        }
    }
}

/// Heatmap logits and regression maps over the detection grid.
pub struct DenseDetection {
    /// [classes, X, Y].
    pub heat: TensorId,
    /// [DENSE_REG_CHANNELS, X, Y].
    pub regs: TensorId,
}

/// Center-heatmap detection head for the dense baseline: one shared trunk
/// conv, a per-class heatmap, and a stack of regression maps.
pub struct DenseDetectHead {
    cfg: DenseDetectConfig,
    trunk: Conv2dLayer,
    heat: Conv2dLayer,
    reg: Conv2dLayer,
}

impl DenseDetectHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: DenseDetectConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let trunk =
            Conv2dLayer::init(store, rng, &format!("{name}.trunk"), cfg.in_channels, cfg.hidden, 3, 1, 1);
        let heat = Conv2dLayer::init(store, rng, &format!("{name}.heat"), cfg.hidden, cfg.n_classes, 1, 1, 0);
        // Bias starts low so the heatmap begins near empty.
        for v in store
            .get_mut(&format!("{name}.heat.bias"))
            .expect("freshly created bias")
            .array
            .data_mut()
        {
            *v = -2.19;
        }
        let reg = Conv2dLayer::init(
            store,
            rng,
            &format!("{name}.reg"),
            cfg.hidden,
            DENSE_REG_CHANNELS,
            1,
            1,
            0,
        );
        Ok(Self { cfg, trunk, heat, reg })
    }

    pub fn config(&self) -> &DenseDetectConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.heat.param_count() + self.reg.param_count()
    }

    /// Analytic multiply count over a `side x side` grid.
    pub fn flop_proxy(&self, side: usize) -> u64 {
        self.trunk.flops(side, side) + self.heat.flops(side, side) + self.reg.flops(side, side)
    }

    pub fn forward(&self, s: &mut Session, bev: TensorId) -> Result<DenseDetection, CoreError> {
        let sh = s.g.shape(bev).to_vec();
        if sh.len() != 3 || sh[0] != self.cfg.in_channels {
            return Err(CoreError::Shape {
                what: "dense detection input".into(),
                expected: vec![self.cfg.in_channels, 0, 0],
                actual: sh,
            });
        }
        let t = self.trunk.forward(s, bev);
        let t = s.g.relu(t);
        Ok(DenseDetection { heat: self.heat.forward(s, t), regs: self.reg.forward(s, t) })
    }
}

/// Supervision maps for the dense head on one frame.
pub struct DenseTargets {
    /// [classes, X, Y] gaussian heatmap, exactly 1 at object centers.
    pub heat: Vec<f64>,
    /// [DENSE_REG_CHANNELS, X, Y], meaningful only where `mask` is 1.
    pub regs: Vec<f64>,
    /// [X, Y] center-cell indicator.
    pub mask: Vec<f64>,
    pub n_pos: usize,
}

/// Rasterizes ground-truth boxes onto the detection grid: a gaussian splat
/// per center on the class heatmap and exact regression values at the center
/// cell. Boxes outside the grid are skipped.
pub fn dense_detection_targets(grid: &GridSpec, gts: &[BoxGt], n_classes: usize) -> DenseTargets {
    let side = grid.side();
    let mut heat = vec![0.0; n_classes * side * side];
    let mut regs = vec![0.0; DENSE_REG_CHANNELS * side * side];
    let mut mask = vec![0.0; side * side];
    let mut n_pos = 0usize;
    for g in gts {
        if g.class_id >= n_classes {
            continue;
        }
        let Some((ix, iy)) = grid.cell_index(g.center[0], g.center[1]) else { continue };
        let sigma = ((g.size[0] + g.size[1]) * 0.5 / grid.cell / 6.0).max(0.8);
        let reach = (3.0 * sigma).ceil() as isize;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                let (cx, cy) = (ix as isize + dx, iy as isize + dy);
                if cx < 0 || cy < 0 || cx >= side as isize || cy >= side as isize {
                    continue;
                }
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let at = (g.class_id * side + cx as usize) * side + cy as usize;
                if w > heat[at] {
                    heat[at] = w;
                }
            }
        }
        let cell = ix * side + iy;
        let (ccx, ccy) = grid.cell_center(ix, iy);
        let values = [
            (g.center[0] - ccx) / grid.cell,
            (g.center[1] - ccy) / grid.cell,
            g.center[2],
            g.size[0].ln(),
            g.size[1].ln(),
            g.size[2].ln(),
            g.yaw.sin(),
            g.yaw.cos(),
            g.velocity[0],
            g.velocity[1],
        ];
        for (c, v) in values.iter().enumerate() {
            regs[c * side * side + cell] = *v;
        }
        heat[g.class_id * side * side + cell] = 1.0;
        if mask[cell] == 0.0 {
            n_pos += 1;
        }
        mask[cell] = 1.0;
    }
    DenseTargets { heat, regs, mask, n_pos }
}

/// Penalty-reduced focal loss on the heatmap plus masked L1 on the
/// regression maps, both divided by the number of centers (floored at one).
pub fn dense_detection_loss(
    s: &mut Session,
    det: &DenseDetection,
    targets: &DenseTargets,
) -> Result<(TensorId, TensorId), CoreError> {
    let hs = s.g.shape(det.heat).to_vec();
    let cells: usize = hs.iter().product();
    if cells != targets.heat.len() {
        return Err(CoreError::Shape {
            what: "dense heat targets".into(),
            expected: hs,
            actual: vec![targets.heat.len()],
        });
    }
    let norm = 1.0 / targets.n_pos.max(1) as f64;

    let p = s.g.sigmoid(det.heat);
    let p = s.g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = s.g.neg(p);
    let q = s.g.add_scalar(q, 1.0);
    let ln_p = s.g.ln(p);
    let ln_q = s.g.ln(q);
    let pos_mask: Vec<f64> = targets.heat.iter().map(|&y| if y == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg_weight: Vec<f64> =
        targets.heat.iter().map(|&y| if y == 1.0 { 0.0 } else { (1.0 - y).powi(4) }).collect();
    let pm = s.g.constant(pos_mask, &hs);
    let nw = s.g.constant(neg_weight, &hs);
    let wp = s.g.pow_scalar(q, 2.0);
    let pos = s.g.mul(wp, ln_p);
    let pos = s.g.mul(pos, pm);
    let wn = s.g.pow_scalar(p, 2.0);
    let neg = s.g.mul(wn, ln_q);
    let neg = s.g.mul(neg, nw);
    let both = s.g.add(pos, neg);
    let total = s.g.sum_all(both);
    let total = s.g.neg(total);
    let heat_loss = s.g.mul_scalar(total, norm);

    let rs = s.g.shape(det.regs).to_vec();
    let plane = rs[1] * rs[2];
    if targets.regs.len() != DENSE_REG_CHANNELS * plane || targets.mask.len() != plane {
        return Err(CoreError::Shape {
            what: "dense regression targets".into(),
            expected: rs,
            actual: vec![targets.regs.len()],
        });
    }
    let mut mask_full = Vec::with_capacity(DENSE_REG_CHANNELS * plane);
    for _ in 0..DENSE_REG_CHANNELS {
        mask_full.extend_from_slice(&targets.mask);
    }
    let gt = s.g.constant(targets.regs.clone(), &rs);
    let mk = s.g.constant(mask_full, &rs);
    let diff = s.g.sub(det.regs, gt);
    let l1 = s.g.abs(diff);
    let l1 = s.g.mul(l1, mk);
    let reg_total = s.g.sum_all(l1);
    let reg_loss = s.g.mul_scalar(reg_total, norm);
    Ok((heat_loss, reg_loss))
}

/// One box decoded from the dense maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; BOX_DIMS],
}

/// Reads box proposals off the dense maps: cells that are a 3x3 local
/// maximum of their class heatmap and clear the score threshold, best first.
pub fn decode_dense(
    s: &Session,
    det: &DenseDetection,
    grid: &GridSpec,
    score_thresh: f64,
    max_out: usize,
) -> Vec<DecodedBox> {
    let hs = s.g.shape(det.heat);
    let (k, side) = (hs[0], hs[1]);
    let heat = s.g.data(det.heat);
    let regs = s.g.data(det.regs);
    let plane = side * side;
    let mut found: Vec<DecodedBox> = Vec::new();
    for c in 0..k {
        let map = &heat[c * plane..(c + 1) * plane];
        for ix in 0..side {
            for iy in 0..side {
                let v = map[ix * side + iy];
                let score = sigmoid(v);
                if score < score_thresh {
                    continue;
                }
                let mut is_peak = true;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
                            continue;
                        }
                        if map[nx as usize * side + ny as usize] > v {
                            is_peak = false;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let cell = ix * side + iy;
                let r = |ch: usize| regs[ch * plane + cell];
                let (ccx, ccy) = grid.cell_center(ix, iy);
                let bbox = [
                    ccx + r(0) * grid.cell,
                    ccy + r(1) * grid.cell,
                    r(2),
                    r(3).exp(),
                    r(4).exp(),
                    r(5).exp(),
                    r(6).atan2(r(7)),
                    r(8),
                    r(9),
                ];
                found.push(DecodedBox { class_id: c, score, bbox });
            }
        }
    }
    found.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then(a.bbox[0].partial_cmp(&b.bbox[0]).unwrap())
    });
    found.truncate(max_out);
    found
}
