//! Iterative prediction and planning decoder.
//!
//! Queries are the ego token plus the top scoring detected instances; the
//! scene enters as occupancy grid tokens pooled from the voxel features.
//! Each decoder layer runs self-attention, cross-attention onto the initial
//! queries, cross-attention onto the occupancy tokens, and a feed-forward
//! block, all in pre-norm residual form. Every layer's queries are decoded
//! by a shared trajectory head into per-agent future paths (token 0 is the
//! ego plan), and the losses supervise all layers.

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;

use duoview_tensor::nn::{LayerNorm, Linear, ParamStore, Session};
use duoview_tensor::TensorId;

use crate::encoder::VoxelFeatureMap;
use crate::scene::{EgoState, EGO_HISTORY_LEN, OCC_CLASSES};
use crate::sparse::BOX_DIMS;
use crate::CoreError;

/// Width of the flattened ego-state vector fed to the ego token lift.
pub const EGO_INPUT_DIM: usize = EGO_HISTORY_LEN * 2 + 6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanningConfig {
    /// Instance feature width coming from the detector.
    pub det_dim: usize,
    /// Positional encoding width; three axes of sin/cos pairs.
    pub pe_dim: usize,
    /// Voxel feature channels entering the occupancy tokens.
    pub vox_channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward and trajectory-head hidden width.
    pub hidden: usize,
    /// Detections kept as query tokens, by descending score.
    pub top_k: usize,
    /// Future steps per trajectory.
    pub horizon: usize,
}

impl PlanningConfig {
    /// Query width: instance features with the positional encoding appended.
    pub fn dim(&self) -> usize {
        self.det_dim + self.pe_dim
    }

    /// Class embedding width that makes occupancy tokens exactly query-wide.
    pub fn occ_embed_dim(&self) -> usize {
        self.dim().saturating_sub(self.vox_channels + self.pe_dim)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if self.det_dim == 0 {
            problems.push("det_dim must be positive".to_string());
        }
        if self.pe_dim == 0 || self.pe_dim % 6 != 0 {
            problems.push(format!(
                "pe_dim must be a positive multiple of 6 (sin/cos pairs over three axes), got {}",
                self.pe_dim
            ));
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".to_string());
        } else if self.dim() % self.n_heads != 0 {
            problems.push(format!("query width {} not divisible by {} heads", self.dim(), self.n_heads));
        }
        if self.vox_channels == 0 {
            problems.push("vox_channels must be positive".to_string());
        }
        if self.occ_embed_dim() == 0 {
            problems.push(format!(
                "no room for a class embedding: width {} <= vox_channels {} + pe_dim {}",
                self.dim(),
                self.vox_channels,
                self.pe_dim
            ));
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be positive".to_string());
        }
        if self.hidden == 0 {
            problems.push("hidden must be positive".to_string());
        }
        if self.horizon == 0 {
            problems.push("horizon must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "planning config".to_string(), problems })
        }
    }
}

/// Sinusoidal encoding of a 3D point: `pe_dim / 3` values per axis, as
/// `pe_dim / 6` sin/cos pairs over geometrically spaced wavelengths. A pure
/// function of the coordinates, so identical points always encode alike.
pub fn positional_encoding(p: [f64; 3], pe_dim: usize) -> Vec<f64> {
    assert_eq!(pe_dim % 6, 0, "pe_dim {pe_dim} must be a multiple of 6");
    let n_freq = pe_dim / 6;
    let mut out = Vec::with_capacity(pe_dim);
    for &c in &p {
        for f in 0..n_freq {
            let omega = 10000f64.powf(-(f as f64) / n_freq as f64);
            out.push((c * omega).sin());
            out.push((c * omega).cos());
        }
    }
    out
}

/// Ego token plus detection tokens, with each token's reference point.
pub struct PlanningQuerySet {
    /// `[K+1, dim]`; row 0 is the ego token.
    pub feats: TensorId,
    /// Per-token (x, y) reference: the origin for ego, box centers otherwise.
    pub refs: Vec<[f64; 2]>,
    /// Detection tokens kept.
    pub k: usize,
    /// Source instance index of each kept detection token, selection order.
    pub picked: Vec<usize>,
}

/// Scene tokens for the occupancy cross-attention.
pub struct OccTokenSet {
    /// `[T, dim]` in (x, y, z) row-major cell order.
    pub tokens: TensorId,
    /// Downsampled grid dims `[tx, ty, tz]`.
    pub dims: [usize; 3],
}

impl OccTokenSet {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Futures for every token of one decoder layer.
pub struct TrajectorySet {
    /// `[K+1, horizon*2]`: step points flattened as (x1, y1, x2, y2, ...).
    pub points: TensorId,
    pub horizon: usize,
    /// Agent count, excluding the ego token.
    pub n_agents: usize,
}

impl TrajectorySet {
    /// Eager read of token `i`'s trajectory.
    pub fn agent_points(&self, s: &Session, i: usize) -> Vec<[f64; 2]> {
        let data = s.g.data(self.points);
        let row = &data[i * self.horizon * 2..(i + 1) * self.horizon * 2];
        row.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }
}

/// Intermediate queries of one decoder layer, in sublayer order.
pub struct StepTrace {
    pub after_self: TensorId,
    pub after_query_cross: TensorId,
    pub after_occ_cross: TensorId,
    pub after_ffn: TensorId,
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
}

impl Attention {
    fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, dim: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::init(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::init(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::init(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::init(store, rng, &format!("{name}.out"), dim, dim),
            n_heads,
        }
    }

    fn forward(&self, s: &mut Session, x: TensorId, kv: TensorId) -> TensorId {
        let q = self.q.forward(s, x);
        let k = self.k.forward(s, kv);
        let v = self.v.forward(s, kv);
        let dh = self.q.out_dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = s.g.slice_cols(q, h * dh, dh);
            let kh = s.g.slice_cols(k, h * dh, dh);
            let vh = s.g.slice_cols(v, h * dh, dh);
            let scores = s.g.matmul_tb(qh, kh);
            let scaled = s.g.mul_scalar(scores, scale);
            let w = s.g.softmax_last(scaled);
            heads.push(s.g.matmul(w, vh));
        }
        let cat = s.g.concat_last(&heads);
        self.out.forward(s, cat)
    }

    fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }
}

struct PlanLayer {
    self_ln: LayerNorm,
    self_attn: Attention,
    q0_ln: LayerNorm,
    q0_attn: Attention,
    occ_ln: LayerNorm,
    occ_attn: Attention,
    ffn_ln: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

pub struct PlanningDecoder {
    pub cfg: PlanningConfig,
    name: String,
    ego_lift: Linear,
    layers: Vec<PlanLayer>,
    traj1: Linear,
    traj2: Linear,
}

impl PlanningDecoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: PlanningConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let dim = cfg.dim();
        let ego_lift = Linear::init(store, rng, &format!("{name}.ego_lift"), EGO_INPUT_DIM, cfg.det_dim);
        store.insert(
            &format!("{name}.occ_embed"),
            duoview_tensor::nn::kaiming_normal(rng, &[OCC_CLASSES, cfg.occ_embed_dim()], cfg.occ_embed_dim()),
            duoview_tensor::nn::ParamKind::Other,
        );
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = format!("{name}.layer{l}");
            layers.push(PlanLayer {
                self_ln: LayerNorm::init(store, &format!("{base}.self_ln"), dim),
                self_attn: Attention::init(store, rng, &format!("{base}.self_attn"), dim, cfg.n_heads),
                q0_ln: LayerNorm::init(store, &format!("{base}.q0_ln"), dim),
                q0_attn: Attention::init(store, rng, &format!("{base}.q0_attn"), dim, cfg.n_heads),
                occ_ln: LayerNorm::init(store, &format!("{base}.occ_ln"), dim),
                occ_attn: Attention::init(store, rng, &format!("{base}.occ_attn"), dim, cfg.n_heads),
                ffn_ln: LayerNorm::init(store, &format!("{base}.ffn_ln"), dim),
                ffn1: Linear::init(store, rng, &format!("{base}.ffn1"), dim, cfg.hidden),
                ffn2: Linear::init(store, rng, &format!("{base}.ffn2"), cfg.hidden, dim),
            });
        }
        let traj1 = Linear::init(store, rng, &format!("{name}.traj1"), dim, cfg.hidden);
        let traj2 = Linear::init(store, rng, &format!("{name}.traj2"), cfg.hidden, cfg.horizon * 2);
        Ok(Self { cfg, name: name.to_string(), ego_lift, layers, traj1, traj2 })
    }

    pub fn param_count(&self) -> usize {
        let dim = self.cfg.dim();
        let per_layer: usize = self
            .layers
            .first()
            .map(|l| {
                l.self_attn.param_count()
                    + l.q0_attn.param_count()
                    + l.occ_attn.param_count()
                    + l.ffn1.param_count()
                    + l.ffn2.param_count()
                    + 4 * 2 * dim
            })
            .unwrap_or(0);
        self.ego_lift.param_count()
            + OCC_CLASSES * self.cfg.occ_embed_dim()
            + per_layer * self.layers.len()
            + self.traj1.param_count()
            + self.traj2.param_count()
    }

    /// Analytic multiply count of one decode over `occ_tokens` scene tokens,
    /// assuming the full `top_k` query set.
    pub fn flop_proxy(&self, occ_tokens: u64) -> u64 {
        let dim = self.cfg.dim() as u64;
        let rows = self.cfg.top_k as u64 + 1;
        let h = self.cfg.hidden as u64;
        // Projections for queries, keys, values and the output, plus the
        // score and value products of every head.
        let attn = |nq: u64, nk: u64| (2 * nq + 2 * nk) * dim * dim + 2 * nq * nk * dim;
        let per_layer = attn(rows, rows)
            + attn(rows, rows)
            + attn(rows, occ_tokens)
            + 2 * rows * dim * h
            + rows * dim * h
            + rows * h * 2 * self.cfg.horizon as u64;
        (EGO_INPUT_DIM as u64) * self.cfg.det_dim as u64 + per_layer * self.cfg.n_layers as u64
    }

    /// Stacks the ego token over the `top_k` best detections.
    ///
    /// `feats` is `[M, det_dim]` instance features, `boxes` is `[M, 9]`.
    /// Positional encodings are computed from the eager box centers and enter
    /// as constants; gradients flow through the instance features only.
    pub fn build_queries(
        &self,
        s: &mut Session,
        feats: TensorId,
        boxes: TensorId,
        scores: &[f64],
        ego: &EgoState,
    ) -> Result<PlanningQuerySet, CoreError> {
        let fs = s.g.shape(feats).to_vec();
        if fs.len() != 2 || fs[1] != self.cfg.det_dim {
            return Err(CoreError::Shape {
                what: "planning instance features".to_string(),
                expected: vec![scores.len(), self.cfg.det_dim],
                actual: fs,
            });
        }
        let bs = s.g.shape(boxes).to_vec();
        if bs != vec![fs[0], BOX_DIMS] {
            return Err(CoreError::Shape {
                what: "planning instance boxes".to_string(),
                expected: vec![fs[0], BOX_DIMS],
                actual: bs,
            });
        }
        if scores.len() != fs[0] {
            return Err(CoreError::Shape {
                what: "planning instance scores".to_string(),
                expected: vec![fs[0]],
                actual: vec![scores.len()],
            });
        }
        if ego.history.len() != EGO_HISTORY_LEN {
            return Err(CoreError::Shape {
                what: "ego history".to_string(),
                expected: vec![EGO_HISTORY_LEN],
                actual: vec![ego.history.len()],
            });
        }

        // Ego token: lifted state vector with the origin's encoding appended.
        let mut ego_in = Vec::with_capacity(EGO_INPUT_DIM);
        for h in &ego.history {
            ego_in.extend_from_slice(h);
        }
        ego_in.extend_from_slice(&ego.velocity);
        ego_in.extend_from_slice(&ego.accel);
        ego_in.extend_from_slice(&ego.nav_waypoint);
        let ego_const = s.g.constant(ego_in, &[1, EGO_INPUT_DIM]);
        let lifted = self.ego_lift.forward(s, ego_const);
        let origin_pe = s.g.constant(positional_encoding([0.0; 3], self.cfg.pe_dim), &[1, self.cfg.pe_dim]);
        let ego_row = s.g.concat_last(&[lifted, origin_pe]);

        // Highest score first; index order breaks ties deterministically.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate(self.cfg.top_k);
        let k = order.len();
        if k == 0 {
            return Ok(PlanningQuerySet {
                feats: ego_row,
                refs: vec![[0.0, 0.0]],
                k: 0,
                picked: Vec::new(),
            });
        }

        let idx: Vec<i64> = order.iter().map(|&i| i as i64).collect();
        let picked = s.g.gather_rows(feats, Arc::new(idx));
        let box_data = s.g.data(boxes).to_vec();
        let mut refs = vec![[0.0, 0.0]];
        let mut pe = Vec::with_capacity(k * self.cfg.pe_dim);
        for &i in &order {
            let c = &box_data[i * BOX_DIMS..i * BOX_DIMS + 3];
            refs.push([c[0], c[1]]);
            pe.extend(positional_encoding([c[0], c[1], c[2]], self.cfg.pe_dim));
        }
        let pe_const = s.g.constant(pe, &[k, self.cfg.pe_dim]);
        let det_rows = s.g.concat_last(&[picked, pe_const]);
        let all = s.g.concat_rows(&[ego_row, det_rows]);
        Ok(PlanningQuerySet { feats: all, refs, k, picked: order })
    }

    /// Pools occupancy logits and voxel features onto `target` and builds one
    /// token per pooled cell: argmax-class embedding, pooled features, and
    /// the cell center's positional encoding, concatenated channelwise.
    pub fn build_occ_tokens(
        &self,
        s: &mut Session,
        occ_logits: TensorId,
        vox: &VoxelFeatureMap,
        target: [usize; 3],
    ) -> Result<OccTokenSet, CoreError> {
        let os = s.g.shape(occ_logits).to_vec();
        let vs = s.g.shape(vox.data).to_vec();
        if os.len() != 4 || vs.len() != 4 || os[1..] != vs[1..] {
            return Err(CoreError::Shape {
                what: "occupancy token grids".to_string(),
                expected: vs.clone(),
                actual: os,
            });
        }
        if vs[0] != self.cfg.vox_channels {
            return Err(CoreError::Shape {
                what: "occupancy token voxel channels".to_string(),
                expected: vec![self.cfg.vox_channels],
                actual: vec![vs[0]],
            });
        }
        let [tx, ty, tz] = target;
        if tx == 0 || ty == 0 || tz == 0 || tx > vs[1] || ty > vs[2] || tz > vs[3] {
            return Err(CoreError::Shape {
                what: "occupancy token target grid".to_string(),
                expected: vs[1..].to_vec(),
                actual: target.to_vec(),
            });
        }
        let t = tx * ty * tz;

        let pooled_logits = s.g.avg_pool_to_3d(occ_logits, tx, ty, tz);
        let classes: Vec<i64> = {
            let data = s.g.data(pooled_logits);
            let k = os[0];
            (0..t)
                .map(|cell| {
                    let mut best = 0usize;
                    for c in 1..k {
                        if data[c * t + cell] > data[best * t + cell] {
                            best = c;
                        }
                    }
                    best as i64
                })
                .collect()
        };
        let embed = s.param(&format!("{}.occ_embed", self.name));
        let class_rows = s.g.gather_rows(embed, Arc::new(classes));

        let pooled_vox = s.g.avg_pool_to_3d(vox.data, tx, ty, tz);
        let flat = s.g.reshape(pooled_vox, &[self.cfg.vox_channels, t]);
        let vox_rows = s.g.transpose2(flat);

        let spec = &vox.spec;
        let sx = 2.0 * spec.xy.extent / tx as f64;
        let sy = 2.0 * spec.xy.extent / ty as f64;
        let sz = (spec.z_max - spec.z_min) / tz as f64;
        let mut pe = Vec::with_capacity(t * self.cfg.pe_dim);
        for ix in 0..tx {
            for iy in 0..ty {
                for iz in 0..tz {
                    let p = [
                        -spec.xy.extent + (ix as f64 + 0.5) * sx,
                        -spec.xy.extent + (iy as f64 + 0.5) * sy,
                        spec.z_min + (iz as f64 + 0.5) * sz,
                    ];
                    pe.extend(positional_encoding(p, self.cfg.pe_dim));
                }
            }
        }
        let pe_rows = s.g.constant(pe, &[t, self.cfg.pe_dim]);
        let tokens = s.g.concat_last(&[class_rows, vox_rows, pe_rows]);
        Ok(OccTokenSet { tokens, dims: target })
    }

    /// One decoder layer: self-attention, cross-attention onto the initial
    /// queries, cross-attention onto the occupancy tokens, feed-forward.
    /// Every sublayer is pre-norm residual, so zeroed output projections
    /// leave the queries untouched. With no occupancy tokens that sublayer
    /// is skipped.
    pub fn decode_step(
        &self,
        s: &mut Session,
        layer: usize,
        q_prev: TensorId,
        q0: TensorId,
        occ: Option<&OccTokenSet>,
    ) -> Result<StepTrace, CoreError> {
        let l = self.layers.get(layer).ok_or_else(|| CoreError::Validation {
            what: "planning layer index".to_string(),
            problems: vec![format!("layer {layer} of {}", self.layers.len())],
        })?;
        let qs = s.g.shape(q_prev).to_vec();
        if qs.len() != 2 || qs[1] != self.cfg.dim() {
            return Err(CoreError::Shape {
                what: "planning queries".to_string(),
                expected: vec![qs.first().copied().unwrap_or(0), self.cfg.dim()],
                actual: qs,
            });
        }

        let n = l.self_ln.forward(s, q_prev);
        let a = l.self_attn.forward(s, n, n);
        let after_self = s.g.add(q_prev, a);

        let n = l.q0_ln.forward(s, after_self);
        let a = l.q0_attn.forward(s, n, q0);
        let after_query_cross = s.g.add(after_self, a);

        let after_occ_cross = match occ {
            Some(tokens) if !tokens.is_empty() => {
                let n = l.occ_ln.forward(s, after_query_cross);
                let a = l.occ_attn.forward(s, n, tokens.tokens);
                s.g.add(after_query_cross, a)
            }
            _ => after_query_cross,
        };

        let n = l.ffn_ln.forward(s, after_occ_cross);
        let h = self_relu(s, &l.ffn1, n);
        let f = l.ffn2.forward(s, h);
        let after_ffn = s.g.add(after_occ_cross, f);

        Ok(StepTrace { after_self, after_query_cross, after_occ_cross, after_ffn })
    }

    /// Shared trajectory head: per-token step offsets, accumulated from the
    /// token's reference point.
    pub fn decode_trajectories(
        &self,
        s: &mut Session,
        q: TensorId,
        refs: &[[f64; 2]],
    ) -> Result<TrajectorySet, CoreError> {
        let qs = s.g.shape(q).to_vec();
        if qs.len() != 2 || qs[0] != refs.len() || qs[1] != self.cfg.dim() {
            return Err(CoreError::Shape {
                what: "trajectory head input".to_string(),
                expected: vec![refs.len(), self.cfg.dim()],
                actual: qs,
            });
        }
        let h = self_relu(s, &self.traj1, q);
        let offsets = self.traj2.forward(s, h);
        let ref_flat: Vec<f64> = refs.iter().flat_map(|r| [r[0], r[1]]).collect();
        let mut cur = s.g.constant(ref_flat, &[refs.len(), 2]);
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        for j in 0..self.cfg.horizon {
            let off = s.g.slice_cols(offsets, 2 * j, 2);
            cur = s.g.add(cur, off);
            steps.push(cur);
        }
        let points = s.g.concat_last(&steps);
        Ok(TrajectorySet { points, horizon: self.cfg.horizon, n_agents: refs.len() - 1 })
    }

    /// Runs all layers and decodes a trajectory set after each one, deep
    /// supervision style: one set per layer, last entry is the final output.
    pub fn forward(
        &self,
        s: &mut Session,
        queries: &PlanningQuerySet,
        occ: Option<&OccTokenSet>,
    ) -> Result<Vec<TrajectorySet>, CoreError> {
        let q0 = queries.feats;
        let mut q = q0;
        let mut sets = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            q = self.decode_step(s, l, q, q0, occ)?.after_ffn;
            sets.push(self.decode_trajectories(s, q, &queries.refs)?);
        }
        Ok(sets)
    }
}

fn self_relu(s: &mut Session, lin: &Linear, x: TensorId) -> TensorId {
    let y = lin.forward(s, x);
    s.g.relu(y)
}

/// Hinge collision penalty against the ego plan: for every agent and step,
/// `threshold - distance` when closer than `threshold`, zero otherwise.
/// Zero gradient beyond the threshold; the squared distance is floored at
/// 1e-12 so coincident points cannot produce an infinite slope.
pub fn collision_penalty(
    s: &mut Session,
    set: &TrajectorySet,
    threshold: f64,
) -> Result<TensorId, CoreError> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(CoreError::Validation {
            what: "collision threshold".to_string(),
            problems: vec![format!("must be positive and finite, got {threshold}")],
        });
    }
    if set.n_agents == 0 {
        return Ok(s.g.constant_scalar(0.0));
    }
    let ego = s.g.gather_rows(set.points, Arc::new(vec![0]));
    let agent_idx: Vec<i64> = (1..=set.n_agents as i64).collect();
    let agents = s.g.gather_rows(set.points, Arc::new(agent_idx));
    let mut total = s.g.constant_scalar(0.0);
    for j in 0..set.horizon {
        let e = s.g.slice_cols(ego, 2 * j, 2);
        let ev = s.g.reshape(e, &[2]);
        let nev = s.g.neg(ev);
        let a = s.g.slice_cols(agents, 2 * j, 2);
        let d = s.g.add_last(a, nev);
        let d2 = s.g.mul(d, d);
        let sq = s.g.sum_last(d2);
        let guarded = s.g.clamp(sq, 1e-12, f64::INFINITY);
        let dist = s.g.sqrt(guarded);
        let nd = s.g.neg(dist);
        let gap = s.g.add_scalar(nd, threshold);
        let pen = s.g.relu(gap);
        let step_sum = s.g.sum_all(pen);
        total = s.g.add(total, step_sum);
    }
    Ok(total)
}

/// Weights of the end-to-end objective; the perception term enters with
/// weight one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanWeights {
    pub alpha_plan: f64,
    pub alpha_pred: f64,
    pub alpha_col: f64,
    pub collision_threshold: f64,
}

impl Default for PlanWeights {
    fn default() -> Self {
        Self { alpha_plan: 1.0, alpha_pred: 1.0, alpha_col: 1.0, collision_threshold: 3.0 }
    }
}

impl PlanWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("alpha_plan", self.alpha_plan),
            ("alpha_pred", self.alpha_pred),
            ("alpha_col", self.alpha_col),
        ] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.collision_threshold > 0.0) || !self.collision_threshold.is_finite() {
            problems.push(format!(
                "collision_threshold must be positive and finite, got {}",
                self.collision_threshold
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "planning weights".to_string(), problems })
        }
    }
}

/// Ground-truth future for one detection token, matched upstream by the
/// detection assignment.
pub struct AgentFuture {
    /// Token index in 1..=K.
    pub token: usize,
    /// One (x, y) per step, `horizon` entries.
    pub future: Vec<[f64; 2]>,
}

/// The three planning loss components, each already averaged over the
/// supervised layers.
pub struct PlanningLoss {
    pub plan: TensorId,
    pub pred: TensorId,
    pub col: TensorId,
}

/// L1 plan and prediction losses plus the collision penalty, averaged over
/// all supervised trajectory sets.
pub fn planning_loss(
    s: &mut Session,
    sets: &[TrajectorySet],
    ego_gt: &[[f64; 2]],
    agents: &[AgentFuture],
    w: &PlanWeights,
) -> Result<PlanningLoss, CoreError> {
    w.validate()?;
    let mut problems = Vec::new();
    if sets.is_empty() {
        problems.push("no trajectory sets to supervise".to_string());
    }
    for set in sets {
        if set.horizon != ego_gt.len() {
            problems.push(format!(
                "ego ground truth has {} steps, trajectories have {}",
                ego_gt.len(),
                set.horizon
            ));
            break;
        }
    }
    let n_agents = sets.first().map(|s| s.n_agents).unwrap_or(0);
    let mut seen = std::collections::BTreeSet::new();
    for a in agents {
        if a.token == 0 || a.token > n_agents {
            problems.push(format!("agent token {} outside 1..={n_agents}", a.token));
        }
        if !seen.insert(a.token) {
            problems.push(format!("agent token {} matched twice", a.token));
        }
        if sets.first().is_some_and(|s| a.future.len() != s.horizon) {
            problems.push(format!(
                "agent token {} future has {} steps, expected {}",
                a.token,
                a.future.len(),
                sets.first().map(|s| s.horizon).unwrap_or(0)
            ));
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Validation { what: "planning supervision".to_string(), problems });
    }

    let ego_flat: Vec<f64> = ego_gt.iter().flat_map(|p| [p[0], p[1]]).collect();
    let horizon = ego_gt.len();
    let mut plan_acc = None;
    let mut pred_acc = None;
    let mut col_acc = None;
    for set in sets {
        let ego_row = s.g.gather_rows(set.points, Arc::new(vec![0]));
        let gt = s.g.constant(ego_flat.clone(), &[1, horizon * 2]);
        let diff = s.g.sub(ego_row, gt);
        let l1 = s.g.abs(diff);
        let plan = s.g.mean_all(l1);
        plan_acc = Some(match plan_acc {
            None => plan,
            Some(acc) => s.g.add(acc, plan),
        });

        let pred = if agents.is_empty() {
            s.g.constant_scalar(0.0)
        } else {
            let idx: Vec<i64> = agents.iter().map(|a| a.token as i64).collect();
            let rows = s.g.gather_rows(set.points, Arc::new(idx));
            let gt_flat: Vec<f64> =
                agents.iter().flat_map(|a| a.future.iter().flat_map(|p| [p[0], p[1]])).collect();
            let gt = s.g.constant(gt_flat, &[agents.len(), horizon * 2]);
            let diff = s.g.sub(rows, gt);
            let l1 = s.g.abs(diff);
            s.g.mean_all(l1)
        };
        pred_acc = Some(match pred_acc {
            None => pred,
            Some(acc) => s.g.add(acc, pred),
        });

        let col = collision_penalty(s, set, w.collision_threshold)?;
        col_acc = Some(match col_acc {
            None => col,
            Some(acc) => s.g.add(acc, col),
        });
    }
    let inv = 1.0 / sets.len() as f64;
    Ok(PlanningLoss {
        plan: s.g.mul_scalar(plan_acc.unwrap(), inv),
        pred: s.g.mul_scalar(pred_acc.unwrap(), inv),
        col: s.g.mul_scalar(col_acc.unwrap(), inv),
    })
}

/// Full objective: perception loss plus the weighted planning terms. Aborts
/// with the offending component's name if any term went non-finite.
pub fn e2e_total(
    s: &mut Session,
    perception: TensorId,
    loss: &PlanningLoss,
    w: &PlanWeights,
) -> Result<TensorId, CoreError> {
    w.validate()?;
    for (name, id) in
        [("prec", perception), ("plan", loss.plan), ("pred", loss.pred), ("col", loss.col)]
    {
        let v = s.g.scalar_value(id);
        if !v.is_finite() {
            return Err(CoreError::NonFiniteLoss { component: name.to_string(), value: v });
        }
    }
    let mut total = perception;
    for (alpha, id) in
        [(w.alpha_plan, loss.plan), (w.alpha_pred, loss.pred), (w.alpha_col, loss.col)]
    {
        let term = s.g.mul_scalar(id, alpha);
        total = s.g.add(total, term);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> PlanningConfig {
        PlanningConfig {
            det_dim: 8,
            pe_dim: 6,
            vox_channels: 2,
            n_layers: 2,
            n_heads: 2,
            hidden: 16,
            top_k: 4,
            horizon: 3,
        }
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = PlanningConfig {
            det_dim: 0,
            pe_dim: 5,
            vox_channels: 0,
            n_layers: 0,
            n_heads: 0,
            hidden: 0,
            top_k: 0,
            horizon: 0,
        };
        match cfg.validate() {
            Err(CoreError::Validation { what, problems }) => {
                assert_eq!(what, "planning config");
                assert!(problems.len() >= 6, "{problems:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(base_cfg().validate().is_ok());
    }

    #[test]
    fn origin_encoding_alternates_zero_and_one() {
        let pe = positional_encoding([0.0; 3], 12);
        assert_eq!(pe.len(), 12);
        for (i, v) in pe.iter().enumerate() {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, want, "slot {i}");
        }
    }

    #[test]
    fn encoding_is_deterministic_and_coordinate_sensitive() {
        let a = positional_encoding([1.5, -2.0, 0.25], 18);
        let b = positional_encoding([1.5, -2.0, 0.25], 18);
        assert_eq!(a, b);
        let c = positional_encoding([1.5, -2.0, 0.26], 18);
        assert_ne!(a, c);
    }

    #[test]
    fn plan_weights_reject_bad_values() {
        let w = PlanWeights {
            alpha_plan: -1.0,
            alpha_pred: f64::NAN,
            alpha_col: 1.0,
            collision_threshold: 0.0,
        };
        match w.validate() {
            Err(CoreError::Validation { problems, .. }) => assert_eq!(problems.len(), 3),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(PlanWeights::default().validate().is_ok());
    }
}
