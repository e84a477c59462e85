//! Per-task BEV preparation: grid assignment, channel gating, and an
//! independent residual encoder stack per dense task.
//!
//! Every dense task picks its own grid resolution from the fused map, gates
//! channels with a squeeze-style attention, and refines the result with
//! residual conv blocks whose output convs start at zero, so each stack is
//! an exact identity at initialization.

use serde::{Deserialize, Serialize};

use duoview_tensor::nn::{Conv2dLayer, LayerNorm, Linear, ParamStore, Session};
use duoview_tensor::TensorId;
use rand_chacha::ChaCha12Rng;

use crate::encoder::channel_norm;
use crate::geometry::GridSpec;
use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseTask {
    /// Dense detection head over a BEV grid (legacy path; the sparse query
    /// pipeline replaces it in the full configuration).
    Detection,
    BevSegmentation,
    Occupancy,
}

fn default_blocks() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEncodingConfig {
    pub task: DenseTask,
    /// BEV cell size in meters for this task.
    pub grid_cell: f64,
    #[serde(default = "default_blocks")]
    pub n_residual_blocks: usize,
    #[serde(default)]
    pub fpn: bool,
}

impl TaskEncodingConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.grid_cell > 0.0 {
            Ok(())
        } else {
            Err(CoreError::Validation {
                what: "task encoding config".into(),
                problems: vec![format!("grid_cell must be positive, got {}", self.grid_cell)],
            })
        }
    }
}

/// Channel gate: out = sigmoid(W avgpool(F)) * F, broadcast per channel.
/// Works for any [C, spatial...] map; pooling covers all trailing dims.
pub struct AfsGate {
    pub channels: usize,
    lin: Linear,
}

impl AfsGate {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, channels: usize) -> Self {
        Self { channels, lin: Linear::init(store, rng, name, channels, channels) }
    }

    pub fn forward(&self, s: &mut Session, f: TensorId) -> Result<TensorId, CoreError> {
        let sh = s.g.shape(f).to_vec();
        if sh.is_empty() || sh[0] != self.channels {
            return Err(CoreError::Shape {
                what: format!("{} input channels", self.lin.name),
                expected: vec![self.channels],
                actual: sh,
            });
        }
        let pooled = s.g.mean_trailing(f);
        let row = s.g.reshape(pooled, &[1, self.channels]);
        let z = self.lin.forward(s, row);
        let gate = s.g.sigmoid(z);
        let gate = s.g.reshape(gate, &[self.channels]);
        Ok(s.g.mul_col_broadcast(f, gate))
    }
}

struct EncBlock {
    ln: LayerNorm,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl EncBlock {
    fn init(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, ch: usize) -> Self {
        Self {
            ln: LayerNorm::init(store, &format!("{name}.ln"), ch),
            conv1: Conv2dLayer::init(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            // Zero output conv keeps the block an exact identity at start.
            conv2: Conv2dLayer::init_zero(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let h = channel_norm(s, &self.ln, x);
        let h = self.conv1.forward(s, h);
        let h = s.g.relu(h);
        let h = self.conv2.forward(s, h);
        s.g.add(x, h)
    }
}

/// One dense task's private stack: channel gate, residual blocks, and an
/// optional half-resolution integration path. Input and output are both
/// [C, side, side] on the task's grid.
pub struct TaskEncoder {
    pub cfg: TaskEncodingConfig,
    pub prefix: String,
    afs: AfsGate,
    blocks: Vec<EncBlock>,
    fpn_down: Option<Conv2dLayer>,
    fpn_merge: Option<Conv2dLayer>,
}

impl TaskEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cfg: TaskEncodingConfig,
        channels: usize,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let afs = AfsGate::init(store, rng, &format!("{prefix}.afs"), channels);
        let blocks = (0..cfg.n_residual_blocks)
            .map(|b| EncBlock::init(store, rng, &format!("{prefix}.block{b}"), channels))
            .collect();
        let (fpn_down, fpn_merge) = if cfg.fpn {
            (
                Some(Conv2dLayer::init(store, rng, &format!("{prefix}.fpn.down"), channels, channels, 3, 1, 1)),
                // Zero merge conv: the integration path starts silent.
                Some(Conv2dLayer::init_zero(store, &format!("{prefix}.fpn.merge"), channels, channels, 3, 1, 1)),
            )
        } else {
            (None, None)
        };
        Ok(Self { cfg, prefix: prefix.to_string(), afs, blocks, fpn_down, fpn_merge })
    }

    /// Gate then refine; spatial dims are preserved.
    pub fn forward(&self, s: &mut Session, f: TensorId) -> Result<TensorId, CoreError> {
        let gated = self.afs.forward(s, f)?;
        self.encode(s, gated)
    }

    /// The residual stack alone (no channel gate); an exact identity at
    /// initialization because every output conv starts at zero.
    pub fn encode(&self, s: &mut Session, f: TensorId) -> Result<TensorId, CoreError> {
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(s, h);
        }
        if let (Some(down), Some(merge)) = (&self.fpn_down, &self.fpn_merge) {
            let sh = s.g.shape(h).to_vec();
            let (nx, ny) = (sh[1], sh[2]);
            if nx % 2 != 0 || ny % 2 != 0 {
                return Err(CoreError::Validation {
                    what: format!("{} integration path", self.prefix),
                    problems: vec![format!("grid dims ({nx}, {ny}) must be even")],
                });
            }
            let d = s.g.avg_pool_to_2d(h, nx / 2, ny / 2);
            let d = down.forward(s, d);
            let d = s.g.relu(d);
            let u = s.g.upsample2x_nearest(d);
            let u = merge.forward(s, u);
            h = s.g.add(h, u);
        }
        Ok(h)
    }

    /// Gate only, for maps the conv stack does not apply to (voxel grids).
    pub fn gate(&self, s: &mut Session, f: TensorId) -> Result<TensorId, CoreError> {
        self.afs.forward(s, f)
    }

    pub fn param_count(&self) -> usize {
        let c = self.afs.channels;
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| b.ln.param_count() + b.conv1.param_count() + b.conv2.param_count())
            .sum();
        let fpn = self.fpn_down.as_ref().map_or(0, Conv2dLayer::param_count)
            + self.fpn_merge.as_ref().map_or(0, Conv2dLayer::param_count);
        c * (c + 1) + blocks + fpn
    }

    /// Analytic multiply count of one pass over a `side x side` grid;
    /// `gated` includes the channel gate's cost.
    pub fn flop_proxy(&self, side: usize, gated: bool) -> u64 {
        let c = self.afs.channels as u64;
        let gate = if gated { c * c + c * (side as u64).pow(2) } else { 0 };
        let blocks: u64 = self
            .blocks
            .iter()
            .map(|b| b.conv1.flops(side, side) + b.conv2.flops(side, side))
            .sum();
        let fpn = self.fpn_down.as_ref().map_or(0, |d| d.flops(side / 2, side / 2))
            + self.fpn_merge.as_ref().map_or(0, |m| m.flops(side, side));
        gate + blocks + fpn
    }
}

/// Pools the fused map onto a task's coarser grid. The task cell must be an
/// integer multiple of the fused cell; the fused grid itself passes through.
pub fn assign_grid(
    s: &mut Session,
    fused: TensorId,
    fused_grid: &GridSpec,
    task_cell: f64,
) -> Result<(TensorId, GridSpec), CoreError> {
    let target = GridSpec { extent: fused_grid.extent, cell: task_cell };
    target.validate().map_err(|e| CoreError::Validation {
        what: "task grid".into(),
        problems: vec![e.to_string()],
    })?;
    let ratio = task_cell / fused_grid.cell;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 {
        return Err(CoreError::Validation {
            what: "task grid".into(),
            problems: vec![format!(
                "cell {task_cell} is not an integer multiple of the fused cell {}",
                fused_grid.cell
            )],
        });
    }
    if (ratio - 1.0).abs() < 1e-9 {
        return Ok((fused, target));
    }
    let side = target.side();
    let sh = s.g.shape(fused).to_vec();
    debug_assert_eq!(sh[1], fused_grid.side());
    let pooled = s.g.avg_pool_to_2d(fused, side, side);
    Ok((pooled, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_cell_must_be_positive() {
        let cfg = TaskEncodingConfig {
            task: DenseTask::BevSegmentation,
            grid_cell: 0.0,
            n_residual_blocks: 3,
            fpn: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn afs_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let gate = AfsGate::init(&mut store, &mut rng, "g", 4);
        let mut s = Session::new(&store);
        let f = s.g.constant(vec![0.0; 3 * 4], &[3, 2, 2]);
        assert!(matches!(gate.forward(&mut s, f), Err(CoreError::Shape { .. })));
    }

    #[test]
    fn odd_grid_rejected_by_integration_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cfg = TaskEncodingConfig {
            task: DenseTask::BevSegmentation,
            grid_cell: 0.8,
            n_residual_blocks: 1,
            fpn: true,
        };
        let enc = TaskEncoder::init(&mut store, &mut rng, "t", cfg, 2).unwrap();
        let mut s = Session::new(&store);
        let f = s.g.constant(vec![0.1; 2 * 3 * 3], &[2, 3, 3]);
        assert!(matches!(enc.forward(&mut s, f), Err(CoreError::Validation { .. })));
    }
}
