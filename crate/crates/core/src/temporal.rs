//! Temporal fusion of per-frame BEV maps.
//!
//! A weight-shared adjacent-frame step sweeps the window backward (newest to
//! oldest) and then forward, so every frame's evidence reaches the current
//! map through a chain of local attentions. Each step attends per BEV cell
//! over a 3x3 neighborhood, once into the source frame and once into the
//! target frame, and adds the averaged result through a learnable gate that
//! starts at zero (the step is initially the identity).

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use duoview_tensor::nn::{Linear, ParamStore, Session};
use duoview_tensor::{Array, TensorId};
use rand_chacha::ChaCha12Rng;

use crate::CoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    /// Channel width the fusion operates at.
    pub channels: usize,
    /// Width of the incoming BEV maps; a 1x1 adapter is inserted when it
    /// differs from `channels`.
    pub in_channels: usize,
    /// Attention projection width.
    pub attn_dim: usize,
}

impl TemporalConfig {
    pub fn uniform(channels: usize, attn_dim: usize) -> Self {
        Self { channels, in_channels: channels, attn_dim }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if self.channels == 0 {
            problems.push("channels must be positive".into());
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be positive".into());
        }
        if self.attn_dim == 0 {
            problems.push("attn_dim must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "temporal config".into(), problems })
        }
    }
}

/// softmax(q k^T / sqrt(d)) v over already-projected queries and keys.
///
/// q: [nq, d], k: [nk, d], v: [nk, cv]; returns [nq, cv].
pub fn cross_attention(
    s: &mut Session,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId, CoreError> {
    let qs = s.g.shape(q).to_vec();
    let ks = s.g.shape(k).to_vec();
    let vs = s.g.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(CoreError::Shape {
            what: "attention query/key widths".into(),
            expected: qs,
            actual: ks,
        });
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(CoreError::Shape {
            what: "attention key/value row counts".into(),
            expected: vec![ks[0]],
            actual: vs,
        });
    }
    let scores = s.g.matmul_tb(q, k);
    let scaled = s.g.mul_scalar(scores, 1.0 / (qs[1] as f64).sqrt());
    let w = s.g.softmax_last(scaled);
    Ok(s.g.matmul(w, v))
}

/// Fused output of [`TemporalFuser::integrate`].
pub struct FusedBev {
    pub data: TensorId,
    /// Number of adjacent-frame fusion applications performed.
    pub affm_calls: usize,
}

pub struct TemporalFuser {
    pub cfg: TemporalConfig,
    adapter: Option<Linear>,
    q_proj: Linear,
    k_proj: Linear,
    gamma_name: String,
}

impl TemporalFuser {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cfg: TemporalConfig,
    ) -> Result<Self, CoreError> {
        cfg.validate()?;
        let adapter = if cfg.in_channels != cfg.channels {
            Some(Linear::init(store, rng, &format!("{prefix}.adapter"), cfg.in_channels, cfg.channels))
        } else {
            None
        };
        let q_proj =
            Linear::init(store, rng, &format!("{prefix}.q_proj"), 2 * cfg.channels, cfg.attn_dim);
        let k_proj = Linear::init(store, rng, &format!("{prefix}.k_proj"), cfg.channels, cfg.attn_dim);
        let gamma_name = format!("{prefix}.gamma");
        store.insert(&gamma_name, Array::zeros(&[1]), duoview_tensor::nn::ParamKind::Other);
        Ok(Self { cfg, adapter, q_proj, k_proj, gamma_name })
    }

    pub fn gamma_name(&self) -> &str {
        &self.gamma_name
    }

    pub fn param_count(&self) -> usize {
        self.adapter.as_ref().map_or(0, Linear::param_count)
            + self.q_proj.param_count()
            + self.k_proj.param_count()
            + 1
    }

    /// Analytic multiply count of one fusion step over `cells` BEV cells.
    /// Counts the projections and the nine-offset attention arithmetic.
    pub fn affm_flops(&self, cells: u64) -> u64 {
        let c = self.cfg.channels as u64;
        let d = self.cfg.attn_dim as u64;
        // Query projection from the concatenated pair, one key projection per
        // windowed pass, then nine dot products and nine weighted value rows
        // in each of the two passes.
        cells * (2 * c * d + 2 * c * d + 18 * d + 18 * c)
    }

    /// Multiply count of adapting one `[in_channels, cells]` map.
    pub fn adapter_flops(&self, cells: u64) -> u64 {
        match &self.adapter {
            None => 0,
            Some(_) => cells * (self.cfg.in_channels as u64) * (self.cfg.channels as u64),
        }
    }

    /// [C, X, Y] -> cell rows [X*Y, C].
    fn to_rows(s: &mut Session, t: TensorId) -> TensorId {
        let sh = s.g.shape(t).to_vec();
        let flat = s.g.reshape(t, &[sh[0], sh[1] * sh[2]]);
        s.g.transpose2(flat)
    }

    fn from_rows(s: &mut Session, rows: TensorId, c: usize, nx: usize, ny: usize) -> TensorId {
        let t = s.g.transpose2(rows);
        s.g.reshape(t, &[c, nx, ny])
    }

    /// Attention of every cell's query into `src` cells within the 3x3
    /// window around it. Out-of-grid neighbors are masked out of the
    /// softmax, so border cells attend over their clipped window only.
    fn windowed_attention(
        &self,
        s: &mut Session,
        q: TensorId,
        src_rows: TensorId,
        nx: usize,
        ny: usize,
    ) -> TensorId {
        let p = nx * ny;
        let d = self.cfg.attn_dim;
        let k_all = self.k_proj.forward(s, src_rows);
        let mut score_cols = Vec::with_capacity(9);
        let mut indices = Vec::with_capacity(9);
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let mut idx = Vec::with_capacity(p);
                for ix in 0..nx as i64 {
                    for iy in 0..ny as i64 {
                        let (jx, jy) = (ix + dx, iy + dy);
                        let inside = jx >= 0 && jx < nx as i64 && jy >= 0 && jy < ny as i64;
                        idx.push(if inside { jx * ny as i64 + jy } else { -1 });
                    }
                }
                let idx = Arc::new(idx);
                let k_o = s.g.gather_rows(k_all, idx.clone());
                let prod = s.g.mul(q, k_o);
                let dot = s.g.sum_last(prod);
                score_cols.push(s.g.reshape(dot, &[p, 1]));
                indices.push(idx);
            }
        }
        let scores = s.g.concat_last(&score_cols);
        let scaled = s.g.mul_scalar(scores, 1.0 / (d as f64).sqrt());
        let mut mask = vec![0.0; p * 9];
        for (o, idx) in indices.iter().enumerate() {
            for (cell, &i) in idx.iter().enumerate() {
                if i < 0 {
                    mask[cell * 9 + o] = -1e30;
                }
            }
        }
        let mask_t = s.g.constant(mask, &[p, 9]);
        let masked = s.g.add(scaled, mask_t);
        let w = s.g.softmax_last(masked);
        let mut out = None;
        for (o, idx) in indices.iter().enumerate() {
            let v_o = s.g.gather_rows(src_rows, idx.clone());
            let w_col = s.g.slice_cols(w, o, 1);
            let w_vec = s.g.reshape(w_col, &[p]);
            let term = s.g.mul_col_broadcast(v_o, w_vec);
            out = Some(match out {
                None => term,
                Some(acc) => s.g.add(acc, term),
            });
        }
        out.expect("nine offsets")
    }

    /// One adjacent-frame fusion step: attends the concatenated pair into
    /// each frame and adds the gated average to the target `f_j`. Both maps
    /// are [C, X, Y] in the same ego frame.
    pub fn affm(&self, s: &mut Session, f_i: TensorId, f_j: TensorId) -> Result<TensorId, CoreError> {
        let si = s.g.shape(f_i).to_vec();
        let sj = s.g.shape(f_j).to_vec();
        if si != sj || si.len() != 3 {
            return Err(CoreError::Shape { what: "affm input pair".into(), expected: si, actual: sj });
        }
        if si[0] != self.cfg.channels {
            return Err(CoreError::Shape {
                what: "affm channel width".into(),
                expected: vec![self.cfg.channels, si[1], si[2]],
                actual: si,
            });
        }
        let (c, nx, ny) = (si[0], si[1], si[2]);
        let p = nx * ny;
        let rows_i = Self::to_rows(s, f_i);
        let rows_j = Self::to_rows(s, f_j);
        let cat = s.g.concat_last(&[rows_i, rows_j]);
        let q = self.q_proj.forward(s, cat);
        let atn_i = self.windowed_attention(s, q, rows_i, nx, ny);
        let atn_j = self.windowed_attention(s, q, rows_j, nx, ny);
        let sum = s.g.add(atn_i, atn_j);
        let avg = s.g.mul_scalar(sum, 0.5);
        let gamma = s.param(&self.gamma_name);
        let flat = s.g.reshape(avg, &[1, p * c]);
        let gated = s.g.mul_col_broadcast(flat, gamma);
        let gated = s.g.reshape(gated, &[p, c]);
        let out_rows = s.g.add(rows_j, gated);
        Ok(Self::from_rows(s, out_rows, c, nx, ny))
    }

    /// Maps a raw `[in_channels, X, Y]` map onto the working channel width;
    /// the identity when the widths already agree.
    pub fn adapt(&self, s: &mut Session, t: TensorId) -> TensorId {
        match &self.adapter {
            None => t,
            Some(lin) => {
                let sh = s.g.shape(t).to_vec();
                let rows = Self::to_rows(s, t);
                let mapped = lin.forward(s, rows);
                Self::from_rows(s, mapped, self.cfg.channels, sh[1], sh[2])
            }
        }
    }

    /// Fuses aligned per-frame maps ordered current-first (f_0, f_-1, ...):
    /// a backward sweep pushes the current frame's context toward the oldest
    /// frame, a forward sweep collects everything back into f_0.
    pub fn integrate(&self, s: &mut Session, bevs: &[TensorId]) -> Result<FusedBev, CoreError> {
        if bevs.is_empty() {
            return Err(CoreError::Validation {
                what: "temporal window".into(),
                problems: vec!["needs at least one BEV map".into()],
            });
        }
        let mut f: Vec<TensorId> = bevs.iter().map(|&t| self.adapt(s, t)).collect();
        let n = f.len();
        let mut calls = 0;
        for i in 0..n.saturating_sub(1) {
            f[i + 1] = self.affm(s, f[i], f[i + 1])?;
            calls += 1;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            f[i] = self.affm(s, f[i + 1], f[i])?;
            calls += 1;
        }
        Ok(FusedBev { data: f[0], affm_calls: calls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_zero_widths() {
        let cfg = TemporalConfig { channels: 0, in_channels: 3, attn_dim: 0 };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("channels") && msg.contains("attn_dim"), "{msg}");
    }

    #[test]
    fn attention_width_mismatch_is_shape_error() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let q = s.g.constant(vec![1.0, 2.0, 3.0], &[1, 3]);
        let k = s.g.constant(vec![0.0; 8], &[2, 4]);
        let v = s.g.constant(vec![0.0; 4], &[2, 2]);
        assert!(matches!(cross_attention(&mut s, q, k, v), Err(CoreError::Shape { .. })));
    }
}
