//! Consolidates separately trained models into one initialization.
//!
//! Row-linear weights (linear and conv kinds) are merged by solving the
//! joint least-squares problem over each layer's calibration activations:
//! with per-model input grams `G_i = X_i^T X_i`, the merged weight satisfies
//! `W_M^T = (sum_i G~_i)^{-1} sum_i (G~_i W_i^T)` where
//! `G~ = alpha*G + (1-alpha)*diag(G)` damps the off-diagonal terms.
//! Everything else (biases, norm scales, gates) is averaged elementwise.
//! Parameters outside the shared subset are copied verbatim from the single
//! checkpoint that owns them.

use nalgebra::DMatrix;

use duoview_tensor::nn::{GramLayer, GramStats, ParamKind, ParamStore, Session};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::CoreError;

/// What happened to each parameter during a merge.
#[derive(Debug, Default, Clone)]
pub struct MergeReport {
    /// Layers merged through the gram-weighted least-squares path.
    pub regmean: Vec<String>,
    /// Parameters averaged elementwise.
    pub averaged: Vec<String>,
    /// Task-specific parameters copied from a single source.
    pub copied: Vec<String>,
    /// Layers whose gram sum was singular and went through the
    /// pseudo-inverse fallback; worth a warning upstream.
    pub pseudo_inverse: Vec<String>,
}

/// Runs `forward` once per calibration pass on an inference session with
/// gram recording enabled, and accumulates the per-layer activation grams.
pub fn collect_calibration_grams<F>(
    store: &ParamStore,
    n_passes: usize,
    mut forward: F,
) -> Result<GramStats, CoreError>
where
    F: FnMut(&mut Session, usize) -> Result<(), CoreError>,
{
    // One accumulator threaded through every pass: the result is bitwise
    // what a single concatenated pass would produce.
    let mut total = GramStats::new();
    for pass in 0..n_passes {
        let mut s = Session::inference(store);
        s.install_grams(std::mem::take(&mut total));
        forward(&mut s, pass)?;
        total = s.take_grams().unwrap_or_default();
    }
    Ok(total)
}

/// Checks that every mergeable parameter selected by `shared` saw at least
/// one calibration row. A layer the calibration data never activates cannot
/// be gram-merged and must be reported, not silently averaged.
pub fn verify_gram_coverage<F>(
    store: &ParamStore,
    grams: &GramStats,
    shared: F,
) -> Result<(), CoreError>
where
    F: Fn(&str) -> bool,
{
    let mut problems = Vec::new();
    for (name, param) in store.iter() {
        if param.kind == ParamKind::Other || !shared(name) {
            continue;
        }
        match grams.get(name) {
            None => problems.push(format!("{name}: no gram recorded")),
            Some(layer) if layer.rows_seen == 0 => {
                problems.push(format!("{name}: zero calibration rows"))
            }
            Some(_) => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Validation { what: "gram coverage".to_string(), problems })
    }
}

/// `alpha*G + (1-alpha)*diag(G)`: scales the off-diagonal entries down.
pub fn shrink_gram(gram: &[f64], dim: usize, alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let v = gram[i * dim + j];
            out[i * dim + j] = if i == j { v } else { alpha * v };
        }
    }
    out
}

/// Merges K row-linear weights `[out_dim, dim]` under their input grams.
///
/// Returns the merged weight and whether the singular fallback fired. When
/// every off-diagonal entry of the gram sum is exactly zero the solve is done
/// row by row, so a diagonal merge (alpha 0, or identity grams) reproduces
/// plain averaging bit for bit.
pub fn regmean_merge(
    weights: &[&[f64]],
    out_dim: usize,
    grams: &[&GramLayer],
    alpha: f64,
) -> Result<(Vec<f64>, bool), CoreError> {
    if weights.is_empty() || weights.len() != grams.len() {
        return Err(CoreError::Merge(format!(
            "{} weights against {} grams",
            weights.len(),
            grams.len()
        )));
    }
    let dim = grams[0].dim;
    for (i, (w, g)) in weights.iter().zip(grams).enumerate() {
        if g.dim != dim {
            return Err(CoreError::Merge(format!("gram {i} has dim {}, expected {dim}", g.dim)));
        }
        if w.len() != out_dim * dim {
            return Err(CoreError::Merge(format!(
                "weight {i} has {} entries, expected {out_dim}x{dim}",
                w.len()
            )));
        }
    }

    // Accumulate sums in model order: gsum [dim, dim], rhs [dim, out].
    let mut gsum = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim * out_dim];
    for (w, g) in weights.iter().zip(grams) {
        let gt = shrink_gram(&g.gram, dim, alpha);
        for (a, b) in gsum.iter_mut().zip(gt.iter()) {
            *a += b;
        }
        // rhs += G~ * W^T, with W row-major [out, dim].
        for r in 0..dim {
            for c in 0..out_dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += gt[r * dim + k] * w[c * dim + k];
                }
                rhs[r * out_dim + c] += acc;
            }
        }
    }

    let off_diagonal =
        (0..dim).any(|i| (0..dim).any(|j| i != j && gsum[i * dim + j] != 0.0));
    let mut used_fallback = false;
    let solution: Vec<f64> = if !off_diagonal {
        // Dead input dimensions have an all-zero gram row; their merged rows
        // are zeroed, matching what the pseudo-inverse would do.
        let mut v = vec![0.0; dim * out_dim];
        for r in 0..dim {
            let d = gsum[r * dim + r];
            if d == 0.0 {
                used_fallback = true;
                continue;
            }
            for c in 0..out_dim {
                v[r * out_dim + c] = rhs[r * out_dim + c] / d;
            }
        }
        v
    } else {
        let g = DMatrix::from_row_slice(dim, dim, &gsum);
        let b = DMatrix::from_row_slice(dim, out_dim, &rhs);
        // The gram sum is symmetric PSD; Cholesky succeeding certifies it is
        // actually positive definite.
        let sol = match g.clone().cholesky() {
            Some(chol) => chol.solve(&b),
            None => {
                used_fallback = true;
                let pinv = g
                    .svd(true, true)
                    .pseudo_inverse(1e-10)
                    .map_err(|e| CoreError::Merge(format!("pseudo-inverse failed: {e}")))?;
                pinv * b
            }
        };
        let mut v = vec![0.0; dim * out_dim];
        for r in 0..dim {
            for c in 0..out_dim {
                v[r * out_dim + c] = sol[(r, c)];
            }
        }
        v
    };

    // Transpose [dim, out] back to the stored [out, dim] layout.
    let mut merged = vec![0.0; out_dim * dim];
    for r in 0..dim {
        for c in 0..out_dim {
            merged[c * dim + r] = solution[r * out_dim + c];
        }
    }
    Ok((merged, used_fallback))
}

/// Elementwise mean of K same-shaped arrays.
pub fn average_merge(params: &[&[f64]]) -> Result<Vec<f64>, CoreError> {
    let first = params
        .first()
        .ok_or_else(|| CoreError::Merge("nothing to average".to_string()))?;
    let n = first.len();
    for (i, p) in params.iter().enumerate() {
        if p.len() != n {
            return Err(CoreError::Merge(format!(
                "array {i} has {} entries, expected {n}",
                p.len()
            )));
        }
    }
    let k = params.len() as f64;
    Ok((0..n).map(|j| params.iter().map(|p| p[j]).sum::<f64>() / k).collect())
}

/// Merges the shared subset of several single-task checkpoints and carries
/// the task-specific remainder over verbatim.
///
/// `shared` selects the jointly trained parameter names; those must agree in
/// shape and kind across all checkpoints. Linear and conv weights inside the
/// subset are gram-merged, everything else inside it is averaged. Names
/// outside the subset are copied from whichever checkpoint owns them; if two
/// checkpoints both own one, their values must be bitwise identical.
/// Merging a single checkpoint is the identity and needs no grams.
pub fn merge_encoders<F>(
    checkpoints: &[Checkpoint],
    grams: &[GramStats],
    alpha: f64,
    shared: F,
) -> Result<(Checkpoint, MergeReport), CoreError>
where
    F: Fn(&str) -> bool,
{
    if checkpoints.is_empty() {
        return Err(CoreError::Merge("no checkpoints to merge".to_string()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::Merge(format!("alpha {alpha} outside [0, 1]")));
    }
    let meta = merged_meta(checkpoints);
    if checkpoints.len() == 1 {
        let report = MergeReport {
            copied: checkpoints[0].params.names().map(str::to_string).collect(),
            ..MergeReport::default()
        };
        return Ok((Checkpoint { meta, params: checkpoints[0].params.clone() }, report));
    }
    if grams.len() != checkpoints.len() {
        return Err(CoreError::Merge(format!(
            "{} gram sets against {} checkpoints",
            grams.len(),
            checkpoints.len()
        )));
    }

    // The shared subset must look identical everywhere.
    let mut problems = Vec::new();
    let base = &checkpoints[0].params;
    for (i, ckpt) in checkpoints.iter().enumerate().skip(1) {
        for (name, p) in base.iter().filter(|(n, _)| shared(n)) {
            match ckpt.params.get(name) {
                None => problems.push(format!("{name}: missing from checkpoint {i}")),
                Some(q) if q.array.shape() != p.array.shape() => problems.push(format!(
                    "{name}: shape {:?} vs {:?} in checkpoint {i}",
                    p.array.shape(),
                    q.array.shape()
                )),
                Some(q) if q.kind != p.kind => {
                    problems.push(format!("{name}: kind differs in checkpoint {i}"))
                }
                Some(_) => {}
            }
        }
        for (name, _) in ckpt.params.iter().filter(|(n, _)| shared(n)) {
            if base.get(name).is_none() {
                problems.push(format!("{name}: only in checkpoint {i}"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Validation { what: "shared parameter subset".to_string(), problems });
    }
    for (ckpt, g) in checkpoints.iter().zip(grams) {
        verify_gram_coverage(&ckpt.params, g, &shared)?;
    }

    let mut report = MergeReport::default();
    let mut params = ParamStore::new();
    for (name, p) in base.iter() {
        if !shared(name) {
            continue;
        }
        let arrays: Vec<&[f64]> = checkpoints
            .iter()
            .map(|c| c.params.get(name).unwrap().array.data())
            .collect();
        let merged = match p.kind {
            ParamKind::LinearWeight | ParamKind::ConvWeight => {
                let out_dim = p.array.shape()[0];
                let layer_grams: Vec<&GramLayer> =
                    grams.iter().map(|g| g.get(name).unwrap()).collect();
                let (data, fallback) = regmean_merge(&arrays, out_dim, &layer_grams, alpha)?;
                if fallback {
                    report.pseudo_inverse.push(name.to_string());
                }
                report.regmean.push(name.to_string());
                data
            }
            ParamKind::Other => {
                report.averaged.push(name.to_string());
                average_merge(&arrays)?
            }
        };
        let array = duoview_tensor::Array::new(p.array.shape().to_vec(), merged)
            .expect("merged data keeps the source shape");
        params.insert(name, array, p.kind);
    }

    // Task-specific leftovers, in checkpoint order.
    for ckpt in checkpoints {
        for (name, p) in ckpt.params.iter().filter(|(n, _)| !shared(n)) {
            match params.get(name) {
                None => {
                    params.insert(name, p.array.clone(), p.kind);
                    report.copied.push(name.to_string());
                }
                Some(q) => {
                    if q.array.shape() != p.array.shape() || q.array.data() != p.array.data() {
                        return Err(CoreError::Merge(format!(
                            "unshared parameter {name} differs between checkpoints"
                        )));
                    }
                }
            }
        }
    }
    Ok((Checkpoint { meta, params }, report))
}

fn merged_meta(checkpoints: &[Checkpoint]) -> CheckpointMeta {
    let task = checkpoints.iter().map(|c| c.meta.task.as_str()).collect::<Vec<_>>().join("+");
    let first_hash = &checkpoints[0].meta.config_hash;
    let config_hash = if checkpoints.iter().all(|c| &c.meta.config_hash == first_hash) {
        first_hash.clone()
    } else {
        "mixed".to_string()
    };
    CheckpointMeta { task, config_hash, step: 0 }
}
