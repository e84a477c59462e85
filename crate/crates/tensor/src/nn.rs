//! Parameter storage and the module building blocks (linear, conv, layer
//! norm) that the perception stack is assembled from.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names. A
//! [`Session`] binds store entries into a fresh graph as leaves, caching the
//! binding so repeated applications of a weight-shared module resolve to the
//! *same* graph leaf (gradients then accumulate across applications, and
//! parameter identity is observable through [`Session::bound_id`]).

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::{Array, Graph, TensorError, TensorId};

/// How a parameter participates in model merging: row-linear weights get the
/// Gram-weighted treatment, everything else is plainly averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    LinearWeight,
    ConvWeight,
    Other,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::LinearWeight => 0,
            ParamKind::ConvWeight => 1,
            ParamKind::Other => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::LinearWeight),
            1 => Some(ParamKind::ConvWeight),
            2 => Some(ParamKind::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub array: Array,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: Array, kind: ParamKind) {
        assert!(
            self.entries.insert(name.to_string(), Param { array, kind }).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.array.len()).sum()
    }
}

/// Gradients keyed by parameter name, in store order.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: IndexMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Accumulates another gradient map (same-name entries are summed).
    pub fn merge(&mut self, other: GradMap) {
        for (name, grad) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grad.iter()) {
                        *a += g;
                    }
                }
                None => {
                    self.grads.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for grad in self.grads.values_mut() {
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.iter()).map(|&v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-layer Gram accumulators (sum of x x^T over calibration rows) used by
/// the merging stage. Conv layers contribute unfolded patch rows.
#[derive(Debug, Clone, Default)]
pub struct GramStats {
    layers: IndexMap<String, GramLayer>,
}

#[derive(Debug, Clone)]
pub struct GramLayer {
    pub dim: usize,
    pub rows_seen: u64,
    /// Row-major [dim, dim], symmetric.
    pub gram: Vec<f64>,
}

impl GramStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: &str, rows: &[f64], dim: usize) {
        debug_assert_eq!(rows.len() % dim, 0);
        let n = rows.len() / dim;
        let entry = self.layers.entry(layer.to_string()).or_insert_with(|| GramLayer {
            dim,
            rows_seen: 0,
            gram: vec![0.0; dim * dim],
        });
        assert_eq!(entry.dim, dim, "gram dim changed for layer {layer}");
        for r in 0..n {
            let x = &rows[r * dim..(r + 1) * dim];
            for i in 0..dim {
                if x[i] == 0.0 {
                    continue;
                }
                for j in 0..dim {
                    entry.gram[i * dim + j] += x[i] * x[j];
                }
            }
        }
        entry.rows_seen += n as u64;
    }

    pub fn insert_layer(&mut self, name: String, layer: GramLayer) {
        self.layers.insert(name, layer);
    }

    /// Adds another accumulator in, layer by layer. Gram collection is a sum
    /// of outer products, so absorbing per-pass stats equals one long pass.
    pub fn absorb(&mut self, other: GramStats) {
        for (name, layer) in other.layers {
            match self.layers.get_mut(&name) {
                Some(acc) => {
                    assert_eq!(acc.dim, layer.dim, "gram dim changed for layer {name}");
                    for (a, g) in acc.gram.iter_mut().zip(layer.gram.iter()) {
                        *a += g;
                    }
                    acc.rows_seen += layer.rows_seen;
                }
                None => {
                    self.layers.insert(name, layer);
                }
            }
        }
    }

    pub fn get(&self, layer: &str) -> Option<&GramLayer> {
        self.layers.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GramLayer)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// One forward/backward pass over a parameterized model: a graph plus the
/// name -> leaf bindings for every parameter touched.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: IndexMap<String, TensorId>,
    trainable: bool,
    gram: Option<GramStats>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store, bound: IndexMap::new(), trainable: true, gram: None }
    }

    /// Inference session: parameters bind as constants, so the graph skips
    /// all gradient bookkeeping.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store, bound: IndexMap::new(), trainable: false, gram: None }
    }

    pub fn collect_grams(&mut self) {
        self.gram = Some(GramStats::new());
    }

    /// Resumes recording into an existing accumulator. Rows then land in the
    /// same order as one uninterrupted pass, so batched calibration is
    /// bit-identical to a single concatenated batch.
    pub fn install_grams(&mut self, grams: GramStats) {
        self.gram = Some(grams);
    }

    pub fn take_grams(&mut self) -> Option<GramStats> {
        self.gram.take()
    }

    /// Binds a named parameter into the graph (cached per session).
    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let id = if self.trainable {
            self.g.leaf(p.array.data().to_vec(), p.array.shape())
        } else {
            self.g.constant(p.array.data().to_vec(), p.array.shape())
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Graph leaf id a parameter is bound to, if it has been touched.
    pub fn bound_id(&self, name: &str) -> Option<TensorId> {
        self.bound.get(name).copied()
    }

    fn note_gram(&mut self, layer: &str, rows: &[f64], dim: usize) {
        if let Some(gram) = self.gram.as_mut() {
            gram.record(layer, rows, dim);
        }
    }

    /// Backpropagates from a scalar loss and extracts per-parameter grads.
    pub fn backward(&mut self, loss: TensorId) -> Result<GradMap, TensorError> {
        let v = self.g.scalar_value(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { what: "loss".into(), value: v });
        }
        let grads = self.g.backward(loss);
        let mut out = GradMap::default();
        for (name, &id) in &self.bound {
            if let Some(gv) = grads.get(id) {
                out.grads.insert(name.clone(), gv.to_vec());
            }
        }
        Ok(out)
    }
}

// ---- deterministic initializers ----

pub fn kaiming_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Array {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * gauss(rng)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Box-Muller; two uniforms per draw keeps the stream layout obvious.
fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---- layers ----

/// y = x W^T + b with x:[N, in], W:[out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = kaiming_normal(rng, &[out_dim, in_dim], in_dim);
        store.insert(&format!("{name}.weight"), w, ParamKind::LinearWeight);
        store.insert(&format!("{name}.bias"), Array::zeros(&[out_dim]), ParamKind::Other);
        Self { name: name.to_string(), in_dim, out_dim, bias: true }
    }

    /// All-zero weights and bias: used for residual output projections that
    /// must start as exact identities.
    pub fn init_zero(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        store.insert(&format!("{name}.weight"), Array::zeros(&[out_dim, in_dim]), ParamKind::LinearWeight);
        store.insert(&format!("{name}.bias"), Array::zeros(&[out_dim]), ParamKind::Other);
        Self { name: name.to_string(), in_dim, out_dim, bias: true }
    }

    pub fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let (_, cols) = {
            let sh = s.g.shape(x);
            (sh.len(), *sh.last().unwrap())
        };
        assert_eq!(cols, self.in_dim, "{}: input width {cols} != {}", self.name, self.in_dim);
        if s.gram.is_some() {
            let rows = s.g.data(x).to_vec();
            self.note_input(s, &rows);
        }
        let w = s.param(&format!("{}.weight", self.name));
        let y = s.g.matmul_tb(x, w);
        if self.bias {
            let b = s.param(&format!("{}.bias", self.name));
            s.g.add_last(y, b)
        } else {
            y
        }
    }

    fn note_input(&self, s: &mut Session, rows: &[f64]) {
        s.note_gram(&format!("{}.weight", self.name), rows, self.in_dim);
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = kaiming_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k);
        store.insert(&format!("{name}.weight"), w, ParamKind::ConvWeight);
        store.insert(&format!("{name}.bias"), Array::zeros(&[out_ch]), ParamKind::Other);
        Self { name: name.to_string(), in_ch, out_ch, k, stride, pad }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        store.insert(
            &format!("{name}.weight"),
            Array::zeros(&[out_ch, in_ch, k, k]),
            ParamKind::ConvWeight,
        );
        store.insert(&format!("{name}.bias"), Array::zeros(&[out_ch]), ParamKind::Other);
        Self { name: name.to_string(), in_ch, out_ch, k, stride, pad }
    }

    pub fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        if s.gram.is_some() {
            let sh = s.g.shape(x).to_vec();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let ho = crate::kernels::conv_out(h, self.k, self.stride, self.pad);
            let wo = crate::kernels::conv_out(w, self.k, self.stride, self.pad);
            let dim = c * self.k * self.k;
            let mut cols = vec![0.0; dim * ho * wo];
            crate::kernels::im2col(
                s.g.data(x),
                c,
                h,
                w,
                self.k,
                self.k,
                self.stride,
                self.pad,
                &mut cols,
            );
            // Gram wants patch rows: transpose [dim, hw] -> [hw, dim].
            let mut rows = vec![0.0; cols.len()];
            crate::kernels::transpose(&cols, dim, ho * wo, &mut rows);
            s.note_gram(&format!("{}.weight", self.name), &rows, dim);
        }
        let w = s.param(&format!("{}.weight", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        s.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch * self.k * self.k + 1)
    }

    pub fn flops(&self, h_in: usize, w_in: usize) -> u64 {
        let ho = crate::kernels::conv_out(h_in, self.k, self.stride, self.pad) as u64;
        let wo = crate::kernels::conv_out(w_in, self.k, self.stride, self.pad) as u64;
        ho * wo * (self.out_ch * self.in_ch * self.k * self.k) as u64
    }
}

/// Layer norm over the last dim with learnable scale/shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.gamma"), Array::full(&[dim], 1.0), ParamKind::Other);
        store.insert(&format!("{name}.beta"), Array::zeros(&[dim]), ParamKind::Other);
        Self { name: name.to_string(), dim, eps: 1e-5 }
    }

    pub fn forward(&self, s: &mut Session, x: TensorId) -> TensorId {
        let n = s.g.layer_norm_last(x, self.eps);
        let gamma = s.param(&format!("{}.gamma", self.name));
        let beta = s.param(&format!("{}.beta", self.name));
        let scaled = s.g.mul_last(n, gamma);
        s.g.add_last(scaled, beta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}
