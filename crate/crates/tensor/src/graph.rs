//! Eager, arena-based reverse-mode autodiff.
//!
//! A [`Graph`] owns a flat list of nodes; every op computes its value at
//! construction time and records what it needs for the backward pass.
//! Parents always precede children in the arena, so backpropagation is a
//! single reverse sweep — no explicit topological sort.
//!
//! Shape violations are programmer errors and panic; domain modules validate
//! their inputs before touching the graph.

use std::sync::Arc;

use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    PowScalar(TensorId, f64),
    Abs(TensorId),
    Sqrt(TensorId),
    Ln(TensorId),
    Exp(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Sin(TensorId),
    Cos(TensorId),
    Clamp(TensorId, f64, f64),
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatMulTB { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    BatMatMul { a: TensorId, b: TensorId, bs: usize, m: usize, k: usize, n: usize },
    BatMatMulTB { a: TensorId, b: TensorId, bs: usize, m: usize, k: usize, n: usize },
    Transpose { a: TensorId, m: usize, n: usize },
    BatTranspose { a: TensorId, bs: usize, m: usize, n: usize },
    SoftmaxLast { a: TensorId, cols: usize },
    LogSoftmaxLast { a: TensorId, cols: usize },
    LayerNormLast { a: TensorId, cols: usize, eps: f64 },
    SumAll(TensorId),
    MeanAll(TensorId),
    SumLast { a: TensorId, cols: usize },
    MeanTrailing { a: TensorId, cols: usize },
    Reshape(TensorId),
    ConcatRows { parts: Vec<TensorId>, cols: usize },
    ConcatLast { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, len: usize, cols: usize },
    GatherRows { a: TensorId, rows: Arc<Vec<i64>>, cols: usize },
    MulColBroadcast { a: TensorId, c: TensorId },
    AddColBroadcast { a: TensorId, b: TensorId },
    MulLast { a: TensorId, m: TensorId },
    AddLast { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, pad: usize },
    MaxPool2d { x: TensorId, idx: Vec<u32> },
    MaxUnpool2d { x: TensorId, pool: TensorId },
    AvgPoolTo2d { x: TensorId, th: usize, tw: usize },
    AvgPoolTo3d { x: TensorId, tx: usize, ty: usize, tz: usize },
    Upsample2x(TensorId),
    BilinearSample { feat: TensorId, pts: TensorId },
    LiftScatter { feat: TensorId, prob: TensorId, map: Arc<Vec<i64>>, cells: usize },
    MaxOverRows { a: TensorId, idx: Vec<u32> },
    PairwiseDist { pts: TensorId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, t: TensorId) -> Option<&[f64]> {
        self.g[t.index()].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.index()].data
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.index()].shape
    }

    pub fn needs_grad(&self, t: TensorId) -> bool {
        self.nodes[t.index()].needs_grad
    }

    pub fn scalar_value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.index()].data.len(), 1);
        self.nodes[t.index()].data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { op, shape, data, needs_grad });
        id
    }

    fn ng(&self, t: TensorId) -> bool {
        self.nodes[t.index()].needs_grad
    }

    /// Rows/cols of a tensor viewed as 2-D with the last dim as columns.
    fn view2(&self, t: TensorId) -> (usize, usize) {
        let s = self.shape(t);
        assert!(!s.is_empty(), "view2 on rank-0 tensor");
        let cols = *s.last().unwrap();
        (self.data(t).len() / cols.max(1), cols)
    }

    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ---- leaves ----

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push(Op::Leaf, shape.to_vec(), data, true)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.push(Op::Leaf, shape.to_vec(), data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1])
    }

    /// Copy of `t`'s current value with the gradient path cut.
    pub fn detach(&mut self, t: TensorId) -> TensorId {
        let data = self.data(t).to_vec();
        let shape = self.shape(t).to_vec();
        self.constant(data, &shape)
    }

    // ---- elementwise ----

    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(op, shape, data, ng)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> TensorId {
        self.assert_same_shape(a, b, what);
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b).iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, shape, data, ng)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn pow_scalar(&mut self, a: TensorId, p: f64) -> TensorId {
        self.unary(a, Op::PowScalar(a, p), |x| x.powf(p))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.mul_scalar(a, -1.0)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.view2(a);
        let (kb, n) = self.view2(b);
        assert_eq!(self.shape(b).len(), 2, "matmul rhs must be rank 2");
        assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, ng)
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.view2(a);
        let (n, kb) = self.view2(b);
        assert_eq!(k, kb, "matmul_tb inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        kernels::matmul_tb(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulTB { a, b, m, k, n }, vec![m, n], out, ng)
    }

    /// [bs,m,k] x [bs,k,n] -> [bs,m,n]
    pub fn bat_matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bat_matmul lhs rank");
        assert_eq!(sb.len(), 3, "bat_matmul rhs rank");
        assert_eq!(sa[0], sb[0], "bat_matmul batch dims");
        assert_eq!(sa[2], sb[1], "bat_matmul inner dims");
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let aa = &self.data(a)[i * m * k..(i + 1) * m * k];
            let bb = &self.data(b)[i * k * n..(i + 1) * k * n];
            kernels::matmul(aa, bb, m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::BatMatMul { a, b, bs, m, k, n }, vec![bs, m, n], out, ng)
    }

    /// [bs,m,k] x [bs,n,k]^T -> [bs,m,n]
    pub fn bat_matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bat_matmul_tb lhs rank");
        assert_eq!(sb.len(), 3, "bat_matmul_tb rhs rank");
        assert_eq!(sa[0], sb[0], "bat_matmul_tb batch dims");
        assert_eq!(sa[2], sb[2], "bat_matmul_tb inner dims");
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let aa = &self.data(a)[i * m * k..(i + 1) * m * k];
            let bb = &self.data(b)[i * n * k..(i + 1) * n * k];
            kernels::matmul_tb(aa, bb, m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::BatMatMulTB { a, b, bs, m, k, n }, vec![bs, m, n], out, ng)
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.view2(a);
        assert_eq!(self.shape(a).len(), 2, "transpose2 wants rank 2");
        let mut out = vec![0.0; m * n];
        kernels::transpose(self.data(a), m, n, &mut out);
        let ng = self.ng(a);
        self.push(Op::Transpose { a, m, n }, vec![n, m], out, ng)
    }

    /// [bs,m,n] -> [bs,n,m]
    pub fn bat_transpose(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "bat_transpose wants rank 3");
        let (bs, m, n) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::transpose(
                &self.data(a)[i * m * n..(i + 1) * m * n],
                m,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a);
        self.push(Op::BatTranspose { a, bs, m, n }, vec![bs, n, m], out, ng)
    }

    // ---- normalization / reductions ----

    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.data(a)[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            softmax_row(x, o);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Op::SoftmaxLast { a, cols }, shape, out, ng)
    }

    pub fn log_softmax_last(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.data(a)[r * cols..(r + 1) * cols];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + x.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x.iter()) {
                *o = v - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Op::LogSoftmaxLast { a, cols }, shape, out, ng)
    }

    /// Normalizes each row of the last dim to zero mean / unit variance.
    /// Affine terms, when wanted, are separate `mul_last`/`add_last` ops.
    pub fn layer_norm_last(&mut self, a: TensorId, eps: f64) -> TensorId {
        let (rows, cols) = self.view2(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &self.data(a)[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Op::LayerNormLast { a, cols, eps }, shape, out, ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll(a), vec![1], vec![s], ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len().max(1);
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let ng = self.ng(a);
        self.push(Op::MeanAll(a), vec![1], vec![s], ng)
    }

    /// [..., L] -> [...]: sums out the last dim.
    pub fn sum_last(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = self.data(a)[r * cols..(r + 1) * cols].iter().sum();
        }
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(Op::SumLast { a, cols }, shape, out, ng)
    }

    /// [R, trailing...] -> [R]: mean over everything but the first dim.
    pub fn mean_trailing(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        assert!(s.len() >= 2, "mean_trailing wants rank >= 2");
        let rows = s[0];
        let cols = self.data(a).len() / rows;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = self.data(a)[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64;
        }
        let ng = self.ng(a);
        self.push(Op::MeanTrailing { a, cols }, vec![rows], out, ng)
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let expect: usize = shape.iter().product();
        assert_eq!(expect, self.data(a).len(), "reshape {:?} -> {shape:?}", self.shape(a));
        let data = self.data(a).to_vec();
        let ng = self.ng(a);
        self.push(Op::Reshape(a), shape.to_vec(), data, ng)
    }

    /// Concatenates along axis 0, viewing each input as [rows_i, cols].
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows with no parts");
        let (_, cols) = self.view2(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.view2(p);
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows { parts: parts.to_vec(), cols }, vec![rows, cols], data, ng)
    }

    /// Concatenates along the last dim: every part viewed as [rows, cols_i].
    pub fn concat_last(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_last with no parts");
        let (rows, _) = self.view2(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.view2(p);
                assert_eq!(r, rows, "concat_last row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let c = widths[pi];
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.data(p)[r * c..(r + 1) * c]);
                off += c;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatLast { parts: parts.to_vec() }, vec![rows, total], data, ng)
    }

    /// [rows, cols] -> [rows, len] selecting columns [start, start+len).
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (rows, cols) = self.view2(a);
        assert!(start + len <= cols, "slice_cols {start}+{len} > {cols}");
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data(a)[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(a);
        self.push(Op::SliceCols { a, start, len, cols }, vec![rows, len], data, ng)
    }

    /// Gathers rows of `a` (viewed as [rows, cols]); index -1 yields a zero row.
    pub fn gather_rows(&mut self, a: TensorId, rows: Arc<Vec<i64>>) -> TensorId {
        let (nrows, cols) = self.view2(a);
        let mut data = vec![0.0; rows.len() * cols];
        for (i, &r) in rows.iter().enumerate() {
            if r >= 0 {
                assert!((r as usize) < nrows, "gather_rows index {r} out of {nrows}");
                data[i * cols..(i + 1) * cols]
                    .copy_from_slice(&self.data(a)[r as usize * cols..(r as usize + 1) * cols]);
            }
        }
        let n = rows.len();
        let ng = self.ng(a);
        self.push(Op::GatherRows { a, rows, cols }, vec![n, cols], data, ng)
    }

    // ---- broadcasts ----

    /// x viewed [R, C] scaled per row by c[R]. Also serves as a per-channel
    /// gate for [C, spatial] maps.
    pub fn mul_col_broadcast(&mut self, a: TensorId, c: TensorId) -> TensorId {
        let rows = self.shape(a)[0];
        let cols = self.data(a).len() / rows;
        assert_eq!(self.data(c).len(), rows, "mul_col_broadcast scale len");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let s = self.data(c)[r];
            for (o, &x) in data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(self.data(a)[r * cols..(r + 1) * cols].iter())
            {
                *o = x * s;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(c);
        self.push(Op::MulColBroadcast { a, c }, shape, data, ng)
    }

    /// x viewed [R, C] with b[R] added to every element of row r.
    pub fn add_col_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let rows = self.shape(a)[0];
        let cols = self.data(a).len() / rows;
        assert_eq!(self.data(b).len(), rows, "add_col_broadcast bias len");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let s = self.data(b)[r];
            for (o, &x) in data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(self.data(a)[r * cols..(r + 1) * cols].iter())
            {
                *o = x + s;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::AddColBroadcast { a, b }, shape, data, ng)
    }

    /// x[..., d] * m[d]
    pub fn mul_last(&mut self, a: TensorId, m: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        assert_eq!(self.data(m).len(), cols, "mul_last width");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] = self.data(a)[r * cols + j] * self.data(m)[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(m);
        self.push(Op::MulLast { a, m }, shape, data, ng)
    }

    /// x[..., d] + b[d]
    pub fn add_last(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        assert_eq!(self.data(b).len(), cols, "add_last width");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] = self.data(a)[r * cols + j] + self.data(b)[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::AddLast { a, b }, shape, data, ng)
    }

    // ---- spatial ----

    /// x:[Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] -> [Cout,Ho,Wo]
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input rank");
        assert_eq!(ws.len(), 4, "conv2d weight rank");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch {} vs {}", xs[0], ws[1]);
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = kernels::conv_out(h, kh, stride, pad);
        let wo = kernels::conv_out(wd, kw, stride, pad);
        let mut cols = vec![0.0; cin * kh * kw * ho * wo];
        kernels::im2col(self.data(x), cin, h, wd, kh, kw, stride, pad, &mut cols);
        let mut out = vec![0.0; cout * ho * wo];
        kernels::matmul(self.data(w), &cols, cout, cin * kh * kw, ho * wo, &mut out);
        if let Some(bi) = b {
            assert_eq!(self.data(bi).len(), cout, "conv2d bias len");
            for c in 0..cout {
                let bv = self.data(bi)[c];
                for o in out[c * ho * wo..(c + 1) * ho * wo].iter_mut() {
                    *o += bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|bi| self.ng(bi)).unwrap_or(false);
        self.push(Op::Conv2d { x, w, b, stride, pad }, vec![cout, ho, wo], out, ng)
    }

    pub fn max_pool2d(&mut self, x: TensorId, k: usize, s: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "max_pool2d input rank");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = (h - k) / s + 1;
        let wo = (w - k) / s + 1;
        let mut out = vec![0.0; c * ho * wo];
        let mut idx = vec![0u32; c * ho * wo];
        for ci in 0..c {
            let plane = &self.data(x)[ci * h * w..(ci + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let fy = oy * s + ky;
                            let fx = ox * s + kx;
                            let v = plane[fy * w + fx];
                            if v > best {
                                best = v;
                                bi = fy * w + fx;
                            }
                        }
                    }
                    out[(ci * ho + oy) * wo + ox] = best;
                    idx[(ci * ho + oy) * wo + ox] = (ci * h * w + bi) as u32;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::MaxPool2d { x, idx }, vec![c, ho, wo], out, ng)
    }

    /// Places `x`'s values at the argmax positions recorded by `pool`
    /// (a `max_pool2d` node); everything else is zero.
    pub fn max_unpool2d(&mut self, x: TensorId, pool: TensorId) -> TensorId {
        let (idx, src) = match &self.nodes[pool.index()].op {
            Op::MaxPool2d { idx, x: src, .. } => (idx.clone(), *src),
            _ => panic!("max_unpool2d: `pool` is not a max_pool2d node"),
        };
        assert_eq!(
            self.shape(x),
            self.shape(pool),
            "max_unpool2d input must match pooled shape"
        );
        let out_shape = self.shape(src).to_vec();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (e, &i) in idx.iter().enumerate() {
            out[i as usize] = self.data(x)[e];
        }
        let ng = self.ng(x);
        self.push(Op::MaxUnpool2d { x, pool }, out_shape, out, ng)
    }

    /// Adaptive average pooling of [C,H,W] to [C,th,tw].
    pub fn avg_pool_to_2d(&mut self, x: TensorId, th: usize, tw: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "avg_pool_to_2d input rank");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * th * tw];
        for ci in 0..c {
            let plane = &self.data(x)[ci * h * w..(ci + 1) * h * w];
            for oy in 0..th {
                let (y0, y1) = pool_range(oy, h, th);
                for ox in 0..tw {
                    let (x0, x1) = pool_range(ox, w, tw);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    out[(ci * th + oy) * tw + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::AvgPoolTo2d { x, th, tw }, vec![c, th, tw], out, ng)
    }

    /// Adaptive average pooling of [C,X,Y,Z] to [C,tx,ty,tz].
    pub fn avg_pool_to_3d(&mut self, x: TensorId, tx: usize, ty: usize, tz: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "avg_pool_to_3d input rank");
        let (c, nx, ny, nz) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; c * tx * ty * tz];
        for ci in 0..c {
            let vol = &self.data(x)[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
            for ox in 0..tx {
                let (x0, x1) = pool_range(ox, nx, tx);
                for oy in 0..ty {
                    let (y0, y1) = pool_range(oy, ny, ty);
                    for oz in 0..tz {
                        let (z0, z1) = pool_range(oz, nz, tz);
                        let mut acc = 0.0;
                        for xx in x0..x1 {
                            for yy in y0..y1 {
                                for zz in z0..z1 {
                                    acc += vol[(xx * ny + yy) * nz + zz];
                                }
                            }
                        }
                        let cnt = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                        out[((ci * tx + ox) * ty + oy) * tz + oz] = acc / cnt;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::AvgPoolTo3d { x, tx, ty, tz }, vec![c, tx, ty, tz], out, ng)
    }

    pub fn upsample2x_nearest(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "upsample2x input rank");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] =
                        self.data(x)[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::Upsample2x(x), vec![c, 2 * h, 2 * w], out, ng)
    }

    /// Samples `feat` [C,H,W] at continuous points [P,2] = (x=col, y=row),
    /// zero padding outside. Gradients flow to the features and, when the
    /// points require grad, to the sample positions.
    pub fn bilinear_sample(&mut self, feat: TensorId, pts: TensorId) -> TensorId {
        let fs = self.shape(feat).to_vec();
        assert_eq!(fs.len(), 3, "bilinear_sample feature rank");
        let ps = self.shape(pts).to_vec();
        assert_eq!(*ps.last().unwrap(), 2, "bilinear_sample points last dim");
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let p = self.data(pts).len() / 2;
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let px = self.data(pts)[i * 2];
            let py = self.data(pts)[i * 2 + 1];
            let x0 = px.floor() as isize;
            let y0 = py.floor() as isize;
            let wx = px - x0 as f64;
            let wy = py - y0 as f64;
            for (dy, dx, wgt) in [
                (0, 0, (1.0 - wx) * (1.0 - wy)),
                (0, 1, wx * (1.0 - wy)),
                (1, 0, (1.0 - wx) * wy),
                (1, 1, wx * wy),
            ] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize || wgt == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    out[i * c + ci] +=
                        wgt * self.data(feat)[(ci * h + yy as usize) * w + xx as usize];
                }
            }
        }
        let ng = self.ng(feat) || self.ng(pts);
        self.push(Op::BilinearSample { feat, pts }, vec![p, c], out, ng)
    }

    /// Depth-weighted scatter: out[c, map[b*P+p]] += feat[c,p] * prob[b,p].
    /// Map entries of -1 are dropped (outside the grid).
    pub fn lift_scatter(
        &mut self,
        feat: TensorId,
        prob: TensorId,
        map: Arc<Vec<i64>>,
        cells: usize,
    ) -> TensorId {
        let fs = self.shape(feat).to_vec();
        let ps = self.shape(prob).to_vec();
        assert_eq!(fs.len(), 2, "lift_scatter feat rank");
        assert_eq!(ps.len(), 2, "lift_scatter prob rank");
        assert_eq!(fs[1], ps[1], "lift_scatter pixel count mismatch");
        let (c, p) = (fs[0], fs[1]);
        let b = ps[0];
        assert_eq!(map.len(), b * p, "lift_scatter map length");
        let mut out = vec![0.0; c * cells];
        for bi in 0..b {
            for pi in 0..p {
                let cell = map[bi * p + pi];
                if cell < 0 {
                    continue;
                }
                assert!((cell as usize) < cells, "lift_scatter cell {cell} out of {cells}");
                let pr = self.data(prob)[bi * p + pi];
                for ci in 0..c {
                    out[ci * cells + cell as usize] += self.data(feat)[ci * p + pi] * pr;
                }
            }
        }
        let ng = self.ng(feat) || self.ng(prob);
        self.push(Op::LiftScatter { feat, prob, map, cells }, vec![c, cells], out, ng)
    }

    /// [R, cols] -> [cols]: column-wise max with argmax routing for backward.
    pub fn max_over_rows(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.view2(a);
        assert!(rows > 0, "max_over_rows on empty tensor");
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut idx = vec![0u32; cols];
        for r in 0..rows {
            for j in 0..cols {
                let v = self.data(a)[r * cols + j];
                if v > out[j] {
                    out[j] = v;
                    idx[j] = r as u32;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::MaxOverRows { a, idx }, vec![cols], out, ng)
    }

    /// Euclidean pairwise distances of points [N,2] -> [N,N].
    pub fn pairwise_dist(&mut self, pts: TensorId) -> TensorId {
        let (n, c) = self.view2(pts);
        assert_eq!(c, 2, "pairwise_dist wants [N,2]");
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dx = self.data(pts)[i * 2] - self.data(pts)[j * 2];
                let dy = self.data(pts)[i * 2 + 1] - self.data(pts)[j * 2 + 1];
                out[i * n + j] = (dx * dx + dy * dy).sqrt();
            }
        }
        let ng = self.ng(pts);
        self.push(Op::PairwiseDist { pts }, vec![n, n], out, ng)
    }

    // ---- backward ----

    pub fn backward(&self, loss: TensorId) -> Grads {
        assert_eq!(self.data(loss).len(), 1, "backward expects a scalar loss");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.index()] = Some(vec![1.0]);
        for i in (0..=loss.index()).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = g[i].take().unwrap();
            self.accumulate(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Grads { g }
    }

    fn add_grad(&self, g: &mut Vec<Option<Vec<f64>>>, t: TensorId, delta: &[f64]) {
        if !self.nodes[t.index()].needs_grad {
            return;
        }
        let slot = &mut g[t.index()];
        match slot {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta.iter()) {
                    *a += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, gout: &[f64], g: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(g, *a, gout);
                self.add_grad(g, *b, gout);
            }
            Op::Sub(a, b) => {
                self.add_grad(g, *a, gout);
                let neg: Vec<f64> = gout.iter().map(|&v| -v).collect();
                self.add_grad(g, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    gout.iter().zip(self.data(*b).iter()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f64> =
                    gout.iter().zip(self.data(*a).iter()).map(|(&gv, &av)| gv * av).collect();
                self.add_grad(g, *a, &da);
                self.add_grad(g, *b, &db);
            }
            Op::Div(a, b) => {
                let da: Vec<f64> =
                    gout.iter().zip(self.data(*b).iter()).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter().zip(self.data(*b).iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.add_grad(g, *a, &da);
                self.add_grad(g, *b, &db);
            }
            Op::AddScalar(a) => self.add_grad(g, *a, gout),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = gout.iter().map(|&v| v * c).collect();
                self.add_grad(g, *a, &da);
            }
            Op::PowScalar(a, p) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| gv * p * x.powf(p - 1.0))
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(node.data.iter())
                    .map(|(&gv, &y)| gv * 0.5 / y.max(1e-150))
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> =
                    gout.iter().zip(self.data(*a).iter()).map(|(&gv, &x)| gv / x).collect();
                self.add_grad(g, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> =
                    gout.iter().zip(node.data.iter()).map(|(&gv, &y)| gv * y).collect();
                self.add_grad(g, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(node.data.iter())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Sin(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| gv * x.cos())
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Cos(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| -gv * x.sin())
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a).iter())
                    .map(|(&gv, &x)| if x >= *lo && x <= *hi { gv } else { 0.0 })
                    .collect();
                self.add_grad(g, *a, &da);
            }
            Op::MatMul { a, b, m, k, n } => {
                let mut da = vec![0.0; m * k];
                kernels::matmul_tb(gout, self.data(*b), *m, *n, *k, &mut da);
                self.add_grad(g, *a, &da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_ta_acc(self.data(*a), gout, *m, *k, *n, &mut db);
                self.add_grad(g, *b, &db);
            }
            Op::MatMulTB { a, b, m, k, n } => {
                // C = A B^T: dA = G B, dB = G^T A
                let mut da = vec![0.0; m * k];
                kernels::matmul(gout, self.data(*b), *m, *n, *k, &mut da);
                self.add_grad(g, *a, &da);
                let mut db = vec![0.0; n * k];
                kernels::matmul_ta_acc(gout, self.data(*a), *m, *n, *k, &mut db);
                self.add_grad(g, *b, &db);
            }
            Op::BatMatMul { a, b, bs, m, k, n } => {
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..*bs {
                    let go = &gout[i * m * n..(i + 1) * m * n];
                    kernels::matmul_tb(
                        go,
                        &self.data(*b)[i * k * n..(i + 1) * k * n],
                        *m,
                        *n,
                        *k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    kernels::matmul_ta_acc(
                        &self.data(*a)[i * m * k..(i + 1) * m * k],
                        go,
                        *m,
                        *k,
                        *n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                self.add_grad(g, *a, &da);
                self.add_grad(g, *b, &db);
            }
            Op::BatMatMulTB { a, b, bs, m, k, n } => {
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * n * k];
                for i in 0..*bs {
                    let go = &gout[i * m * n..(i + 1) * m * n];
                    kernels::matmul(
                        go,
                        &self.data(*b)[i * n * k..(i + 1) * n * k],
                        *m,
                        *n,
                        *k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    kernels::matmul_ta_acc(
                        go,
                        &self.data(*a)[i * m * k..(i + 1) * m * k],
                        *m,
                        *n,
                        *k,
                        &mut db[i * n * k..(i + 1) * n * k],
                    );
                }
                self.add_grad(g, *a, &da);
                self.add_grad(g, *b, &db);
            }
            Op::Transpose { a, m, n } => {
                let mut da = vec![0.0; m * n];
                kernels::transpose(gout, *n, *m, &mut da);
                self.add_grad(g, *a, &da);
            }
            Op::BatTranspose { a, bs, m, n } => {
                let mut da = vec![0.0; bs * m * n];
                for i in 0..*bs {
                    kernels::transpose(
                        &gout[i * m * n..(i + 1) * m * n],
                        *n,
                        *m,
                        &mut da[i * m * n..(i + 1) * m * n],
                    );
                }
                self.add_grad(g, *a, &da);
            }
            Op::SoftmaxLast { a, cols } => {
                let rows = node.data.len() / cols;
                let mut da = vec![0.0; node.data.len()];
                for r in 0..rows {
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(go.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..*cols {
                        da[r * cols + j] = y[j] * (go[j] - dot);
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::LogSoftmaxLast { a, cols } => {
                let rows = node.data.len() / cols;
                let mut da = vec![0.0; node.data.len()];
                for r in 0..rows {
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let gsum: f64 = go.iter().sum();
                    for j in 0..*cols {
                        da[r * cols + j] = go[j] - y[j].exp() * gsum;
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::LayerNormLast { a, cols, eps } => {
                let rows = node.data.len() / cols;
                let mut da = vec![0.0; node.data.len()];
                for r in 0..rows {
                    let x = &self.data(*a)[r * cols..(r + 1) * cols];
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let mean = x.iter().sum::<f64>() / *cols as f64;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / *cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = go.iter().sum::<f64>() / *cols as f64;
                    let gydot =
                        go.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).sum::<f64>() / *cols as f64;
                    for j in 0..*cols {
                        da[r * cols + j] = inv * (go[j] - gmean - y[j] * gydot);
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![gout[0]; self.data(*a).len()];
                self.add_grad(g, *a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.data(*a).len().max(1);
                let da = vec![gout[0] / n as f64; self.data(*a).len()];
                self.add_grad(g, *a, &da);
            }
            Op::SumLast { a, cols } => {
                let mut da = vec![0.0; self.data(*a).len()];
                for (r, &gv) in gout.iter().enumerate() {
                    for j in 0..*cols {
                        da[r * cols + j] = gv;
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::MeanTrailing { a, cols } => {
                let mut da = vec![0.0; self.data(*a).len()];
                for (r, &gv) in gout.iter().enumerate() {
                    let v = gv / *cols as f64;
                    for j in 0..*cols {
                        da[r * cols + j] = v;
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::Reshape(a) => self.add_grad(g, *a, gout),
            Op::ConcatRows { parts, cols } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    let _ = cols;
                    self.add_grad(g, p, &gout[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.view2(p).1).collect();
                let total: usize = widths.iter().sum();
                let rows = node.data.len() / total;
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let c = widths[pi];
                    let mut dp = vec![0.0; rows * c];
                    for r in 0..rows {
                        dp[r * c..(r + 1) * c]
                            .copy_from_slice(&gout[r * total + off..r * total + off + c]);
                    }
                    self.add_grad(g, p, &dp);
                    off += c;
                }
            }
            Op::SliceCols { a, start, len, cols } => {
                let rows = node.data.len() / len;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                self.add_grad(g, *a, &da);
            }
            Op::GatherRows { a, rows, cols } => {
                let mut da = vec![0.0; self.data(*a).len()];
                for (i, &r) in rows.iter().enumerate() {
                    if r >= 0 {
                        let dst = &mut da[r as usize * cols..(r as usize + 1) * cols];
                        for (d, &gv) in dst.iter_mut().zip(gout[i * cols..(i + 1) * cols].iter()) {
                            *d += gv;
                        }
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::MulColBroadcast { a, c } => {
                let rows = self.data(*c).len();
                let cols = node.data.len() / rows;
                let mut da = vec![0.0; node.data.len()];
                let mut dc = vec![0.0; rows];
                for r in 0..rows {
                    let s = self.data(*c)[r];
                    let mut acc = 0.0;
                    for j in 0..cols {
                        let gv = gout[r * cols + j];
                        da[r * cols + j] = gv * s;
                        acc += gv * self.data(*a)[r * cols + j];
                    }
                    dc[r] = acc;
                }
                self.add_grad(g, *a, &da);
                self.add_grad(g, *c, &dc);
            }
            Op::AddColBroadcast { a, b } => {
                let rows = self.data(*b).len();
                let cols = node.data.len() / rows;
                self.add_grad(g, *a, gout);
                let mut db = vec![0.0; rows];
                for r in 0..rows {
                    db[r] = gout[r * cols..(r + 1) * cols].iter().sum();
                }
                self.add_grad(g, *b, &db);
            }
            Op::MulLast { a, m } => {
                let cols = self.data(*m).len();
                let rows = node.data.len() / cols;
                let mut da = vec![0.0; node.data.len()];
                let mut dm = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let gv = gout[r * cols + j];
                        da[r * cols + j] = gv * self.data(*m)[j];
                        dm[j] += gv * self.data(*a)[r * cols + j];
                    }
                }
                self.add_grad(g, *a, &da);
                self.add_grad(g, *m, &dm);
            }
            Op::AddLast { a, b } => {
                let cols = self.data(*b).len();
                let rows = node.data.len() / cols;
                self.add_grad(g, *a, gout);
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] += gout[r * cols + j];
                    }
                }
                self.add_grad(g, *b, &db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = kernels::conv_out(h, kh, *stride, *pad);
                let wo = kernels::conv_out(wd, kw, *stride, *pad);
                let ckk = cin * kh * kw;
                // Recompute im2col rather than caching it on the node.
                let mut cols = vec![0.0; ckk * ho * wo];
                kernels::im2col(self.data(*x), cin, h, wd, kh, kw, *stride, *pad, &mut cols);
                let mut dw = vec![0.0; cout * ckk];
                kernels::matmul_tb(gout, &cols, cout, ho * wo, ckk, &mut dw);
                self.add_grad(g, *w, &dw);
                let mut dcols = vec![0.0; ckk * ho * wo];
                kernels::matmul_ta_acc(self.data(*w), gout, cout, ckk, ho * wo, &mut dcols);
                let mut dx = vec![0.0; cin * h * wd];
                kernels::col2im_acc(&dcols, cin, h, wd, kh, kw, *stride, *pad, &mut dx);
                self.add_grad(g, *x, &dx);
                if let Some(bi) = b {
                    let mut db = vec![0.0; cout];
                    for c in 0..cout {
                        db[c] = gout[c * ho * wo..(c + 1) * ho * wo].iter().sum();
                    }
                    self.add_grad(g, *bi, &db);
                }
            }
            Op::MaxPool2d { x, idx, .. } => {
                let mut dx = vec![0.0; self.data(*x).len()];
                for (e, &i) in idx.iter().enumerate() {
                    dx[i as usize] += gout[e];
                }
                self.add_grad(g, *x, &dx);
            }
            Op::MaxUnpool2d { x, pool } => {
                let idx = match &self.nodes[pool.index()].op {
                    Op::MaxPool2d { idx, .. } => idx,
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; self.data(*x).len()];
                for (e, &i) in idx.iter().enumerate() {
                    dx[e] = gout[i as usize];
                }
                self.add_grad(g, *x, &dx);
            }
            Op::AvgPoolTo2d { x, th, tw } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..*th {
                        let (y0, y1) = pool_range(oy, h, *th);
                        for ox in 0..*tw {
                            let (x0, x1) = pool_range(ox, w, *tw);
                            let gv = gout[(ci * th + oy) * tw + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(ci * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                self.add_grad(g, *x, &dx);
            }
            Op::AvgPoolTo3d { x, tx, ty, tz } => {
                let xs = self.shape(*x);
                let (c, nx, ny, nz) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; c * nx * ny * nz];
                for ci in 0..c {
                    for ox in 0..*tx {
                        let (x0, x1) = pool_range(ox, nx, *tx);
                        for oy in 0..*ty {
                            let (y0, y1) = pool_range(oy, ny, *ty);
                            for oz in 0..*tz {
                                let (z0, z1) = pool_range(oz, nz, *tz);
                                let gv = gout[((ci * tx + ox) * ty + oy) * tz + oz]
                                    / ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                                for xx in x0..x1 {
                                    for yy in y0..y1 {
                                        for zz in z0..z1 {
                                            dx[((ci * nx + xx) * ny + yy) * nz + zz] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(g, *x, &dx);
            }
            Op::Upsample2x(a) => {
                let xs = self.shape(*a);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut da = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            da[(ci * h + y / 2) * w + xx / 2] +=
                                gout[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.add_grad(g, *a, &da);
            }
            Op::BilinearSample { feat, pts } => {
                let fs = self.shape(*feat);
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let p = self.data(*pts).len() / 2;
                let mut dfeat = vec![0.0; c * h * w];
                let mut dpts = vec![0.0; p * 2];
                for i in 0..p {
                    let px = self.data(*pts)[i * 2];
                    let py = self.data(*pts)[i * 2 + 1];
                    let x0 = px.floor() as isize;
                    let y0 = py.floor() as isize;
                    let wx = px - x0 as f64;
                    let wy = py - y0 as f64;
                    let read = |dy: isize, dx: isize, ci: usize| -> f64 {
                        let yy = y0 + dy;
                        let xx = x0 + dx;
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            self.data(*feat)[(ci * h + yy as usize) * w + xx as usize]
                        }
                    };
                    for ci in 0..c {
                        let gv = gout[i * c + ci];
                        if gv == 0.0 {
                            continue;
                        }
                        let f00 = read(0, 0, ci);
                        let f01 = read(0, 1, ci);
                        let f10 = read(1, 0, ci);
                        let f11 = read(1, 1, ci);
                        // feature gradients
                        for (dy, dx, wgt) in [
                            (0isize, 0isize, (1.0 - wx) * (1.0 - wy)),
                            (0, 1, wx * (1.0 - wy)),
                            (1, 0, (1.0 - wx) * wy),
                            (1, 1, wx * wy),
                        ] {
                            let yy = y0 + dy;
                            let xx = x0 + dx;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                dfeat[(ci * h + yy as usize) * w + xx as usize] += gv * wgt;
                            }
                        }
                        // position gradients
                        dpts[i * 2] += gv * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                        dpts[i * 2 + 1] += gv * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                    }
                }
                self.add_grad(g, *feat, &dfeat);
                self.add_grad(g, *pts, &dpts);
            }
            Op::LiftScatter { feat, prob, map, cells } => {
                let (c, p) = {
                    let fs = self.shape(*feat);
                    (fs[0], fs[1])
                };
                let b = self.shape(*prob)[0];
                let mut dfeat = vec![0.0; c * p];
                let mut dprob = vec![0.0; b * p];
                for bi in 0..b {
                    for pi in 0..p {
                        let cell = map[bi * p + pi];
                        if cell < 0 {
                            continue;
                        }
                        let cell = cell as usize;
                        let pr = self.data(*prob)[bi * p + pi];
                        let mut acc = 0.0;
                        for ci in 0..c {
                            let gv = gout[ci * cells + cell];
                            dfeat[ci * p + pi] += gv * pr;
                            acc += gv * self.data(*feat)[ci * p + pi];
                        }
                        dprob[bi * p + pi] += acc;
                    }
                }
                self.add_grad(g, *feat, &dfeat);
                self.add_grad(g, *prob, &dprob);
            }
            Op::MaxOverRows { a, idx } => {
                let cols = node.data.len();
                let mut da = vec![0.0; self.data(*a).len()];
                for j in 0..cols {
                    da[idx[j] as usize * cols + j] += gout[j];
                }
                self.add_grad(g, *a, &da);
            }
            Op::PairwiseDist { pts } => {
                let n = self.shape(*pts)[0];
                let mut dp = vec![0.0; n * 2];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let gv = gout[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let d = node.data[i * n + j].max(1e-12);
                        let dx = self.data(*pts)[i * 2] - self.data(*pts)[j * 2];
                        let dy = self.data(*pts)[i * 2 + 1] - self.data(*pts)[j * 2 + 1];
                        dp[i * 2] += gv * dx / d;
                        dp[i * 2 + 1] += gv * dy / d;
                        dp[j * 2] -= gv * dx / d;
                        dp[j * 2 + 1] -= gv * dy / d;
                    }
                }
                self.add_grad(g, *pts, &dp);
            }
        }
    }
}

/// Inclusive-exclusive source range covered by target bin `i` when pooling
/// `src` elements into `dst` bins (PyTorch adaptive-pool convention).
fn pool_range(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = i * src / dst;
    let end = ((i + 1) * src).div_ceil(dst);
    (start, end.max(start + 1).min(src))
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
