use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Conv2dGeom};
use super::params::{fnv1a, mix, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
        cols: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    SumRows(Var),
    MeanRows(Var),
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    ConcatLast(Var, Var),
    ConcatRows(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    /// Loss node whose input gradient was computed in the forward pass.
    Fused {
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) | ConcatLast(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Exp(a) | Log(a) | Sqrt(a) | Abs(a) | Relu(a) | Sigmoid(a)
            | Swish(a) | Glu(a) | Softmax(a) | LogSoftmax(a) | SumAll(a) | MeanAll(a) | SumLast(a)
            | SumRows(a) | MeanRows(a) | Reshape(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()));
                v
            }
            DepthwiseConv1d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter());
                v
            }
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Embedding { table, .. } => vec![*table],
            Dropout { x, .. }
            | MaskFill { x, .. }
            | SliceLast { x, .. }
            | GatherRows { x, .. }
            | ScatterRows { x, .. }
            | PickPerRow { x, .. }
            | Fused { x, .. } => vec![*x],
            ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; kept for leaves only.
    grad: Option<Tensor>,
}

/// A reverse-mode autodiff tape.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep. A graph is single-threaded; build one
/// per thread when evaluating independent inputs in parallel.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    seed: u64,
    stream: u64,
    check_finite: bool,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            seed: 0,
            stream: 0,
            check_finite: cfg!(debug_assertions),
            bound: HashMap::new(),
        }
    }

    /// A training-mode graph whose dropout masks derive from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            train: true,
            seed,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Selects the dropout stream. Masks drawn under different streams are
    /// independent even when their tags coincide, so one graph can hold
    /// several utterances passed through the same layers.
    pub fn set_stream(&mut self, stream: u64) {
        self.stream = stream;
    }

    /// Enables or disables the per-op scan for non-finite inputs.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; each parameter is bound at most once per
    /// graph so its gradient accumulates across every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every parameter bound into this graph, ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].grad.as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if self.check_finite {
            for v in vars {
                if !self.nodes[v.0].value.is_finite() {
                    return Err(Error::NonFinite { op, node: v.0 });
                }
            }
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn unary(&mut self, op_name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(op_name, &[x])?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(op_name, &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op_name, a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a last-dimension vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |v, w| v + w, Op::AddRow(x, b))
    }

    /// Multiplies every row elementwise by a last-dimension vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g, |v, w| v * w, Op::MulRow(x, g))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(name, &[x, b])?;
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(self.mismatch(name, x, b));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &w) in row.iter_mut().zip(bv) {
                *v = f(*v, w);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    /// Scales row `r` of `x` by `s[r]`; `s` holds one value per row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check("mul_col", &[x, s])?;
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if self.value(s).len() != rows {
            return Err(self.mismatch("mul_col", x, s));
        }
        let sv = self.value(s).data();
        let mut data = xv.data().to_vec();
        for (row, &w) in data.chunks_exact_mut(c).zip(sv) {
            for v in row.iter_mut() {
                *v *= w;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulCol(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, |v| v * kernels::sigmoid(v), Op::Swish(x))
    }

    /// Gated linear unit over the last dimension: first half times the
    /// sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        self.check("glu", &[x])?;
        let xv = self.value(x);
        let c2 = xv.cols();
        if c2 % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "glu",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = c2 / 2;
        let mut data = Vec::with_capacity(xv.len() / 2);
        for row in xv.data().chunks_exact(c2) {
            for j in 0..c {
                data.push(row[j] * kernels::sigmoid(row[c + j]));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        Ok(self.push(Tensor::new(shape, data)?, Op::Glu(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check("softmax", &[x])?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        kernels::softmax_rows(xv.data(), xv.cols(), &mut out);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check("log_softmax", &[x])?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        kernels::log_softmax_rows(xv.data(), xv.cols(), &mut out);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    /// Normalizes each row to zero mean and unit variance (variance floored
    /// by `1e-5`), then applies the optional elementwise affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let mut inputs = vec![x];
        inputs.extend(gamma.iter().chain(beta.iter()));
        self.check("layer_norm", &inputs)?;
        let xv = self.value(x);
        let c = xv.cols();
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).len() != c {
                return Err(self.mismatch("layer_norm", x, *p));
            }
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, hr)) in xv.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).enumerate() {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_exact_mut(c) {
                for (o, &w) in row.iter_mut().zip(gv) {
                    *o *= w;
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(c) {
                for (o, &w) in row.iter_mut().zip(bv) {
                    *o += w;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-channel convolution over time with same padding.
    /// `x: [T × C]`, `w: [C × k]` with odd `k`, optional bias `b: [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b.iter());
        self.check("depthwise_conv1d", &inputs)?;
        let (t, c) = self.matrix_dims("depthwise_conv1d", x)?;
        let (wc, k) = self.matrix_dims("depthwise_conv1d", w)?;
        if wc != c || k % 2 == 0 {
            return Err(self.mismatch("depthwise_conv1d", x, w));
        }
        if let Some(b) = b {
            if self.value(b).len() != c {
                return Err(self.mismatch("depthwise_conv1d", x, b));
            }
        }
        let y = kernels::depthwise_conv1d(
            self.value(x).data(),
            t,
            c,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
        );
        Ok(self.push(Tensor::new(vec![t, c], y)?, Op::DepthwiseConv1d { x, w, b }))
    }

    /// `x · w + b`: a kernel-size-1 convolution over time.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Strided, unpadded 2-D convolution in time-major layout.
    /// `x: [H × C_in × W]`, `w: [C_out × C_in × kh × kw]`, `b: [C_out]`;
    /// output `[H' × C_out × W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.check("conv2d", &[x, w, b])?;
        let (h, c_in, wd) = match *self.shape(x) {
            [h, c, w] => (h, c, w),
            _ => return Err(self.mismatch("conv2d", x, w)),
        };
        let (c_out, kh, kw) = match *self.shape(w) {
            [o, i, kh, kw] if i == c_in => (o, kh, kw),
            _ => return Err(self.mismatch("conv2d", x, w)),
        };
        if self.value(b).len() != c_out || h < kh || wd < kw || stride == 0 {
            return Err(self.mismatch("conv2d", x, w));
        }
        let geom = Conv2dGeom {
            h,
            w: wd,
            c_in,
            c_out,
            kh,
            kw,
            stride,
        };
        let cols = geom.im2col(self.value(x).data());
        let (ho, wo, p) = (geom.h_out(), geom.w_out(), geom.patch());
        // [ho·wo × c_out]
        let mut prod = vec![0.0; ho * wo * c_out];
        kernels::gemm(ho * wo, p, c_out, 1.0, &cols, false, self.value(w).data(), true, 0.0, &mut prod);
        let bv = self.value(b).data();
        let mut out = vec![0.0; ho * c_out * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                for o in 0..c_out {
                    out[(oh * c_out + o) * wo + ow] = prod[(oh * wo + ow) * c_out + o] + bv[o];
                }
            }
        }
        let t = Tensor::new(vec![ho, c_out, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding: id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`. The
    /// mask is a pure function of the graph seed and `tag`, so call sites
    /// with distinct tags draw independent masks regardless of call order.
    pub fn dropout(&mut self, x: Var, p: f64, tag: &str) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {p} must be < 1")));
        }
        self.check("dropout", &[x])?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, self.stream), fnv1a(tag)));
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x)))
    }

    /// Sums over the last dimension: `[R × C] → [R × 1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.check("sum_last", &[x])?;
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().chunks_exact(xv.cols()).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(vec![data.len(), 1], data)?;
        Ok(self.push(t, Op::SumLast(x)))
    }

    /// Sums over rows: `[R × C] → [1 × C]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.check("sum_rows", &[x])?;
        let data = self.column_sums(x);
        let t = Tensor::new(vec![1, data.len()], data)?;
        Ok(self.push(t, Op::SumRows(x)))
    }

    /// Averages over rows: `[R × C] → [1 × C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check("mean_rows", &[x])?;
        let rows = self.value(x).rows();
        if rows == 0 {
            return Err(Error::invalid("mean_rows of zero rows"));
        }
        let data: Vec<f64> = self.column_sums(x).into_iter().map(|s| s / rows as f64).collect();
        let t = Tensor::new(vec![1, data.len()], data)?;
        Ok(self.push(t, Op::MeanRows(x)))
    }

    fn column_sums(&self, x: Var) -> Vec<f64> {
        let xv = self.value(x);
        let mut acc = vec![0.0; xv.cols()];
        for row in xv.data().chunks_exact(xv.cols()) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    }

    /// Replaces elements where `mask` is true by `value`; no gradient flows
    /// to replaced positions.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        self.check("mask_fill", &[x])?;
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// `[R × A] ++ [R × B] → [R × (A + B)]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("concat_last", &[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(self.mismatch("concat_last", a, b));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let t = Tensor::new(vec![av.rows(), ca + cb], data)?;
        Ok(self.push(t, Op::ConcatLast(a, b)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.check("concat_rows", xs)?;
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat_rows of nothing"));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(self.mismatch("concat_rows", first, x));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let rows = data.len() / c.max(1);
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_last",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Selects rows `idx` of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::invalid("gather_rows: index out of range"));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero `[total × C]` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("scatter_rows", x)?;
        if r != idx.len() || idx.iter().any(|&i| i >= total) {
            return Err(Error::invalid("scatter_rows: bad index list"));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; total * c];
        for (k, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&xv[k * c..(k + 1) * c]);
        }
        let t = Tensor::new(vec![total, c], data)?;
        Ok(self.push(t, Op::ScatterRows { x, idx: idx.to_vec() }))
    }

    /// `out[r] = x[r, idx[r]]`, shape `[R × 1]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(Error::invalid("pick_per_row: bad index list"));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xv.data()[r * c + i]).collect();
        let t = Tensor::new(vec![rows, 1], data)?;
        Ok(self.push(t, Op::PickPerRow { x, idx: idx.to_vec() }))
    }

    /// Records a scalar whose gradient with respect to `x` was computed
    /// alongside its value (e.g. by a dynamic program).
    pub fn fused_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::invalid("fused_scalar: gradient length mismatch"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, grad }))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(acc) = &mut self.nodes[i].grad {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let cols = |v: Var| nodes[v.0].value.cols();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |da| kernels::gemm(m, n, k, 1.0, g, false, val(*b), true, 1.0, da));
                acc(*b, &mut |db| kernels::gemm(k, m, n, 1.0, val(*a), true, g, false, 1.0, db));
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |g, b| g * b));
                acc(*b, &mut |d| zip3(d, g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |g, b| g / b));
                acc(*b, &mut |d| {
                    for ((d, g), (a, b)) in d.iter_mut().zip(g).zip(av.iter().zip(bv)) {
                        *d -= g * a / (b * b);
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = cols(*x);
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let c = cols(*x);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        zip3(dr, gr, wv, |g, w| g * w);
                    }
                });
                acc(*w, &mut |d| {
                    for (gr, xr) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        zip3(d, gr, xr, |g, x| g * x);
                    }
                });
            }
            Op::MulCol(x, s) => {
                let c = cols(*x);
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |d| {
                    for ((dr, gr), &w) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(sv) {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g * w);
                    }
                });
                acc(*s, &mut |d| {
                    for ((ds, gr), xr) in d.iter_mut().zip(g.chunks_exact(c)).zip(xv.chunks_exact(c)) {
                        *ds += gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Exp(x) => acc(*x, &mut |d| zip3(d, g, y, |g, y| g * y)),
            Op::Log(x) => acc(*x, &mut |d| zip3(d, g, val(*x), |g, x| g / x)),
            Op::Sqrt(x) => acc(*x, &mut |d| zip3(d, g, y, |g, y| 0.5 * g / y)),
            Op::Abs(x) => acc(*x, &mut |d| {
                zip3(d, g, val(*x), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
            }),
            Op::Relu(x) => acc(*x, &mut |d| zip3(d, g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, &mut |d| zip3(d, g, y, |g, y| g * y * (1.0 - y))),
            Op::Swish(x) => acc(*x, &mut |d| {
                zip3(d, g, val(*x), |g, x| {
                    let s = kernels::sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
            }),
            Op::Glu(x) => {
                let c2 = cols(*x);
                let c = c2 / 2;
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((dr, gr), xr) in d.chunks_exact_mut(c2).zip(g.chunks_exact(c)).zip(xv.chunks_exact(c2)) {
                        for j in 0..c {
                            let s = kernels::sigmoid(xr[c + j]);
                            dr[j] += gr[j] * s;
                            dr[c + j] += gr[j] * xr[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = cols(*x);
                let gv = gamma.map(|gm| val(gm));
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; c];
                    for (r, (dr, gr)) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gv.map_or(1.0, |w| w[j]);
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] += inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                if let Some(gm) = gamma {
                    acc(*gm, &mut |d| {
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            zip3(d, gr, hr, |g, h| g * h);
                        }
                    });
                }
                if let Some(b) = beta {
                    acc(*b, &mut |d| {
                        for gr in g.chunks_exact(c) {
                            add_into(d, gr);
                        }
                    });
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (t, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let k = nodes[w.0].value.shape()[1];
                let half = (k / 2) as isize;
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |dx| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..c {
                                dx[s * c + ch] += wv[ch * k + j] * g[ti * c + ch];
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..c {
                                dw[ch * k + j] += xv[s * c + ch] * g[ti * c + ch];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for gr in g.chunks_exact(c) {
                            add_into(db, gr);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo, p, co) = (geom.h_out(), geom.w_out(), geom.patch(), geom.c_out);
                // regroup the output gradient to [ho·wo × c_out]
                let mut gp = vec![0.0; ho * wo * co];
                for oh in 0..ho {
                    for o in 0..co {
                        for ow in 0..wo {
                            gp[(oh * wo + ow) * co + o] = g[(oh * co + o) * wo + ow];
                        }
                    }
                }
                acc(*w, &mut |dw| kernels::gemm(co, ho * wo, p, 1.0, &gp, true, cols, false, 1.0, dw));
                acc(*b, &mut |db| {
                    for row in gp.chunks_exact(co) {
                        add_into(db, row);
                    }
                });
                let wv = val(*w);
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; ho * wo * p];
                    kernels::gemm(ho * wo, co, p, 1.0, &gp, false, wv, false, 0.0, &mut dcols);
                    geom.col2im_add(&dcols, dx);
                });
            }
            Op::Embedding { table, ids } => {
                let d = cols(*table);
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| zip3(d, g, mask, |g, m| g * m)),
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumLast(x) => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for (dr, &gv) in d.chunks_exact_mut(c).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let c = cols(*x);
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / nodes[x.0].value.rows() as f64
                } else {
                    1.0
                };
                acc(*x, &mut |d| {
                    for dr in d.chunks_exact_mut(c) {
                        dr.iter_mut().zip(g).for_each(|(d, g)| *d += g * scale);
                    }
                });
            }
            Op::MaskFill { x, mask } => acc(*x, &mut |d| {
                for ((d, g), &m) in d.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += g;
                    }
                }
            }),
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (cols(*a), cols(*b));
                let c = ca + cb;
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(ca).zip(g.chunks_exact(c)) {
                        add_into(dr, &gr[..ca]);
                    }
                });
                acc(*b, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(cb).zip(g.chunks_exact(c)) {
                        add_into(dr, &gr[ca..]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceLast { x, start } => {
                let c = cols(*x);
                let len = node.value.cols();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::GatherRows { x, idx } => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut d[k * c..(k + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let c = cols(*x);
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] += g[r];
                    }
                });
            }
            Op::Fused { x, grad } => acc(*x, &mut |d| {
                d.iter_mut().zip(grad).for_each(|(d, gr)| *d += g[0] * gr);
            }),
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

/// `d[i] += f(g[i], o[i])`.
fn zip3(d: &mut [f64], g: &[f64], o: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in d.iter_mut().zip(g).zip(o) {
        *d += f(g, o);
    }
}
