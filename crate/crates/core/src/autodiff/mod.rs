//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks
//! the record once in reverse, accumulating gradients into every node that
//! depends on a leaf created with `requires_grad`. Only the operations the
//! spherical U-Net and its loss need are provided.
//!
//! Activations use the layout `[batch, channel, vertex]`.

pub mod gemm;
mod optim;

use std::sync::Arc;

pub use optim::{init_uniform, Adam, AdamState, ParamStore, PlateauScheduler};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use gemm::{gemm, rm, tr};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;

/// Running-statistics momentum of batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Fixed dense matrix shared between tapes, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FixedMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}×{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FixedMatrix { rows, cols, data })
    }

    pub fn from_dmatrix(m: &nalgebra::DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        FixedMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

enum Op {
    Leaf,
    GraphConv {
        x: Var,
        w: Var,
        lap: Arc<CsrMatrix>,
        order: usize,
        // [B, (P+1)·C_in, N]
        z: Vec<f64>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Softplus(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Unpool(Var),
    ConcatChannels(Var, Var),
    Channel {
        x: Var,
        c: usize,
    },
    MatmulFixed {
        x: Var,
        m: Arc<FixedMatrix>,
    },
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SubConst(Var),
    Add(Var, Var),
    Scale(Var, f64),
    SumSquares(Var),
    CauchySum {
        x: Var,
        sigma: f64,
    },
    NegSumSquares(Var),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Operation record plus gradient buffers.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::invalid(format!("{what}: {detail}"))
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, c, n] => Ok((*b, *c, *n)),
        s => Err(shape_err(what, format!("expected [batch, channel, vertex], got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, k] => Ok((*b, *k)),
        [b] => Ok((*b, 1)),
        s => Err(shape_err(what, format!("expected [batch, k], got {s:?}"))),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last [`Tape::backward`] target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// `y[b] = Σ_i W_iᵀ (L̃ⁱ x[b])` for a precomputed scaled Laplacian `L̃`.
    pub fn graph_conv(&mut self, x: Var, w: Var, lap: &Arc<CsrMatrix>) -> Result<Var> {
        let (b, c_in, n) = dims3(self.value(x), "graph_conv input")?;
        let (order, wc_in, c_out) = match self.value(w).shape() {
            [p, ci, co] => (*p, *ci, *co),
            s => return Err(shape_err("graph_conv weights", format!("expected [P+1, C_in, C_out], got {s:?}"))),
        };
        if order == 0 || wc_in != c_in {
            return Err(shape_err(
                "graph_conv",
                format!("weights {:?} do not match {c_in} input channels", self.value(w).shape()),
            ));
        }
        if lap.rows() != n || lap.cols() != n {
            return Err(shape_err("graph_conv", format!("Laplacian is {}×{}, signal has {n} vertices", lap.rows(), lap.cols())));
        }
        let k = order * c_in;
        let xv = self.value(x).data();
        let mut z = vec![0.0; b * k * n];
        for bi in 0..b {
            let zb = &mut z[bi * k * n..(bi + 1) * k * n];
            zb[..c_in * n].copy_from_slice(&xv[bi * c_in * n..(bi + 1) * c_in * n]);
            for i in 1..order {
                let (prev, cur) = zb.split_at_mut(i * c_in * n);
                let prev = &prev[(i - 1) * c_in * n..];
                for c in 0..c_in {
                    lap.matvec_into(&prev[c * n..(c + 1) * n], &mut cur[c * n..(c + 1) * n]);
                }
            }
        }
        let wv = self.value(w).data();
        let mut y = vec![0.0; b * c_out * n];
        for bi in 0..b {
            gemm(
                c_out,
                k,
                n,
                1.0,
                tr(wv, c_out),
                rm(&z[bi * k * n..(bi + 1) * k * n], n),
                0.0,
                &mut y[bi * c_out * n..(bi + 1) * c_out * n],
                n,
                1,
            );
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::new(vec![b, c_out, n], y)?,
            needs,
            Op::GraphConv {
                x,
                w,
                lap: Arc::clone(lap),
                order,
                z,
            },
        ))
    }

    /// Adds a per-channel bias `b[C]` to `x[B, C, N]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, n) = dims3(self.value(x), "add_bias input")?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err("add_bias", format!("bias {:?} for {c} channels", self.value(bias).shape())));
        }
        let bv = self.value(bias).data().to_vec();
        let mut y = self.value(x).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                y[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter_mut().for_each(|v| *v += bv[ci]);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![b, c, n], y)?, needs, Op::AddBias { x, b: bias }))
    }

    /// Per-channel normalization over batch and vertex axes, then `γ x̂ + β`.
    ///
    /// In train mode the batch statistics are used and `stats` is updated
    /// with momentum [`BN_MOMENTUM`] (unbiased variance); in eval mode the
    /// running statistics are used.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, train: bool) -> Result<Var> {
        let (b, c, n) = dims3(self.value(x), "batchnorm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || stats.mean.len() != c {
            return Err(shape_err("batchnorm", format!("parameters do not match {c} channels")));
        }
        let m = (b * n) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xv[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut q = 0.0;
                for bi in 0..b {
                    q += xv[(bi * c + ci) * n..(bi * c + ci + 1) * n]
                        .iter()
                        .map(|v| (v - mean[ci]).powi(2))
                        .sum::<f64>();
                }
                var[ci] = q / m;
            }
            for ci in 0..c {
                let unbiased = if m > 1.0 { var[ci] * m / (m - 1.0) } else { var[ci] };
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for j in (bi * c + ci) * n..(bi * c + ci + 1) * n {
                    xhat[j] = (xv[j] - mean[ci]) * inv_std[ci];
                    y[j] = g[ci] * xhat[j] + be[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![b, c, n], y)?,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let needs = self.needs(x);
        self.push(y, needs, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| softplus(v)).collect(),
        };
        let needs = self.needs(x);
        self.push(y, needs, Op::Softplus(x))
    }

    /// Max over each group of 4 NESTED children; ties go to the lowest index.
    pub fn maxpool(&mut self, x: Var, map: &crate::sphere_grid::PoolingMap) -> Result<Var> {
        let (b, c, n) = dims3(self.value(x), "maxpool input")?;
        if n != map.n_fine() || n != 4 * map.n_coarse() {
            return Err(shape_err("maxpool", format!("{n} vertices for a {}→{} map", map.n_fine(), map.n_coarse())));
        }
        let nc = n / 4;
        let xv = self.value(x).data();
        let mut y = vec![0.0; b * c * nc];
        let mut argmax = vec![0; b * c * nc];
        for row in 0..b * c {
            for k in 0..nc {
                let base = row * n + 4 * k;
                let mut best = base;
                for j in base + 1..base + 4 {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                y[row * nc + k] = xv[best];
                argmax[row * nc + k] = best;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, c, nc], y)?, needs, Op::MaxPool { x, argmax }))
    }

    /// Argmax indices (into the flattened input) recorded by a maxpool node.
    pub fn pool_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Copies every coarse value to its 4 children.
    pub fn unpool(&mut self, x: Var, map: &crate::sphere_grid::PoolingMap) -> Result<Var> {
        let (b, c, nc) = dims3(self.value(x), "unpool input")?;
        if nc != map.n_coarse() {
            return Err(shape_err("unpool", format!("{nc} vertices for a map with {} coarse vertices", map.n_coarse())));
        }
        let xv = self.value(x).data();
        let y: Vec<f64> = xv.iter().flat_map(|&v| [v; 4]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, c, 4 * nc], y)?, needs, Op::Unpool(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, na) = dims3(self.value(a), "concat input")?;
        let (bb, cb, nb) = dims3(self.value(b), "concat input")?;
        if ba != bb || na != nb {
            return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(ba * (ca + cb) * na);
        for bi in 0..ba {
            y.extend_from_slice(&av[bi * ca * na..(bi + 1) * ca * na]);
            y.extend_from_slice(&bv[bi * cb * na..(bi + 1) * cb * na]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![ba, ca + cb, na], y)?, needs, Op::ConcatChannels(a, b)))
    }

    /// Channel `c` of `x[B, C, N]` as `[B, N]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let (b, cc, n) = dims3(self.value(x), "channel input")?;
        if c >= cc {
            return Err(shape_err("channel", format!("channel {c} of {cc}")));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(b * n);
        for bi in 0..b {
            y.extend_from_slice(&xv[(bi * cc + c) * n..(bi * cc + c + 1) * n]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, n], y)?, needs, Op::Channel { x, c }))
    }

    /// `y[B, J] = x[B, K] · M[K, J]` for a fixed matrix `M`.
    pub fn matmul_fixed(&mut self, x: Var, m: &Arc<FixedMatrix>) -> Result<Var> {
        let (b, k) = dims2(self.value(x), "matmul_fixed input")?;
        if k != m.rows {
            return Err(shape_err("matmul_fixed", format!("input has {k} columns, matrix has {} rows", m.rows)));
        }
        let mut y = vec![0.0; b * m.cols];
        gemm(b, k, m.cols, 1.0, rm(self.value(x).data(), k), rm(&m.data, m.cols), 0.0, &mut y, m.cols, 1);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, m.cols], y)?, needs, Op::MatmulFixed { x, m: Arc::clone(m) }))
    }

    /// Row-wise maximum of `x[B, N]` as `[B]`; ties go to the lowest index.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let (b, n) = dims2(self.value(x), "max_last input")?;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(b);
        let mut argmax = Vec::with_capacity(b);
        for bi in 0..b {
            let row = &xv[bi * n..(bi + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            y.push(row[best]);
            argmax.push(bi * n + best);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b], y)?, needs, Op::MaxLast { x, argmax }))
    }

    /// Concatenates `[B, K_i]` (or `[B]`) tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| dims2(self.value(p), "concat_cols input"))
            .collect::<Result<Vec<_>>>()?;
        let b = dims.first().map(|d| d.0).unwrap_or(0);
        if dims.iter().any(|d| d.0 != b) {
            return Err(shape_err("concat_cols", "batch sizes differ".into()));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut y = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (p, (_, k)) in parts.iter().zip(&dims) {
                y.extend_from_slice(&self.value(*p).data()[bi * k..(bi + 1) * k]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![b, total], y)?, needs, Op::ConcatCols(parts.to_vec())))
    }

    /// `x - c` for a constant of the same shape.
    pub fn sub_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if c.len() != t.len() {
            return Err(shape_err("sub_const", format!("{} values for shape {:?}", c.len(), t.shape())));
        }
        let y = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(c).map(|(a, b)| a - b).collect(),
        };
        let needs = self.needs(x);
        Ok(self.push(y, needs, Op::SubConst(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let y = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x);
        let y = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| alpha * v).collect(),
        };
        let needs = self.needs(x);
        self.push(y, needs, Op::Scale(x, alpha))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumSquares(x))
    }

    /// `Σ ln(1 + x²/(2σ²))` as a scalar.
    pub fn cauchy_sum(&mut self, x: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("Cauchy scale must be positive, got {sigma}")));
        }
        let d = 2.0 * sigma * sigma;
        let s = self.value(x).data.iter().map(|v| (v * v / d).ln_1p()).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), needs, Op::CauchySum { x, sigma }))
    }

    /// `Σ min(x, 0)²` as a scalar.
    pub fn neg_sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v.min(0.0).powi(2)).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::NegSumSquares(x))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Back-propagates from the scalar `target`, replacing any previous
    /// gradients. Returns the number of nodes visited (each at most once).
    pub fn backward(&mut self, target: Var) -> Result<usize> {
        if self.value(target).len() != 1 {
            return Err(Error::invalid(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(target).shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[target.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=target.0).rev() {
            let Some(gy) = self.grads[idx].take() else { continue };
            visited += 1;
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backward_node(idx, &gy);
            }
            self.grads[idx] = Some(gy);
        }
        Ok(visited)
    }

    fn backward_node(&mut self, idx: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |v: &Var| nodes[v.0].needs_grad;
        let len = |v: &Var| nodes[v.0].value.len();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::GraphConv { x, w, lap, order, z } => {
                let (b, c_in, n) = dims3(&nodes[x.0].value, "").unwrap();
                let c_out = nodes[w.0].value.shape()[2];
                let k = order * c_in;
                if needs(w) {
                    Self::accumulate(grads, *w, k * c_out, |gw| {
                        for bi in 0..b {
                            gemm(
                                k,
                                n,
                                c_out,
                                1.0,
                                rm(&z[bi * k * n..(bi + 1) * k * n], n),
                                tr(&gy[bi * c_out * n..(bi + 1) * c_out * n], n),
                                1.0,
                                gw,
                                c_out,
                                1,
                            );
                        }
                    });
                }
                if needs(x) {
                    let wv = nodes[w.0].value.data();
                    let mut dz = vec![0.0; k * n];
                    let mut acc = vec![0.0; c_in * n];
                    let mut tmp = vec![0.0; n];
                    Self::accumulate(grads, *x, b * c_in * n, |gx| {
                        for bi in 0..b {
                            gemm(
                                k,
                                c_out,
                                n,
                                1.0,
                                rm(wv, c_out),
                                rm(&gy[bi * c_out * n..(bi + 1) * c_out * n], n),
                                0.0,
                                &mut dz,
                                n,
                                1,
                            );
                            // Horner: dx = dZ₀ + L̃(dZ₁ + L̃(dZ₂ + …)), L̃ symmetric.
                            acc.copy_from_slice(&dz[(order - 1) * c_in * n..]);
                            for i in (0..order - 1).rev() {
                                for c in 0..c_in {
                                    lap.matvec_into(&acc[c * n..(c + 1) * n], &mut tmp);
                                    let dzi = &dz[(i * c_in + c) * n..(i * c_in + c + 1) * n];
                                    for ((a, t), d) in acc[c * n..(c + 1) * n].iter_mut().zip(&tmp).zip(dzi) {
                                        *a = t + d;
                                    }
                                }
                            }
                            for (g, a) in gx[bi * c_in * n..(bi + 1) * c_in * n].iter_mut().zip(&acc) {
                                *g += a;
                            }
                        }
                    });
                }
            }
            Op::AddBias { x, b: bias } => {
                let (b, c, n) = dims3(&nodes[x.0].value, "").unwrap();
                if needs(x) {
                    Self::accumulate(grads, *x, gy.len(), |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d));
                }
                if needs(bias) {
                    Self::accumulate(grads, *bias, c, |g| {
                        for bi in 0..b {
                            for ci in 0..c {
                                g[ci] += gy[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, n) = dims3(&nodes[x.0].value, "").unwrap();
                let m = (b * n) as f64;
                let gv = nodes[gamma.0].value.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for j in (bi * c + ci) * n..(bi * c + ci + 1) * n {
                            sum_dy[ci] += gy[j];
                            sum_dy_xhat[ci] += gy[j] * xhat[j];
                        }
                    }
                }
                if needs(gamma) {
                    Self::accumulate(grads, *gamma, c, |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(a, d)| *a += d));
                }
                if needs(beta) {
                    Self::accumulate(grads, *beta, c, |g| g.iter_mut().zip(&sum_dy).for_each(|(a, d)| *a += d));
                }
                if needs(x) {
                    Self::accumulate(grads, *x, b * c * n, |g| {
                        for bi in 0..b {
                            for ci in 0..c {
                                let s = gv[ci] * inv_std[ci];
                                for j in (bi * c + ci) * n..(bi * c + ci + 1) * n {
                                    g[j] += if *train {
                                        s * (gy[j] - sum_dy[ci] / m - xhat[j] * sum_dy_xhat[ci] / m)
                                    } else {
                                        s * gy[j]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                Self::accumulate(grads, *x, gy.len(), |g| {
                    for ((a, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = nodes[x.0].value.data();
                Self::accumulate(grads, *x, gy.len(), |g| {
                    for ((a, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        *a += d * logistic(*v);
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                Self::accumulate(grads, *x, len(x), |g| {
                    for (d, &j) in gy.iter().zip(argmax) {
                        g[j] += d;
                    }
                });
            }
            Op::Unpool(x) => {
                Self::accumulate(grads, *x, len(x), |g| {
                    for (k, a) in g.iter_mut().enumerate() {
                        *a += gy[4 * k..4 * k + 4].iter().sum::<f64>();
                    }
                });
            }
            Op::ConcatChannels(a, bv) => {
                let (b, ca, n) = dims3(&nodes[a.0].value, "").unwrap();
                let cb = nodes[bv.0].value.shape()[1];
                let ct = ca + cb;
                if needs(a) {
                    Self::accumulate(grads, *a, b * ca * n, |g| {
                        for bi in 0..b {
                            for (x, d) in g[bi * ca * n..(bi + 1) * ca * n].iter_mut().zip(&gy[bi * ct * n..]) {
                                *x += d;
                            }
                        }
                    });
                }
                if needs(bv) {
                    Self::accumulate(grads, *bv, b * cb * n, |g| {
                        for bi in 0..b {
                            for (x, d) in g[bi * cb * n..(bi + 1) * cb * n]
                                .iter_mut()
                                .zip(&gy[(bi * ct + ca) * n..])
                            {
                                *x += d;
                            }
                        }
                    });
                }
            }
            Op::Channel { x, c } => {
                let (b, cc, n) = dims3(&nodes[x.0].value, "").unwrap();
                Self::accumulate(grads, *x, b * cc * n, |g| {
                    for bi in 0..b {
                        for (a, d) in g[(bi * cc + c) * n..(bi * cc + c + 1) * n].iter_mut().zip(&gy[bi * n..]) {
                            *a += d;
                        }
                    }
                });
            }
            Op::MatmulFixed { x, m } => {
                let (b, k) = dims2(&nodes[x.0].value, "").unwrap();
                Self::accumulate(grads, *x, b * k, |g| {
                    gemm(b, m.cols, k, 1.0, rm(gy, m.cols), tr(&m.data, m.cols), 1.0, g, k, 1);
                });
            }
            Op::MaxLast { x, argmax } => {
                Self::accumulate(grads, *x, len(x), |g| {
                    for (d, &j) in gy.iter().zip(argmax) {
                        g[j] += d;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let dims: Vec<(usize, usize)> = parts.iter().map(|p| dims2(&nodes[p.0].value, "").unwrap()).collect();
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut offset = 0;
                for (p, (b, k)) in parts.iter().zip(&dims) {
                    if needs(p) {
                        Self::accumulate(grads, *p, b * k, |g| {
                            for bi in 0..*b {
                                for j in 0..*k {
                                    g[bi * k + j] += gy[bi * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += k;
                }
            }
            Op::SubConst(x) => {
                Self::accumulate(grads, *x, gy.len(), |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        Self::accumulate(grads, *v, gy.len(), |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += d));
                    }
                }
            }
            Op::Scale(x, alpha) => {
                Self::accumulate(grads, *x, gy.len(), |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += alpha * d));
            }
            Op::SumSquares(x) => {
                let xv = nodes[x.0].value.data();
                Self::accumulate(grads, *x, xv.len(), |g| {
                    g.iter_mut().zip(xv).for_each(|(a, v)| *a += 2.0 * v * gy[0])
                });
            }
            Op::CauchySum { x, sigma } => {
                let xv = nodes[x.0].value.data();
                let d = 2.0 * sigma * sigma;
                Self::accumulate(grads, *x, xv.len(), |g| {
                    g.iter_mut().zip(xv).for_each(|(a, v)| *a += gy[0] * 2.0 * v / (d + v * v))
                });
            }
            Op::NegSumSquares(x) => {
                let xv = nodes[x.0].value.data();
                Self::accumulate(grads, *x, xv.len(), |g| {
                    g.iter_mut().zip(xv).for_each(|(a, v)| *a += 2.0 * v.min(0.0) * gy[0])
                });
            }
        }
    }
}

/// `(2/λ_max)·L − I` wrapped for sharing between tapes.
pub fn scaled_laplacian(grid: &crate::sphere_grid::SphericalGrid) -> Arc<CsrMatrix> {
    Arc::new(grid.scaled_laplacian(grid.lambda_max_estimate()))
}
