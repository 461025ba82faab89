//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure of a custom op: upstream gradient in, one gradient
/// per input out.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    BilinearResize { x: Var, from: (usize, usize, usize), to: (usize, usize) },
    AreaResize { x: Var, from: (usize, usize, usize), to: (usize, usize) },
    L2Normalize { x: Var, eps: T },
    Cosine(Var, Var),
    CrossEntropySoft { logits: Var, target: Var, logp: Vec<T>, probs: Vec<T> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    SelectElems { x: Var, idx: Vec<usize> },
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    StraightThrough { enc: Var },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Identifier of a primitive for by-name dispatch through [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpId {
    MatMul,
    Add,
    Mul,
    Tanh,
    Gelu,
    LayerNorm,
    Softmax,
    Conv2d,
    BilinearResize,
    AreaResize,
    L2Normalize,
    CosineSimilarity,
    CrossEntropySoft,
    Mse,
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpId::MatMul,
            "add" => OpId::Add,
            "mul" => OpId::Mul,
            "tanh" => OpId::Tanh,
            "gelu" => OpId::Gelu,
            "layernorm" => OpId::LayerNorm,
            "softmax" => OpId::Softmax,
            "conv2d" => OpId::Conv2d,
            "bilinear_resize" => OpId::BilinearResize,
            "area_resize" => OpId::AreaResize,
            "l2_normalize" => OpId::L2Normalize,
            "cosine_similarity" => OpId::CosineSimilarity,
            "cross_entropy_soft" => OpId::CrossEntropySoft,
            "mse" => OpId::Mse,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for [`Graph::apply`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Attrs {
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
    pub eps: f64,
}

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-8;

/// Tape of recorded primitive applications.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input, no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Make `var` stand in for parameter `id` in later [`Graph::param`]
    /// calls, so externally created leaves can drive a model forward.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Copy of `x`'s value with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Dispatch a primitive by identifier.
    pub fn apply(&mut self, op: OpId, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape("apply", format!("{op:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let eps = if attrs.eps > 0.0 { attrs.eps } else { L2_EPS };
        match op {
            OpId::MatMul => need(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpId::Add => need(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpId::Mul => need(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpId::Tanh => need(1).and_then(|_| self.tanh(inputs[0])),
            OpId::Gelu => need(1).and_then(|_| self.gelu(inputs[0])),
            OpId::LayerNorm => need(3).and_then(|_| self.layernorm(inputs[0], inputs[1], inputs[2])),
            OpId::Softmax => need(1).and_then(|_| self.softmax(inputs[0])),
            OpId::Conv2d => need(3).and_then(|_| {
                self.conv2d(inputs[0], inputs[1], inputs[2], attrs.stride.max(1), attrs.pad)
            }),
            OpId::BilinearResize => need(1).and_then(|_| self.bilinear_resize(inputs[0], attrs.out_hw)),
            OpId::AreaResize => need(1).and_then(|_| self.area_resize(inputs[0], attrs.out_hw)),
            OpId::L2Normalize => need(1).and_then(|_| self.l2_normalize(inputs[0], eps)),
            OpId::CosineSimilarity => need(2).and_then(|_| self.cosine_similarity(inputs[0], inputs[1])),
            OpId::CrossEntropySoft => need(2).and_then(|_| self.cross_entropy_soft(inputs[0], inputs[1])),
            OpId::Mse => need(2).and_then(|_| self.mse(inputs[0], inputs[1])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    /// `x: [R, c]` plus `y` tiled down the rows; `y` is `[c]` or `[r, c]`
    /// with `R` a multiple of `r`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let cols = xv.cols();
        if yv.cols() != cols || yv.is_empty() || xv.len() % yv.len() != 0 {
            return Err(Error::shape("add_broadcast", format!("{:?} + {:?}", xv.shape(), yv.shape())));
        }
        let period = yv.len();
        let mut value = xv.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + yv.data()[i % period];
        }
        self.record("add_broadcast", value, Op::AddBroadcast(x, y), &[x, y])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.record("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.record("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        self.record("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.record("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::log_sigmoid);
        self.record("log_sigmoid", value, Op::LogSigmoid(x), &[x])
    }

    /// Normalise each row over the last axis, then apply `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layernorm", format!("{:?} with affine {cols}", xv.shape())));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        kernels::layernorm_rows(
            xv.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            cols,
            T::from_f64_lossy(LAYERNORM_EPS),
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("layernorm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        kernels::softmax_rows(xv.data(), xv.cols(), &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("softmax", value, Op::Softmax(x), &[x])
    }

    /// `x: [H, W, Cin]`, `w: [kh, kw, Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] || self.value(b).len() != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {:?}", self.shape(b)),
            ));
        }
        let (ho, wo) = match (
            kernels::conv_out_extent(xs[0], ws[0], stride, pad),
            kernels::conv_out_extent(xs[1], ws[1], stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than padded {xs:?}"))),
        };
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
            ho,
            wo,
        };
        let mut out = vec![T::zero(); ho * wo * geom.cout];
        kernels::conv2d_hwc(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom, &mut out);
        let value = Tensor::new(vec![ho, wo, geom.cout], out)?;
        self.record("conv2d", value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    fn hwc(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
            ref s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
        }
    }

    /// Half-pixel-center bilinear resampling of a `[H, W, C]` map.
    pub fn bilinear_resize(&mut self, x: Var, to: (usize, usize)) -> Result<Var> {
        let from = self.hwc("bilinear_resize", x)?;
        if to.0 == 0 || to.1 == 0 {
            return Err(Error::shape("bilinear_resize", "zero output extent"));
        }
        let mut out = vec![T::zero(); to.0 * to.1 * from.2];
        kernels::bilinear_resize_hwc(self.value(x).data(), from, to, &mut out);
        let value = Tensor::new(vec![to.0, to.1, from.2], out)?;
        self.record("bilinear_resize", value, Op::BilinearResize { x, from, to }, &[x])
    }

    /// Adaptive average pooling of a `[H, W, C]` map.
    pub fn area_resize(&mut self, x: Var, to: (usize, usize)) -> Result<Var> {
        let from = self.hwc("area_resize", x)?;
        if to.0 == 0 || to.1 == 0 || to.0 > from.0 || to.1 > from.1 {
            return Err(Error::shape("area_resize", format!("{from:?} -> {to:?}")));
        }
        let mut out = vec![T::zero(); to.0 * to.1 * from.2];
        kernels::area_resize_hwc(self.value(x).data(), from, to, &mut out);
        let value = Tensor::new(vec![to.0, to.1, from.2], out)?;
        self.record("area_resize", value, Op::AreaResize { x, from, to }, &[x])
    }

    /// Row-wise `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let eps = T::from_f64_lossy(eps);
        let mut out = vec![T::zero(); xv.len()];
        kernels::l2_normalize_rows(xv.data(), xv.cols(), eps, &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("l2_normalize", value, Op::L2Normalize { x, eps }, &[x])
    }

    /// Row-wise cosine similarity; output has one entry per row.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let av = self.value(a);
        let rows = av.rows();
        let mut out = vec![T::zero(); rows];
        kernels::cosine_rows(av.data(), self.value(b).data(), av.cols(), &mut out);
        let value = Tensor::new(vec![rows], out)?;
        self.record("cosine_similarity", value, Op::Cosine(a, b), &[a, b])
    }

    /// Mean over rows of `-Σ_c target_c · log softmax(logits)_c`.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape("cross_entropy_soft", logits, target)?;
        let lv = self.value(logits);
        let tv = self.value(target);
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut logp = vec![T::zero(); lv.len()];
        for r in 0..rows {
            kernels::log_softmax_row(lv.row(r), &mut logp[r * cols..(r + 1) * cols]);
        }
        let probs: Vec<T> = logp.iter().map(|v| v.exp()).collect();
        let total: T = tv.data().iter().zip(&logp).map(|(&q, &l)| -(q * l)).sum();
        let value = Tensor::scalar(total / T::from_f64_lossy(rows as f64));
        self.record(
            "cross_entropy_soft",
            value,
            Op::CrossEntropySoft { logits, target, logp, probs },
            &[logits, target],
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let total: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::from_f64_lossy(av.len() as f64));
        self.record("mse", value, Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Tensor::scalar(xv.sum() / T::from_f64_lossy(xv.len() as f64));
        self.record("mean", value, Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.record("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if xv.rank() != 2 || start + len > xv.rows() {
            return Err(Error::shape("slice_rows", format!("{:?}[{start}..+{len}]", xv.shape())));
        }
        let value = Tensor::new(vec![len, cols], xv.data()[start * cols..(start + len) * cols].to_vec())?;
        self.record("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if xv.rank() != 2 || start + len > cols {
            return Err(Error::shape("slice_cols", format!("{:?}[:, {start}..+{len}]", xv.shape())));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.record("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{:?} with {cols} cols", pv.shape())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.record("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{:?} with {rows} rows", pv.shape())));
            }
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.record("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows of `table: [n, c]` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, size: rows });
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        self.record("gather_rows", value, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    /// Flat elements of `x` selected by `idx`, as a vector.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= xv.len() {
                return Err(Error::IndexOutOfRange { index: i, size: xv.len() });
            }
            data.push(xv.data()[i]);
        }
        let value = Tensor::new(vec![idx.len()], data)?;
        self.record("select", value, Op::SelectElems { x, idx: idx.to_vec() }, &[x])
    }

    /// Replace rows of `x` flagged in `mask` by the vector `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fill));
        if xv.rank() != 2 || mask.len() != xv.rows() || fv.len() != xv.cols() {
            return Err(Error::shape(
                "mask_rows",
                format!("{:?} mask {} fill {:?}", xv.shape(), mask.len(), fv.shape()),
            ));
        }
        let mut value = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(r).copy_from_slice(fv.data());
            }
        }
        self.record("mask_rows", value, Op::MaskRows { x, fill, mask: mask.to_vec() }, &[x, fill])
    }

    /// Forward value of `quantized`, gradient routed to `enc` unchanged.
    pub fn straight_through(&mut self, enc: Var, quantized: Var) -> Result<Var> {
        self.same_shape("straight_through", enc, quantized)?;
        let value = self.value(quantized).clone();
        self.record("straight_through", value, Op::StraightThrough { enc }, &[enc])
    }

    /// Record an op computed outside the graph together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.record("custom", value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Every differentiable leaf receives a gradient (zero when it did not
    /// participate). The tape can only be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let leaf_grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => grads[i].take(),
            })
            .collect();
        Ok(Gradients { grads: leaf_grads, params: self.params.iter().map(|(&k, &v)| (k, v)).collect() })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBroadcast(x, y) => {
                acc(*x, g.clone());
                if wants(*y) {
                    let yv = val(*y);
                    let period = yv.len();
                    let mut dy = vec![T::zero(); period];
                    for (j, &gv) in g.data().iter().enumerate() {
                        dy[j % period] = dy[j % period] + gv;
                    }
                    acc(*y, Tensor::new(yv.shape().to_vec(), dy).expect("shape"));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))),
            Op::Gelu(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv * kernels::gelu_grad(xv))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))),
            Op::LogSigmoid(x) => {
                acc(*x, g.zip_map(val(*x), |gv, xv| gv * (T::one() - kernels::sigmoid(xv))))
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma).data();
                let cols = gam.len();
                let rows = rstd.len();
                let nf = T::from_f64_lossy(cols as f64);
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            m1 = m1 + d;
                            m2 = m2 + d * xh[j];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            dx[r * cols + j] = rstd[r] * (d - m1 - xh[j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            let gv = g.data()[r * cols + j];
                            dg[j] = dg[j] + gv * xhat[r * cols + j];
                            dbeta[j] = dbeta[j] + gv;
                        }
                    }
                    acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dg).expect("shape"));
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta).expect("shape"));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(cols)
                    .zip(g.data().chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = wants(*x).then(|| vec![T::zero(); val(*x).len()]);
                let mut dw = wants(*w).then(|| vec![T::zero(); val(*w).len()]);
                let mut db = wants(*b).then(|| vec![T::zero(); val(*b).len()]);
                kernels::conv2d_hwc_backward(
                    val(*x).data(),
                    val(*w).data(),
                    geom,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        acc(v, Tensor::new(val(v).shape().to_vec(), d).expect("shape"));
                    }
                }
            }
            Op::BilinearResize { x, from, to } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                if (from.0, from.1) == *to {
                    dx.copy_from_slice(g.data());
                } else {
                    kernels::bilinear_resize_hwc_backward(g.data(), *from, *to, &mut dx);
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("shape"));
            }
            Op::AreaResize { x, from, to } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                if (from.0, from.1) == *to {
                    dx.copy_from_slice(g.data());
                } else {
                    kernels::area_resize_hwc_backward(g.data(), *from, *to, &mut dx);
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("shape"));
            }
            Op::L2Normalize { x, eps } => {
                let xv = val(*x);
                let mut dx = vec![T::zero(); xv.len()];
                kernels::l2_normalize_rows_backward(xv.data(), g.data(), xv.cols(), *eps, &mut dx);
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = av.cols();
                let eps = T::from_f64_lossy(kernels::COS_EPS);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for r in 0..av.rows() {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let (na, nb) = (kernels::norm(ar), kernels::norm(br));
                    let cos = node.value.data()[r];
                    let gr = g.data()[r];
                    let denom = na * nb;
                    for j in 0..cols {
                        if denom > eps {
                            da[r * cols + j] = gr * (br[j] / denom - cos * ar[j] / (na * na));
                            db[r * cols + j] = gr * (ar[j] / denom - cos * br[j] / (nb * nb));
                        } else {
                            da[r * cols + j] = gr * br[j] / eps;
                            db[r * cols + j] = gr * ar[j] / eps;
                        }
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
            }
            Op::CrossEntropySoft { logits, target, logp, probs } => {
                let tv = val(*target);
                let cols = tv.cols();
                let rows = tv.rows();
                let scale = g.item() / T::from_f64_lossy(rows as f64);
                if wants(*logits) {
                    let mut dl = vec![T::zero(); tv.len()];
                    for r in 0..rows {
                        let tr = tv.row(r);
                        let mass: T = tr.iter().copied().sum();
                        for j in 0..cols {
                            dl[r * cols + j] = scale * (probs[r * cols + j] * mass - tr[j]);
                        }
                    }
                    acc(*logits, Tensor::new(tv.shape().to_vec(), dl).expect("shape"));
                }
                if wants(*target) {
                    acc(*target, Tensor::new(tv.shape().to_vec(), logp.iter().map(|&l| -l * scale).collect()).expect("shape"));
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = T::from_f64_lossy(2.0 / av.len() as f64) * g.item();
                let diff = av.zip_map(bv, |x, y| (x - y) * k);
                if wants(*b) {
                    acc(*b, diff.map(|v| -v));
                }
                acc(*a, diff);
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape(), g.item() / T::from_f64_lossy(xv.len() as f64)))
            }
            Op::Transpose(x) => acc(*x, g.transpose().expect("rank 2")),
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape()).expect("shape")),
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let w = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        acc(p, Tensor::new(val(p).shape().to_vec(), g.data()[off..off + len].to_vec()).expect("shape"));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let tv = val(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let src = g.row(k);
                    for (d, &s) in dt.row_mut(i).iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                acc(*table, dt);
            }
            Op::SelectElems { x, idx } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    dx.data_mut()[i] = dx.data()[i] + g.data()[k];
                }
                acc(*x, dx);
            }
            Op::MaskRows { x, fill, mask } => {
                if wants(*x) {
                    let mut dx = g.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            dx.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*fill) {
                    let mut df = Tensor::zeros(val(*fill).shape());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (d, &s) in df.data_mut().iter_mut().zip(g.row(r)) {
                                *d = *d + s;
                            }
                        }
                    }
                    acc(*fill, df);
                }
            }
            Op::StraightThrough { enc } => acc(*enc, g.clone()),
            Op::Custom { inputs, backward } => {
                for (&v, d) in inputs.iter().zip(backward(g)) {
                    acc(v, d);
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching `v`. `None` if `v` is not differentiable or no
    /// gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }

    /// Add every parameter gradient into `buf`.
    pub fn accumulate_into(&self, buf: &mut GradBuffer<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                buf.accumulate(id, g);
            }
        }
    }
}
