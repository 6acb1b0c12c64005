//! Reverse-mode automatic differentiation over a per-forward operation tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Values are immutable once
//! recorded; [`Tape::backward`] walks the nodes in reverse and returns the
//! gradients of every trainable parameter that the loss depends on.

use super::gemm::{gemm, Layout};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    MulScalar { a: Var, s: Var },
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    MaskFill { a: Var, keep: Vec<bool> },
    GatherRows { table: Var, idx: Vec<usize> },
    RowMask { a: Var, keep: Vec<bool> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
        geom: Conv2dGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.assert_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor. It participates in gradients iff `t.requires_grad()`,
    /// but leaf gradients are not reported; use [`Tape::param`] for that.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a parameter from `store`. Frozen parameters take part in the
    /// forward pass but never receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = store.is_trainable(id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: false }, rg, "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_t", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::transposed(k),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: true }, rg, "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a vector to every row (trailing-dimension affine broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} vs rows of width {c}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        self.push(t, Op::AddRow { a, bias }, rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg, "scale")
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(s);
        self.push(t, Op::MulScalar { a, s }, rg, "mul_scalar")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg, "tanh")
    }

    /// Elementwise GELU (tanh approximation, see [`gelu_scalar`]).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    /// Row-wise layer normalisation over the last dimension.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} vs width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if d == 0 {
            return Err(Error::Empty("layernorm"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layernorm",
        )
    }

    /// Softmax over the last dimension, max-subtracted. Entries equal to `-inf`
    /// are masked and come out exactly 0. A row that is entirely masked is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if c == 0 || self.value(a).is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(
                    "softmax row has every position masked".into(),
                ));
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - m).exp() };
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg, "softmax")
    }

    /// Sets entries whose `keep` flag is false to `-inf` (the softmax mask sentinel).
    pub fn mask_fill(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::shape("mask_fill", "mask length differs from tensor size"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::MaskFill { a, keep }, rg, "mask_fill")
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = matrix_dims("gather_rows", self.value(table))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(table);
        self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Zeroes every row whose flag is false.
    pub fn row_mask(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let (rows, c) = matrix_dims("row_mask", self.value(a))?;
        if keep.len() != rows {
            return Err(Error::shape("row_mask", format!("{} flags for {rows} rows", keep.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * c..(r + 1) * c].fill(0.0);
            }
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(a);
        self.push(t, Op::RowMask { a, keep }, rg, "row_mask")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = matrix_dims("slice_cols", self.value(a))?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(a);
        self.push(t, Op::SliceCols { a, start }, rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = matrix_dims("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = matrix_dims("concat_rows", self.value(first))?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("width {c} vs {cols}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::Empty("mean"));
        }
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Mean over the last dimension, dropping it.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or(Error::Empty("mean_last"))?;
        if c == 0 {
            return Err(Error::Empty("mean_last"));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .map(|r| r.iter().sum::<f64>() / c as f64)
            .collect();
        let t = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::MeanLast(a), rg, "mean_last")
    }

    /// Mean token-level cross-entropy over rows that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, v) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(t) = *tgt else { continue };
            if t >= v {
                return Err(Error::shape("cross_entropy", format!("target {t} >= vocab {v}")));
            }
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - m).exp() / z;
            }
            total += m + z.ln() - row[t];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Non-overlapping 1-D convolution: kernel width equals stride equals the patch
    /// size `P`. Input is a length-`L` signal, kernel is `[C, P]`, output is `[L/P, C]`.
    /// Computed literally as `reshape(L/P, P) · kernelᵀ`.
    pub fn conv1d_nonoverlap(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (_, p) = matrix_dims("conv1d_nonoverlap", self.value(kernel))?;
        if p != stride || p == 0 {
            return Err(Error::shape(
                "conv1d_nonoverlap",
                format!("kernel width {p} must equal stride {stride}"),
            ));
        }
        let len = self.value(x).len();
        if len % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "signal length {len} is not divisible by stride {p}"
            )));
        }
        let patches = self.reshape(x, vec![len / p, p])?;
        self.matmul_t(patches, kernel)
    }

    /// 2-D convolution with "same" padding. `x: [C_in, H, W]`, `kernel: [C_out, C_in, kh, kw]`,
    /// `bias: [C_out]`; output `[C_out, ceil(H/s), ceil(W/s)]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("conv2d", format!("input {s:?} is not [C,H,W]"))),
        };
        let (c_out, kc, kh, kw) = match self.shape(kernel) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::shape("conv2d", format!("kernel {s:?} is not 4-D"))),
        };
        if kc != c_in || self.value(bias).len() != c_out || stride == 0 {
            return Err(Error::shape("conv2d", "kernel/bias channels disagree with input"));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
        let geom = Conv2dGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        };
        let ncol = c_in * kh * kw;
        let xs = self.value(x).data();
        let mut cols = vec![0.0; oh * ow * ncol];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * ncol;
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[base + (c * kh + ky) * kw + kx] =
                                xs[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c_out * oh * ow];
        gemm(
            c_out,
            ncol,
            oh * ow,
            self.value(kernel).data(),
            Layout::row_major(ncol),
            &cols,
            Layout::transposed(ncol),
            &mut out,
            0.0,
        );
        let b = self.value(bias).data();
        for (c, plane) in out.chunks_mut(oh * ow).enumerate() {
            for v in plane {
                *v += b[c];
            }
        }
        let t = Tensor::new(vec![c_out, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
                geom,
            },
            rg,
            "conv2d",
        )
    }

    /// Clears the gradients of a completed backward pass so the tape may be reused.
    pub fn zero_grad(&mut self) {
        self.backward_done = false;
    }

    /// Back-propagates from a scalar loss. Returns gradients of every trainable
    /// parameter the loss depends on. Running it twice without [`Tape::zero_grad`]
    /// is an error, so gradients are never silently accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::GradientsNotZeroed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let mut n_params = 0;
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                n_params = n_params.max(id.0 + 1);
            }
        }
        let mut out = Gradients::new(n_params);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate_one(*id, g),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = matrix_dims("matmul", self.value(*a))?;
                let n = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    // dA = dC · Bᵀ (or dC · B when b was used transposed)
                    let mut da = vec![0.0; m * k];
                    let lb = if *trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    gemm(m, n, k, gd, Layout::row_major(n), bv, lb, &mut da, 0.0);
                    send(*a, Tensor::new(vec![m, k], da)?, grads);
                }
                if self.rg(*b) {
                    if *trans_b {
                        // C = A Bᵀ, B: [n,k]; dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, gd, Layout::transposed(n), av, Layout::row_major(k), &mut db, 0.0);
                        send(*b, Tensor::new(vec![n, k], db)?, grads);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av, Layout::transposed(k), gd, Layout::row_major(n), &mut db, 0.0);
                        send(*b, Tensor::new(vec![k, n], db)?, grads);
                    }
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    send(*a, Tensor::new(av.shape().to_vec(), d)?, grads);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    send(*b, Tensor::new(bv.shape().to_vec(), d)?, grads);
                }
            }
            Op::AddRow { a, bias } => {
                send(*a, g.clone(), grads);
                if self.rg(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (x, y) in db.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    send(*bias, Tensor::new(self.shape(*bias).to_vec(), db)?, grads);
                }
            }
            Op::Scale { a, s } => {
                let d = gd.iter().map(|x| x * s).collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
            }
            Op::MulScalar { a, s } => {
                let sv = self.value(*s).item()?;
                if self.rg(*a) {
                    let d = gd.iter().map(|x| x * sv).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    send(*s, Tensor::new(self.shape(*s).to_vec(), vec![ds])?, grads);
                }
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, t)| x * (1.0 - t * t))
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, &v)| x * gelu_grad(v))
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rstd.len() {
                        let dy = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let k = rstd[r] / d as f64;
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            dx[r * d + j] = k * (d as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                    send(*x, Tensor::new(g.shape().to_vec(), dx)?, grads);
                }
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (dy, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += dy[j] * xh[j];
                            db[j] += dy[j];
                        }
                    }
                    send(*gain, Tensor::new(self.shape(*gain).to_vec(), dg)?, grads);
                    send(*bias, Tensor::new(self.shape(*bias).to_vec(), db)?, grads);
                }
            }
            Op::Softmax(a) => {
                let c = g.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; gd.len()];
                for ((dxr, yr), dyr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (dyr[j] - dot);
                    }
                }
                send(*a, Tensor::new(g.shape().to_vec(), dx)?, grads);
            }
            Op::MaskFill { a, keep } => {
                let d = gd
                    .iter()
                    .zip(keep)
                    .map(|(&x, &k)| if k { x } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
            }
            Op::GatherRows { table, idx } => {
                let c = g.cols();
                let mut dt = Tensor::zeros(self.shape(*table));
                let dtd = dt.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dtd[i * c + j] += gd[r * c + j];
                    }
                }
                send(*table, dt, grads);
            }
            Op::RowMask { a, keep } => {
                let c = g.cols();
                let mut d = gd.to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        d[r * c..(r + 1) * c].fill(0.0);
                    }
                }
                send(*a, Tensor::new(g.shape().to_vec(), d)?, grads);
            }
            Op::SliceCols { a, start } => {
                let (rows, c) = matrix_dims("slice_cols", self.value(*a))?;
                let w = g.cols();
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                send(*a, Tensor::new(vec![rows, c], d)?, grads);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        send(p, Tensor::new(vec![rows, w], d)?, grads);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        send(p, Tensor::new(self.shape(p).to_vec(), gd[off..off + n].to_vec())?, grads);
                    }
                    off += n;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose2()?, grads),
            Op::Reshape(a) => send(*a, g.clone().reshape(self.shape(*a).to_vec())?, grads),
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), gd[0]), grads),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, Tensor::full(self.shape(*a), gd[0] / n), grads);
            }
            Op::MeanLast(a) => {
                let c = self.value(*a).cols();
                let mut d = Vec::with_capacity(self.value(*a).len());
                for &x in gd {
                    d.extend(std::iter::repeat_n(x / c as f64, c));
                }
                send(*a, Tensor::new(self.shape(*a).to_vec(), d)?, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let k = gd[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(t) = *tgt else { continue };
                    for j in 0..v {
                        d[r * v + j] = k * probs[r * v + j];
                    }
                    d[r * v + t] -= k;
                }
                send(*logits, Tensor::new(self.shape(*logits).to_vec(), d)?, grads);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
                geom,
            } => {
                let ohw = geom.oh * geom.ow;
                let ncol = geom.c_in * geom.kh * geom.kw;
                if self.rg(*kernel) {
                    let mut dk = vec![0.0; geom.c_out * ncol];
                    gemm(
                        geom.c_out,
                        ohw,
                        ncol,
                        gd,
                        Layout::row_major(ohw),
                        cols,
                        Layout::row_major(ncol),
                        &mut dk,
                        0.0,
                    );
                    send(*kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?, grads);
                }
                if self.rg(*bias) {
                    let db = gd.chunks(ohw).map(|p| p.iter().sum()).collect();
                    send(*bias, Tensor::new(self.shape(*bias).to_vec(), db)?, grads);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; ohw * ncol];
                    gemm(
                        ohw,
                        geom.c_out,
                        ncol,
                        gd,
                        Layout::transposed(ohw),
                        self.value(*kernel).data(),
                        Layout::row_major(ncol),
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                    let (h, w, kh, kw) = (geom.h, geom.w, geom.kh, geom.kw);
                    for oy in 0..geom.oh {
                        for ox in 0..geom.ow {
                            let base = (oy * geom.ow + ox) * ncol;
                            for c in 0..geom.c_in {
                                for ky in 0..kh {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad_top as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad_left as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[(c * h + iy as usize) * w + ix as usize] +=
                                            dcols[base + (c * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                    send(*x, Tensor::new(self.shape(*x).to_vec(), dx)?, grads);
                }
            }
        }
        Ok(())
    }
}
