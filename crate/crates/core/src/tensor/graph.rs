//! Tape-style reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the graph. `backward` walks it once in reverse; the
//! accumulation order is a pure function of the recorded program, which keeps
//! gradients bit-reproducible run to run.

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
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
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// x[..., n] + sign·r[n]
    AddRow {
        x: Var,
        row: Var,
        negate: bool,
    },
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    CenterCrop {
        x: Var,
        top: usize,
        left: usize,
    },
    Sum(Var),
    Mean(Var),
    FocalLoss {
        logits: Var,
        target: Vec<T>,
        gamma: T,
        alpha: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One differentiable program. All nodes share the precision `T`.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Adds a vector of length `n` to every trailing row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Subtracts a vector of length `n` from every trailing row of `x[..., n]`.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, negate: bool) -> Result<Var> {
        let op = if negate { "sub_row" } else { "add_row" };
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(r)
                    .map(move |(&a, &b)| if negate { a - b } else { a + b })
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow { x, row, negate }, rg))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            rg,
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (1, k as isize),
            T::zero(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let value = Tensor::new([n, m], transpose(self.data(x), m, n))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.matrix_dims("concat_cols", p)?;
            if mp != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &np) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * np..(r + 1) * np]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new([m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start + len > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for width {n}", start + len),
            ));
        }
        let src = self.data(x);
        let data = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, T::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, T::cos, Op::Cos(x))
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let data = kernels::softmax_forward(self.data(x), outer, n, inner);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each trailing vector to zero mean / unit variance
    /// (ε = 1e-5), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).numel() / d;
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::one() / T::lit(d as f64);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + T::lit(EPS)).sqrt();
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Scales each row of a matrix to unit L2 norm; norms below `eps` are
    /// clamped to `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, n) = self.matrix_dims("l2_normalize_rows", x)?;
        let mut norms = Vec::new();
        let mut clamped = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(n.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let c = norm < eps;
            let denom = if c { eps } else { norm };
            out.extend(row.iter().map(|&v| v / denom));
            norms.push(denom);
            clamped.push(c);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms, clamped }, rg))
    }

    /// 2-D cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×kh×kw]`
    /// under zero padding, plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::invalid("conv2d", format!("input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kh, kw) = match *self.shape(w) {
            [co, ci, kh, kw] if ci == c_in => (co, kh, kw),
            _ => return Err(Error::shape("conv2d", self.shape(x), self.shape(w))),
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} larger than padded input {}×{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let (k, p) = (geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); c_out * p];
        if let Some(b) = b {
            for (chunk, &bias) in out.chunks_mut(p).zip(self.data(b)) {
                chunk.fill(bias);
            }
        }
        T::gemm(
            c_out,
            k,
            p,
            self.data(w),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([c_out, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        // Patch matrix is only needed to form dW.
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Bilinear 2× upsample of `C×H×W` with half-pixel centers
    /// (align-corners off).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            ref s => return Err(Error::invalid("upsample2x", format!("expected C×H×W, got {s:?}"))),
        };
        let data = kernels::upsample2x_forward(self.data(x), c, h, w);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([c, 2 * h, 2 * w], data)?, Op::Upsample2x(x), rg))
    }

    /// Central `out_h×out_w` window of each channel of `C×H×W`.
    pub fn center_crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] if h >= out_h && w >= out_w => (c, h, w),
            ref s => {
                return Err(Error::invalid(
                    "center_crop",
                    format!("cannot crop {s:?} to {out_h}×{out_w}"),
                ))
            }
        };
        let (top, left) = ((h - out_h) / 2, (w - out_w) / 2);
        let src = self.data(x);
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let base = ch * h * w + (top + y) * w + left;
                data.extend_from_slice(&src[base..base + out_w]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new([c, out_h, out_w], data)?,
            Op::CenterCrop { x, top, left },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let total = self.value(x).sum() / n;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Mean(x), rg)
    }

    /// Mean sigmoid focal loss of `logits` against a binary `target` of the
    /// same shape; `ln p_t` is clamped below at `ln 1e-12`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, gamma: T, alpha: T) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("focal_loss", self.shape(logits), target.shape()));
        }
        let n = T::lit(target.numel() as f64);
        let total = self
            .data(logits)
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| focal_term(z, y, gamma, alpha).0)
            .sum::<T>()
            / n;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits,
                target: target.data().to_vec(),
                gamma,
                alpha,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns `∂loss/∂v` for every node
    /// that depends on a trainable leaf; the graph itself is not modified, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                if self.requires_grad(a) {
                    let d = gd.iter().zip(db).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, self.like(a, d));
                }
                if self.requires_grad(b) {
                    let d = gd.iter().zip(da).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, self.like(b, d));
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::AddRow { x, row, negate } => {
                self.accumulate(grads, x, g.clone());
                let n = self.value(row).numel();
                self.accumulate_with(grads, row, |dr| {
                    for chunk in gd.chunks(n) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d = if negate { *d - v } else { *d + v };
                        }
                    }
                });
            }
            &Op::MatMul { a, b, b_transposed } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = node.value.shape()[1];
                let (ki, ni) = (k as isize, n as isize);
                // b is k×n, or n×k when transposed; strides view it as k×n.
                let b_kn = if b_transposed { (1, ki) } else { (ni, 1) };
                if self.requires_grad(a) {
                    // dA = dC · Bᵀ  (m×n · n×k)
                    let b_nk = (b_kn.1, b_kn.0);
                    self.accumulate_with(grads, a, |da| {
                        T::gemm(m, n, k, gd, (ni, 1), self.data(b), b_nk, T::one(), da)
                    });
                }
                if self.requires_grad(b) {
                    if b_transposed {
                        // dB (n×k) = dCᵀ · A
                        self.accumulate_with(grads, b, |db| {
                            T::gemm(n, m, k, gd, (1, ni), self.data(a), (ki, 1), T::one(), db)
                        });
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        self.accumulate_with(grads, b, |db| {
                            T::gemm(k, m, n, self.data(a), (1, ki), gd, (ni, 1), T::one(), db)
                        });
                    }
                }
            }
            &Op::Transpose(x) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, x, self.like(x, transpose(gd, n, m)));
            }
            &Op::Reshape(x) => self.accumulate(grads, x, self.like(x, gd.to_vec())),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, self.like(p, gd[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut col = 0;
                for &p in parts {
                    let np = self.shape(p)[1];
                    let d = (0..m)
                        .flat_map(|r| gd[r * total + col..r * total + col + np].iter().copied())
                        .collect();
                    self.accumulate(grads, p, self.like(p, d));
                    col += np;
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.shape(x)[1];
                let len = node.value.shape()[1];
                self.accumulate_with(grads, x, |dx| {
                    for (r, chunk) in gd.chunks(len).enumerate() {
                        for (d, &v) in dx[r * n + start..r * n + start + len].iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                });
            }
            &Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Sin(x) => {
                let d = gd.iter().zip(self.data(x)).map(|(&gv, &xv)| gv * xv.cos()).collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Cos(x) => {
                let d = gd.iter().zip(self.data(x)).map(|(&gv, &xv)| -gv * xv.sin()).collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::axis_split(node.value.shape(), axis);
                let d = kernels::softmax_backward(node.value.data(), gd, outer, n, inner);
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.shape(gain)[0];
                let gv = self.data(gain);
                let xs = self.data(x);
                let inv_d = T::one() / T::lit(d as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..mean.len() {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rs;
                        let dxhat = gr[i] * gv[i];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgain[i] = dgain[i] + gr[i] * xhat;
                        dbias[i] = dbias[i] + gr[i];
                    }
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rs;
                        let dxhat = gr[i] * gv[i];
                        dx[r * d + i] = rs * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                    }
                }
                self.accumulate(grads, x, self.like(x, dx));
                self.accumulate(grads, gain, self.like(gain, dgain));
                self.accumulate(grads, bias, self.like(bias, dbias));
            }
            Op::L2NormalizeRows { x, norms, clamped } => {
                let x = *x;
                let n = self.shape(x)[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, (&norm, &c)) in norms.iter().zip(clamped).enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot = if c {
                        T::zero()
                    } else {
                        yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    };
                    for i in 0..n {
                        dx[r * n + i] = (gr[i] - yr[i] * dot) / norm;
                    }
                }
                self.accumulate(grads, x, self.like(x, dx));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w) = (*x, *w);
                let c_out = self.shape(w)[0];
                let (k, p) = (geom.patch_len(), geom.positions());
                if let Some(b) = *b {
                    self.accumulate_with(grads, b, |db| {
                        for (d, chunk) in db.iter_mut().zip(gd.chunks(p)) {
                            *d = *d + chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.requires_grad(w) {
                    // dW (c_out×k) = dY (c_out×p) · colsᵀ
                    self.accumulate_with(grads, w, |dw| {
                        T::gemm(c_out, p, k, gd, (p as isize, 1), cols, (1, p as isize), T::one(), dw)
                    });
                }
                if self.requires_grad(x) {
                    // dcols (k×p) = Wᵀ · dY
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(
                        k,
                        c_out,
                        p,
                        self.data(w),
                        (1, k as isize),
                        gd,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcols,
                    );
                    self.accumulate_with(grads, x, |dx| kernels::col2im(&dcols, geom, dx));
                }
            }
            &Op::Upsample2x(x) => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                self.accumulate_with(grads, x, |dx| kernels::upsample2x_backward(gd, c, h, w, dx));
            }
            &Op::CenterCrop { x, top, left } => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                self.accumulate_with(grads, x, |dx| {
                    for ch in 0..c {
                        for y in 0..oh {
                            let dst = ch * h * w + (top + y) * w + left;
                            let src = (ch * oh + y) * ow;
                            for i in 0..ow {
                                dx[dst + i] = dx[dst + i] + gd[src + i];
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x).to_vec(), gv));
            }
            &Op::Mean(x) => {
                let gv = g.item() / T::lit(self.value(x).numel() as f64);
                self.accumulate(grads, x, Tensor::full(self.shape(x).to_vec(), gv));
            }
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
            } => {
                let logits = *logits;
                let scale = g.item() / T::lit(target.len() as f64);
                let d = self
                    .data(logits)
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| focal_term(z, y, *gamma, *alpha).1 * scale)
                    .collect();
                self.accumulate(grads, logits, self.like(logits, d));
            }
        }
    }
}

fn transpose<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// Focal loss contribution of one logit and its derivative.
///
/// With `s = ±1` for `y = 1 / 0` and `p_t = σ(s·z)`:
/// `L = -α_t (1-p_t)^γ ln p_t` and
/// `dL/dz = s·α_t·[γ p_t (1-p_t)^γ ln p_t - (1-p_t)^(γ+1)]`.
pub(crate) fn focal_term<T: Scalar>(z: T, y: T, gamma: T, alpha: T) -> (T, T) {
    let positive = y > T::lit(0.5);
    let (s, alpha_t) = if positive {
        (T::one(), alpha)
    } else {
        (-T::one(), T::one() - alpha)
    };
    let a = s * z;
    let floor = T::lit(1e-12f64.ln());
    let raw_log = kernels::log_sigmoid(a);
    let clamped = raw_log < floor;
    let log_pt = raw_log.max(floor);
    let pt = kernels::sigmoid(a);
    let one_minus = kernels::sigmoid(-a);
    let mod_factor = if gamma == T::zero() {
        T::one()
    } else {
        one_minus.powf(gamma)
    };
    let loss = -alpha_t * mod_factor * log_pt;
    let log_term = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * pt * mod_factor * log_pt
    };
    let ce_term = if clamped { T::zero() } else { mod_factor * one_minus };
    (loss, s * alpha_t * (log_term - ce_term))
}
