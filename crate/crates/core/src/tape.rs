//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] owns every value computed during a forward pass. Each primitive
//! appends one node holding its output and enough context to run its
//! vector-Jacobian product; [`Tape::backward`] then walks the nodes once, in
//! reverse insertion order. Inputs always precede their consumers, so that
//! order is topological.
//!
//! Storage follows the tape's scalar type `T`; every reduction (dot
//! products, sums, means, variances) accumulates in `f64`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{sigmoid, sq, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Conv1d { x: Var, w: Var, dilation: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    RowScale(Var, Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Box<[Var]>),
    ConcatRows(Box<[Var]>),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Gather(Var, Vec<usize>),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Bce { p: Var, targets: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed primitives.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `a[m x k] * b[k x n]`, f64 accumulation.
fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk].to_f64();
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in acc.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv.to_f64();
            }
        }
    }
    out
}

/// `a[m x k] * b[n x k]^T`.
fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<f64> {
    if k >= 32 {
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
        return out;
    }
    // Short rows: transpose `b` and take the axpy path.
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    gemm_nn(a, &bt, m, k, n)
}

/// Dot product with four independent accumulators.
fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..4 {
            acc[l] += x[l].to_f64() * y[l].to_f64();
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x.to_f64() * y.to_f64()).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[k x m]^T * b[k x n]`.
fn gemm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for kk in 0..k {
        let br = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i].to_f64();
            if aki == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += aki * bv.to_f64();
            }
        }
    }
    out
}

fn to_t<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].to_f64()
    }

    /// Activity (`x > 0`) of every ReLU input recorded so far, in order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).data().iter().map(|v| v.to_f64() > 0.0));
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = gemm_nn(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], to_t(out), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_t")?;
        let (n, k2) = dims2(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let out = gemm_nt(self.data(a), self.data(b), m, k, n);
        self.push("matmul_t", vec![m, n], to_t(out), Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let src = self.data(a);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`C` vector to every row of an `R x C` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} vs rows of width {c}", self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out = self.data(a).chunks(c).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        self.push("add_row", self.shape(a).to_vec(), out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| T::from_f64(x.to_f64() * c)).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    /// Dilated 1-D convolution with symmetric zero padding that preserves the
    /// sequence length. `x` is `T x C_in`, `w` is `C_out x C_in x K` with odd `K`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (t_len, c_in) = dims2(self.value(x), "conv1d_dilated")?;
        let (c_out, wc, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::shape("conv1d_dilated", format!("kernel must be rank 3, got {s:?}"))),
        };
        if wc != c_in {
            return Err(Error::shape("conv1d_dilated", format!("input has {c_in} channels, kernel expects {wc}")));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel size must be odd, got {k}")));
        }
        if dilation < 1 {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        let half = (k / 2) as isize;
        let xs = self.data(x);
        let ws = self.data(w);
        // Tap-major copy of the kernel: taps[kk][c][o].
        let mut taps = vec![0.0f64; k * c_in * c_out];
        for o in 0..c_out {
            for c in 0..c_in {
                for kk in 0..k {
                    taps[(kk * c_in + c) * c_out + o] = ws[(o * c_in + c) * k + kk].to_f64();
                }
            }
        }
        let mut out = vec![0.0f64; t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for kk in 0..k {
                let src = t as isize + (kk as isize - half) * dilation as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xrow = &xs[src as usize * c_in..(src as usize + 1) * c_in];
                for (c, xv) in xrow.iter().enumerate() {
                    let xv = xv.to_f64();
                    let wrow = &taps[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push("conv1d_dilated", vec![t_len, c_out], to_t(out), Op::Conv1d { x, w, dilation }, &[x, w])
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols();
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks(c) {
            let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| libm::exp(v.to_f64() - mx)).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| T::from_f64(v / s)));
        }
        self.push("softmax", self.shape(a).to_vec(), out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", format!("affine params must have {d} entries")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be > 0"));
        }
        let g: Vec<f64> = self.data(gain).iter().map(|v| v.to_f64()).collect();
        let b: Vec<f64> = self.data(bias).iter().map(|v| v.to_f64()).collect();
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| sq(v.to_f64() - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v.to_f64() - mean) * r;
                xhat.push(xh);
                out.push(T::from_f64(xh * g[j] + b[j]));
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&v| T::from_f64(sigmoid(v.to_f64()))).collect();
        self.push("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        self.push("relu", self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&v| v * v).collect();
        self.push("square", self.shape(a).to_vec(), out, Op::Square(a), &[a])
    }

    /// Column means of an `R x C` matrix as a `1 x C` row (global average
    /// pooling over time).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let means = self.value(a).column_means();
        let c = means.len();
        self.push("mean_rows", vec![1, c], to_t(means), Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        self.push("sum", vec![1], vec![T::from_f64(s)], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        self.push("mean", vec![1], vec![T::from_f64(s / n)], Op::Mean(a), &[a])
    }

    /// Multiplies row `t` of an `R x C` matrix by `w[t]`.
    pub fn row_scale(&mut self, h: Var, w: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(h), "row_scale")?;
        if self.value(w).numel() != r {
            return Err(Error::shape("row_scale", format!("{r} rows but {} weights", self.value(w).numel())));
        }
        let ws = self.data(w);
        let out = self.data(h).chunks(c).zip(ws).flat_map(|(row, &wt)| row.iter().map(move |&v| v * wt)).collect();
        self.push("row_scale", vec![r, c], out, Op::RowScale(h, w), &[h, w])
    }

    /// Same values under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("reshape", shape, data, Op::Reshape(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("slice_rows", shape, data, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.data(a);
        let out = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push("slice_cols", vec![r, len], out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![r, total], out, Op::ConcatCols(parts.into()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(Error::shape("concat_rows", format!("widths {c} vs {}", self.value(p).cols())));
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.data(p));
        }
        self.push("concat_rows", vec![rows, c], out, Op::ConcatRows(parts.into()), parts)
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for (i, row) in self.data(x).chunks(c).enumerate() {
            let n = libm::sqrt(row.iter().map(|v| sq(v.to_f64())).sum::<f64>());
            if n == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| T::from_f64(v.to_f64() / n)));
        }
        let shape = self.shape(x).to_vec();
        self.push("l2_normalize_rows", shape, out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Picks flat elements of `a` into a new tensor of the given shape.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let src = self.data(a);
        let out = indices.iter().map(|&i| src[i]).collect();
        self.push("gather", shape.to_vec(), out, Op::Gather(a, indices), &[a])
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(logits), "softmax_cross_entropy")?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("{} targets for {r}x{c} logits", targets.len())));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (row, &tgt) in self.data(logits).chunks(c).zip(targets) {
            let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| libm::exp(v.to_f64() - mx)).sum();
            let lse = mx + libm::log(sum);
            loss += lse - row[tgt].to_f64();
            probs.extend(row.iter().map(|v| libm::exp(v.to_f64() - lse)));
        }
        let op = Op::SoftmaxCe { logits, targets: targets.to_vec(), probs };
        self.push("softmax_cross_entropy", vec![1], vec![T::from_f64(loss / r as f64)], op, &[logits])
    }

    /// Binary cross-entropy of probabilities `p` against `targets`, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(p).numel();
        if targets.len() != n {
            return Err(Error::shape("bce", format!("{n} predictions, {} targets", targets.len())));
        }
        let loss: f64 = self
            .data(p)
            .iter()
            .zip(targets)
            .map(|(pv, &y)| {
                let q = pv.to_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * libm::log(q) + (1.0 - y) * libm::log(1.0 - q))
            })
            .sum();
        self.push("bce", vec![1], vec![T::from_f64(loss / n as f64)], Op::Bce { p, targets: targets.to_vec() }, &[p])
    }

    /// Inverted dropout; `keep` holds one 0/1 flag per element.
    pub fn dropout(&mut self, x: Var, rate: f64, keep: &[bool]) -> Result<Var> {
        if self.value(x).numel() != keep.len() {
            return Err(Error::shape("dropout", "mask length"));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| T::from_f64(v.to_f64() * m)).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    // ---- reverse pass ----------------------------------------------------

    fn accumulate(&mut self, v: Var, g: impl Iterator<Item = f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += T::from_f64(x);
        }
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let gf: Vec<f64> = g.iter().map(|v| v.to_f64()).collect();
            if gf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backward_node(i, &gf)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Take the op out so `self` can be borrowed mutably while accumulating.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backward_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(a), "matmul")?;
                let n = self.value(b).cols();
                let gt: Vec<T> = to_t(g.to_vec());
                if self.requires_grad(a) {
                    let da = gemm_nt(&gt, self.data(b), m, n, k);
                    self.accumulate(a, da.into_iter());
                }
                if self.requires_grad(b) {
                    let db = gemm_tn(self.data(a), &gt, m, k, n);
                    self.accumulate(b, db.into_iter());
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.value(a), "matmul_t")?;
                let n = self.value(b).rows();
                let gt: Vec<T> = to_t(g.to_vec());
                if self.requires_grad(a) {
                    let da = gemm_nn(&gt, self.data(b), m, n, k);
                    self.accumulate(a, da.into_iter());
                }
                if self.requires_grad(b) {
                    let db = gemm_tn(&gt, self.data(a), m, n, k);
                    self.accumulate(b, db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.value(a), "transpose")?;
                let mut da = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] = g[y * r + x];
                    }
                }
                self.accumulate(a, da.into_iter());
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av: Vec<f64> = self.value(a).to_f64_vec();
                let bv: Vec<f64> = self.value(b).to_f64_vec();
                self.accumulate(a, g.iter().zip(&bv).map(|(x, y)| x * y));
                self.accumulate(b, g.iter().zip(&av).map(|(x, y)| x * y));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(a, g.iter().copied());
                let c = self.value(a).cols();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(bias, db.into_iter());
            }
            Op::Scale(a, c) => self.accumulate(a, g.iter().map(|v| v * c)),
            Op::Conv1d { x, w, dilation } => {
                let (t_len, c_in) = dims2(self.value(x), "conv1d_dilated")?;
                let (c_out, k) = (self.shape(w)[0], self.shape(w)[2]);
                let half = (k / 2) as isize;
                let xs = self.value(x).to_f64_vec();
                let ws = self.value(w).to_f64_vec();
                let mut taps = vec![0.0f64; k * c_in * c_out];
                for o in 0..c_out {
                    for c in 0..c_in {
                        for kk in 0..k {
                            taps[(kk * c_in + c) * c_out + o] = ws[(o * c_in + c) * k + kk];
                        }
                    }
                }
                let mut dx = vec![0.0; t_len * c_in];
                let mut dtaps = vec![0.0f64; k * c_in * c_out];
                for t in 0..t_len {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for kk in 0..k {
                        let src = t as isize + (kk as isize - half) * dilation as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..c_in {
                            let at = (kk * c_in + c) * c_out;
                            dx[src * c_in + c] += dot(&taps[at..at + c_out], grow);
                            let xv = xs[src * c_in + c];
                            for (d, gv) in dtaps[at..at + c_out].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
                let mut dw = vec![0.0; c_out * c_in * k];
                for o in 0..c_out {
                    for c in 0..c_in {
                        for kk in 0..k {
                            dw[(o * c_in + c) * k + kk] = dtaps[(kk * c_in + c) * c_out + o];
                        }
                    }
                }
                self.accumulate(x, dx.into_iter());
                self.accumulate(w, dw.into_iter());
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.to_f64_vec();
                let c = self.nodes[i].value.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    da.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(a, da.into_iter());
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref rstd } => {
                let d = self.value(x).cols();
                let gv = self.value(gain).to_f64_vec();
                let mut dx = Vec::with_capacity(xhat.len());
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for ((xr, gr), &r) in xhat.chunks(d).zip(g.chunks(d)).zip(rstd) {
                    let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.push(r * (dxhat[j] - m1 - xr[j] * m2));
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                }
                self.accumulate(x, dx.into_iter());
                self.accumulate(gain, dg.into_iter());
                self.accumulate(bias, db.into_iter());
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.to_f64_vec();
                self.accumulate(a, g.iter().zip(&y).map(|(gv, yv)| gv * yv * (1.0 - yv)));
            }
            Op::Relu(a) => {
                let x = self.value(a).to_f64_vec();
                self.accumulate(a, g.iter().zip(&x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }));
            }
            Op::Square(a) => {
                let x = self.value(a).to_f64_vec();
                self.accumulate(a, g.iter().zip(&x).map(|(gv, xv)| 2.0 * xv * gv));
            }
            Op::MeanRows(a) => {
                let r = self.value(a).rows() as f64;
                let n = self.value(a).numel();
                let c = g.len();
                self.accumulate(a, (0..n).map(|k| g[k % c] / r));
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, core::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, core::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::RowScale(h, w) => {
                let c = self.value(h).cols();
                let hv = self.value(h).to_f64_vec();
                let wv = self.value(w).to_f64_vec();
                self.accumulate(h, g.iter().enumerate().map(|(k, gv)| gv * wv[k / c]));
                let dw: Vec<f64> = g.chunks(c).zip(hv.chunks(c)).map(|(gr, hr)| gr.iter().zip(hr).map(|(a, b)| a * b).sum()).collect();
                self.accumulate(w, dw.into_iter());
            }
            Op::Reshape(a) => {
                self.accumulate(a, g.iter().copied());
            }
            Op::SliceRows(a, start) => {
                let c = self.value(a).cols();
                let n = self.value(a).numel();
                let lo = start * c;
                let hi = lo + g.len();
                self.accumulate(a, (0..n).map(|k| if k >= lo && k < hi { g[k - lo] } else { 0.0 }));
            }
            Op::SliceCols(a, start) => {
                let c = self.value(a).cols();
                let len = self.nodes[i].value.cols();
                let n = self.value(a).numel();
                self.accumulate(
                    a,
                    (0..n).map(|k| {
                        let (r, col) = (k / c, k % c);
                        if col >= start && col < start + len {
                            g[r * len + col - start]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::ConcatCols(ref parts) => {
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts.iter() {
                    let w = self.value(p).cols();
                    let r = self.value(p).rows();
                    let gp: Vec<f64> = (0..r).flat_map(|row| g[row * total + off..row * total + off + w].iter().copied()).collect();
                    self.accumulate(p, gp.into_iter());
                    off += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let n = self.value(p).numel();
                    self.accumulate(p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::L2NormalizeRows { x, ref norms } => {
                let y = self.nodes[i].value.to_f64_vec();
                let c = self.nodes[i].value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), n) in y.chunks(c).zip(g.chunks(c)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                self.accumulate(x, dx.into_iter());
            }
            Op::Gather(a, ref idx) => {
                let mut da = vec![0.0; self.value(a).numel()];
                for (&k, gv) in idx.iter().zip(g) {
                    da[k] += gv;
                }
                self.accumulate(a, da.into_iter());
            }
            Op::SoftmaxCe { logits, ref targets, ref probs } => {
                let c = self.value(logits).cols();
                let r = targets.len() as f64;
                let mut dl = probs.clone();
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * c + t] -= 1.0;
                }
                self.accumulate(logits, dl.into_iter().map(|v| v * g[0] / r));
            }
            Op::Bce { p, ref targets } => {
                let n = targets.len() as f64;
                let pv = self.value(p).to_f64_vec();
                let dp: Vec<f64> = pv
                    .iter()
                    .zip(targets)
                    .map(|(&q, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            0.0
                        } else {
                            g[0] * (-(y / q) + (1.0 - y) / (1.0 - q)) / n
                        }
                    })
                    .collect();
                self.accumulate(p, dp.into_iter());
            }
            Op::Dropout { x, ref mask } => {
                self.accumulate(x, g.iter().zip(mask).map(|(a, b)| a * b));
            }
        }
        Ok(())
    }
}

/// Probability clamp used by [`Tape::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_delta_kernel_is_identity_for_any_dilation() {
        for d in 1..5 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
            let w = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 1.0, 0.0]).unwrap());
            let y = tape.conv1d_dilated(x, w, d).unwrap();
            assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        }
    }

    /// Independent summation oracle for the dilated convolution.
    fn conv_oracle(x: &[f64], k: &[f64], d: usize) -> Vec<f64> {
        let half = (k.len() / 2) as isize;
        (0..x.len() as isize)
            .map(|t| {
                k.iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        let s = t + (j as isize - half) * d as isize;
                        if s >= 0 && (s as usize) < x.len() {
                            kv * x[s as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn conv_dilated_matches_summation_oracle() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let oracle = conv_oracle(&xs, &[1.0, 0.0, 1.0], 2);
        // x[t-2] + x[t+2] with zero padding.
        assert_eq!(oracle, [3.0, 4.0, 6.0, 2.0, 3.0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[5, 1], &xs).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 1, 3], &[1.0, 0.0, 1.0]).unwrap());
        let y = tape.conv1d_dilated(x, w, 2).unwrap();
        assert_eq!(tape.value(y).data(), oracle.as_slice());
    }

    #[test]
    fn conv_rejects_even_kernel_and_zero_dilation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[5, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(tape.conv1d_dilated(x, w, 1).is_err());
        let w3 = tape.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(tape.conv1d_dilated(x, w3, 0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[0.0, 0.0]]));
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let s = tape.softmax_rows(b).unwrap();
        let e: [f64; 3] = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let z: f64 = e.iter().sum();
        for (got, want) in tape.value(s).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((tape.value(s).data()[0] - 0.09003).abs() < 1e-5);

        let c = tape.constant(t(&[&[1000.0, 1000.0]]));
        let s = tape.softmax_rows(c).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[&[4.0, 4.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let x = tape.constant(t(&[&[1.0, 3.0]]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_relu_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[0.0, 40.0, -40.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-12 && d[2].abs() < 1e-12);
        let h = tape.constant(t(&[&[1.0, 3.0], &[3.0, 5.0]]));
        let p = tape.mean_rows(h).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
        let r = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_square_and_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2, 2], &[0.3, -1.0, 7.0, 2.0]).unwrap());
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(Error::BackwardTwice));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y), Err(Error::NonScalarLoss { numel: 2 }));
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(tape.square(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(tape.l2_normalize_rows(x), Err(Error::ZeroNorm { row: 1 }));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::scalar(0.5));
        let l = tape.bce(p, &[1.0]).unwrap();
        assert!((tape.scalar_value(l) - core::f64::consts::LN_2).abs() < 1e-12);
        let p = tape.constant(Tensor::from_f64(&[2], &[0.9, 0.1]).unwrap());
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((tape.scalar_value(l) - want).abs() < 1e-12);
        assert!((tape.scalar_value(l) - 0.10536).abs() < 1e-5);
        let p = tape.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let l = tape.bce(p, &[1.0]).unwrap();
        assert!(tape.scalar_value(l).is_finite());
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap());
            let b = tape.constant(Tensor::from_f64(&[3, 2], &[1.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            tape.value(s).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
