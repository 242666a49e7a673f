use super::nn::{self, Conv3dDims, Pool3dDims};
use super::{check_same_shape, NdTensor, Scalar};
use crate::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    /// x * s with s a one-element tensor (learnable gate).
    ScaleByVar {
        x: Var,
        s: Var,
    },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a[m,k] @ b[n,k]^T -> [m,n]
    MatMulNT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d {
        x: Var,
        rows: usize,
        cols: usize,
    },
    SoftmaxRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
    /// Column-wise sum of a [rows, cols] matrix -> [cols].
    SumRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    RowBiasAdd {
        x: Var,
        bias: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        dims: Conv3dDims,
    },
    ChannelBiasAdd {
        x: Var,
        bias: Var,
        channels: usize,
        spatial: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: T,
        mean: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        spatial: usize,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        spatial: usize,
    },
    Upsample3d {
        x: Var,
        factor: usize,
        dims: Pool3dDims,
    },
    Downsample3d {
        x: Var,
        stride: usize,
        dims: Pool3dDims,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
        spatial: usize,
    },
    SliceChannels {
        x: Var,
        from: usize,
        to: usize,
        total: usize,
        spatial: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<usize>,
        softmax: Vec<T>,
        rows: usize,
        cols: usize,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub value: NdTensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Define-by-run reverse-mode tape. Single-owner: record a forward pass,
/// call [`Tape::backward`] once, read leaf gradients with [`Tape::grad`].
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdTensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after `backward`. `None` for non-leaves and leaves
    /// that do not require grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub(crate) fn push(&mut self, value: NdTensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Its `requires_grad` flag decides whether `backward`
    /// accumulates a gradient for it.
    pub fn leaf(&mut self, t: NdTensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Record a trainable leaf (forces `requires_grad`).
    pub fn param(&mut self, t: NdTensor<T>) -> Var {
        self.leaf(t.requires_grad())
    }

    /// Record a non-differentiable constant leaf.
    pub fn constant(&mut self, mut t: NdTensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = with_shape(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = with_shape(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = with_shape(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x, c), needs)
    }

    /// Multiply a tensor by a one-element tensor (e.g. a learnable gate).
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by_var", format!("scale must be one element, got {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::ScaleByVar { x, s }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(value, Op::Silu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let needs = self.needs(x);
        self.push(value, Op::Exp(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let needs = self.needs(x);
        self.push(value, Op::Abs(x), needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_2d("matmul lhs", self.value(a).shape())?;
        let (k2, n) = as_2d("matmul rhs", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        nn::matmul_raw(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = with_shape(&[m, n], out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_2d("matmul_nt lhs", self.value(a).shape())?;
        let (n, k2) = as_2d("matmul_nt rhs", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        nn::matmul_nt_raw(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = with_shape(&[m, n], out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNT { a, b, m, k, n }, needs))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_2d("transpose2d", self.value(x).shape())?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = with_shape(&[cols, rows], out);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose2d { x, rows, cols }, needs))
    }

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_2d("softmax_rows", self.value(x).shape())?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                denom += e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= denom;
            }
        }
        let value = with_shape(&[rows, cols], out);
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows { x, rows, cols }, needs))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().cloned().sum();
        let needs = self.needs(x);
        self.push(NdTensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of_f64(self.value(x).numel() as f64);
        let s: T = self.value(x).data().iter().cloned().sum();
        let needs = self.needs(x);
        self.push(NdTensor::scalar(s / n), Op::Mean(x), needs)
    }

    /// Column-wise sum of a [rows, cols] matrix -> [cols].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_2d("sum_rows", self.value(x).shape())?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += src[r * cols + c];
            }
        }
        let value = with_shape(&[cols], out);
        let needs = self.needs(x);
        Ok(self.push(value, Op::SumRows { x, rows, cols }, needs))
    }

    /// Broadcast-add a [cols] bias to every row of a [rows, cols] matrix.
    pub fn row_bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = as_2d("row_bias_add", self.value(x).shape())?;
        if self.value(bias).shape() != [cols] {
            return Err(Error::shape(
                "row_bias_add",
                format!("bias {:?} vs cols {cols}", self.value(bias).shape()),
            ));
        }
        let src = self.value(x).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = src[r * cols + c] + b[c];
            }
        }
        let value = with_shape(&[rows, cols], out);
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::RowBiasAdd { x, bias, rows, cols }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Visits ops in exact reverse
    /// execution order; a second call without a fresh tape is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward called twice on one tape".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.apply_backward(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].value.requires_grad {
                self.nodes[i].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn apply_backward(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulate `contrib` into grads[target] if that node wants grad.
        macro_rules! acc {
            ($target:expr, $len:expr, $fill:expr) => {{
                let t: Var = $target;
                if self.nodes[t.0].needs_grad {
                    let slot = grads[t.0].get_or_insert_with(|| vec![T::zero(); $len]);
                    $fill(slot.as_mut_slice());
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, numel(*a), |s: &mut [T]| axpy(s, g, T::one()));
                acc!(*b, numel(*b), |s: &mut [T]| axpy(s, g, T::one()));
            }
            Op::Sub(a, b) => {
                acc!(*a, numel(*a), |s: &mut [T]| axpy(s, g, T::one()));
                acc!(*b, numel(*b), |s: &mut [T]| axpy(s, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, numel(*a), |s: &mut [T]| {
                    for ((si, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                        *si += gi * bi;
                    }
                });
                acc!(*b, numel(*b), |s: &mut [T]| {
                    for ((si, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                        *si += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, numel(*x), |s: &mut [T]| axpy(s, g, *c));
            }
            Op::AddScalar(x, _) => {
                acc!(*x, numel(*x), |s: &mut [T]| axpy(s, g, T::one()));
            }
            Op::ScaleByVar { x, s } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                acc!(*x, numel(*x), |slot: &mut [T]| axpy(slot, g, sv));
                acc!(*s, 1, |slot: &mut [T]| {
                    let mut d = T::zero();
                    for (&gi, &xi) in g.iter().zip(xv) {
                        d += gi * xi;
                    }
                    slot[0] += d;
                });
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(xi);
                        *si += gi * (sg + xi * sg * (T::one() - sg));
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = self.nodes[i].value.data();
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(yv) {
                        *si += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = self.nodes[i].value.data();
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(yv) {
                        *si += gi * yi;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        let sign = if xi > T::zero() {
                            T::one()
                        } else if xi < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *si += gi * sign;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                // dA = g @ B^T ; dB = A^T @ g
                acc!(*a, m * k, |s: &mut [T]| nn::matmul_nt_raw(g, bv, s, *m, *n, *k));
                acc!(*b, k * n, |s: &mut [T]| nn::matmul_tn_raw(av, g, s, *m, *k, *n));
            }
            Op::MatMulNT { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                // C = A @ B^T: dA = g @ B ; dB = g^T @ A
                acc!(*a, m * k, |s: &mut [T]| nn::matmul_raw(g, bv, s, *m, *n, *k));
                acc!(*b, n * k, |s: &mut [T]| nn::matmul_tn_raw(g, av, s, *m, *n, *k));
            }
            Op::Transpose2d { x, rows, cols } => {
                acc!(*x, rows * cols, |s: &mut [T]| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let y = self.nodes[i].value.data();
                acc!(*x, rows * cols, |s: &mut [T]| {
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for ((si, &yi), &gi) in
                            s[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr)
                        {
                            *si += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for si in s.iter_mut() {
                        *si += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let gv = g[0] / T::of_f64(numel(*x) as f64);
                acc!(*x, numel(*x), |s: &mut [T]| {
                    for si in s.iter_mut() {
                        *si += gv;
                    }
                });
            }
            Op::SumRows { x, rows, cols } => {
                acc!(*x, rows * cols, |s: &mut [T]| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            s[r * cols + c] += g[c];
                        }
                    }
                });
            }
            Op::RowBiasAdd { x, bias, rows, cols } => {
                acc!(*x, rows * cols, |s: &mut [T]| axpy(s, g, T::one()));
                acc!(*bias, *cols, |s: &mut [T]| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            s[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(*x, numel(*x), |s: &mut [T]| axpy(s, g, T::one()));
            }
            Op::Conv3d { input, kernel, dims } => {
                let (iv, kv) = (val(*input), val(*kernel));
                acc!(*input, numel(*input), |s: &mut [T]| {
                    nn::conv3d_backward_input(kv, g, s, dims)
                });
                acc!(*kernel, numel(*kernel), |s: &mut [T]| {
                    nn::conv3d_backward_kernel(iv, g, s, dims)
                });
            }
            Op::ChannelBiasAdd { x, bias, channels, spatial } => {
                acc!(*x, channels * spatial, |s: &mut [T]| axpy(s, g, T::one()));
                acc!(*bias, *channels, |s: &mut [T]| {
                    for c in 0..*channels {
                        let mut acc = T::zero();
                        for &gi in &g[c * spatial..(c + 1) * spatial] {
                            acc += gi;
                        }
                        s[c] += acc;
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, inv_std, channels, spatial, .. } => {
                let xv = val(*x);
                let gam = val(*gamma);
                let wants = (self.needs(*x), self.needs(*gamma), self.needs(*beta));
                let (dx, dgamma, dbeta) = nn::group_norm_backward(
                    xv, gam, g, *groups, mean, inv_std, *channels, *spatial, wants,
                );
                if let Some(dx) = dx {
                    acc!(*x, channels * spatial, |s: &mut [T]| axpy(s, &dx, T::one()));
                }
                if let Some(dgamma) = dgamma {
                    acc!(*gamma, *channels, |s: &mut [T]| axpy(s, &dgamma, T::one()));
                }
                if let Some(dbeta) = dbeta {
                    acc!(*beta, *channels, |s: &mut [T]| axpy(s, &dbeta, T::one()));
                }
            }
            Op::Film { x, gamma, beta, channels, spatial } => {
                let xv = val(*x);
                let gam = val(*gamma);
                acc!(*x, channels * spatial, |s: &mut [T]| {
                    for c in 0..*channels {
                        let gc = gam[c];
                        for (si, &gi) in s[c * spatial..(c + 1) * spatial]
                            .iter_mut()
                            .zip(&g[c * spatial..(c + 1) * spatial])
                        {
                            *si += gi * gc;
                        }
                    }
                });
                acc!(*gamma, *channels, |s: &mut [T]| {
                    for c in 0..*channels {
                        let mut acc = T::zero();
                        for (&gi, &xi) in g[c * spatial..(c + 1) * spatial]
                            .iter()
                            .zip(&xv[c * spatial..(c + 1) * spatial])
                        {
                            acc += gi * xi;
                        }
                        s[c] += acc;
                    }
                });
                acc!(*beta, *channels, |s: &mut [T]| {
                    for c in 0..*channels {
                        let mut acc = T::zero();
                        for &gi in &g[c * spatial..(c + 1) * spatial] {
                            acc += gi;
                        }
                        s[c] += acc;
                    }
                });
            }
            Op::Upsample3d { x, factor, dims } => {
                acc!(*x, numel(*x), |s: &mut [T]| {
                    nn::upsample3d_backward(g, s, *factor, dims)
                });
            }
            Op::Downsample3d { x, stride, dims } => {
                acc!(*x, numel(*x), |s: &mut [T]| {
                    nn::downsample3d_backward(g, s, *stride, dims)
                });
            }
            Op::ConcatChannels { a, b, ca, cb, spatial } => {
                acc!(*a, ca * spatial, |s: &mut [T]| {
                    axpy(s, &g[..ca * spatial], T::one())
                });
                acc!(*b, cb * spatial, |s: &mut [T]| {
                    axpy(s, &g[ca * spatial..], T::one())
                });
            }
            Op::SliceChannels { x, from, total, spatial, .. } => {
                acc!(*x, total * spatial, |s: &mut [T]| {
                    axpy(&mut s[from * spatial..from * spatial + g.len()], g, T::one())
                });
            }
            Op::GatherRows { table, indices, cols } => {
                let rows = numel(*table) / cols;
                acc!(*table, rows * cols, |s: &mut [T]| {
                    for (r, &idx) in indices.iter().enumerate() {
                        axpy(
                            &mut s[idx * cols..(idx + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            T::one(),
                        );
                    }
                });
            }
            Op::CrossEntropyLogits { logits, targets, softmax, rows, cols } => {
                let gv = g[0] / T::of_f64(*rows as f64);
                acc!(*logits, rows * cols, |s: &mut [T]| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let onehot =
                                if c == targets[r] { T::one() } else { T::zero() };
                            s[r * cols + c] += gv * (softmax[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn with_shape<T: Scalar>(shape: &[usize], data: Vec<T>) -> NdTensor<T> {
    NdTensor::new(shape.to_vec(), data).expect("internal shape bookkeeping")
}

fn as_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected 2-D, got {other:?}"))),
    }
}

/// s += g * c
fn axpy<T: Scalar>(s: &mut [T], g: &[T], c: T) {
    debug_assert_eq!(s.len(), g.len());
    for (si, &gi) in s.iter_mut().zip(g) {
        *si += gi * c;
    }
}
