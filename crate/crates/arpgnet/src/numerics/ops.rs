//! Primitive tensor operations and their gradient rules.
//!
//! Each forward method validates shapes, computes the output value, scans it
//! for non-finite entries, and records an [`Op`] node on the tape. The
//! backward rules live in [`backprop_node`], one match arm per op.

use rand::Rng;

use super::{Node, Scalar, Tensor, TensorError};
use crate::graphs::AdjacencyMatrix;

/// One recorded primitive. Fields are tape indices of the inputs plus
/// whatever context the gradient rule needs (saved masks, strides, labels).
#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, mul: T },
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    LeakyRelu { x: usize, slope: T },
    PRelu { x: usize, a: usize },
    Exp(usize),
    PowScalar { x: usize, e: T },
    MaskedSoftmax { x: usize, mask: Vec<bool> },
    LogSoftmaxRows { x: usize },
    PickRows { x: usize, labels: Vec<usize> },
    MeanAxis { x: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    Concat { a: usize, b: usize, axis: usize },
    SliceRows { x: usize, start: usize },
    StackRows { xs: Vec<usize> },
    Reshape { x: usize },
    Transpose2 { x: usize },
    OuterSum { s: usize, d: usize },
    Dropout { x: usize, mask: Vec<bool>, scale: T },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    AdaptiveAvgPool { x: usize },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::PRelu { .. } => "prelu",
            Op::Exp(..) => "exp",
            Op::PowScalar { .. } => "pow",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LogSoftmaxRows { .. } => "log_softmax",
            Op::PickRows { .. } => "pick_rows",
            Op::MeanAxis { .. } => "mean_pool",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::StackRows { .. } => "stack_rows",
            Op::Reshape { .. } => "reshape",
            Op::Transpose2 { .. } => "transpose2",
            Op::OuterSum { .. } => "outer_sum",
            Op::Dropout { .. } => "dropout",
            Op::Conv2d { .. } => "conv2d",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
        }
    }
}

#[inline]
fn at(r: usize, c: usize, ncols: usize) -> usize {
    r * ncols + c
}

impl<T: Scalar> Tensor<T> {
    fn rank2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape,
                reason: "expected a rank-2 tensor".to_string(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn check_same_tape(&self, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.same_tape(other) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<(), TensorError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    /// Elementwise sum; both operands must share shape and tape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        self.check_same_shape(other, "add")?;
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let a = &inner.nodes[self.index].data;
            let b = &inner.nodes[other.index].data;
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.tape
            .push(Op::Add(self.index, other.index), self.shape(), data, needs)
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        self.check_same_shape(other, "sub")?;
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let a = &inner.nodes[self.index].data;
            let b = &inner.nodes[other.index].data;
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.tape
            .push(Op::Sub(self.index, other.index), self.shape(), data, needs)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        self.check_same_shape(other, "mul")?;
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let a = &inner.nodes[self.index].data;
            let b = &inner.nodes[other.index].data;
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.tape
            .push(Op::Mul(self.index, other.index), self.shape(), data, needs)
    }

    /// Elementwise `mul * x + add` with compile-time constants.
    pub fn affine(&self, mul: T, add: T) -> Result<Tensor<T>, TensorError> {
        let data: Vec<T> = self.value().iter().map(|x| mul * *x + add).collect();
        self.tape.push(
            Op::Affine {
                x: self.index,
                mul,
            },
            self.shape(),
            data,
            self.requires_grad(),
        )
    }

    /// Elementwise scaling by a constant.
    pub fn scale(&self, factor: T) -> Result<Tensor<T>, TensorError> {
        self.affine(factor, T::zero())
    }

    /// Matrix product of an `m x k` and a `k x n` tensor.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = other.rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let a = &inner.nodes[self.index].data;
            let b = &inner.nodes[other.index].data;
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[at(i, p, k)];
                    if av == T::zero() {
                        continue;
                    }
                    for j in 0..n {
                        out[at(i, j, n)] += av * b[at(p, j, n)];
                    }
                }
            }
            out
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Op::MatMul {
                a: self.index,
                b: other.index,
            },
            vec![m, n],
            data,
            needs,
        )
    }

    /// Affine map `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(
        &self,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(w)?;
        let (n, cin) = self.rank2("linear")?;
        let (cout, cin2) = w.rank2("linear")?;
        if cin != cin2 {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: vec![n, cin],
                right: vec![cout, cin2],
            });
        }
        if let Some(bias) = b {
            self.check_same_tape(bias)?;
            if bias.shape() != vec![cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: vec![cout, cin2],
                    right: bias.shape(),
                });
            }
        }
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let x = &inner.nodes[self.index].data;
            let wv = &inner.nodes[w.index].data;
            let mut out = vec![T::zero(); n * cout];
            if let Some(bias) = b {
                let bv = &inner.nodes[bias.index].data;
                for i in 0..n {
                    out[i * cout..(i + 1) * cout].copy_from_slice(bv);
                }
            }
            for i in 0..n {
                for o in 0..cout {
                    let mut acc = out[at(i, o, cout)];
                    for p in 0..cin {
                        acc += x[at(i, p, cin)] * wv[at(o, p, cin)];
                    }
                    out[at(i, o, cout)] = acc;
                }
            }
            out
        };
        let needs = self.requires_grad()
            || w.requires_grad()
            || b.map(|bias| bias.requires_grad()).unwrap_or(false);
        self.tape.push(
            Op::Linear {
                x: self.index,
                w: w.index,
                b: b.map(|bias| bias.index),
            },
            vec![n, cout],
            data,
            needs,
        )
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>, TensorError> {
        let data: Vec<T> = self
            .value()
            .iter()
            .map(|x| if *x >= T::zero() { *x } else { slope * *x })
            .collect();
        self.tape.push(
            Op::LeakyRelu {
                x: self.index,
                slope,
            },
            self.shape(),
            data,
            self.requires_grad(),
        )
    }

    /// Leaky rectifier whose negative slope is a learned one-element tensor.
    pub fn prelu(&self, slope: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(slope)?;
        if slope.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "prelu",
                shape: slope.shape(),
                reason: "learned slope must have exactly one element".to_string(),
            });
        }
        let a = slope.value()[0];
        let data: Vec<T> = self
            .value()
            .iter()
            .map(|x| if *x >= T::zero() { *x } else { a * *x })
            .collect();
        let needs = self.requires_grad() || slope.requires_grad();
        self.tape.push(
            Op::PRelu {
                x: self.index,
                a: slope.index,
            },
            self.shape(),
            data,
            needs,
        )
    }

    /// Elementwise exponential.
    pub fn exp(&self) -> Result<Tensor<T>, TensorError> {
        let data: Vec<T> = self.value().iter().map(|x| x.exp()).collect();
        self.tape.push(
            Op::Exp(self.index),
            self.shape(),
            data,
            self.requires_grad(),
        )
    }

    /// Elementwise power with a constant exponent.
    pub fn pow_scalar(&self, e: T) -> Result<Tensor<T>, TensorError> {
        let data: Vec<T> = self.value().iter().map(|x| x.powf(e)).collect();
        self.tape.push(
            Op::PowScalar { x: self.index, e },
            self.shape(),
            data,
            self.requires_grad(),
        )
    }

    /// Row-wise softmax over unmasked entries of a square logit matrix.
    ///
    /// Entry `(i, j)` of the result is the attention weight of node `j` for
    /// node `i`: rows sum to 1 over entries where the mask is true and are
    /// exactly 0 elsewhere. Stabilized by subtracting the row maximum over
    /// unmasked entries before exponentiation. A row with no unmasked entry
    /// is a hard error, never a silent NaN.
    pub fn masked_softmax(&self, mask: &AdjacencyMatrix) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.rank2("masked_softmax")?;
        if r != c || r != mask.n_nodes() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![r, c],
                right: vec![mask.n_nodes(), mask.n_nodes()],
            });
        }
        let mask_flat: Vec<bool> = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| mask.get(i, j))
            .collect();
        let x = self.value();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mrow = &mask_flat[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for (v, keep) in row.iter().zip(mrow.iter()) {
                if *keep && *v > max {
                    max = *v;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut denom = T::zero();
            for j in 0..c {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    data[at(i, j, c)] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                if mrow[j] {
                    data[at(i, j, c)] = data[at(i, j, c)] / denom;
                }
            }
        }
        self.tape.push(
            Op::MaskedSoftmax {
                x: self.index,
                mask: mask_flat,
            },
            vec![r, c],
            data,
            self.requires_grad(),
        )
    }

    /// Row-wise log-softmax of an `[n, classes]` logit matrix.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>, TensorError> {
        let (n, c) = self.rank2("log_softmax")?;
        let x = self.value();
        let mut data = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let lse: T = row.iter().map(|v| (*v - max).exp()).sum();
            let lse = max + lse.ln();
            for j in 0..c {
                data[at(i, j, c)] = row[j] - lse;
            }
        }
        self.tape.push(
            Op::LogSoftmaxRows { x: self.index },
            vec![n, c],
            data,
            self.requires_grad(),
        )
    }

    /// Gathers `x[i, labels[i]]` into a rank-1 tensor of length `n`.
    pub fn pick_rows(&self, labels: &[usize]) -> Result<Tensor<T>, TensorError> {
        let (n, c) = self.rank2("pick_rows")?;
        if labels.len() != n {
            return Err(TensorError::InvalidShape {
                op: "pick_rows",
                shape: vec![labels.len()],
                reason: format!("expected {n} labels, one per row"),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if *l >= c {
                return Err(TensorError::IndexOutOfRange {
                    what: "class label",
                    index: *l,
                    size: c,
                });
            }
            let _ = i;
        }
        let x = self.value();
        let data: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| x[at(i, *l, c)])
            .collect();
        self.tape.push(
            Op::PickRows {
                x: self.index,
                labels: labels.to_vec(),
            },
            vec![n],
            data,
            self.requires_grad(),
        )
    }

    /// Mean over one axis of a rank-2 tensor: axis 0 averages rows away
    /// (result `[cols]`), axis 1 averages columns away (result `[rows]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>, TensorError> {
        let (n, c) = self.rank2("mean_pool")?;
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                op: "mean_pool",
                axis,
                rank: 2,
            });
        }
        let x = self.value();
        let (data, shape) = if axis == 0 {
            let mut out = vec![T::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    out[j] += x[at(i, j, c)];
                }
            }
            let inv = T::one() / T::from_usize(n);
            for v in out.iter_mut() {
                *v = *v * inv;
            }
            (out, vec![c])
        } else {
            let mut out = vec![T::zero(); n];
            for i in 0..n {
                for j in 0..c {
                    out[i] += x[at(i, j, c)];
                }
            }
            let inv = T::one() / T::from_usize(c);
            for v in out.iter_mut() {
                *v = *v * inv;
            }
            (out, vec![n])
        };
        self.tape.push(
            Op::MeanAxis {
                x: self.index,
                axis,
            },
            shape,
            data,
            self.requires_grad(),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>, TensorError> {
        let total: T = self.value().into_iter().sum();
        self.tape.push(
            Op::SumAll(self.index),
            vec![],
            vec![total],
            self.requires_grad(),
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&self) -> Result<Tensor<T>, TensorError> {
        let n = self.numel();
        let total: T = self.value().into_iter().sum();
        self.tape.push(
            Op::MeanAll(self.index),
            vec![],
            vec![total / T::from_usize(n)],
            self.requires_grad(),
        )
    }

    /// Concatenation of two rank-2 tensors along axis 0 (stack rows) or
    /// axis 1 (widen each row).
    pub fn concat(&self, other: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        let (na, ca) = self.rank2("concat")?;
        let (nb, cb) = other.rank2("concat")?;
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: 2,
            });
        }
        let ok = if axis == 0 { ca == cb } else { na == nb };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: vec![na, ca],
                right: vec![nb, cb],
            });
        }
        let a = self.value();
        let b = other.value();
        let (data, shape) = if axis == 0 {
            let mut out = a;
            out.extend_from_slice(&b);
            (out, vec![na + nb, ca])
        } else {
            let mut out = Vec::with_capacity(na * (ca + cb));
            for i in 0..na {
                out.extend_from_slice(&a[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&b[i * cb..(i + 1) * cb]);
            }
            (out, vec![na, ca + cb])
        };
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Op::Concat {
                a: self.index,
                b: other.index,
                axis,
            },
            shape,
            data,
            needs,
        )
    }

    /// Contiguous row slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>, TensorError> {
        let (n, c) = self.rank2("slice_rows")?;
        if start + len > n || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                what: "row slice end",
                index: start + len,
                size: n,
            });
        }
        let x = self.value();
        let data = x[start * c..(start + len) * c].to_vec();
        self.tape.push(
            Op::SliceRows {
                x: self.index,
                start,
            },
            vec![len, c],
            data,
            self.requires_grad(),
        )
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} elements", self.numel()),
            });
        }
        self.tape.push(
            Op::Reshape { x: self.index },
            shape.to_vec(),
            self.value(),
            self.requires_grad(),
        )
    }

    /// Transposes a rank-2 tensor: `out[j, i] = self[i, j]`.
    pub fn transpose2(&self) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose2",
                shape,
                reason: "expected a rank-2 tensor".to_string(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.value();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        self.tape.push(
            Op::Transpose2 { x: self.index },
            vec![c, r],
            data,
            self.requires_grad(),
        )
    }

    /// Broadcast sum of two rank-1 tensors: `out[i, j] = self[i] + other[j]`.
    pub fn outer_sum(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(other)?;
        let sshape = self.shape();
        let dshape = other.shape();
        if sshape.len() != 1 || dshape.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "outer_sum",
                shape: if sshape.len() != 1 { sshape } else { dshape },
                reason: "expected rank-1 operands".to_string(),
            });
        }
        let (n, m) = (sshape[0], dshape[0]);
        let s = self.value();
        let d = other.value();
        let mut data = Vec::with_capacity(n * m);
        for si in &s {
            for dj in &d {
                data.push(*si + *dj);
            }
        }
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Op::OuterSum {
                s: self.index,
                d: other.index,
            },
            vec![n, m],
            data,
            needs,
        )
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`, so the expectation is preserved.
    /// `rate == 0` returns the input tensor unchanged (the identity at eval
    /// time is obtained by not calling dropout at all).
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<bool> = (0..self.numel()).map(|_| rng.gen::<f64>() >= rate).collect();
        let data: Vec<T> = self
            .value()
            .iter()
            .zip(mask.iter())
            .map(|(x, keep)| if *keep { *x * scale } else { T::zero() })
            .collect();
        self.tape.push(
            Op::Dropout {
                x: self.index,
                mask,
                scale,
            },
            self.shape(),
            data,
            self.requires_grad(),
        )
    }

    /// 2-D convolution of a single `[cin, h, w]` image with a
    /// `[cout, cin, kh, kw]` kernel, zero padding `pad` and stride `stride`.
    pub fn conv2d(
        &self,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>, TensorError> {
        self.check_same_tape(w)?;
        self.check_same_tape(b)?;
        let xshape = self.shape();
        let wshape = w.shape();
        if xshape.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: xshape,
                reason: "expected [channels, height, width] input".to_string(),
            });
        }
        if wshape.len() != 4 || wshape[1] != xshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xshape,
                right: wshape,
            });
        }
        let (cin, h, wd) = (xshape[0], xshape[1], xshape[2]);
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        if b.shape() != vec![cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: wshape,
                right: b.shape(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: xshape,
                reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let data: Vec<T> = {
            let inner = self.tape.borrow_inner();
            let x = &inner.nodes[self.index].data;
            let wv = &inner.nodes[w.index].data;
            let bv = &inner.nodes[b.index].data;
            let mut out = vec![T::zero(); cout * ho * wo];
            for oc in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[oc];
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ic * h * wd + iy as usize * wd + ix as usize;
                                    let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    acc += x[xi] * wv[wi];
                                }
                            }
                        }
                        out[(oc * ho + oy) * wo + ox] = acc;
                    }
                }
            }
            out
        };
        let needs = self.requires_grad() || w.requires_grad() || b.requires_grad();
        self.tape.push(
            Op::Conv2d {
                x: self.index,
                w: w.index,
                b: b.index,
                stride,
                pad,
            },
            vec![cout, ho, wo],
            data,
            needs,
        )
    }

    /// Adaptive average pooling of a `[c, h, w]` map down to `[c, p, p]`.
    /// Bin `i` covers input rows `[floor(i*h/p), floor((i+1)*h/p))`, so the
    /// bins tile the input exactly even when `h` is not a multiple of `p`.
    pub fn adaptive_avg_pool(&self, p: usize) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "adaptive_avg_pool",
                shape,
                reason: "expected [channels, height, width] input".to_string(),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if p == 0 || h < p || w < p {
            return Err(TensorError::InvalidShape {
                op: "adaptive_avg_pool",
                shape,
                reason: format!("cannot pool {h}x{w} map down to {p}x{p}"),
            });
        }
        let x = self.value();
        let mut data = vec![T::zero(); c * p * p];
        for ch in 0..c {
            for i in 0..p {
                let (ys, ye) = (i * h / p, (i + 1) * h / p);
                for j in 0..p {
                    let (xs, xe) = (j * w / p, (j + 1) * w / p);
                    let mut acc = T::zero();
                    for y in ys..ye {
                        for xcol in xs..xe {
                            acc += x[ch * h * w + y * w + xcol];
                        }
                    }
                    let area = T::from_usize((ye - ys) * (xe - xs));
                    data[(ch * p + i) * p + j] = acc / area;
                }
            }
        }
        self.tape.push(
            Op::AdaptiveAvgPool { x: self.index },
            vec![c, p, p],
            data,
            self.requires_grad(),
        )
    }

    /// Stacks rank-1 tensors of equal length into an `[n, len]` matrix.
    pub fn stack_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack_rows",
            shape: vec![0],
            reason: "need at least one row".to_string(),
        })?;
        let len = first.numel();
        let mut data = Vec::with_capacity(parts.len() * len);
        let mut needs = false;
        for part in parts {
            first.check_same_tape(part)?;
            if part.shape().len() != 1 || part.numel() != len {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![len],
                    right: part.shape(),
                });
            }
            needs |= part.requires_grad();
            data.extend(part.value());
        }
        first.tape.push(
            Op::StackRows {
                xs: parts.iter().map(|t| t.index).collect(),
            },
            vec![parts.len(), len],
            data,
            needs,
        )
    }
}

/// Matrix product; see [`Tensor::matmul`].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    a.matmul(b)
}

/// Row-wise softmax over unmasked entries; see [`Tensor::masked_softmax`].
pub fn masked_softmax<T: Scalar>(
    logits: &Tensor<T>,
    mask: &AdjacencyMatrix,
) -> Result<Tensor<T>, TensorError> {
    logits.masked_softmax(mask)
}

/// Elementwise leaky rectifier; see [`Tensor::leaky_relu`].
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, negative_slope: T) -> Result<Tensor<T>, TensorError> {
    x.leaky_relu(negative_slope)
}

/// Mean over one axis of a rank-2 tensor; see [`Tensor::mean_axis`].
pub fn mean_pool<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    x.mean_axis(axis)
}

/// Concatenation along axis 0 or 1; see [`Tensor::concat`].
pub fn concat<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>, TensorError> {
    x.concat(y, axis)
}

/// Inverted dropout with an explicit rng; see [`Tensor::dropout`].
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    x.dropout(rate, rng)
}

/// Rectifier with a learned negative slope; see [`Tensor::prelu`].
pub fn prelu<T: Scalar>(x: &Tensor<T>, learned_slope: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    x.prelu(learned_slope)
}

/// Applies the gradient rule of node `idx`, accumulating adjoints into its
/// inputs. Caller guarantees `idx` was produced by a valid forward pass.
pub(crate) fn backprop_node<T: Scalar>(nodes: &mut [Node<T>], idx: usize) {
    let op = nodes[idx].op.clone();
    let g = nodes[idx].grad.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (k, gv) in g.iter().enumerate() {
                nodes[a].grad[k] += *gv;
            }
            for (k, gv) in g.iter().enumerate() {
                nodes[b].grad[k] += *gv;
            }
        }
        Op::Sub(a, b) => {
            for (k, gv) in g.iter().enumerate() {
                nodes[a].grad[k] += *gv;
            }
            for (k, gv) in g.iter().enumerate() {
                nodes[b].grad[k] -= *gv;
            }
        }
        Op::Mul(a, b) => {
            let bv = nodes[b].data.clone();
            let av = nodes[a].data.clone();
            for (k, gv) in g.iter().enumerate() {
                nodes[a].grad[k] += *gv * bv[k];
            }
            for (k, gv) in g.iter().enumerate() {
                nodes[b].grad[k] += *gv * av[k];
            }
        }
        Op::Affine { x, mul } => {
            for (k, gv) in g.iter().enumerate() {
                nodes[x].grad[k] += mul * *gv;
            }
        }
        Op::MatMul { a, b } => {
            let m = nodes[a].shape[0];
            let k = nodes[a].shape[1];
            let n = nodes[b].shape[1];
            let av = nodes[a].data.clone();
            let bv = nodes[b].data.clone();
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += g[at(i, j, n)] * bv[at(p, j, n)];
                    }
                    nodes[a].grad[at(i, p, k)] += acc;
                }
            }
            for p in 0..k {
                for j in 0..n {
                    let mut acc = T::zero();
                    for i in 0..m {
                        acc += av[at(i, p, k)] * g[at(i, j, n)];
                    }
                    nodes[b].grad[at(p, j, n)] += acc;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let n = nodes[x].shape[0];
            let cin = nodes[x].shape[1];
            let cout = nodes[w].shape[0];
            let xv = nodes[x].data.clone();
            let wv = nodes[w].data.clone();
            for i in 0..n {
                for p in 0..cin {
                    let mut acc = T::zero();
                    for o in 0..cout {
                        acc += g[at(i, o, cout)] * wv[at(o, p, cin)];
                    }
                    nodes[x].grad[at(i, p, cin)] += acc;
                }
            }
            for o in 0..cout {
                for p in 0..cin {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += g[at(i, o, cout)] * xv[at(i, p, cin)];
                    }
                    nodes[w].grad[at(o, p, cin)] += acc;
                }
            }
            if let Some(bias) = b {
                for o in 0..cout {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += g[at(i, o, cout)];
                    }
                    nodes[bias].grad[o] += acc;
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xv = nodes[x].data.clone();
            for (k, gv) in g.iter().enumerate() {
                let d = if xv[k] >= T::zero() { T::one() } else { slope };
                nodes[x].grad[k] += *gv * d;
            }
        }
        Op::PRelu { x, a } => {
            let xv = nodes[x].data.clone();
            let slope = nodes[a].data[0];
            let mut da = T::zero();
            for (k, gv) in g.iter().enumerate() {
                if xv[k] >= T::zero() {
                    nodes[x].grad[k] += *gv;
                } else {
                    nodes[x].grad[k] += *gv * slope;
                    da += *gv * xv[k];
                }
            }
            nodes[a].grad[0] += da;
        }
        Op::Exp(x) => {
            let yv = nodes[idx].data.clone();
            for (k, gv) in g.iter().enumerate() {
                nodes[x].grad[k] += *gv * yv[k];
            }
        }
        Op::PowScalar { x, e } => {
            let xv = nodes[x].data.clone();
            for (k, gv) in g.iter().enumerate() {
                let d = if e == T::zero() {
                    T::zero()
                } else if e == T::one() {
                    T::one()
                } else {
                    e * xv[k].powf(e - T::one())
                };
                nodes[x].grad[k] += *gv * d;
            }
        }
        Op::MaskedSoftmax { x, mask } => {
            let y = nodes[idx].data.clone();
            let c = nodes[idx].shape[1];
            let r = nodes[idx].shape[0];
            for i in 0..r {
                let mut dot = T::zero();
                for j in 0..c {
                    dot += g[at(i, j, c)] * y[at(i, j, c)];
                }
                for j in 0..c {
                    if mask[at(i, j, c)] {
                        let yv = y[at(i, j, c)];
                        nodes[x].grad[at(i, j, c)] += yv * (g[at(i, j, c)] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows { x } => {
            let y = nodes[idx].data.clone();
            let n = nodes[idx].shape[0];
            let c = nodes[idx].shape[1];
            for i in 0..n {
                let mut gsum = T::zero();
                for j in 0..c {
                    gsum += g[at(i, j, c)];
                }
                for j in 0..c {
                    let softmax = y[at(i, j, c)].exp();
                    nodes[x].grad[at(i, j, c)] += g[at(i, j, c)] - softmax * gsum;
                }
            }
        }
        Op::PickRows { x, labels } => {
            let c = nodes[x].shape[1];
            for (i, l) in labels.iter().enumerate() {
                nodes[x].grad[at(i, *l, c)] += g[i];
            }
        }
        Op::MeanAxis { x, axis } => {
            let n = nodes[x].shape[0];
            let c = nodes[x].shape[1];
            if axis == 0 {
                let inv = T::one() / T::from_usize(n);
                for i in 0..n {
                    for j in 0..c {
                        nodes[x].grad[at(i, j, c)] += g[j] * inv;
                    }
                }
            } else {
                let inv = T::one() / T::from_usize(c);
                for i in 0..n {
                    for j in 0..c {
                        nodes[x].grad[at(i, j, c)] += g[i] * inv;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            let gv = g[0];
            for dg in nodes[x].grad.iter_mut() {
                *dg += gv;
            }
        }
        Op::MeanAll(x) => {
            let gv = g[0] / T::from_usize(nodes[x].data.len());
            for dg in nodes[x].grad.iter_mut() {
                *dg += gv;
            }
        }
        Op::Concat { a, b, axis } => {
            let (na, ca) = (nodes[a].shape[0], nodes[a].shape[1]);
            let (nb, cb) = (nodes[b].shape[0], nodes[b].shape[1]);
            if axis == 0 {
                for k in 0..na * ca {
                    nodes[a].grad[k] += g[k];
                }
                for k in 0..nb * cb {
                    nodes[b].grad[k] += g[na * ca + k];
                }
            } else {
                let stride = ca + cb;
                for i in 0..na {
                    for j in 0..ca {
                        nodes[a].grad[at(i, j, ca)] += g[at(i, j, stride)];
                    }
                    for j in 0..cb {
                        nodes[b].grad[at(i, j, cb)] += g[at(i, ca + j, stride)];
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = nodes[x].shape[1];
            for (k, gv) in g.iter().enumerate() {
                nodes[x].grad[start * c + k] += *gv;
            }
        }
        Op::StackRows { xs } => {
            let len = nodes[idx].shape[1];
            for (i, xi) in xs.iter().enumerate() {
                for j in 0..len {
                    nodes[*xi].grad[j] += g[at(i, j, len)];
                }
            }
        }
        Op::Reshape { x } => {
            for (k, gv) in g.iter().enumerate() {
                nodes[x].grad[k] += *gv;
            }
        }
        Op::Transpose2 { x } => {
            let (c, r) = (nodes[idx].shape[0], nodes[idx].shape[1]);
            for j in 0..c {
                for i in 0..r {
                    nodes[x].grad[at(i, j, c)] += g[at(j, i, r)];
                }
            }
        }
        Op::OuterSum { s, d } => {
            let n = nodes[s].data.len();
            let m = nodes[d].data.len();
            for i in 0..n {
                let mut acc = T::zero();
                for j in 0..m {
                    acc += g[at(i, j, m)];
                }
                nodes[s].grad[i] += acc;
            }
            for j in 0..m {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += g[at(i, j, m)];
                }
                nodes[d].grad[j] += acc;
            }
        }
        Op::Dropout { x, mask, scale } => {
            for (k, gv) in g.iter().enumerate() {
                if mask[k] {
                    nodes[x].grad[k] += *gv * scale;
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (cin, h, wd) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let (cout, kh, kw) = (nodes[w].shape[0], nodes[w].shape[2], nodes[w].shape[3]);
            let (ho, wo) = (nodes[idx].shape[1], nodes[idx].shape[2]);
            let xv = nodes[x].data.clone();
            let wv = nodes[w].data.clone();
            for oc in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[(oc * ho + oy) * wo + ox];
                        if gv == T::zero() {
                            continue;
                        }
                        nodes[b].grad[oc] += gv;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ic * h * wd + iy as usize * wd + ix as usize;
                                    let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    nodes[x].grad[xi] += gv * wv[wi];
                                    nodes[w].grad[wi] += gv * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AdaptiveAvgPool { x } => {
            let (c, h, w) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let p = nodes[idx].shape[1];
            for ch in 0..c {
                for i in 0..p {
                    let (ys, ye) = (i * h / p, (i + 1) * h / p);
                    for j in 0..p {
                        let (xs, xe) = (j * w / p, (j + 1) * w / p);
                        let area = T::from_usize((ye - ys) * (xe - xs));
                        let gv = g[(ch * p + i) * p + j] / area;
                        for y in ys..ye {
                            for xcol in xs..xe {
                                nodes[x].grad[ch * h * w + y * w + xcol] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tape;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_is_a_no_op() {
        let tape: Tape<f64> = Tape::new();
        let eye = tape.constant(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row_picks_one_entry() {
        let tape: Tape<f64> = Tape::new();
        let sel = tape.constant(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = tape.constant(&[2, 1], &[5.0, 7.0]).unwrap();
        assert_eq!(sel.matmul(&v).unwrap().value(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expected = vec![0.0f64; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expected[i * 2 + j] += a_data[i * 4 + p] * b_data[p * 2 + j];
                }
            }
        }
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&[3, 4], &a_data).unwrap();
        let b = tape.constant(&[4, 2], &b_data).unwrap();
        let got = a.matmul(&b).unwrap().value();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!(approx(*g, *e, 1e-6));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&[2, 3], &[0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], &[0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    fn full_mask(n: usize) -> crate::graphs::AdjacencyMatrix {
        let mut adj = crate::graphs::AdjacencyMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                adj.set(i, j, true);
            }
        }
        adj
    }

    #[test]
    fn masked_softmax_single_unmasked_entry_is_one() {
        let tape: Tape<f64> = Tape::new();
        let mut adj = crate::graphs::AdjacencyMatrix::new(2);
        adj.set(0, 1, true);
        adj.set(1, 0, true);
        let logits = tape.constant(&[2, 2], &[3.0, -4.0, 0.5, 9.0]).unwrap();
        let out = logits.masked_softmax(&adj).unwrap().value();
        assert_eq!(out, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_equal_logits_split_evenly() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.constant(&[2, 2], &[1.5, 1.5, -2.0, -2.0]).unwrap();
        let out = logits.masked_softmax(&full_mask(2)).unwrap().value();
        assert_eq!(out, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_matches_direct_evaluation() {
        // Row [1, 2, 3] with the middle entry masked: softmax over {1, 3}
        // is [1/(1+e^2), 0, e^2/(1+e^2)].
        let tape: Tape<f64> = Tape::new();
        let mut adj = full_mask(3);
        adj.set(0, 1, false);
        let logits = tape
            .constant(&[3, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let out = logits.masked_softmax(&adj).unwrap().value();
        assert!(approx(out[0], 0.11920292202211755, 1e-15));
        assert_eq!(out[1], 0.0);
        assert!(approx(out[2], 0.8807970779778824, 1e-15));
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let tape: Tape<f64> = Tape::new();
        let mut adj = full_mask(2);
        adj.set(1, 0, false);
        adj.set(1, 1, false);
        let logits = tape.constant(&[2, 2], &[0.0; 4]).unwrap();
        assert!(matches!(
            logits.masked_softmax(&adj),
            Err(TensorError::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..20 {
            let n = rng.gen_range(2..8);
            let mut adj = crate::graphs::AdjacencyMatrix::new(n);
            for i in 0..n {
                adj.set(i, i, true); // guarantees no empty row
                for j in 0..n {
                    if rng.gen_bool(0.4) {
                        adj.set(i, j, true);
                    }
                }
            }
            let logits_data: Vec<f32> =
                (0..n * n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let tape: Tape<f32> = Tape::new();
            let logits = tape.constant(&[n, n], &logits_data).unwrap();
            let out = logits.masked_softmax(&adj).unwrap().value();
            for i in 0..n {
                let mut sum = 0.0f64;
                for j in 0..n {
                    let v = f64::from(out[i * n + j]);
                    if adj.get(i, j) {
                        sum += v;
                    } else {
                        assert_eq!(v, 0.0, "round {round}: non-edge got weight");
                    }
                }
                assert!(approx(sum, 1.0, 1e-6), "round {round} row {i}: {sum}");
            }
        }
    }

    #[test]
    fn leaky_relu_trivial_points() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[3], &[5.0, -1.0, 0.0]).unwrap();
        let y = x.leaky_relu(0.01).unwrap().value();
        assert_eq!(y, vec![5.0, -0.01, 0.0]);
    }

    #[test]
    fn mean_pool_of_constant_tensor_is_that_constant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[4, 3], &[2.5; 12]).unwrap();
        assert_eq!(x.mean_axis(0).unwrap().value(), vec![2.5, 2.5, 2.5]);
        assert_eq!(x.mean_axis(1).unwrap().value(), vec![2.5; 4]);
        assert!(matches!(
            x.mean_axis(2),
            Err(TensorError::AxisOutOfRange { axis: 2, .. })
        ));
    }

    #[test]
    fn dropout_with_zero_rate_returns_the_same_node() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.index, x.index);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn dropout_rejects_rates_outside_unit_interval() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(&[2], &[1.0, 2.0]).unwrap();
        assert!(x.dropout(1.0, &mut rng).is_err());
        assert!(x.dropout(-0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape: Tape<f64> = Tape::new();
        let n = 10_000;
        let x = tape.constant(&[n], &vec![1.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let y = x.dropout(0.25, &mut rng).unwrap();
        let mean: f64 = y.value().iter().sum::<f64>() / n as f64;
        // Per-entry variance is scale^2 * p * (1-p) = (4/3)^2 * 3/16 = 1/3.
        let three_se = 3.0 * (1.0f64 / 3.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < three_se, "mean {mean} drifted");
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let x = tape.constant(&[64], &data).unwrap();
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let a = x.dropout(0.5, &mut rng_a).unwrap().value();
        let b = x.dropout(0.5, &mut rng_b).unwrap().value();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_keeps_left_block_intact() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let wide = a.concat(&b, 1).unwrap();
        assert_eq!(wide.shape(), vec![2, 5]);
        assert_eq!(
            wide.value(),
            vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let tall = a.concat(&a, 0).unwrap();
        assert_eq!(tall.shape(), vec![4, 2]);
        assert_eq!(&tall.value()[0..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        x.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_elementwise_square_doubles_input() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2], &[1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&[1], &[3.0]).unwrap();
        // loss = x + x: each use contributes a gradient of 1.
        x.add(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad(), vec![2.0]);
    }

    #[test]
    fn conv2d_matches_hand_computation_without_padding() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
            .unwrap();
        let w = tape
            .constant(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = tape.constant(&[1], &[0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert_eq!(y.value(), vec![6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv2d_matches_hand_computation_with_stride_and_padding() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
            .unwrap();
        let w = tape
            .constant(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = tape.constant(&[1], &[0.5]).unwrap();
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert_eq!(y.value(), vec![1.5, 3.5, 7.5, 14.5]);
    }

    #[test]
    fn conv2d_output_extent_follows_stride_arithmetic() {
        // (96 + 2 - 3) / 2 + 1 = 48: the halving used by the trunk.
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(&[1, 96, 96], &vec![0.0; 96 * 96]).unwrap();
        let w = tape.constant(&[2, 1, 3, 3], &vec![0.0; 18]).unwrap();
        let b = tape.constant(&[2], &[0.0, 0.0]).unwrap();
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 48, 48]);
    }

    #[test]
    fn adaptive_pool_averages_uneven_bins_exactly() {
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let x = tape.constant(&[1, 5, 5], &data).unwrap();
        let y = x.adaptive_avg_pool(2).unwrap();
        // Bins split rows/cols as [0,2) and [2,5).
        assert_eq!(y.value(), vec![3.0, 5.5, 15.5, 18.0]);
    }

    #[test]
    fn adaptive_pool_halves_the_external_map_side() {
        // 12 -> 6 is the pooling the relation branch applies to externally
        // supplied feature maps: every bin is an exact 2x2 block. On the ramp
        // v[y][x] = 12y + x each pooled entry is the block mean.
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..144).map(|i| i as f64).collect();
        let x = tape.constant(&[1, 12, 12], &data).unwrap();
        let y = x.adaptive_avg_pool(6).unwrap();
        assert_eq!(y.shape(), vec![1, 6, 6]);
        let values = y.value();
        let row0 = [6.5, 8.5, 10.5, 12.5, 14.5, 16.5];
        let row5 = [126.5, 128.5, 130.5, 132.5, 134.5, 136.5];
        assert_eq!(&values[..6], &row0);
        assert_eq!(&values[30..36], &row5);
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.constant(&[3, 2, 2], &data).unwrap();
        let y = x.adaptive_avg_pool(2).unwrap();
        assert_eq!(y.value(), data);
    }

    #[test]
    fn adaptive_pool_rejects_upsampling() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 2, 2], &[0.0; 4]).unwrap();
        assert!(x.adaptive_avg_pool(3).is_err());
    }

    #[test]
    fn log_softmax_rows_matches_softmax_identity() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let logp = x.log_softmax_rows().unwrap().value();
        let sum_exp: f64 = logp.iter().map(|v| v.exp()).sum();
        assert!(approx(sum_exp, 1.0, 1e-12));
        assert!(logp.iter().all(|v| *v < 0.0));
    }

    #[test]
    fn pick_rows_gathers_labels() {
        let tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        assert_eq!(x.pick_rows(&[2, 0]).unwrap().value(), vec![3.0, 4.0]);
        assert!(x.pick_rows(&[3, 0]).is_err());
        assert!(x.pick_rows(&[0]).is_err());
    }

    #[test]
    fn outer_sum_broadcasts_both_ways() {
        let tape: Tape<f64> = Tape::new();
        let s = tape.constant(&[2], &[1.0, 10.0]).unwrap();
        let d = tape.constant(&[3], &[0.1, 0.2, 0.3]).unwrap();
        let y = s.outer_sum(&d).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.value(), vec![1.1, 1.2, 1.3, 10.1, 10.2, 10.3]);
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = tape.constant(&[3], &[4.0, 5.0, 6.0]).unwrap();
        let m = Tensor::stack_rows(&[a, b]).unwrap();
        assert_eq!(m.shape(), vec![2, 3]);
        assert_eq!(m.slice_rows(1, 1).unwrap().value(), vec![4.0, 5.0, 6.0]);
        assert!(m.slice_rows(1, 2).is_err());
    }

    #[test]
    fn exp_overflow_is_caught() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(&[1], &[200.0]).unwrap();
        assert!(matches!(
            x.exp(),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn ops_reject_cross_tape_operands() {
        let tape_a: Tape<f64> = Tape::new();
        let tape_b: Tape<f64> = Tape::new();
        let a = tape_a.constant(&[2], &[1.0, 2.0]).unwrap();
        let b = tape_b.constant(&[2], &[3.0, 4.0]).unwrap();
        assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
    }

    #[test]
    fn pow_scalar_handles_zero_exponent_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2], &[0.0, 2.0]).unwrap();
        let y = x.pow_scalar(0.0).unwrap();
        assert_eq!(y.value(), vec![1.0, 1.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn transpose2_swaps_axes_and_routes_gradients() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.transpose2().unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.value(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(y.transpose2().unwrap().value() == x.value());
        let w = tape.constant(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        y.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        let v = tape.constant(&[3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(v.transpose2().is_err());
    }
}

