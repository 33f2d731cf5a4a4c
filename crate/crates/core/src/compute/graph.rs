//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Node ids are issued in execution order, so the node
//! vector is already a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use super::kernels::{self, ConvGeometry, Padding};
use super::tensor::{Real, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is matched to the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right operand shape equals the trailing dims of the left (e.g. `[C]` over `[H, W, C]`).
    Suffix,
    /// Right operand shape equals the leading dims of the left (e.g. `[H, W]` over `[H, W, C]`).
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Sigmoid,
    Relu,
    Log,
    Exp,
    Sqrt,
    Square,
    Atan,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Filter2d {
        x: Var,
        filter: Vec<T>,
        k: usize,
        padding: Padding,
        dims: [usize; 3],
    },
    LocalVariance {
        x: Var,
        mean: Vec<T>,
        k: usize,
        dims: [usize; 3],
    },
    Upsample {
        x: Var,
        factor: usize,
        dims: [usize; 3],
    },
    MeanLast {
        x: Var,
        width: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
        width: usize,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        ce: Vec<T>,
        gamma: T,
        classes: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        tokens: usize,
        dk: usize,
        c: usize,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by leaf handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` is a reachable grad-requiring leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation tape. One graph per forward pass; not shared between threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
fn bidx(bc: Broadcast, i: usize, nb: usize, inner: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Suffix => i % nb,
        Broadcast::Prefix => i / inner,
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn shape3(shape: &[usize], op: &'static str) -> Result<[usize; 3], TensorError> {
    match shape {
        [h, w, c] => Ok([*h, *w, *c]),
        _ => Err(TensorError::Rank {
            op,
            expected: 3,
            shape: shape.to_vec(),
        }),
    }
}

fn shape2(shape: &[usize], op: &'static str) -> Result<[usize; 2], TensorError> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient [`backward`](Self::backward) reports.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn infer_broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
        if a == b {
            Some(Broadcast::Same)
        } else if b.iter().product::<usize>() == 1 {
            Some(Broadcast::Scalar)
        } else if b.len() < a.len() && a.ends_with(b) {
            Some(Broadcast::Suffix)
        } else {
            None
        }
    }

    fn binary(
        &mut self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        bc: Option<Broadcast>,
        name: &'static str,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = match bc {
            Some(Broadcast::Prefix) if sb.len() < sa.len() && sa.starts_with(&sb) => {
                Broadcast::Prefix
            }
            Some(Broadcast::Prefix) => return Err(shape_err(name, &sa, &sb)),
            Some(other) => other,
            None => Self::infer_broadcast(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let inner = av.len() / nb.max(1);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let data = (0..av.len())
            .map(|i| f(av[i], bv[bidx(bc, i, nb, inner)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bc }, rg))
    }

    /// Elementwise sum; `b` may be equal-shaped, a scalar, or a trailing-dims broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b, None, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b, None, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b, None, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b, None, "div")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Min, a, b, None, "minimum")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Max, a, b, None, "maximum")
    }

    /// `a * b` where `b` covers the leading dims of `a`, e.g. a `[H, W]` map over `[H, W, C]`.
    pub fn mul_leading(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b, Some(Broadcast::Prefix), "mul_leading")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Log => v.ln(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Square => v * v,
                UnaryKind::Atan => v.atan(),
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Atan, x)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad.as_f64(),
            });
        }
        Ok(self.unary(UnaryKind::Log, x))
    }

    /// Square root; every input element must be strictly positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > T::zero())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                value: bad.as_f64(),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt, x))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [m, k] = shape2(self.shape(a), "matmul")?;
        let [k2, n] = shape2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new([m, n], data)?,
            Op::Matmul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let [rows, cols] = shape2(self.shape(x), "transpose")?;
        let data = kernels::transpose(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([cols, rows], data)?,
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let [rows, cols] = shape2(self.shape(x), "softmax_rows")?;
        if !self.value(x).is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            kernels::softmax_in_place(&mut data[r * cols..(r + 1) * cols], T::one());
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([rows, cols], data)?,
            Op::SoftmaxRows { x, cols },
            rg,
        ))
    }

    /// Same-padded cross-correlation of `[H, W, Cin]` with `[k, k, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let [h, w, cin] = shape3(self.shape(x), "conv2d")?;
        let ks = self.shape(kernel).to_vec();
        let [k, k2, kcin, cout] = match ks.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(TensorError::Rank {
                    op: "conv2d",
                    expected: 4,
                    shape: ks,
                })
            }
        };
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d kernel must be square with odd extent, got {k}x{k2}"
            )));
        }
        if kcin != cin {
            return Err(shape_err("conv2d", self.shape(x), &ks));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::Invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let geom = ConvGeometry {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            padding,
        };
        let data = kernels::conv2d(self.value(x).data(), self.value(kernel).data(), &geom);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::new([geom.out_h(), geom.out_w(), cout], data)?,
            Op::Conv2d { x, kernel, geom },
            rg,
        ))
    }

    /// Per-channel stride-1 correlation with a fixed `k×k` filter (row-major taps).
    pub fn filter2d(
        &mut self,
        x: Var,
        filter: &[T],
        k: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let dims = shape3(self.shape(x), "filter2d")?;
        if k % 2 == 0 || filter.len() != k * k {
            return Err(TensorError::Invalid(format!(
                "filter2d needs an odd k and k*k taps, got k={k} taps={}",
                filter.len()
            )));
        }
        let [h, w, c] = dims;
        let data = kernels::filter2d(self.value(x).data(), h, w, c, filter, k, padding);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(dims.to_vec(), data)?,
            Op::Filter2d {
                x,
                filter: filter.to_vec(),
                k,
                padding,
                dims,
            },
            rg,
        ))
    }

    /// Per-channel population variance over a replicate-padded `k×k` window.
    pub fn local_variance(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let dims = shape3(self.shape(x), "local_variance")?;
        if k % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "variance window must be odd, got {k}"
            )));
        }
        let [h, w, c] = dims;
        let (var, mean) = kernels::local_variance(self.value(x).data(), h, w, c, k);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(dims.to_vec(), var)?,
            Op::LocalVariance { x, mean, k, dims },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of `[H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let dims = shape3(self.shape(x), "upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::Invalid("upsample factor must be >= 1".into()));
        }
        let [h, w, c] = dims;
        let src = self.value(x).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![T::zero(); oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let s = ((oy / factor) * w + ox / factor) * c;
                let d = (oy * ow + ox) * c;
                data[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([oh, ow, c], data)?,
            Op::Upsample { x, factor, dims },
            rg,
        ))
    }

    /// Mean over the last axis: `[.., C] -> [..]` (a 1-D input yields `[1]`).
    pub fn mean_last_axis(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let inv = T::one() / T::lit(width as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(width)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_shape, data).expect("consistent"),
            Op::MeanLast { x, width },
            rg,
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        if len == 0 || start + len > width {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} out of range for width {width}",
                start + len
            )));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SliceLast {
                x,
                start,
                len,
                width,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor; `rows` may repeat and must be non-empty.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let [n, width] = shape2(self.shape(x), "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::Invalid(format!(
                "gather_rows indices invalid for {n} rows"
            )));
        }
        let src = self.value(x).data();
        let data: Vec<T> = rows
            .iter()
            .flat_map(|&r| src[r * width..(r + 1) * width].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([rows.len(), width], data)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Per-row softmax cross-entropy of logits `[N, K]` against class indices.
    ///
    /// With `focal_gamma > 0` each row is multiplied by `(1 - p_true)^gamma`.
    pub fn cross_entropy_rows(
        &mut self,
        x: Var,
        targets: &[usize],
        focal_gamma: T,
    ) -> Result<Var, TensorError> {
        let [n, classes] = shape2(self.shape(x), "cross_entropy_rows")?;
        if targets.len() != n || targets.iter().any(|&t| t >= classes) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy_rows targets must be {n} indices below {classes}"
            )));
        }
        if focal_gamma < T::zero() {
            return Err(TensorError::Invalid("focal gamma must be >= 0".into()));
        }
        let logits = self.value(x).data();
        let mut probs = logits.to_vec();
        let mut losses = Vec::with_capacity(n);
        let mut ces = Vec::with_capacity(n);
        for r in 0..n {
            let row = &logits[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let ce = lse - row[targets[r]];
            let prow = &mut probs[r * classes..(r + 1) * classes];
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            let loss = if focal_gamma > T::zero() {
                let pt = prow[targets[r]];
                (T::one() - pt).max(T::zero()).powf(focal_gamma) * ce
            } else {
                ce
            };
            losses.push(loss);
            ces.push(ce);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([n], losses)?,
            Op::CrossEntropy {
                x,
                targets: targets.to_vec(),
                probs,
                ce: ces,
                gamma: focal_gamma,
                classes,
            },
            rg,
        ))
    }

    /// Fused `softmax(q kᵀ · scale) v`; only the `[T, T]` probabilities are kept.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var, TensorError> {
        let [tokens, dk] = shape2(self.shape(q), "attention")?;
        let [tk, dk2] = shape2(self.shape(k), "attention")?;
        let [tv, c] = shape2(self.shape(v), "attention")?;
        if tk != tokens || tv != tokens || dk2 != dk {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            tokens,
            dk,
            c,
            scale,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new([tokens, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                probs,
                tokens,
                dk,
                c,
                scale,
            },
            rg,
        ))
    }

    /// Attention probabilities stored by an [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Hash of every piecewise branch decision (ReLU sign, clamp activity,
    /// min/max selection). Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bit: u8| {
            h ^= bit as u64;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    kind: UnaryKind::Relu,
                    x,
                } => {
                    for &v in self.nodes[x.0].value.data() {
                        feed((v > T::zero()) as u8);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(if v < *lo { 0 } else if v > *hi { 2 } else { 1 });
                    }
                }
                Op::Binary { kind, a, b, bc }
                    if matches!(kind, BinaryKind::Min | BinaryKind::Max) =>
                {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let inner = av.len() / bv.len();
                    for (i, &x) in av.iter().enumerate() {
                        let y = bv[bidx(*bc, i, bv.len(), inner)];
                        feed((x <= y) as u8 + 2 * (x >= y) as u8);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a single-element `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        // Accumulation buffer for a parent, allocated on first contribution.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bc } => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let inner = av.len() / nb;
                if self.rg(*a) {
                    let ga = acc!(*a);
                    for i in 0..g.len() {
                        let bi = bv[bidx(*bc, i, nb, inner)];
                        ga[i] = ga[i]
                            + match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[i],
                                BinaryKind::Mul => g[i] * bi,
                                BinaryKind::Div => g[i] / bi,
                                BinaryKind::Min => {
                                    if av[i] <= bi {
                                        g[i]
                                    } else {
                                        T::zero()
                                    }
                                }
                                BinaryKind::Max => {
                                    if av[i] >= bi {
                                        g[i]
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                    }
                }
                if self.rg(*b) {
                    let gb = acc!(*b);
                    for i in 0..g.len() {
                        let j = bidx(*bc, i, nb, inner);
                        let bi = bv[j];
                        gb[j] = gb[j]
                            + match kind {
                                BinaryKind::Add => g[i],
                                BinaryKind::Sub => -g[i],
                                BinaryKind::Mul => g[i] * av[i],
                                BinaryKind::Div => -g[i] * av[i] / (bi * bi),
                                BinaryKind::Min => {
                                    if av[i] <= bi {
                                        T::zero()
                                    } else {
                                        g[i]
                                    }
                                }
                                BinaryKind::Max => {
                                    if av[i] >= bi {
                                        T::zero()
                                    } else {
                                        g[i]
                                    }
                                }
                            };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let two = T::lit(2.0);
                let gx = acc!(*x);
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Neg => -T::one(),
                        UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryKind::Relu => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Log => T::one() / xv[i],
                        UnaryKind::Exp => y[i],
                        UnaryKind::Sqrt => T::one() / (two * y[i]),
                        UnaryKind::Square => two * xv[i],
                        UnaryKind::Atan => T::one() / (T::one() + xv[i] * xv[i]),
                    };
                    gx[i] = gx[i] + g[i] * d;
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = acc!(*x);
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            Op::Scale { x, factor } => {
                let gx = acc!(*x);
                kernels::axpy(*factor, g, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let gx = acc!(*x);
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let bv = val(*b);
                    kernels::matmul_grad_a(g, bv, acc!(*a), *m, *k, *n);
                }
                if self.rg(*b) {
                    let av = val(*a);
                    kernels::matmul_grad_b(av, g, acc!(*b), *m, *k, *n);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let back = kernels::transpose(g, *cols, *rows);
                let gx = acc!(*x);
                for (a, b) in gx.iter_mut().zip(back) {
                    *a = *a + b;
                }
            }
            Op::SoftmaxRows { x, cols } => {
                let gx = acc!(*x);
                for ((grow, yrow), gxrow) in g
                    .chunks(*cols)
                    .zip(y.chunks(*cols))
                    .zip(gx.chunks_mut(*cols))
                {
                    let inner = kernels::dot(grow, yrow);
                    for j in 0..*cols {
                        gxrow[j] = gxrow[j] + yrow[j] * (grow[j] - inner);
                    }
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let want_x = self.rg(*x);
                let want_k = self.rg(*kernel);
                let mut gi = want_x.then(|| vec![T::zero(); xv.len()]);
                let mut gk = want_k.then(|| vec![T::zero(); kv.len()]);
                kernels::conv2d_backward(xv, kv, g, geom, gi.as_deref_mut(), gk.as_deref_mut());
                if let Some(gi) = gi {
                    let gx = acc!(*x);
                    kernels::axpy(T::one(), &gi, gx);
                }
                if let Some(gk) = gk {
                    let gkk = acc!(*kernel);
                    kernels::axpy(T::one(), &gk, gkk);
                }
            }
            Op::Filter2d {
                x,
                filter,
                k,
                padding,
                dims: [h, w, c],
            } => {
                let gx = acc!(*x);
                kernels::filter2d_backward(g, *h, *w, *c, filter, *k, *padding, gx);
            }
            Op::LocalVariance {
                x,
                mean,
                k,
                dims: [h, w, c],
            } => {
                let xv = val(*x);
                let gx = acc!(*x);
                kernels::local_variance_backward(xv, mean, g, *h, *w, *c, *k, gx);
            }
            Op::Upsample {
                x,
                factor,
                dims: [h, w, c],
            } => {
                let (oh, ow) = (h * factor, w * factor);
                let gx = acc!(*x);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let s = ((oy / factor) * w + ox / factor) * c;
                        let d = (oy * ow + ox) * c;
                        for ch in 0..*c {
                            gx[s + ch] = gx[s + ch] + g[d + ch];
                        }
                    }
                }
            }
            Op::MeanLast { x, width } => {
                let inv = T::one() / T::lit(*width as f64);
                let gx = acc!(*x);
                for (row, &gr) in gx.chunks_mut(*width).zip(g) {
                    for v in row {
                        *v = *v + gr * inv;
                    }
                }
            }
            Op::SliceLast {
                x,
                start,
                len,
                width,
            } => {
                let gx = acc!(*x);
                for (row, grow) in gx.chunks_mut(*width).zip(g.chunks(*len)) {
                    for (a, &b) in row[*start..*start + *len].iter_mut().zip(grow) {
                        *a = *a + b;
                    }
                }
            }
            Op::GatherRows { x, rows, width } => {
                let gx = acc!(*x);
                for (&r, grow) in rows.iter().zip(g.chunks(*width)) {
                    kernels::axpy(T::one(), grow, &mut gx[r * width..(r + 1) * width]);
                }
            }
            Op::Sum { x } => {
                let gx = acc!(*x);
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::CrossEntropy {
                x,
                targets,
                probs,
                ce,
                gamma,
                classes,
            } => {
                let gx = acc!(*x);
                for (r, &t) in targets.iter().enumerate() {
                    let prow = &probs[r * classes..(r + 1) * classes];
                    let grow = &mut gx[r * classes..(r + 1) * classes];
                    // L = (1-p)^γ ce with ce = -ln p; dL/dz_j = coef (s_j - [j == t])
                    let coef = if *gamma > T::zero() {
                        let pt = prow[t];
                        let one_minus = (T::one() - pt).max(T::zero());
                        let lead = one_minus.powf(*gamma);
                        let tail = if one_minus > T::zero() {
                            *gamma * one_minus.powf(*gamma - T::one()) * pt * ce[r]
                        } else {
                            T::zero()
                        };
                        lead + tail
                    } else {
                        T::one()
                    };
                    let s = g[r] * coef;
                    for j in 0..*classes {
                        let ind = if j == t { T::one() } else { T::zero() };
                        grow[j] = grow[j] + s * (prow[j] - ind);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                tokens,
                dk,
                c,
                scale,
            } => {
                let (dq, dkk, dv) = kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    *tokens,
                    *dk,
                    *c,
                    *scale,
                );
                for (var, gr) in [(*q, dq), (*k, dkk), (*v, dv)] {
                    if self.rg(var) {
                        kernels::axpy(T::one(), &gr, acc!(var));
                    }
                }
            }
        }
    }
}
