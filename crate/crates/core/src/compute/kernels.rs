//! Slice-level numeric kernels behind the graph operations.
//!
//! Layouts are row-major: images are `[H, W, C]`, convolution kernels are
//! `[k, k, Cin, Cout]`, matrices are `[rows, cols]`.

use super::tensor::Real;

/// Spatial padding applied when a window leaves the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Clamp coordinates to the nearest edge pixel.
    Replicate,
    /// Out-of-bounds samples contribute zero.
    Zero,
}

impl Padding {
    /// Resolve coordinate `i` (possibly out of range) on an axis of length `n`.
    #[inline]
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self {
            Padding::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
            Padding::Zero => None,
        }
    }
}

/// Dot product with a fixed, lane-blocked summation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
    c
}

/// Accumulates `da += dc · bᵀ`.
pub fn matmul_grad_a<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = da[i * k + p] + dot(dcrow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Accumulates `db += aᵀ · dc`.
pub fn matmul_grad_b<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, dcrow, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output extent of a same-padded window operation.
pub fn strided_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        strided_extent(self.h, self.stride)
    }

    pub fn out_w(&self) -> usize {
        strided_extent(self.w, self.stride)
    }

    /// Visits every (output pixel, tap, input pixel) triple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let half = (self.k / 2) as isize;
        let (oh, ow) = (self.out_h(), self.out_w());
        for oy in 0..oh {
            for ox in 0..ow {
                let out_idx = oy * ow + ox;
                for ky in 0..self.k {
                    let Some(iy) = self
                        .padding
                        .resolve((oy * self.stride) as isize + ky as isize - half, self.h)
                    else {
                        continue;
                    };
                    for kx in 0..self.k {
                        let Some(ix) = self
                            .padding
                            .resolve((ox * self.stride) as isize + kx as isize - half, self.w)
                        else {
                            continue;
                        };
                        f(out_idx, ky * self.k + kx, iy * self.w + ix);
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(input: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![T::zero(); g.out_h() * g.out_w() * cout];
    g.for_each_tap(|o, tap, i| {
        let px = &input[i * cin..(i + 1) * cin];
        let orow = &mut out[o * cout..(o + 1) * cout];
        let slab = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &x) in px.iter().enumerate() {
            if x != T::zero() {
                axpy(x, &slab[ci * cout..(ci + 1) * cout], orow);
            }
        }
    });
    out
}

pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    if let Some(gi) = grad_input {
        g.for_each_tap(|o, tap, i| {
            let go = &grad_out[o * cout..(o + 1) * cout];
            let slab = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
            for ci in 0..cin {
                gi[i * cin + ci] = gi[i * cin + ci] + dot(go, &slab[ci * cout..(ci + 1) * cout]);
            }
        });
    }
    if let Some(gk) = grad_kernel {
        g.for_each_tap(|o, tap, i| {
            let go = &grad_out[o * cout..(o + 1) * cout];
            let px = &input[i * cin..(i + 1) * cin];
            let slab = &mut gk[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &x) in px.iter().enumerate() {
                if x != T::zero() {
                    axpy(x, go, &mut slab[ci * cout..(ci + 1) * cout]);
                }
            }
        });
    }
}

/// Per-channel stride-1 correlation of `[H, W, C]` with a fixed `k×k` filter.
pub fn filter2d<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    filter: &[T],
    k: usize,
    padding: Padding,
) -> Vec<T> {
    let g = ConvGeometry {
        h,
        w,
        cin: c,
        cout: c,
        k,
        stride: 1,
        padding,
    };
    let mut out = vec![T::zero(); h * w * c];
    g.for_each_tap(|o, tap, i| {
        let f = filter[tap];
        axpy(f, &input[i * c..(i + 1) * c], &mut out[o * c..(o + 1) * c]);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn filter2d_backward<T: Real>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    filter: &[T],
    k: usize,
    padding: Padding,
    grad_input: &mut [T],
) {
    let g = ConvGeometry {
        h,
        w,
        cin: c,
        cout: c,
        k,
        stride: 1,
        padding,
    };
    g.for_each_tap(|o, tap, i| {
        let f = filter[tap];
        axpy(
            f,
            &grad_out[o * c..(o + 1) * c],
            &mut grad_input[i * c..(i + 1) * c],
        );
    });
}

/// Per-channel population variance over a `k×k` replicate-padded window.
/// Returns `(variance, window_mean)`.
pub fn local_variance<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let g = ConvGeometry {
        h,
        w,
        cin: c,
        cout: c,
        k,
        stride: 1,
        padding: Padding::Replicate,
    };
    let n = T::lit((k * k) as f64);
    let mut mean = vec![T::zero(); h * w * c];
    g.for_each_tap(|o, _, i| {
        for ch in 0..c {
            mean[o * c + ch] = mean[o * c + ch] + input[i * c + ch];
        }
    });
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); h * w * c];
    g.for_each_tap(|o, _, i| {
        for ch in 0..c {
            let d = input[i * c + ch] - mean[o * c + ch];
            var[o * c + ch] = var[o * c + ch] + d * d;
        }
    });
    for v in &mut var {
        *v = *v / n;
    }
    (var, mean)
}

#[allow(clippy::too_many_arguments)]
pub fn local_variance_backward<T: Real>(
    input: &[T],
    mean: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    grad_input: &mut [T],
) {
    let g = ConvGeometry {
        h,
        w,
        cin: c,
        cout: c,
        k,
        stride: 1,
        padding: Padding::Replicate,
    };
    // d var / d x_s = 2 (x_s - mean) / n for every window sample s
    let coef = T::lit(2.0 / (k * k) as f64);
    g.for_each_tap(|o, _, i| {
        for ch in 0..c {
            let d = input[i * c + ch] - mean[o * c + ch];
            grad_input[i * c + ch] = grad_input[i * c + ch] + coef * d * grad_out[o * c + ch];
        }
    });
}

/// Scaled dot-product attention `softmax(q kᵀ · scale) v` for `q, k: [T, dk]`,
/// `v: [T, c]`. Returns `(output [T, c], probabilities [T, T])`.
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    tokens: usize,
    dk: usize,
    c: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let kt = transpose(k, tokens, dk);
    let vt = transpose(v, tokens, c);
    let mut probs = vec![T::zero(); tokens * tokens];
    let mut out = vec![T::zero(); tokens * c];
    for i in 0..tokens {
        let row = &mut probs[i * tokens..(i + 1) * tokens];
        for d in 0..dk {
            axpy(q[i * dk + d], &kt[d * tokens..(d + 1) * tokens], row);
        }
        softmax_in_place(row, scale);
        for ch in 0..c {
            out[i * c + ch] = dot(row, &vt[ch * tokens..(ch + 1) * tokens]);
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k`, and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    tokens: usize,
    dk: usize,
    c: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let kt = transpose(k, tokens, dk);
    let vt = transpose(v, tokens, c);
    let mut dq = vec![T::zero(); tokens * dk];
    let mut dkt = vec![T::zero(); dk * tokens];
    let mut dvt = vec![T::zero(); c * tokens];
    let mut dp = vec![T::zero(); tokens];
    for i in 0..tokens {
        let row = &probs[i * tokens..(i + 1) * tokens];
        dp.iter_mut().for_each(|x| *x = T::zero());
        for ch in 0..c {
            let g = grad_out[i * c + ch];
            if g != T::zero() {
                axpy(g, &vt[ch * tokens..(ch + 1) * tokens], &mut dp);
                axpy(g, row, &mut dvt[ch * tokens..(ch + 1) * tokens]);
            }
        }
        let inner = dot(row, &dp);
        for (d, &p) in dp.iter_mut().zip(row) {
            *d = p * (*d - inner) * scale;
        }
        for d in 0..dk {
            dq[i * dk + d] = dot(&dp, &kt[d * tokens..(d + 1) * tokens]);
            axpy(q[i * dk + d], &dp, &mut dkt[d * tokens..(d + 1) * tokens]);
        }
    }
    (dq, transpose(&dkt, dk, tokens), transpose(&dvt, c, tokens))
}

/// Numerically stable softmax of `row * scale`, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T], scale: T) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &x| if x * scale > m { x * scale } else { m });
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        total = total + *x;
    }
    let inv = T::one() / total;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}
