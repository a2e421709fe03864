//! Dense kernels for the backbone: GEMM-backed convolutions, pooling and
//! up-sampling, each with a hand-written backward pass.
//!
//! Feature maps are single samples in channel-major `C x H x W` layout.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// Scalar type of the network (`f32` for training, `f64` for gradient checks).
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + MulAssign + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` on dense row-major matrices,
    /// where `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to any float")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // strides of op(x) (rows x cols) for a row-major buffer holding x
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                // SAFETY: the asserts above bound every index the kernel touches
                // given the dense strides computed for these shapes.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of a channel-major feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unfolds `k x k` neighbourhoods (zero padding `k / 2`) into a `(c*k*k) x (h*w)` matrix.
pub fn im2col<T: Real>(x: &[T], d: Dims, k: usize, col: &mut Vec<T>) {
    let pad = k / 2;
    let hw = d.hw();
    col.clear();
    col.resize(d.c * k * k * hw, T::zero());
    for ci in 0..d.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (d.w + pad).saturating_sub(kx).min(d.w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..d.h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= d.h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    dst[y * d.w + x_lo..y * d.w + x_hi]
                        .copy_from_slice(&plane[sy * d.w + sx_lo..sy * d.w + sx_lo + n]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into a feature-map gradient.
pub fn col2im<T: Real>(col: &[T], d: Dims, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = d.hw();
    dx.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..d.c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (d.w + pad).saturating_sub(kx).min(d.w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..d.h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= d.h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    let dst = &mut plane[sy * d.w + sx_lo..sy * d.w + sx_lo + n];
                    for (a, &b) in dst.iter_mut().zip(&src[y * d.w + x_lo..y * d.w + x_lo + n]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Stride-1 `k x k` convolution with zero padding, `weight` is `c_out x (c_in*k*k)`.
///
/// Returns the output; `col` receives the unfolded input for the backward pass.
pub fn conv_forward<T: Real>(
    x: &[T],
    d: Dims,
    c_out: usize,
    k: usize,
    weight: &[T],
    bias: &[T],
    col: &mut Vec<T>,
) -> Vec<T> {
    let hw = d.hw();
    let rows = d.c * k * k;
    let mut y = vec![T::zero(); c_out * hw];
    for (co, chunk) in y.chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    if k == 1 {
        col.clear();
        col.extend_from_slice(x);
    } else {
        im2col(x, d, k, col);
    }
    T::gemm(c_out, rows, hw, T::one(), weight, false, col, false, T::one(), &mut y);
    y
}

/// Backward of [`conv_forward`]. Accumulates into `dw`/`db` when given and
/// returns the input gradient when `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    dy: &[T],
    d: Dims,
    c_out: usize,
    k: usize,
    weight: &[T],
    col: &[T],
    grads: Option<(&mut [T], &mut [T])>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let hw = d.hw();
    let rows = d.c * k * k;
    if let Some((dw, db)) = grads {
        T::gemm(c_out, hw, rows, T::one(), dy, false, col, true, T::one(), dw);
        for (co, chunk) in dy.chunks(hw).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            db[co] += s;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dcol = vec![T::zero(); rows * hw];
    T::gemm(rows, c_out, hw, T::one(), weight, true, dy, false, T::zero(), &mut dcol);
    if k == 1 {
        return Some(dcol);
    }
    let mut dx = vec![T::zero(); d.len()];
    col2im(&dcol, d, k, &mut dx);
    Some(dx)
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2; returns the output and the flat argmax of each window.
pub fn maxpool_forward<T: Real>(x: &[T], d: Dims) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(d.c * oh * ow);
    let mut arg = Vec::with_capacity(d.c * oh * ow);
    for c in 0..d.c {
        let base = c * d.hw();
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (2 * y) * d.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * d.w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

/// 2x2 stride-2 transposed convolution; `weight` is `(c_out*4) x c_in`.
pub fn upconv_forward<T: Real>(x: &[T], d: Dims, c_out: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = d.hw();
    let mut y4 = vec![T::zero(); c_out * 4 * hw];
    T::gemm(c_out * 4, d.c, hw, T::one(), weight, false, x, false, T::zero(), &mut y4);
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        for q in 0..4 {
            let (qy, qx) = (q / 2, q % 2);
            let src = &y4[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
            for y in 0..d.h {
                let row = co * oh * ow + (2 * y + qy) * ow + qx;
                for x in 0..d.w {
                    out[row + 2 * x] = src[y * d.w + x] + bias[co];
                }
            }
        }
    }
    out
}

/// Backward of [`upconv_forward`]; `x` is the layer input.
#[allow(clippy::too_many_arguments)]
pub fn upconv_backward<T: Real>(
    dy: &[T],
    x: &[T],
    d: Dims,
    c_out: usize,
    weight: &[T],
    grads: Option<(&mut [T], &mut [T])>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let hw = d.hw();
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut dy4 = vec![T::zero(); c_out * 4 * hw];
    for co in 0..c_out {
        for q in 0..4 {
            let (qy, qx) = (q / 2, q % 2);
            let dst = &mut dy4[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
            for y in 0..d.h {
                let row = co * oh * ow + (2 * y + qy) * ow + qx;
                for xx in 0..d.w {
                    dst[y * d.w + xx] = dy[row + 2 * xx];
                }
            }
        }
    }
    if let Some((dw, db)) = grads {
        T::gemm(c_out * 4, hw, d.c, T::one(), &dy4, false, x, true, T::one(), dw);
        for (co, chunk) in dy.chunks(oh * ow).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            db[co] += s;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); d.len()];
    T::gemm(d.c, c_out * 4, hw, T::one(), weight, true, &dy4, false, T::zero(), &mut dx);
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    // direct convolution used as an oracle for the GEMM path
    fn naive_conv(x: &[f64], d: Dims, c_out: usize, k: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = k as isize / 2;
        let mut y = vec![0.0; c_out * d.hw()];
        for co in 0..c_out {
            for yy in 0..d.h as isize {
                for xx in 0..d.w as isize {
                    let mut s = b[co];
                    for ci in 0..d.c {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = yy + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                    continue;
                                }
                                let wi = co * d.c * k * k + (ci * k + ky as usize) * k + kx as usize;
                                s += w[wi] * x[ci * d.hw() + sy as usize * d.w + sx as usize];
                            }
                        }
                    }
                    y[co * d.hw() + yy as usize * d.w + xx as usize] = s;
                }
            }
        }
        y
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 31) as f64 - 15.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let d = Dims::new(3, 5, 6);
        for k in [1, 3] {
            let x = seq(d.len(), 0.1);
            let w = seq(4 * 3 * k * k, 0.05);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let mut col = Vec::new();
            let y = conv_forward(&x, d, 4, k, &w, &b, &mut col);
            let want = naive_conv(&x, d, 4, k, &w, &b);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let d = Dims::new(2, 4, 5);
        let x = seq(d.len(), 0.3);
        let mut col = Vec::new();
        im2col(&x, d, 3, &mut col);
        let c = seq(col.len(), 0.2);
        let mut back = vec![0.0; d.len()];
        col2im(&c, d, 3, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn upconv_is_adjoint_in_input() {
        let d = Dims::new(3, 2, 3);
        let x = seq(d.len(), 0.1);
        let w = seq(2 * 4 * 3, 0.07);
        let b = vec![0.0, 0.0];
        let y = upconv_forward(&x, d, 2, &w, &b);
        let g = seq(y.len(), 0.13);
        let dx = upconv_backward(&g, &x, d, 2, &w, None, true).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let d = Dims::new(1, 2, 2);
        let (out, arg) = maxpool_forward(&[1.0f64, 4.0, 3.0, 2.0], d);
        assert_eq!(out, vec![4.0]);
        assert_eq!(maxpool_backward(&[1.0f64], &arg, 4), vec![0.0, 1.0, 0.0, 0.0]);
    }
}
