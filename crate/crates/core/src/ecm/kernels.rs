//! Dense kernels behind the error-correction network: GEMM, im2col,
//! depthwise convolution, and GELU, generic over `f32`/`f64`.
//!
//! Activations are channel-major `[channels][batch * h * w]`.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point type the network can run in. Production math is `f32`;
/// `f64` exists for finite-difference gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn lit(v: f64) -> Self;
    fn erf(self) -> Self;
    /// `exp(-x^2 / 2)`.
    fn gauss(self) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn erf(self) -> Self {
        erf_f32(self)
    }

    #[inline]
    fn gauss(self) -> Self {
        exp_f32(-0.5 * self * self)
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: callers pass buffers whose extents cover the strided views;
        // `gemm` below checks those extents before calling in.
        unsafe {
            matrixmultiply::sgemm(
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

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline]
    fn gauss(self) -> Self {
        (-0.5 * self * self).exp()
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
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

/// Operand orientation for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Stored row-major with the logical shape.
    N,
    /// Stored row-major transposed.
    T,
}

/// `c[m x n] = op(a)[m x k] * op(b)[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], op_a: Op, b: &[T], op_b: Op, beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs extent");
    assert_eq!(b.len(), k * n, "gemm: rhs extent");
    assert_eq!(c.len(), m * n, "gemm: output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c);
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T], pixels: usize) {
    for (row, &b) in x.chunks_exact_mut(pixels).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + b);
    }
}

/// Per-channel sums, accumulated into `out`.
pub fn row_sums_into<T: Scalar>(x: &[T], pixels: usize, out: &mut [T]) {
    for (row, o) in x.chunks_exact(pixels).zip(out.iter_mut()) {
        *o = *o + row.iter().copied().sum::<T>();
    }
}

/// `exp` for arguments in `[-87, 88]` (clamped outside) with relative
/// error below 1e-6: Cody-Waite reduction by `ln 2` and a degree-6
/// polynomial. Branch-free so that activation loops vectorize.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// Rational minimax approximation of `erf` on `[-4, 4]` (saturated outside),
/// within a few ulp of the correctly rounded value. Branch-free so that
/// activation loops vectorize.
#[inline]
pub fn erf_f32(x: f32) -> f32 {
    let x = x.clamp(-4.0, 4.0);
    let x2 = x * x;
    let mut p = -2.726_142_3e-10_f32;
    p = p * x2 + 2.770_681_4e-8;
    p = p * x2 + -2.101_024e-6;
    p = p * x2 + -5.692_506_4e-5;
    p = p * x2 + -7.349_906_3e-4;
    p = p * x2 + -2.954_6e-3;
    p = p * x2 + -1.609_603_3e-2;
    let mut q = -1.456_607_2e-5_f32;
    q = q * x2 + -2.133_740_6e-4;
    q = q * x2 + -1.682_827e-3;
    q = q * x2 + -7.373_329e-3;
    q = q * x2 + -1.426_474e-2;
    x * p / q
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = x.gauss() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Batch geometry of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

// Valid output range along one axis for kernel offset `off` (tap index minus radius).
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// im2col for a `k x k` stride-1 zero-padded convolution: output is
/// `[cin * k * k][pixels]`, row index `(ci * k + ky) * k + kx`.
pub fn im2col<T: Scalar>(x: &[T], cin: usize, k: usize, geo: Geometry) -> Vec<T> {
    let p = geo.pixels();
    let plane = geo.plane();
    let r = (k / 2) as isize;
    let (h, w) = (geo.height, geo.width);
    let mut cols = vec![T::zero(); cin * k * k * p];
    for ci in 0..cin {
        for ky in 0..k {
            let oy = ky as isize - r;
            let (y0, y1) = valid_range(h, oy);
            for kx in 0..k {
                let ox = kx as isize - r;
                let (x0, x1) = valid_range(w, ox);
                if x0 == x1 || y0 == y1 {
                    continue;
                }
                let row = ((ci * k + ky) * k + kx) * p;
                for b in 0..geo.batch {
                    let src = &x[ci * p + b * plane..ci * p + (b + 1) * plane];
                    let dst = &mut cols[row + b * plane..row + (b + 1) * plane];
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let sx0 = (x0 as isize + ox) as usize;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Depthwise `k x k` stride-1 zero-padded convolution with bias.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    channels: usize,
    k: usize,
    geo: Geometry,
) -> Vec<T> {
    let p = geo.pixels();
    let mut out = vec![T::zero(); channels * p];
    for c in 0..channels {
        let out_c = &mut out[c * p..(c + 1) * p];
        out_c.iter_mut().for_each(|v| *v = bias[c]);
        depthwise_channel_accumulate(
            &x[c * p..(c + 1) * p],
            &weight[c * k * k..(c + 1) * k * k],
            k,
            geo,
            out_c,
        );
    }
    out
}

// Copies one `h x w` plane into the centre of a zeroed `(h + 2r) x (w + 2r)` buffer.
fn pad_plane<T: Scalar>(src: &[T], h: usize, w: usize, r: usize, buf: &mut Vec<T>) {
    let pw = w + 2 * r;
    buf.clear();
    buf.resize((h + 2 * r) * pw, T::zero());
    for y in 0..h {
        buf[(y + r) * pw + r..(y + r) * pw + r + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

// `out[y][x] += sum_{ky,kx} w[ky][kx] * padded[y + ky][x + kx]` for one plane.
fn correlate_padded<T: Scalar>(padded: &[T], w: &[T], k: usize, h: usize, wd: usize, out: &mut [T]) {
    let pw = wd + k - 1;
    for y in 0..h {
        let o = &mut out[y * wd..(y + 1) * wd];
        for ky in 0..k {
            let row = &padded[(y + ky) * pw..(y + ky + 1) * pw];
            for kx in 0..k {
                let wt = w[ky * k + kx];
                for (ov, &sv) in o.iter_mut().zip(&row[kx..kx + wd]) {
                    *ov = *ov + wt * sv;
                }
            }
        }
    }
}

/// `out += conv(x_c, w_c)` for one channel (all images in the batch).
pub fn depthwise_channel_accumulate<T: Scalar>(x: &[T], w: &[T], k: usize, geo: Geometry, out: &mut [T]) {
    let plane = geo.plane();
    let (h, wd) = (geo.height, geo.width);
    let mut buf = Vec::new();
    for b in 0..geo.batch {
        pad_plane(&x[b * plane..(b + 1) * plane], h, wd, k / 2, &mut buf);
        correlate_padded(&buf, w, k, h, wd, &mut out[b * plane..(b + 1) * plane]);
    }
}

const LANES: usize = 16;

// Lane-wise partial sums keep the reduction vectorizable with a fixed order.
fn dot_accumulate<T: Scalar>(a: &[T], b: &[T], acc: &mut [T; LANES]) {
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[i] = acc[i] + x * y;
    }
}

/// Backward of [`depthwise_forward`]: accumulates into `grad_w`/`grad_b` and
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    channels: usize,
    k: usize,
    geo: Geometry,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Vec<T> {
    let p = geo.pixels();
    let plane = geo.plane();
    let (h, wd) = (geo.height, geo.width);
    let (r, kk) = (k / 2, k * k);
    let pw = wd + 2 * r;
    let mut grad_x = vec![T::zero(); channels * p];
    let (mut xbuf, mut gbuf) = (Vec::new(), Vec::new());
    let mut flipped = vec![T::zero(); kk];
    for c in 0..channels {
        let wc = &weight[c * kk..(c + 1) * kk];
        for (i, f) in flipped.iter_mut().enumerate() {
            *f = wc[kk - 1 - i];
        }
        let gc = &grad_out[c * p..(c + 1) * p];
        grad_b[c] = grad_b[c] + gc.iter().copied().sum::<T>();
        let mut acc = vec![[T::zero(); LANES]; kk];
        for b in 0..geo.batch {
            let g = &gc[b * plane..(b + 1) * plane];
            pad_plane(&x[c * p + b * plane..c * p + (b + 1) * plane], h, wd, r, &mut xbuf);
            for y in 0..h {
                let grow = &g[y * wd..(y + 1) * wd];
                for ky in 0..k {
                    let xrow = &xbuf[(y + ky) * pw..(y + ky + 1) * pw];
                    for kx in 0..k {
                        dot_accumulate(grow, &xrow[kx..kx + wd], &mut acc[ky * k + kx]);
                    }
                }
            }
            pad_plane(g, h, wd, r, &mut gbuf);
            correlate_padded(
                &gbuf,
                &flipped,
                k,
                h,
                wd,
                &mut grad_x[c * p + b * plane..c * p + (b + 1) * plane],
            );
        }
        for (i, a) in acc.iter().enumerate() {
            grad_w[c * kk + i] = grad_w[c * kk + i] + a.iter().copied().sum::<T>();
        }
    }
    grad_x
}
