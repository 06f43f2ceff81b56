//! Raw numeric kernels shared by the autograd ops and the inference paths.

use crate::tensor::Float;

/// Geometry of a square-kernel 2-D convolution over a `[c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` into `cols[c*k*k + ky*k + kx, oy*w_out + ox]`, zero outside the image.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[(ox + lo) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column for tap `kx` lies inside the image.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    // ix = ox*stride + kx - pad must satisfy 0 <= ix < w.
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    let hi = if g.w + g.pad <= kx { 0 } else { (g.w + g.pad - kx).div_ceil(g.stride) };
    (lo.min(g.w_out), hi.min(g.w_out).max(lo.min(g.w_out)))
}

/// Adjoint of [`im2col`]: scatters `cols` back into `dx` (accumulating).
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in src_row.iter().enumerate() {
                            dst[(i + lo) * g.stride + kx - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[c_out, P] = weight[c_out, rows] * cols[rows, P] + bias`.
pub(crate) fn conv_gemm<T: Float>(
    weight: &[T],
    bias: Option<&[T]>,
    cols: &[T],
    c_out: usize,
    rows: usize,
    p: usize,
    out: &mut [T],
) {
    match bias {
        Some(b) => {
            for (o, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
            T::gemm(c_out, rows, p, T::one(), weight, rows as isize, 1, cols, p as isize, 1, T::one(), out, p as isize, 1);
        }
        None => T::gemm(c_out, rows, p, T::one(), weight, rows as isize, 1, cols, p as isize, 1, T::zero(), out, p as isize, 1),
    }
}

/// Gradients of [`conv_gemm`] with respect to weight (accumulated) and cols (overwritten).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_gemm_backward<T: Float>(
    weight: &[T],
    cols: &[T],
    dout: &[T],
    c_out: usize,
    rows: usize,
    p: usize,
    dweight: Option<&mut [T]>,
    dcols: Option<&mut [T]>,
) {
    if let Some(dw) = dweight {
        // dW[c_out, rows] += dout[c_out, P] * cols^T
        T::gemm(c_out, p, rows, T::one(), dout, p as isize, 1, cols, 1, p as isize, T::one(), dw, rows as isize, 1);
    }
    if let Some(dc) = dcols {
        // dcols[rows, P] = W^T * dout
        T::gemm(rows, c_out, p, T::one(), weight, 1, rows as isize, dout, p as isize, 1, T::zero(), dc, p as isize, 1);
    }
}

/// `floor` without a libm call; exact for the magnitudes offsets take.
#[inline]
fn floor<T: Float>(v: T) -> T {
    let t = v.as_f64();
    if t.abs() >= 4.5e15 {
        return v;
    }
    let i = t as i64 as f64;
    T::from_f64(if i > t { i - 1.0 } else { i })
}

/// Bilinear sampling stencil at a real coordinate; neighbours outside the map get weight 0.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Stencil<T> {
    /// Flat in-plane indices of the (y0,x0), (y0,x1), (y1,x0), (y1,x1) neighbours.
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    /// Interpolation weights, zero for neighbours outside the map.
    pub w: [T; 4],
    /// Fractional parts along y and x.
    pub ly: T,
    pub lx: T,
}

impl<T: Float> Stencil<T> {
    #[inline]
    pub fn at(y: T, x: T, h: usize, w: usize) -> Self {
        let (yf, xf) = (y.as_f64(), x.as_f64());
        // Coordinates this far out have no neighbour inside any map.
        if !(yf.abs() < 1e9 && xf.abs() < 1e9) {
            let ly = y - floor(y);
            let lx = x - floor(x);
            return Stencil { idx: [0; 4], valid: [false; 4], w: [T::zero(); 4], ly, lx };
        }
        let y0 = yf.floor() as i64;
        let x0 = xf.floor() as i64;
        let ly = y - T::from_f64(y0 as f64);
        let lx = x - T::from_f64(x0 as f64);
        let (h, w) = (h as i64, w as i64);
        let vy = [(0..h).contains(&y0), (0..h).contains(&(y0 + 1))];
        let vx = [(0..w).contains(&x0), (0..w).contains(&(x0 + 1))];
        let valid = [vy[0] && vx[0], vy[0] && vx[1], vy[1] && vx[0], vy[1] && vx[1]];
        let base = y0 * w + x0;
        let offs = [0, 1, w, w + 1];
        let mut s = Stencil { idx: [0; 4], valid, w: [T::zero(); 4], ly, lx };
        for n in 0..4 {
            if valid[n] {
                s.idx[n] = (base + offs[n]) as usize;
            }
        }
        s.w = s.weights();
        s
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        let hy = one - self.ly;
        let hx = one - self.lx;
        let mut w = [hy * hx, hy * self.lx, self.ly * hx, self.ly * self.lx];
        for (wi, &ok) in w.iter_mut().zip(&self.valid) {
            if !ok {
                *wi = T::zero();
            }
        }
        w
    }

    /// Weight derivatives with respect to y and x.
    #[inline]
    pub fn weight_grads(&self) -> ([T; 4], [T; 4]) {
        let one = T::one();
        let hy = one - self.ly;
        let hx = one - self.lx;
        let mut dy = [-hx, -self.lx, hx, self.lx];
        let mut dx = [-hy, hy, -self.ly, self.ly];
        for n in 0..4 {
            if !self.valid[n] {
                dy[n] = T::zero();
                dx[n] = T::zero();
            }
        }
        (dy, dx)
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        // Invalid neighbours have index 0 and weight 0.
        self.w[0] * plane[self.idx[0]]
            + self.w[1] * plane[self.idx[1]]
            + self.w[2] * plane[self.idx[2]]
            + self.w[3] * plane[self.idx[3]]
    }
}

/// Sampling stencils for every (tap, pixel) of a 3×3, pad-1 deformable convolution.
///
/// `offsets` is `[2*9, h, w]` with `(dy, dx)` for tap `t` in channels `2t` and `2t+1`.
pub(crate) fn deform_stencils<T: Float>(offsets: &[T], h: usize, w: usize) -> Vec<Stencil<T>> {
    let p = h * w;
    let mut out = Vec::with_capacity(9 * p);
    for t in 0..9 {
        let ky = (t / 3) as isize - 1;
        let kx = (t % 3) as isize - 1;
        let oy = &offsets[2 * t * p..(2 * t + 1) * p];
        let ox = &offsets[(2 * t + 1) * p..(2 * t + 2) * p];
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let y = T::from_f64((py as isize + ky) as f64) + oy[i];
                let x = T::from_f64((px as isize + kx) as f64) + ox[i];
                out.push(Stencil::at(y, x, h, w));
            }
        }
    }
    out
}

const LANES: usize = 4;

/// Reorders a deformable weight `[O, C, 3, 3]` to `[O, 9·C]` with column `t·C + c`.
pub(crate) fn deform_weight_to_tap_major<T: Float>(w: &[T], c_out: usize, c_in: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..c_out {
        for c in 0..c_in {
            for t in 0..9 {
                out[o * 9 * c_in + t * c_in + c] = w[(o * c_in + c) * 9 + t];
            }
        }
    }
    out
}

/// Inverse of [`deform_weight_to_tap_major`], accumulated into `dw`.
pub(crate) fn deform_weight_from_tap_major<T: Float>(wt: &[T], c_out: usize, c_in: usize, dw: &mut [T]) {
    for o in 0..c_out {
        for c in 0..c_in {
            for t in 0..9 {
                dw[(o * c_in + c) * 9 + t] += wt[o * 9 * c_in + t * c_in + c];
            }
        }
    }
}

/// Deformable columns in pixel-major layout: `cols[(i·9 + t)·C + c]` is the
/// bilinear sample of channel `c` at tap `t` of pixel `i`. `xt` receives the
/// input transposed to `[p, C]`.
pub(crate) fn deform_cols<T: Float>(x: &[T], c_in: usize, p: usize, stencils: &[Stencil<T>], xt: &mut [T], cols: &mut [T]) {
    transpose(x, c_in, p, xt);
    for (i, px_cols) in cols.chunks_exact_mut(9 * c_in).enumerate() {
        for (t, dst) in px_cols.chunks_exact_mut(c_in).enumerate() {
            let s = &stencils[t * p + i];
            let [a0, a1, a2, a3] = s.idx.map(|j| &xt[j * c_in..(j + 1) * c_in]);
            let [w0, w1, w2, w3] = s.w;
            for ((((d, &v0), &v1), &v2), &v3) in dst.iter_mut().zip(a0).zip(a1).zip(a2).zip(a3) {
                *d = w0 * v0 + w1 * v1 + w2 * v2 + w3 * v3;
            }
        }
    }
}

/// `out[O, p] = W[O, 9C] · colsᵀ + bias` for pixel-major deformable columns.
pub(crate) fn deform_gemm<T: Float>(wt: &[T], bias: Option<&[T]>, cols: &[T], c_out: usize, rows: usize, p: usize, out: &mut [T]) {
    match bias {
        Some(b) => {
            for (row, &bv) in out.chunks_exact_mut(p).zip(b) {
                row.fill(bv);
            }
        }
        None => out.fill(T::zero()),
    }
    T::gemm(c_out, rows, p, T::one(), wt, rows as isize, 1, cols, 1, rows as isize, T::one(), out, p as isize, 1);
}

/// Gradients of a deformable convolution given pixel-major `cols` and `xt` from [`deform_cols`].
///
/// `dwt` is in tap-major weight layout; `dxt` is `[p, C]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward<T: Float>(
    wt: &[T],
    xt: &[T],
    cols: Option<&[T]>,
    c_in: usize,
    c_out: usize,
    p: usize,
    stencils: &[Stencil<T>],
    dout: &[T],
    dcols: &mut [T],
    dwt: Option<&mut [T]>,
    mut dxt: Option<&mut [T]>,
    mut doffsets: Option<&mut [T]>,
) {
    let rows = 9 * c_in;
    if let (Some(dw), Some(cols)) = (dwt, cols) {
        // dW[O, 9C] += dout[O, p] · cols[p, 9C]
        T::gemm(c_out, p, rows, T::one(), dout, p as isize, 1, cols, rows as isize, 1, T::one(), dw, rows as isize, 1);
    }
    if dxt.is_none() && doffsets.is_none() {
        return;
    }
    // dcols[p, 9C] = doutᵀ · W
    T::gemm(p, c_out, rows, T::one(), dout, 1, p as isize, wt, rows as isize, 1, T::zero(), dcols, rows as isize, 1);
    for (i, px_grads) in dcols.chunks_exact(rows).enumerate() {
        for (t, g) in px_grads.chunks_exact(c_in).enumerate() {
            let s = &stencils[t * p + i];
            if let Some(dxt) = dxt.as_deref_mut() {
                for n in 0..4 {
                    let wn = s.w[n];
                    if wn != T::zero() {
                        let j = s.idx[n];
                        for (d, &gv) in dxt[j * c_in..(j + 1) * c_in].iter_mut().zip(g) {
                            *d += wn * gv;
                        }
                    }
                }
            }
            if let Some(doff) = doffsets.as_deref_mut() {
                let (gy, gx) = s.weight_grads();
                let [a0, a1, a2, a3] = s.idx.map(|j| &xt[j * c_in..(j + 1) * c_in]);
                // Four independent partial sums per direction so the loop vectorizes.
                let mut ly = [T::zero(); LANES];
                let mut lx = [T::zero(); LANES];
                let mut k = 0;
                while k + LANES <= c_in {
                    for l in 0..LANES {
                        let (v0, v1, v2, v3) = (a0[k + l], a1[k + l], a2[k + l], a3[k + l]);
                        ly[l] += g[k + l] * (gy[0] * v0 + gy[1] * v1 + gy[2] * v2 + gy[3] * v3);
                        lx[l] += g[k + l] * (gx[0] * v0 + gx[1] * v1 + gx[2] * v2 + gx[3] * v3);
                    }
                    k += LANES;
                }
                for k in k..c_in {
                    let (v0, v1, v2, v3) = (a0[k], a1[k], a2[k], a3[k]);
                    ly[0] += g[k] * (gy[0] * v0 + gy[1] * v1 + gy[2] * v2 + gy[3] * v3);
                    lx[0] += g[k] * (gx[0] * v0 + gx[1] * v1 + gx[2] * v2 + gx[3] * v3);
                }
                let acc_y = (ly[0] + ly[1]) + (ly[2] + ly[3]);
                let acc_x = (lx[0] + lx[1]) + (lx[2] + lx[3]);
                doff[2 * t * p + i] += acc_y;
                doff[(2 * t + 1) * p + i] += acc_x;
            }
        }
    }
}

/// Numerically stable softmax over each contiguous run of `len` elements.
pub(crate) fn softmax_runs<T: Float>(x: &[T], len: usize, out: &mut [T]) {
    for (src, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

/// In-place transpose copy of a row-major `[m, n]` matrix into `[n, m]`.
pub(crate) fn transpose<T: Float>(x: &[T], m: usize, n: usize, out: &mut [T]) {
    const B: usize = 32;
    for i0 in (0..m).step_by(B) {
        for j0 in (0..n).step_by(B) {
            for i in i0..(i0 + B).min(m) {
                for j in j0..(j0 + B).min(n) {
                    out[j * m + i] = x[i * n + j];
                }
            }
        }
    }
}
