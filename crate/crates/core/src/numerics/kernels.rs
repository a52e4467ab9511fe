//! Slice-level kernels shared by the forward and backward passes of the tape.
//! All layouts are row-major.

use crate::scalar::Scalar;

/// `out[rows x cols] = a[rows x inner] * b[inner x cols]` (optionally with `b`
/// stored transposed, i.e. as `cols x inner`). Overwrites `out`.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    rows: usize,
    inner: usize,
    cols: usize,
    b_transposed: bool,
    accumulate: bool,
) {
    let (rsb, csb) = if b_transposed {
        (1, inner as isize)
    } else {
        (cols as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        rows,
        inner,
        cols,
        T::one(),
        a,
        inner as isize,
        1,
        b,
        rsb,
        csb,
        beta,
        out,
        cols as isize,
        1,
    );
}

/// `out[inner x cols] (+)= a[rows x inner]^T * b[rows x cols]`.
pub(crate) fn matmul_tn_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    rows: usize,
    inner: usize,
    cols: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        inner,
        rows,
        cols,
        T::one(),
        a,
        1,
        inner as isize,
        b,
        cols as isize,
        1,
        beta,
        out,
        cols as isize,
        1,
    );
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `j` (in the permuted layout) reads input element `src[j]`.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        src.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    src
}

/// Geometry of a 2-D sliding window between a "large" grid and a "small" grid:
/// small position `s` with kernel offset `k` touches large position `s * stride - pad + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub large_h: usize,
    pub large_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }

    #[inline]
    fn large_pos(&self, s: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (s * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Gathers `large [C, H, W]` into columns `[C*kh*kw, small_h*small_w]`.
pub(crate) fn im2col<T: Scalar>(large: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &large[c * g.large_h * g.large_w..(c + 1) * g.large_h * g.large_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for sy in 0..g.small_h {
                    let Some(ly) = g.large_pos(sy, ky, g.large_h) else {
                        continue;
                    };
                    for sx in 0..g.small_w {
                        if let Some(lx) = g.large_pos(sx, kx, g.large_w) {
                            dst[sy * g.small_w + sx] = plane[ly * g.large_w + lx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds columns back into `large [C, H, W]` (adjoint of `im2col`).
pub(crate) fn col2im<T: Scalar>(cols_buf: &[T], g: &ConvGeom, large: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut large[c * g.large_h * g.large_w..(c + 1) * g.large_h * g.large_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for sy in 0..g.small_h {
                    let Some(ly) = g.large_pos(sy, ky, g.large_h) else {
                        continue;
                    };
                    for sx in 0..g.small_w {
                        if let Some(lx) = g.large_pos(sx, kx, g.large_w) {
                            plane[ly * g.large_w + lx] += src[sy * g.small_w + sx];
                        }
                    }
                }
            }
        }
    }
}

/// One axis of a half-pixel-centred bilinear resample: for each output index,
/// the two source indices and the weight of the second.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * ih * iw..(c + 1) * ih * iw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let hx = T::one() - lx;
                dst[oy * ow + ox] = hy * (hx * src[y0 * iw + x0] + lx * src[y0 * iw + x1])
                    + ly * (hx * src[y1 * iw + x0] + lx * src[y1 * iw + x1]);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    for c in 0..channels {
        let g = &dy[c * oh * ow..(c + 1) * oh * ow];
        let d = &mut dx[c * ih * iw..(c + 1) * ih * iw];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let hx = T::one() - lx;
                let v = g[oy * ow + ox];
                d[y0 * iw + x0] += v * hy * hx;
                d[y0 * iw + x1] += v * hy * lx;
                d[y1 * iw + x0] += v * ly * hx;
                d[y1 * iw + x1] += v * ly * lx;
            }
        }
    }
}

/// For `[H, W, C]` split into `ws x ws` windows laid out as `[nW, ws*ws, C]`:
/// the source token index (row-major over H, W) of each windowed token.
pub(crate) fn window_index(h: usize, w: usize, ws: usize) -> Vec<usize> {
    let (nh, nw) = (h / ws, w / ws);
    let mut idx = Vec::with_capacity(h * w);
    for wy in 0..nh {
        for wx in 0..nw {
            for iy in 0..ws {
                for ix in 0..ws {
                    idx.push((wy * ws + iy) * w + wx * ws + ix);
                }
            }
        }
    }
    idx
}

/// `dst` row `i` <- `src` row `idx[i]`, rows of length `width`.
pub(crate) fn gather_rows<T: Scalar>(src: &[T], idx: &[usize], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    out
}

/// Adjoint of `gather_rows`: `dst` row `idx[i]` += `src` row `i`.
pub(crate) fn scatter_add_rows<T: Scalar>(src: &[T], idx: &[usize], width: usize, dst: &mut [T]) {
    for (r, &i) in idx.iter().enumerate() {
        let s = &src[r * width..(r + 1) * width];
        dst[i * width..(i + 1) * width]
            .iter_mut()
            .zip(s)
            .for_each(|(d, &v)| *d += v);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_index_transposes_a_matrix() {
        // [2, 3] -> [3, 2]
        let idx = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn window_index_is_a_bijection() {
        let mut idx = window_index(8, 4, 2);
        idx.sort_unstable();
        assert_eq!(idx, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let y = bilinear_forward(&x, 1, (3, 4), (3, 4));
        assert_eq!(x, y);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            channels: 2,
            large_h: 5,
            large_w: 4,
            small_h: 3,
            small_w: 2,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f64 * 0.11).cos())
            .collect();
        let ax = im2col(&x, &g);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut aty = vec![0.0; 40];
        col2im(&y, &g, &mut aty);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
