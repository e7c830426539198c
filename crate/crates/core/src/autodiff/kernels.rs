//! Dense numeric kernels behind the tape operations.

use crate::par;
use crate::tensor::Scalar;

/// Row-major matrix view: `rows x cols` with an optional logical transpose.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, trans: false }
    }

    /// The transpose of this view (no copy).
    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

const ROW_CHUNK: usize = 64;
const COL_CHUNK: usize = 1024;
/// Products this thin in `m` or `k` skip the packed kernel (its 8-row tiles
/// would be mostly padding).
const THIN: usize = 4;
const THIN_MIN_N: usize = 256;

/// `c (m x n, row-major) = a * b + beta * c`.
///
/// Large products are split along `m` or `n` (never along the reduction axis)
/// into fixed-size blocks, so the result does not depend on scheduling.
pub fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    if n >= THIN_MIN_N && (m <= THIN || k <= THIN) && csb == 1 {
        thin_axpy(a, b, beta, c, m, k, n);
        return;
    }
    if n >= THIN_MIN_N && m <= THIN && rsb == 1 {
        thin_dot(a, b, beta, c, m, k, n);
        return;
    }
    if m * n * k < 32 * 32 * 32 {
        // SAFETY: dimensions and strides are checked against slice lengths above.
        unsafe {
            T::gemm_raw(m, k, n, T::one(), a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
        return;
    }
    if m >= n / 4 {
        // Row blocks: each chunk of `c` is a contiguous set of rows.
        par::for_each_chunk_mut(c, ROW_CHUNK * n, |ci, cc| {
            let r0 = ci * ROW_CHUNK;
            let rows = cc.len() / n;
            // SAFETY: rows r0..r0+rows of `a` exist; `cc` holds exactly `rows * n` values.
            unsafe {
                let ap = a.data.as_ptr().offset(r0 as isize * rsa);
                T::gemm_raw(rows, k, n, T::one(), ap, rsa, csa, b.data.as_ptr(), rsb, csb, beta, cc.as_mut_ptr(), n as isize, 1);
            }
        });
    } else {
        // Column blocks: compute into column-major scratch blocks, then scatter.
        let blocks = n.div_ceil(COL_CHUNK);
        let parts: Vec<Vec<T>> = par::map_range(blocks, |bi| {
            let c0 = bi * COL_CHUNK;
            let cols = COL_CHUNK.min(n - c0);
            let mut out = vec![T::zero(); m * cols];
            for i in 0..m {
                for j in 0..cols {
                    out[i * cols + j] = c[i * n + c0 + j];
                }
            }
            // SAFETY: columns c0..c0+cols of `b` exist; `out` is m x cols row-major.
            unsafe {
                let bp = b.data.as_ptr().offset(c0 as isize * csb);
                T::gemm_raw(m, k, cols, T::one(), a.data.as_ptr(), rsa, csa, bp, rsb, csb, beta, out.as_mut_ptr(), cols as isize, 1);
            }
            out
        });
        for (bi, out) in parts.into_iter().enumerate() {
            let c0 = bi * COL_CHUNK;
            let cols = COL_CHUNK.min(n - c0);
            for i in 0..m {
                c[i * n + c0..i * n + c0 + cols].copy_from_slice(&out[i * cols..(i + 1) * cols]);
            }
        }
    }
}

fn at<T: Scalar>(m: &Mat<'_, T>, i: usize, j: usize) -> T {
    let (rs, cs) = m.strides();
    m.data[i * rs as usize + j * cs as usize]
}

fn scale_into<T: Scalar>(cc: &mut [T], beta: T) {
    if beta == T::zero() {
        cc.fill(T::zero());
    } else if beta != T::one() {
        cc.iter_mut().for_each(|v| *v = *v * beta);
    }
}

/// Row-contiguous `b`: each output row accumulates `a[i, p] * b[p, ..]` in `p` order.
fn thin_axpy<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], m: usize, k: usize, n: usize) {
    let rsb = b.strides().0 as usize;
    for (i, ci) in c.chunks_mut(n).enumerate().take(m) {
        par::for_each_chunk_mut(ci, COL_CHUNK, |bi, cc| {
            let j0 = bi * COL_CHUNK;
            scale_into(cc, beta);
            for p in 0..k {
                let av = at(&a, i, p);
                let row = &b.data[p * rsb + j0..p * rsb + j0 + cc.len()];
                for (x, &y) in cc.iter_mut().zip(row) {
                    *x = *x + av * y;
                }
            }
        });
    }
}

/// Column-contiguous `b`: each output is one dot product over `p`.
fn thin_dot<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], m: usize, k: usize, n: usize) {
    let csb = b.strides().1 as usize;
    for (i, ci) in c.chunks_mut(n).enumerate().take(m) {
        let arow: Vec<T> = (0..k).map(|p| at(&a, i, p)).collect();
        par::for_each_chunk_mut(ci, COL_CHUNK, |bi, cc| {
            let j0 = bi * COL_CHUNK;
            for (jj, x) in cc.iter_mut().enumerate() {
                let col = &b.data[(j0 + jj) * csb..(j0 + jj) * csb + k];
                let dot = arow.iter().zip(col).fold(T::zero(), |s, (&u, &v)| s + u * v);
                *x = if beta == T::zero() { dot } else { beta * *x + dot };
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in `0..width`.
fn valid_cols(g: &ConvGeom, k: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride);
    let hi = if g.width + g.pad > k { ((g.width + g.pad - k - 1) / g.stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (OH*OW)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        return x[..g.channels * ncol].to_vec();
    }
    let mut cols = vec![T::zero(); g.col_rows() * ncol];
    let per_channel = g.kh * g.kw * ncol;
    par::for_each_chunk_mut(&mut cols, per_channel, |c, block| {
        let img = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut block[(ky * g.kw + kx) * ncol..(ky * g.kw + kx + 1) * ncol];
                let (lo, hi) = valid_cols(&g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let src = &img[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst = &mut row[oy * ow + lo..oy * ow + hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (d, s) in dst.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Folds a column matrix back onto a `C x H x W` image, accumulating overlaps.
pub fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        return cols[..g.channels * ncol].to_vec();
    }
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    par::for_each_chunk_mut(&mut x, g.height * g.width, |c, img| {
        let block = &cols[c * g.kh * g.kw * ncol..(c + 1) * g.kh * g.kw * ncol];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &block[(ky * g.kw + kx) * ncol..(ky * g.kw + kx + 1) * ncol];
                let (lo, hi) = valid_cols(&g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    let dst = &mut img[iy as usize * g.width + ix0..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    } else {
                        for (d, s) in dst.iter_mut().step_by(g.stride).zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    });
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_on_all_split_paths() {
        for &(m, k, n) in &[(3, 4, 5), (130, 40, 20), (5, 70, 3000), (1, 9, 700), (11, 1, 300), (2, 30, 1500)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
            let mut c = vec![0.0; m * n];
            gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut c);
            assert_eq!(c, naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn thin_paths_handle_transposed_b_and_accumulation() {
        for &(m, k, n) in &[(1, 300, 500), (3, 7, 2100), (6, 2, 400)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let want = naive(&a, &b, m, k, n);
            let mut c = vec![1.0; m * n];
            gemm(Mat::new(&a, m, k), Mat::new(&bt, n, k).t(), 2.0, &mut c);
            assert_eq!(c, want.iter().map(|v| v + 2.0).collect::<Vec<_>>());
            let mut c = vec![f64::NAN; m * n];
            gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut c);
            assert_eq!(c, want);
        }
    }

    #[test]
    fn gemm_transposed_views() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i * i) as f64).collect();
        // a^T stored as k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(Mat::new(&at, k, m).t(), Mat::new(&b, k, n), 0.0, &mut c);
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { channels: 2, height: 5, width: 6, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn im2col_naive(x: &[f64], g: ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.col_rows() * oh * ow];
        for c in 0..g.channels {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                out[((c * g.kh + ky) * g.kw + kx) * oh * ow + oy * ow + ox] = x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unfold_matches_direct_indexing() {
        for (k, stride, pad) in [(1, 1, 0), (1, 2, 0), (2, 2, 0), (3, 1, 1), (3, 2, 1), (4, 4, 0), (5, 1, 2), (3, 1, 0), (3, 3, 2), (2, 1, 1)] {
            for (h, w) in [(7, 9), (8, 8), (4, 5)] {
                if h + 2 * pad < k || w + 2 * pad < k {
                    continue;
                }
                let g = ConvGeom { channels: 2, height: h, width: w, kh: k, kw: k, stride, pad };
                let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.71).sin()).collect();
                assert_eq!(im2col(&x, g), im2col_naive(&x, g), "{g:?}");
                let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.13).cos()).collect();
                let lhs: f64 = im2col_naive(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(col2im(&y, g)).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{g:?}");
            }
        }
    }
}
