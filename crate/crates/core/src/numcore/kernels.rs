//! Slice-level compute kernels used by graph ops. Reduction order is fixed,
//! so results are bitwise reproducible.

use crate::scalar::Scalar;

fn check(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k && b >= k * n && c >= m * n, "gemm operand too small");
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    check(m, k, n, a.len(), b.len(), c.len());
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: dense row-major operands whose sizes were checked above.
    unsafe { S::gemm_strided(m, k, n, a, (k_, 1), b, (n_, 1), c, (n_, 1)) }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    check(m, k, n, a.len(), b.len(), c.len());
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm`; `b` is read through transposed strides.
    unsafe { S::gemm_strided(m, k, n, a, (k_, 1), b, (1, k_), c, (n_, 1)) }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    check(m, k, n, a.len(), b.len(), c.len());
    let (m_, n_) = (m as isize, n as isize);
    // SAFETY: as in `gemm`; `a` is read through transposed strides.
    unsafe { S::gemm_strided(m, k, n, a, (1, m_), b, (n_, 1), c, (n_, 1)) }
}

pub fn transpose<S: Scalar>(rows: usize, cols: usize, a: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `C×H×W` image into columns `offset..offset + H'·W'` of a
/// `(C·k·k)`-row patch matrix with row stride `ld`.
pub fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S], ld: usize, offset: usize) {
    let ncols = g.col_cols();
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
pub fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], ld: usize, offset: usize, x: &mut [S]) {
    let ncols = g.col_cols();
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (7, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 11) % 19) as f64 / 9.0 - 1.0).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, &b, &mut c);
        let bt = transpose(3, 4, &b);
        let mut c_nt = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c_nt);
        let at = transpose(2, 3, &a);
        let mut c_tn = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut c_tn);
        assert_eq!(c, c_nt);
        assert_eq!(c, c_tn);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 3) % 5) as f64).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols, g.col_cols(), 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, g.col_cols(), 0, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
