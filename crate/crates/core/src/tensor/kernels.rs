//! CPU kernels: row-major GEMM wrappers and the im2col/col2im pair used by
//! both convolution directions.

use super::Real;

/// Storage order of a row-major matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    /// Stored as `rows x cols` of the logical operand.
    No,
    /// Stored as the transpose of the logical operand.
    Yes,
}

/// `c[m x n] = alpha * op(a)[m x k] * op(b)[k x n] + beta * c`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index reachable through these
    // dimensions and strides.
    unsafe {
        T::gemm_raw(
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

/// Geometry of one image plane seen through a `k x k` window.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `image` (C x H x W) into `cols` ((C*k*k) x (out_h*out_w)).
pub(crate) fn im2col<T: Real>(image: &[T], win: &Window, cols: &mut [T]) {
    let Window {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = *win;
    let ncols = out_h * out_w;
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih >= height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * width..(ih as usize + 1) * width];
                    for (ow, slot) in line.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *slot = if iw < 0 || iw >= width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `image`.
pub(crate) fn col2im<T: Real>(cols: &[T], win: &Window, image: &mut [T]) {
    let Window {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h,
        out_w,
    } = *win;
    let ncols = out_h * out_w;
    for c in 0..channels {
        let plane = &mut image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * width..(ih as usize + 1) * width];
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < width as isize {
                            dst[iw as usize] += src[oh * out_w + ow];
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

    fn naive(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, n, k) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, m, n, k);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb, aa, bb) in [
            (Trans::No, Trans::No, &a, &b),
            (Trans::Yes, Trans::No, &at, &b),
            (Trans::No, Trans::Yes, &a, &bt),
            (Trans::Yes, Trans::Yes, &at, &bt),
        ] {
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, n, k, 1.0, aa, bb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_rows_are_independent_of_position() {
        // Row i of the product must not depend on where it sits in the lhs.
        let (m, n, k) = (37, 19, 23);
        let a: Vec<f32> = (0..m * k).map(|v| ((v * 7919 % 101) as f32 - 50.0) / 13.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| ((v * 104729 % 97) as f32 - 48.0) / 11.0).collect();
        let mut c = vec![0.0f32; m * n];
        gemm(Trans::No, Trans::No, m, n, k, 1.0, &a, &b, 0.0, &mut c);
        let perm: Vec<usize> = (0..m).map(|i| (i * 5 + 3) % m).collect();
        let mut pa = vec![0.0f32; m * k];
        for (dst, &src) in perm.iter().enumerate() {
            pa[dst * k..(dst + 1) * k].copy_from_slice(&a[src * k..(src + 1) * k]);
        }
        let mut pc = vec![0.0f32; m * n];
        gemm(Trans::No, Trans::No, m, n, k, 1.0, &pa, &b, 0.0, &mut pc);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..n {
                assert_eq!(pc[dst * n + j].to_bits(), c[src * n + j].to_bits());
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 4,
            stride: 2,
            pad: 1,
            out_h: 2,
            out_w: 3,
        };
        let x: Vec<f64> = (0..60).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols()).map(|v| (v as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
