//! Low-level numeric kernels shared by the graph ops.

/// `c = op(a) · op(b) + beta · c` with row-major contiguous operands.
/// `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the strides used here,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a same-padded convolution over 1 or 2 spatial axes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }

    pub fn cols(&self) -> usize {
        self.h * self.w
    }

    /// Visits every (col row, output position, input index) triple whose input
    /// index lies inside the zero-padded image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ch = (self.k_h / 2) as isize;
        let cw = (self.k_w / 2) as isize;
        let d = self.dilation as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        for ci in 0..self.c_in {
            for ky in 0..self.k_h {
                let oy = (ky as isize - ch) * d;
                for kx in 0..self.k_w {
                    let ox = (kx as isize - cw) * d;
                    let row = (ci * self.k_h + ky) * self.k_w + kx;
                    for y in 0..h {
                        let sy = y + oy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x_lo = (-ox).max(0);
                        let x_hi = (w - ox).min(w);
                        for x in x_lo..x_hi {
                            let src = ((ci as isize * h + sy) * w + x + ox) as usize;
                            f(row, (y * w + x) as usize, src);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut col = vec![0.0; self.rows() * cols];
        self.for_each(|row, pos, src| col[row * cols + pos] = x[src]);
        col
    }

    pub fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let cols = self.cols();
        self.for_each(|row, pos, src| dx[src] += col[row * cols + pos]);
    }
}

/// Gaussian CDF via the exact error function.
#[inline]
pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
