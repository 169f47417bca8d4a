//! Raw-slice kernels behind the differentiable ops.

/// `c = a·b` (or `c += a·b` when `accumulate`), all row-major.
///
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major regions whose lengths are asserted on entry.
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

/// Sliding-window geometry shared by convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x[C,H,W]` into `[C·k·k, H'·W']` patch columns with zero padding.
pub(crate) fn im2col(x: &[f64], g: Window) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    let mut cols = vec![0.0; g.rows() * npix];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping patches.
pub(crate) fn col2im(cols: &[f64], g: Window) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npix = ho * wo;
    let mut x = vec![0.0; g.channels * g.h * g.w];
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear sampling stencil at a clamped sub-pixel location.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the x (resp. y) coordinate was clamped, zeroing its derivative.
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl Stencil {
    pub fn at(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (xc, clamped_x) = clamp_coord(x, w);
        let (yc, clamped_y) = clamp_coord(y, h);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        Self {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            clamped_x,
            clamped_y,
        }
    }

    pub fn sample(&self, img: &[f64], w: usize) -> f64 {
        let (a, b, c, d) = self.corners(img, w);
        let top = a * (1.0 - self.fx) + b * self.fx;
        let bottom = c * (1.0 - self.fx) + d * self.fx;
        top * (1.0 - self.fy) + bottom * self.fy
    }

    /// Corner values (y0x0, y0x1, y1x0, y1x1).
    pub fn corners(&self, img: &[f64], w: usize) -> (f64, f64, f64, f64) {
        (
            img[self.y0 * w + self.x0],
            img[self.y0 * w + self.x1],
            img[self.y1 * w + self.x0],
            img[self.y1 * w + self.x1],
        )
    }

    /// Interpolation weights matching [`Stencil::corners`].
    pub fn weights(&self) -> [f64; 4] {
        [
            (1.0 - self.fx) * (1.0 - self.fy),
            self.fx * (1.0 - self.fy),
            (1.0 - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    pub fn indices(&self, w: usize) -> [usize; 4] {
        [
            self.y0 * w + self.x0,
            self.y0 * w + self.x1,
            self.y1 * w + self.x0,
            self.y1 * w + self.x1,
        ]
    }

    /// Partial derivatives of the sampled value w.r.t. (x, y).
    pub fn coord_grad(&self, img: &[f64], w: usize) -> (f64, f64) {
        let (a, b, c, d) = self.corners(img, w);
        let dx = if self.clamped_x {
            0.0
        } else {
            (b - a) * (1.0 - self.fy) + (d - c) * self.fy
        };
        let dy = if self.clamped_y {
            0.0
        } else {
            (c - a) * (1.0 - self.fx) + (d - b) * self.fx
        };
        (dx, dy)
    }
}

fn clamp_coord(v: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if v < 0.0 {
        (0.0, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window {
            channels: 2,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.channels * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stencil_clamps_and_zeroes_derivative() {
        let img = [0.0, 1.0, 2.0, 3.0];
        let s = Stencil::at(5.0, 0.0, 1, 4);
        assert!(s.clamped_x);
        assert_eq!(s.sample(&img, 4), 3.0);
        assert_eq!(s.coord_grad(&img, 4).0, 0.0);
        let s = Stencil::at(1.25, 0.0, 1, 4);
        assert!((s.sample(&img, 4) - 1.25).abs() < 1e-15);
        assert_eq!(s.coord_grad(&img, 4).0, 1.0);
    }
}
