//! 2-D convolution over single samples [C, H, W] via im2col + GEMM.
//!
//! Batch parallelism happens one level up (per image), so these routines
//! stay single-threaded and bit-deterministic.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand_chacha::ChaCha8Rng;

use super::{init_normal, Layout};

/// Unfold x [cin, h, w] into [cin*k*k, ho*wo] for kernel k, stride s, pad p.
pub fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = x.slice(ndarray::s![c, iy as usize, ..]);
                    let src = src_row.as_slice().expect("contiguous input row");
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input grid (adjoint of [`im2col`]).
pub fn col2im(
    dcols: ArrayView2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = dcols.row(row);
                let src = src_row.as_slice().expect("contiguous row");
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = dx.slice_mut(ndarray::s![c, iy as usize, ..]);
                    let dst = dst_row.as_slice_mut().expect("contiguous row");
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: usize,
    b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(l: &mut Layout, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = l.alloc(cout * cin * k * k);
        let b = l.alloc(cout);
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, p: &mut [f64], gain: f64, rng: &mut ChaCha8Rng) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        init_normal(
            &mut p[self.w..self.w + self.cout * self.cin * self.k * self.k],
            (gain / fan_in).sqrt(),
            rng,
        );
        p[self.b..self.b + self.cout].fill(0.0);
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.cout, self.cin * self.k * self.k),
            &p[self.w..self.w + self.cout * self.cin * self.k * self.k],
        )
        .expect("conv weight shape")
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, p: &[f64], x: ArrayView3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let mut y = self.weight(p).dot(&cols); // [cout, ho*wo]
        let b = &p[self.b..self.b + self.cout];
        for (mut row, &bi) in y.rows_mut().into_iter().zip(b) {
            for v in row.iter_mut() {
                *v += bi;
            }
        }
        y.into_shape_with_order((self.cout, ho, wo)).expect("conv out shape")
    }

    /// Accumulates dW, db into `g`; returns dx. Recomputes im2col instead of
    /// caching it, trading a little time for a lot of memory.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView3<f64>,
        dy: ArrayView3<f64>,
    ) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (cout, ho, wo) = dy.dim();
        debug_assert_eq!(cout, self.cout);
        let dy_mat = dy
            .into_shape_with_order((cout, ho * wo))
            .expect("dy contiguous");
        let cols = im2col(x, self.k, self.stride, self.pad);
        let dw = dy_mat.dot(&cols.t()); // [cout, cin*k*k]
        {
            let n = self.cout * self.cin * self.k * self.k;
            let gw = &mut g[self.w..self.w + n];
            for (a, &b) in gw.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            let gb = &mut g[self.b..self.b + self.cout];
            for (a, row) in gb.iter_mut().zip(dy_mat.rows()) {
                *a += row.sum();
            }
        }
        let dcols = self.weight(p).t().dot(&dy_mat); // [cin*k*k, ho*wo]
        col2im(dcols.view(), self.cin, h, w, self.k, self.stride, self.pad)
    }
}

/// Nearest-neighbour 2x upsampling; the backward pass sums each 2x2 cell.
#[derive(Debug, Clone, Copy)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let mut y = Array3::<f64>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ci, i, j]];
                    y[[ci, 2 * i, 2 * j]] = v;
                    y[[ci, 2 * i, 2 * j + 1]] = v;
                    y[[ci, 2 * i + 1, 2 * j]] = v;
                    y[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        y
    }

    pub fn backward(dy: ArrayView3<f64>) -> Array3<f64> {
        let (c, h2, w2) = dy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[ci, i, j]] = dy[[ci, 2 * i, 2 * j]]
                        + dy[[ci, 2 * i, 2 * j + 1]]
                        + dy[[ci, 2 * i + 1, 2 * j]]
                        + dy[[ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
        dx
    }
}
