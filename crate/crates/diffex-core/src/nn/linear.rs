//! Fully connected layer on batched row vectors.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::{init_normal, Layout};

/// y = x W^T + b with W stored row-major as [dout, din].
#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(l: &mut Layout, din: usize, dout: usize) -> Self {
        let w = l.alloc(din * dout);
        let b = l.alloc(dout);
        Linear { w, b, din, dout }
    }

    /// He-style init scaled by `gain` (1.0 for linear outputs, 2.0 for ReLU fan-in).
    pub fn init(&self, p: &mut [f64], gain: f64, rng: &mut ChaCha8Rng) {
        let std = (gain / self.din as f64).sqrt();
        init_normal(&mut p[self.w..self.w + self.din * self.dout], std, rng);
        p[self.b..self.b + self.dout].fill(0.0);
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.dout, self.din), &p[self.w..self.w + self.din * self.dout])
            .expect("linear weight shape")
    }

    /// x: [batch, din] -> [batch, dout]
    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.din);
        let mut y = x.dot(&self.weight(p).t());
        let b = &p[self.b..self.b + self.dout];
        for mut row in y.rows_mut() {
            for (v, &bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        y
    }

    /// Accumulates dW, db into `g`; returns dx.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let dw = dy.t().dot(&x); // [dout, din]
        {
            let gw = &mut g[self.w..self.w + self.din * self.dout];
            for (a, &b) in gw.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            let gb = &mut g[self.b..self.b + self.dout];
            for row in dy.rows() {
                for (a, &b) in gb.iter_mut().zip(row.iter()) {
                    *a += b;
                }
            }
        }
        dy.dot(&self.weight(p))
    }
}
