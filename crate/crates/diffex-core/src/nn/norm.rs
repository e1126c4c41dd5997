//! Group normalization over single samples.
//!
//! Chosen over batch norm so that per-image statistics keep inference
//! independent of batch composition (and training deterministic under the
//! chunked batch reduction).

use ndarray::{Array3, ArrayView3};

use super::Layout;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: usize,
    beta: usize,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Per-group statistics needed by the backward pass.
#[derive(Debug, Clone)]
pub struct GnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(l: &mut Layout, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "groups must divide channels");
        GroupNorm {
            gamma: l.alloc(channels),
            beta: l.alloc(channels),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn init(&self, p: &mut [f64]) {
        p[self.gamma..self.gamma + self.channels].fill(1.0);
        p[self.beta..self.beta + self.channels].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: ArrayView3<f64>) -> (Array3<f64>, GnCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut mean = vec![0.0; self.groups];
        let mut inv_std = vec![0.0; self.groups];
        let mut y = x.to_owned();
        for gi in 0..self.groups {
            let sl = ndarray::s![gi * cg..(gi + 1) * cg, .., ..];
            let xg = x.slice(sl);
            let m = xg.sum() / n;
            let var = xg.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            mean[gi] = m;
            inv_std[gi] = is;
            let gamma = &p[self.gamma..self.gamma + c];
            let beta = &p[self.beta..self.beta + c];
            let mut yg = y.slice_mut(sl);
            for (ci, mut plane) in yg.outer_iter_mut().enumerate() {
                let ch = gi * cg + ci;
                for v in plane.iter_mut() {
                    *v = gamma[ch] * (*v - m) * is + beta[ch];
                }
            }
        }
        (y, GnCache { mean, inv_std })
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView3<f64>,
        cache: &GnCache,
        dy: ArrayView3<f64>,
    ) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = p[self.gamma..self.gamma + c].to_vec();
        let mut dx = Array3::<f64>::zeros((c, h, w));
        for gi in 0..self.groups {
            let m = cache.mean[gi];
            let is = cache.inv_std[gi];
            // accumulate sums of dxhat and dxhat*xhat over the group
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x[[ch, i, j]] - m) * is;
                        let d = dy[[ch, i, j]];
                        let dxh = d * gamma[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        g[self.gamma + ch] += d * xh;
                        g[self.beta + ch] += d;
                    }
                }
            }
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x[[ch, i, j]] - m) * is;
                        let dxh = dy[[ch, i, j]] * gamma[ch];
                        dx[[ch, i, j]] = is * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, max_rel_err};
    use ndarray::{Array3, ArrayView3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groupnorm_grads_match_fd() {
        let mut l = Layout::new();
        let gn = GroupNorm::new(&mut l, 4, 2);
        let mut params = vec![0.0; l.len()];
        gn.init(&mut params);
        // non-trivial gamma/beta so the test exercises them
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        crate::nn::init_normal(&mut params, 0.5, &mut rng);
        for v in params.iter_mut() {
            *v += 1.0;
        }
        let x = Array3::from_shape_fn((4, 3, 3), |(a, b, c)| ((a * 11 + b * 5 + c) as f64 * 0.23).sin());

        let loss = |p: &[f64]| {
            let (y, _) = gn.forward(p, x.view());
            y.iter().map(|v| v * v * 0.5).sum::<f64>()
        };
        let fd = finite_diff_grad(&mut params, loss);

        let (y, cache) = gn.forward(&params, x.view());
        let mut g = vec![0.0; params.len()];
        let dx = gn.backward(&params, &mut g, x.view(), &cache, y.view());
        assert!(max_rel_err(&g, &fd) < 1e-6, "param err {}", max_rel_err(&g, &fd));

        let mut xv = x.clone().into_raw_vec_and_offset().0;
        let params2 = params.clone();
        let gn2 = gn.clone();
        let fd_x = finite_diff_grad(&mut xv, |xe| {
            let xa = ArrayView3::from_shape((4, 3, 3), xe).unwrap();
            let (y, _) = gn2.forward(&params2, xa);
            y.iter().map(|v| v * v * 0.5).sum::<f64>()
        });
        assert!(max_rel_err(dx.as_slice().unwrap(), &fd_x) < 1e-5);
    }
}
