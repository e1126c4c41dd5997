//! Minimal neural-network stack: flat f64 parameter vectors, explicit
//! forward/backward per layer, deterministic batch-gradient reduction.
//!
//! All parameters of a network live in one `Vec<f64>`; layers hold offsets
//! into it. That keeps optimizers, checkpoints, checksums and
//! finite-difference checks trivial at the cost of a little pointer math.

pub mod act;
pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use act::{relu, relu_backward, silu, silu_backward, softmax_row};
pub use adam::Adam;
pub use conv::{col2im, im2col, Conv2d, Upsample2x};
pub use linear::Linear;
pub use norm::GroupNorm;

/// Allocates offsets into a flat parameter vector.
#[derive(Debug, Default, Clone)]
pub struct Layout {
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Layout { len: 0 }
    }

    pub fn alloc(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Gaussian init with given std; used by layers for He/Xavier-style scaling.
pub fn init_normal(buf: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("std must be finite");
    for v in buf.iter_mut() {
        *v = dist.sample(rng);
    }
}

/// Standard-normal sample helper for noise tensors.
pub fn fill_standard_normal(buf: &mut [f64], rng: &mut ChaCha8Rng) {
    use rand_distr::StandardNormal;
    for v in buf.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Sum per-sample gradients over a batch with a *fixed* chunk structure, so
/// the reduction order (and therefore the result, bit for bit) does not
/// depend on how many worker threads happen to run.
///
/// `f(index, item, grad_accum) -> loss` accumulates one sample's gradient.
/// Returns the summed gradient and the summed loss.
pub fn chunked_batch_grad<T, F>(items: &[T], n_chunks: usize, grad_len: usize, f: F) -> (Vec<f64>, f64)
where
    T: Sync,
    F: Fn(usize, &T, &mut [f64]) -> f64 + Sync,
{
    assert!(n_chunks >= 1);
    let chunk = items.len().div_ceil(n_chunks.min(items.len()).max(1));
    let partials: Vec<(Vec<f64>, f64)> = items
        .par_chunks(chunk.max(1))
        .enumerate()
        .map(|(ci, slab)| {
            let base = ci * chunk.max(1);
            let mut grad = vec![0.0; grad_len];
            let mut loss = 0.0;
            for (j, item) in slab.iter().enumerate() {
                loss += f(base + j, item, &mut grad);
            }
            (grad, loss)
        })
        .collect();
    let mut grad = vec![0.0; grad_len];
    let mut loss = 0.0;
    for (g, l) in partials {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    (grad, loss)
}

/// Map a function over items in parallel, preserving input order.
pub fn ordered_par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Largest elementwise relative error between two gradient vectors, with a
/// small absolute floor so near-zero entries do not dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(params: &mut [f64], mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let p0 = params[i];
        let h = 1e-5 * p0.abs().max(1.0);
        params[i] = p0 + h;
        let lp = loss(params);
        params[i] = p0 - h;
        let lm = loss(params);
        params[i] = p0;
        grad[i] = (lp - lm) / (2.0 * h);
    }
    grad
}
