//! Diffusion machinery: linear noise schedule, forward noising, one-step
//! clean-image estimate, and deterministic DDIM sampling / inversion.
//!
//! The sampler runs with eta = 0 throughout; inversion is only well defined
//! for the deterministic trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Pixels;

/// Beta/alpha/alpha-bar sequences for `t_max` steps. `alpha_bar(0)` is 1 by
/// convention; `alpha_bar(t)` for t in 1..=t_max is the cumulative product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// alpha-bar with the t=0 -> 1 convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn validate_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Input(format!(
                "step {t} out of range 0..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Input("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Input(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        betas,
        alphas,
        alpha_bars,
    })
}

fn check_same_shape(a: &Pixels, b: &Pixels) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(x0: &Pixels, t: usize, eps: &Pixels, s: &NoiseSchedule) -> Result<Pixels> {
    s.validate_t(t)?;
    check_same_shape(x0, eps)?;
    let ab = s.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0 * ca + eps * cb)
}

/// One-step clean-image estimate, the exact left-inverse of [`q_sample`]
/// when `eps_hat` equals the injected noise.
pub fn predict_x0(xt: &Pixels, t: usize, eps_hat: &Pixels, s: &NoiseSchedule) -> Result<Pixels> {
    s.validate_t(t)?;
    check_same_shape(xt, eps_hat)?;
    let ab = s.alpha_bar(t);
    if ab <= f64::EPSILON {
        return Err(Error::Numeric(format!(
            "alpha_bar({t}) = {ab} too small for x0 estimate"
        )));
    }
    let sq = ab.sqrt();
    let c = (1.0 - ab).sqrt();
    Ok((xt - &(eps_hat * c)) / sq)
}

/// Anything that predicts noise given (x_t, t, conditioning code).
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &Pixels, t: usize, cond: &[f64]) -> Pixels;
}

/// Strided step grid from t_max down to 0 inclusive, n_steps updates.
pub fn ddim_time_grid(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 {
        return Err(Error::Input("n_steps must be >= 1".into()));
    }
    if n_steps > t_max {
        return Err(Error::Input(format!(
            "n_steps {n_steps} exceeds schedule length {t_max}"
        )));
    }
    Ok((0..=n_steps)
        .rev()
        .map(|i| ((i * t_max) as f64 / n_steps as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM sampling from x_T to x_0 along the strided grid.
pub fn ddim_sample(
    x_t_start: &Pixels,
    cond: &[f64],
    denoiser: &dyn NoisePredictor,
    s: &NoiseSchedule,
    n_steps: usize,
) -> Result<Pixels> {
    let grid = ddim_time_grid(s.t_max, n_steps)?;
    let mut x = x_t_start.clone();
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = denoiser.predict_noise(&x, t, cond);
        let ab_t = s.alpha_bar(t);
        let ab_n = s.alpha_bar(t_next);
        let x0_hat = (&x - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        x = &x0_hat * ab_n.sqrt() + &eps * (1.0 - ab_n).sqrt();
    }
    Ok(x)
}

/// Deterministic DDIM inversion from x_0 up to x_T along the same grid.
/// Running [`ddim_sample`] on the result approximately reconstructs x_0.
pub fn ddim_invert(
    x0: &Pixels,
    cond: &[f64],
    denoiser: &dyn NoisePredictor,
    s: &NoiseSchedule,
    n_steps: usize,
) -> Result<Pixels> {
    let mut grid = ddim_time_grid(s.t_max, n_steps)?;
    grid.reverse();
    let mut x = x0.clone();
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = denoiser.predict_noise(&x, t, cond);
        let ab_t = s.alpha_bar(t);
        let ab_n = s.alpha_bar(t_next);
        let x0_hat = (&x - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        x = &x0_hat * ab_n.sqrt() + &eps * (1.0 - ab_n).sqrt();
    }
    Ok(x)
}

/// Sinusoidal timestep embedding (half sin, half cos, log-spaced frequencies).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}
