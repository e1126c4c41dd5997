//! Greedy ranking of discovered directions by their effect on the frozen
//! classifier.
//!
//! Every (direction, sign) pair is a candidate. Each round evaluates all
//! remaining candidates on the surviving image pool, keeps the one with the
//! largest mean shift in target-class probability if it clears the
//! threshold, and removes the images that candidate explains. Per-image
//! deltas do not depend on the pool composition, so they are computed once
//! and the greedy loop itself is pure arithmetic.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::diffusion::{ddim_invert, ddim_sample, NoisePredictor, NoiseSchedule};
use crate::directions::{apply_direction, DirectionBank};
use crate::error::{Error, Result};
use crate::imageio::{clamp01, Pixels};
use crate::semantic_ae::{semantic_code_for, SemanticCode, SemanticEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    /// Shift magnitude applied when scoring candidates.
    pub alpha_rank: f64,
    /// Minimum mean probability shift for a candidate to be retained.
    pub tau_rank: f64,
    /// Images whose individual delta exceeds this are considered explained
    /// and removed from the pool.
    pub per_image_delta: f64,
    /// Maximum number of selections.
    pub n_max: usize,
    /// Class whose probability the shift should increase.
    pub target_class: usize,
    /// Number of pool images drawn from the opposite class.
    pub pool_size: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            alpha_rank: 3.0,
            tau_rank: 0.2,
            per_image_delta: 0.3,
            n_max: 3,
            target_class: 1,
            pool_size: 64,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.alpha_rank <= 0.0 || !self.alpha_rank.is_finite() {
            return Err(Error::Input("ranking.alpha_rank must be positive".into()));
        }
        if !(0.0 < self.tau_rank && self.tau_rank < 1.0) {
            return Err(Error::Input("ranking.tau_rank must lie in (0,1)".into()));
        }
        if !(0.0 < self.per_image_delta && self.per_image_delta < 1.0) {
            return Err(Error::Input("ranking.per_image_delta must lie in (0,1)".into()));
        }
        if self.n_max == 0 || self.n_max > 2 * k {
            return Err(Error::Input(format!(
                "ranking.n_max must lie in 1..={} (2K candidates)",
                2 * k
            )));
        }
        if self.target_class >= crate::classifier::N_CLASSES {
            return Err(Error::Input("ranking.target_class out of range".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Input("ranking.pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// A selected (direction, sign) pair with its effect at selection time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedDirection {
    pub direction: usize,
    /// +1 or -1.
    pub sign: i8,
    pub alpha: f64,
    /// Mean target-class probability shift over the pool as it was when this
    /// candidate was selected.
    pub mean_delta: f64,
    /// Pool image ids removed after this selection.
    pub explained_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolTraceEntry {
    pub round: usize,
    pub direction: usize,
    pub sign: i8,
    pub mean_delta: f64,
    pub pool_before: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub selections: Vec<RankedDirection>,
    pub pool_trace: Vec<PoolTraceEntry>,
}

/// Anything that can report the target-class probability of an image.
/// Lets the scoring path be exercised with scripted stubs.
pub trait TargetProb: Sync {
    fn target_prob(&self, x: &Pixels, target: usize) -> f64;
}

impl TargetProb for ClassifierModel {
    fn target_prob(&self, x: &Pixels, target: usize) -> f64 {
        self.probs_unchecked(x)[target]
    }
}

/// Frozen models needed to score a shift.
pub struct PipelineModels<'a> {
    pub encoder: &'a SemanticEncoder,
    pub denoiser: &'a dyn NoisePredictor,
    pub classifier: &'a ClassifierModel,
    pub schedule: &'a NoiseSchedule,
    pub n_steps: usize,
}

/// Regenerate from a cached inversion under a shifted code and report the
/// probability delta against the unshifted image.
#[allow(clippy::too_many_arguments)]
pub fn candidate_delta(
    x_t: &Pixels,
    shifted_code: &SemanticCode,
    base_prob: f64,
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    prob_model: &dyn TargetProb,
    target: usize,
) -> Result<f64> {
    let mut x_shifted = ddim_sample(x_t, shifted_code, denoiser, schedule, n_steps)?;
    clamp01(&mut x_shifted);
    Ok(prob_model.target_prob(&x_shifted, target) - base_prob)
}

/// Per-image probability deltas for one (direction, sign) candidate:
/// invert, shift the code by sign * alpha along direction k, regenerate,
/// classify.
pub fn score_shift(
    bank: &DirectionBank,
    k: usize,
    sign: f64,
    alpha: f64,
    pool: &[Pixels],
    models: &PipelineModels,
    target: usize,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Input("score_shift needs a non-empty pool".into()));
    }
    crate::nn::ordered_par_map(pool, |_, x| -> Result<f64> {
        let code = semantic_code_for(models.encoder, models.classifier, x)?;
        let x_t = ddim_invert(x, &code, models.denoiser, models.schedule, models.n_steps)?;
        let shifted = apply_direction(bank, k, &code, sign * alpha)?;
        let base = models.classifier.target_prob(x, target);
        candidate_delta(
            &x_t,
            &shifted,
            base,
            models.denoiser,
            models.schedule,
            models.n_steps,
            models.classifier,
            target,
        )
    })
    .into_iter()
    .collect()
}

/// Candidate order is fixed: directions ascending, positive sign before
/// negative. With strict comparison this implements the deterministic
/// tie-break (lower index, then positive sign).
pub fn candidate_order(k: usize) -> Vec<(usize, i8)> {
    (0..k).flat_map(|d| [(d, 1i8), (d, -1i8)]).collect()
}

/// Pure greedy loop over a precomputed delta matrix [candidate, pool image].
pub fn greedy_rank(
    candidates: &[(usize, i8)],
    deltas: &Array2<f64>,
    ids: &[usize],
    cfg: &RankingConfig,
) -> RankingOutcome {
    assert_eq!(deltas.nrows(), candidates.len());
    assert_eq!(deltas.ncols(), ids.len());
    let mut alive: Vec<bool> = vec![true; ids.len()];
    let mut taken: Vec<bool> = vec![false; candidates.len()];
    let mut selections = Vec::new();
    let mut pool_trace = Vec::new();
    let mut round = 0usize;

    while selections.len() < cfg.n_max {
        let n_alive = alive.iter().filter(|&&a| a).count();
        if n_alive == 0 {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (ci, _) in candidates.iter().enumerate() {
            if taken[ci] {
                continue;
            }
            let mut sum = 0.0;
            for (ii, &a) in alive.iter().enumerate() {
                if a {
                    sum += deltas[[ci, ii]];
                }
            }
            let mean = sum / n_alive as f64;
            if best.is_none_or(|(_, bm)| mean > bm) {
                best = Some((ci, mean));
            }
        }
        let (ci, mean) = match best {
            Some(b) => b,
            None => break,
        };
        if mean.is_nan() || mean <= cfg.tau_rank {
            break;
        }
        taken[ci] = true;
        let mut explained = Vec::new();
        for (ii, a) in alive.iter_mut().enumerate() {
            if *a && deltas[[ci, ii]] > cfg.per_image_delta {
                *a = false;
                explained.push(ids[ii]);
            }
        }
        pool_trace.push(PoolTraceEntry {
            round,
            direction: candidates[ci].0,
            sign: candidates[ci].1,
            mean_delta: mean,
            pool_before: n_alive,
            removed: explained.len(),
        });
        selections.push(RankedDirection {
            direction: candidates[ci].0,
            sign: candidates[ci].1,
            alpha: cfg.alpha_rank,
            mean_delta: mean,
            explained_ids: explained,
        });
        round += 1;
    }
    RankingOutcome {
        selections,
        pool_trace,
    }
}

/// Full ranking: evaluate all 2K signed candidates on the pool and run the
/// greedy loop. Inversions are cached per image; per-image deltas are
/// pool-independent so the matrix is computed once.
pub fn rank_directions(
    bank: &DirectionBank,
    pool: &[(usize, Pixels)],
    models: &PipelineModels,
    cfg: &RankingConfig,
) -> Result<RankingOutcome> {
    cfg.validate(bank.k())?;
    if pool.is_empty() {
        return Ok(RankingOutcome {
            selections: Vec::new(),
            pool_trace: Vec::new(),
        });
    }
    struct Prepared {
        code: SemanticCode,
        x_t: Pixels,
        base: f64,
    }
    let prepared: Vec<Prepared> = crate::nn::ordered_par_map(pool, |_, (_, x)| -> Result<Prepared> {
        let code = semantic_code_for(models.encoder, models.classifier, x)?;
        let x_t = ddim_invert(x, &code, models.denoiser, models.schedule, models.n_steps)?;
        let base = models.classifier.target_prob(x, cfg.target_class);
        Ok(Prepared { code, x_t, base })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let candidates = candidate_order(bank.k());
    let mut deltas = Array2::<f64>::zeros((candidates.len(), pool.len()));
    for (ci, &(k, sign)) in candidates.iter().enumerate() {
        let row: Vec<f64> = crate::nn::ordered_par_map(&prepared, |_, prep| -> Result<f64> {
            let shifted = apply_direction(bank, k, &prep.code, sign as f64 * cfg.alpha_rank)?;
            candidate_delta(
                &prep.x_t,
                &shifted,
                prep.base,
                models.denoiser,
                models.schedule,
                models.n_steps,
                models.classifier,
                cfg.target_class,
            )
        })
        .into_iter()
        .collect::<Result<_>>()?;
        for (ii, v) in row.into_iter().enumerate() {
            deltas[[ci, ii]] = v;
        }
    }
    let ids: Vec<usize> = pool.iter().map(|(id, _)| *id).collect();
    Ok(greedy_rank(&candidates, &deltas, &ids, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::directions::DirectionsConfig;
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    fn cfg() -> RankingConfig {
        RankingConfig {
            alpha_rank: 2.0,
            tau_rank: 0.1,
            per_image_delta: 0.3,
            n_max: 3,
            target_class: 1,
            pool_size: 8,
        }
    }

    #[test]
    fn empty_pool_gives_empty_result() {
        let candidates = candidate_order(2);
        let deltas = Array2::zeros((4, 0));
        let out = greedy_rank(&candidates, &deltas, &[], &cfg());
        assert!(out.selections.is_empty());
    }

    #[test]
    fn scripted_two_winner_case() {
        // candidate (0,+) mean 0.4, (1,+) mean 0.2, everything else 0
        let candidates = candidate_order(2);
        let mut deltas = Array2::zeros((4, 4));
        for i in 0..4 {
            deltas[[0, i]] = 0.4; // (0, +)
            deltas[[2, i]] = 0.2; // (1, +)
        }
        let mut c = cfg();
        c.per_image_delta = 0.5; // no image is individually explained
        let out = greedy_rank(&candidates, &deltas, &[10, 11, 12, 13], &c);
        assert_eq!(out.selections.len(), 2);
        assert_eq!(
            (out.selections[0].direction, out.selections[0].sign),
            (0, 1)
        );
        assert_eq!(
            (out.selections[1].direction, out.selections[1].sign),
            (1, 1)
        );
        assert!((out.selections[0].mean_delta - 0.4).abs() < 1e-12);
        assert!((out.selections[1].mean_delta - 0.2).abs() < 1e-12);

        // with a lower removal threshold candidate A explains the whole pool
        // and the loop stops there
        let mut c2 = cfg();
        c2.per_image_delta = 0.35;
        let out2 = greedy_rank(&candidates, &deltas, &[10, 11, 12, 13], &c2);
        assert_eq!(out2.selections.len(), 1);
        assert_eq!(out2.selections[0].explained_ids, vec![10, 11, 12, 13]);
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let candidates = candidate_order(3);
        let deltas = Array2::from_elem((6, 5), 0.05);
        let out = greedy_rank(&candidates, &deltas, &[0, 1, 2, 3, 4], &cfg());
        assert!(out.selections.is_empty());
    }

    #[test]
    fn greedy_dominance_and_pool_monotonicity_on_random_matrices() {
        let mut rng = stream(33, "greedy");
        for trial in 0..50 {
            let k = 2 + (rng.gen::<f64>() * 3.0) as usize;
            let n = 3 + (rng.gen::<f64>() * 8.0) as usize;
            let candidates = candidate_order(k);
            let deltas =
                Array2::from_shape_fn((2 * k, n), |_| rng.gen::<f64>() * 1.2 - 0.4);
            let ids: Vec<usize> = (0..n).collect();
            let c = cfg();
            let out = greedy_rank(&candidates, &deltas, &ids, &c);
            if let Some(first) = out.selections.first() {
                // the first selection dominates a one-shot exhaustive scan
                let exhaustive_best = (0..2 * k)
                    .map(|ci| deltas.row(ci).mean().unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    (first.mean_delta - exhaustive_best).abs() < 1e-12,
                    "trial {trial}: greedy first {} vs exhaustive {exhaustive_best}",
                    first.mean_delta
                );
            }
            // explained ids pairwise disjoint, pool shrinks monotonically
            let mut seen = std::collections::HashSet::new();
            for sel in &out.selections {
                for id in &sel.explained_ids {
                    assert!(seen.insert(*id), "id {id} removed twice");
                }
                assert!(sel.mean_delta > c.tau_rank);
            }
            for w in out.pool_trace.windows(2) {
                assert!(w[1].pool_before <= w[0].pool_before - w[0].removed);
            }
        }
    }

    #[test]
    fn tie_break_prefers_lower_index_then_positive_sign() {
        let candidates = candidate_order(2);
        // (0,-) and (1,+) tie; lower direction index must win
        let mut deltas = Array2::zeros((4, 2));
        for i in 0..2 {
            deltas[[1, i]] = 0.5; // (0,-)
            deltas[[2, i]] = 0.5; // (1,+)
        }
        let out = greedy_rank(&candidates, &deltas, &[0, 1], &cfg());
        assert_eq!((out.selections[0].direction, out.selections[0].sign), (0, -1));
        // (1,+) vs (1,-) tie within one direction: positive wins
        let mut deltas = Array2::zeros((4, 2));
        for i in 0..2 {
            deltas[[2, i]] = 0.5;
            deltas[[3, i]] = 0.5;
        }
        let out = greedy_rank(&candidates, &deltas, &[0, 1], &cfg());
        assert_eq!((out.selections[0].direction, out.selections[0].sign), (1, 1));
    }

    /// Noise predictor that depends only on the conditioning code: eps_hat is
    /// a constant image whose value is a fixed linear functional of the code.
    struct LinearCondDenoiser {
        weights: Vec<f64>,
    }
    impl NoisePredictor for LinearCondDenoiser {
        fn predict_noise(&self, x_t: &Pixels, _t: usize, cond: &[f64]) -> Pixels {
            let v: f64 = self
                .weights
                .iter()
                .zip(cond)
                .map(|(w, c)| w * c)
                .sum::<f64>();
            Array3::from_elem(x_t.dim(), 0.02 * v)
        }
    }

    /// Probability stub that is linear in the image mean.
    struct LinearProb;
    impl TargetProb for LinearProb {
        fn target_prob(&self, x: &Pixels, _target: usize) -> f64 {
            x.mean().unwrap()
        }
    }

    #[test]
    fn sign_flip_negates_deltas_for_linear_stub() {
        // generator linear in the code, probability linear in the image:
        // the per-image delta must negate exactly under a sign flip
        let dim = 6;
        let bank = DirectionBank::new(
            dim,
            DirectionsConfig {
                k: 2,
                d_f: 4,
                mlp1_hidden: 5,
                mlp2_hidden: 5,
                ..DirectionsConfig::default()
            },
            9,
        )
        .unwrap();
        let schedule = make_schedule(40, 1e-3, 0.02).unwrap();
        let mut rng = stream(17, "linear-stub");
        let den = LinearCondDenoiser {
            weights: (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
        };
        let x = Array3::from_elem((1, 4, 4), 0.5);
        let code = SemanticCode::from_raw(
            dim - 2,
            2,
            (0..dim).map(|_| rng.gen::<f64>() * 0.4).collect(),
        );
        let x_t = crate::diffusion::ddim_invert(&x, &code, &den, &schedule, 10).unwrap();
        let base = LinearProb.target_prob(&x, 1);
        let mut deltas = Vec::new();
        for sign in [1.0, -1.0] {
            let shifted = apply_direction(&bank, 0, &code, sign * 1.5).unwrap();
            let d = candidate_delta(&x_t, &shifted, base, &den, &schedule, 10, &LinearProb, 1)
                .unwrap();
            deltas.push(d);
        }
        assert!(
            (deltas[0] + deltas[1]).abs() < 1e-9,
            "deltas {deltas:?} should negate"
        );
        // and the deltas are genuinely nonzero
        assert!(deltas[0].abs() > 1e-6);
    }

    #[test]
    fn zero_alpha_delta_equals_reconstruction_drift() {
        // alpha = 0 reduces the scoring path to plain reconstruction
        let dim = 6;
        let bank = DirectionBank::new(
            dim,
            DirectionsConfig {
                k: 2,
                d_f: 4,
                mlp1_hidden: 5,
                mlp2_hidden: 5,
                ..DirectionsConfig::default()
            },
            9,
        )
        .unwrap();
        let schedule = make_schedule(40, 1e-3, 0.02).unwrap();
        let den = LinearCondDenoiser {
            weights: vec![0.3, -0.2, 0.1, 0.05, -0.4, 0.2],
        };
        let x = Array3::from_elem((1, 4, 4), 0.5);
        let code = SemanticCode::from_raw(dim - 2, 2, vec![0.1, 0.2, -0.1, 0.3, 0.6, 0.4]);
        let x_t = crate::diffusion::ddim_invert(&x, &code, &den, &schedule, 10).unwrap();
        let base = LinearProb.target_prob(&x, 1);
        let shifted = apply_direction(&bank, 0, &code, 0.0).unwrap();
        let delta =
            candidate_delta(&x_t, &shifted, base, &den, &schedule, 10, &LinearProb, 1).unwrap();
        // recon drift computed independently
        let mut recon =
            crate::diffusion::ddim_sample(&x_t, &code, &den, &schedule, 10).unwrap();
        crate::imageio::clamp01(&mut recon);
        let drift = LinearProb.target_prob(&recon, 1) - base;
        assert!((delta - drift).abs() < 1e-12);
        // probability deltas always live in [-1, 1]
        assert!((-1.0..=1.0).contains(&delta));
    }
}
