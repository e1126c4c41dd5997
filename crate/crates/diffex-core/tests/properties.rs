//! Property tests for the algebraic invariants.

use diffex_core::diffusion::{make_schedule, predict_x0, q_sample};
use diffex_core::directions::{apply_direction, DirectionBank, DirectionsConfig};
use diffex_core::semantic_ae::{kl_div, make_semantic_code, SemanticCode};
use ndarray::Array3;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// predict_x0 is the exact left-inverse of q_sample for any schedule,
    /// step, image and noise.
    #[test]
    fn q_sample_round_trip(
        t_max in 1usize..200,
        beta_start in 1e-5f64..0.01,
        beta_span in 0.0f64..0.15,
        seed in 0u64..1000,
        t_frac in 0.0f64..1.0,
    ) {
        let beta_end = (beta_start + beta_span).min(0.5);
        let s = make_schedule(t_max, beta_start, beta_end).unwrap();
        let t = 1 + ((t_max - 1) as f64 * t_frac) as usize;
        let mut rng = diffex_core::rng::stream_from(seed);
        let mut x0 = Array3::zeros((1, 4, 4));
        let mut eps = Array3::zeros((1, 4, 4));
        diffex_core::nn::fill_standard_normal(x0.as_slice_mut().unwrap(), &mut rng);
        diffex_core::nn::fill_standard_normal(eps.as_slice_mut().unwrap(), &mut rng);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&xt, t, &eps, &s).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    /// Alpha-bar sequences strictly decrease for every valid schedule.
    #[test]
    fn alpha_bar_strictly_decreasing(
        t_max in 1usize..500,
        beta_start in 1e-6f64..0.05,
        beta_span in 0.0f64..0.2,
    ) {
        let s = make_schedule(t_max, beta_start, (beta_start + beta_span).min(0.9)).unwrap();
        for w in s.alpha_bars.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        prop_assert!(s.alpha_bar(t_max) <= s.alpha_bar(1));
    }

    /// Applying a direction displaces the code by exactly |alpha|.
    #[test]
    fn shift_norm_is_alpha(
        seed in 0u64..500,
        k in 0usize..3,
        alpha in -5.0f64..5.0,
    ) {
        let dim = 8;
        let bank = DirectionBank::new(
            dim,
            DirectionsConfig {
                k: 3,
                d_f: 4,
                mlp1_hidden: 6,
                mlp2_hidden: 6,
                ..DirectionsConfig::default()
            },
            11,
        )
        .unwrap();
        let mut rng = diffex_core::rng::stream_from(seed);
        let mut data = vec![0.0; dim];
        diffex_core::nn::fill_standard_normal(&mut data, &mut rng);
        let code = SemanticCode::from_raw(dim - 2, 2, data);
        let shifted = apply_direction(&bank, k, &code, alpha).unwrap();
        let disp: f64 = shifted
            .iter()
            .zip(code.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        prop_assert!((disp - alpha.abs()).abs() < 1e-6);
    }

    /// KL divergence between binary distributions is non-negative and zero
    /// only at equality.
    #[test]
    fn kl_nonnegative(p in 0.001f64..0.999, q in 0.001f64..0.999) {
        let v = kl_div(&[p, 1.0 - p], &[q, 1.0 - q]);
        prop_assert!(v >= 0.0);
        if (p - q).abs() > 1e-9 {
            prop_assert!(v > 0.0);
        }
    }

    /// The semantic code always stores the probability row verbatim in its
    /// trailing slots.
    #[test]
    fn semantic_code_trailing_simplex(p in 0.0f64..1.0, z_seed in 0u64..100) {
        let mut rng = diffex_core::rng::stream_from(z_seed);
        let mut z = vec![0.0; 6];
        diffex_core::nn::fill_standard_normal(&mut z, &mut rng);
        let probs = [p, 1.0 - p];
        let code = make_semantic_code(&z, &probs).unwrap();
        prop_assert_eq!(code.probs(), &probs[..]);
        prop_assert_eq!(code.z(), &z[..]);
        let sum: f64 = code.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }
}
