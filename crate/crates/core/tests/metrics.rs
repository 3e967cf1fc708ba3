mod common;

use common::{pearson_oracle, ranks_oracle, spearman_oracle};
use cvqd_core::metrics::{average_ranks, evaluate_model, plcc, srcc, EvalLabel, ScorePairs};
use cvqd_core::model_zoo::{build_encoder, ModelConfig};
use cvqd_core::synth_data::{build_dataset, DataConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A vector of length `n`; every third vector draws from a handful of
/// values so ties are common.
fn random_vector(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if tied {
                rng.random_range(0..5) as f64 * 0.25
            } else {
                rng.random_range(-1e3..1e3)
            }
        })
        .collect()
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = if case == 0 {
            1000
        } else {
            rng.random_range(3..=1000)
        };
        let x = random_vector(&mut rng, n, case % 3 == 0);
        // correlated with x so the coefficients are not all near zero
        let noise = random_vector(&mut rng, n, case % 3 == 1);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| 0.7 * a + e).collect();
        let Ok(pairs) = ScorePairs::new(x.clone(), y.clone()) else {
            continue;
        };
        let (Ok(p), Ok(s)) = (plcc(&pairs), srcc(&pairs)) else {
            // only constant vectors may be undefined
            assert!(x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]));
            continue;
        };
        assert_eq!(average_ranks(&x), ranks_oracle(&x));
        let dp = (p - pearson_oracle(&x, &y)).abs();
        let ds = (s - spearman_oracle(&x, &y)).abs();
        assert!(
            dp <= 1e-12 && ds <= 1e-12,
            "case {case} n {n}: plcc off by {dp:e}, srcc off by {ds:e}"
        );
        worst = worst.max(dp).max(ds);
    }
    eprintln!("largest deviation from the oracles: {worst:e}");
}

#[test]
fn untrained_model_is_uncorrelated_with_scores() {
    // Under the permutation null, |srcc| >= 0.5 on 100 items happens with
    // probability far below 1e-3; check that by Monte Carlo, then use 0.5 as
    // the bound for a fresh model.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base: Vec<f64> = (0..100).map(f64::from).collect();
    let mut exceed = 0;
    for _ in 0..2000 {
        let mut perm = base.clone();
        perm.shuffle(&mut rng);
        let r = srcc(&ScorePairs::new(perm, base.clone()).unwrap()).unwrap();
        exceed += usize::from(r.abs() >= 0.5);
    }
    assert_eq!(exceed, 0, "bound 0.5 is too loose for the permutation null");

    let data = build_dataset(&DataConfig::default()).unwrap();
    let clips: Vec<_> = data
        .train
        .iter()
        .chain(&data.test)
        .take(100)
        .cloned()
        .collect();
    let model = build_encoder(&ModelConfig::vit(32, 4, 4).with_tubelet(2, 8, 8), 123).unwrap();
    let report = evaluate_model(&model, &clips, &EvalLabel::new("random", "synthetic", 0)).unwrap();
    let s = report
        .srcc
        .expect("a random model gives non-constant scores");
    assert!(s.abs() < 0.5, "untrained model srcc {s}");
}

proptest! {
    #[test]
    fn plcc_is_affine_invariant_up_to_sign(
        x in prop::collection::vec(-100.0f64..100.0, 3..60),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-30.0..30.0)).collect();
        let mapped: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (Ok(r0), Ok(r1)) = (
            plcc(&ScorePairs::new(x.clone(), y.clone()).unwrap()),
            plcc(&ScorePairs::new(mapped, y).unwrap()),
        ) else {
            return Ok(());
        };
        prop_assert!((r1 - a.signum() * r0).abs() < 1e-9, "{} vs {}", r1, r0);
    }

    #[test]
    fn srcc_depends_only_on_order(
        x in prop::collection::vec(-5.0f64..5.0, 3..60),
        y in prop::collection::vec(-5.0f64..5.0, 60),
    ) {
        let y = y[..x.len()].to_vec();
        let mapped: Vec<f64> = x.iter().map(|v| v.exp() + v.powi(3)).collect();
        prop_assume!(average_ranks(&mapped) == average_ranks(&x));
        let a = srcc(&ScorePairs::new(x, y.clone()).unwrap());
        let b = srcc(&ScorePairs::new(mapped, y).unwrap());
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}
