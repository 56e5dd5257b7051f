mod common;

use approx::assert_relative_eq;
use mwdml::crossfit::make_fold_plan;
use mwdml::estimator::{
    empirical_moment, estimate_with_plan, fold_scores, gamma_multiway, gamma_reference, repetition_seed,
    run_dml_with_plans, solve_theta, variance, FoldScores,
};
use mwdml::nuisance::{CvConfig, LambdaGrid};
use mwdml::{run_dml, Aggregation, DmlConfig, Lambda, NuisanceLearner, PenaltyConfig, Robustness, ScoreComponents};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cv_lasso() -> NuisanceLearner {
    NuisanceLearner::Penalized(PenaltyConfig {
        lambda: Lambda::CrossValidated(CvConfig { grid: LambdaGrid::Geometric { n: 8, min_ratio: 0.01 }, n_folds: 3, seed: 5 }),
        ..PenaltyConfig::lasso()
    })
}

fn random_oracle(rng: &mut ChaCha8Rng, p: usize) -> NuisanceLearner {
    let mut draw = || (0..p).map(|_| common::gaussian(rng) * 0.3).collect::<Vec<_>>();
    NuisanceLearner::Oracle { g1: draw(), g2: draw(), m: draw() }
}

#[test]
fn multiway_meat_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..30 {
        let dims = if case % 5 == 4 { 3 } else { 2 };
        let counts: Vec<usize> = (0..dims).map(|_| rng.gen_range(2..=4)).collect();
        let k = 2;
        let dataset = common::random_dataset(&mut rng, &counts, 3, 1..=2);
        let plan = make_fold_plan(&counts, k, rng.gen()).unwrap();
        let learner = if case % 2 == 0 { NuisanceLearner::Zero } else { random_oracle(&mut rng, 3) };
        let nuisances = common::fit_all(&dataset, &plan, &learner);
        let theta = common::gaussian(&mut rng);
        let (a, b) = common::observation_scores(&dataset, &plan, &nuisances);
        let psi: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a * theta + b).collect();
        let expected = common::brute_force_gamma(&dataset, &plan, &psi);
        let scores = fold_scores(&dataset, &plan, &nuisances).unwrap();
        let got = gamma_multiway(&scores, &DVector::from_element(1, theta))[(0, 0)];
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "case {case}: {got} vs {expected}");
    }
}

#[test]
fn closed_form_root_matches_bisection() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for case in 0..20 {
        let counts = [rng.gen_range(3..=6), rng.gen_range(3..=6)];
        let dataset = common::random_dataset(&mut rng, &counts, 4, 0..=3);
        let plan = make_fold_plan(&counts, 3.min(counts[0]).min(counts[1]), rng.gen()).unwrap();
        let learner = if case % 2 == 0 { small_cv_lasso() } else { random_oracle(&mut rng, 4) };
        let nuisances = common::fit_all(&dataset, &plan, &learner);
        let (a, b) = common::observation_scores(&dataset, &plan, &nuisances);
        let root = common::bisection(common::moment_fn(&dataset, &plan, &a, &b), -1e3, 1e3);
        let (theta, _) = solve_theta(&fold_scores(&dataset, &plan, &nuisances).unwrap()).unwrap();
        assert!((theta[0] - root).abs() <= 1e-10, "case {case}: {} vs {root}", theta[0]);
    }
}

#[test]
fn identical_repetitions_add_no_dispersion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dataset = common::random_dataset(&mut rng, &[6, 6], 3, 0..=3);
    let plan = make_fold_plan(&[6, 6], 2, 77).unwrap();
    for aggregation in [Aggregation::Mean, Aggregation::Median] {
        let config = DmlConfig { learner: small_cv_lasso(), aggregation, ..DmlConfig::default() };
        let once = run_dml_with_plans(&dataset, &config, std::slice::from_ref(&plan)).unwrap();
        let thrice = run_dml_with_plans(&dataset, &config, &[plan.clone(), plan.clone(), plan.clone()]).unwrap();
        assert_relative_eq!(once.theta[0], thrice.theta[0], max_relative = 1e-15);
        assert_relative_eq!(once.sigma2[0][0], thrice.sigma2[0][0], max_relative = 1e-14);
        assert_eq!(thrice.s, 3);
    }
}

#[test]
fn single_repetition_equals_one_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dataset = common::random_dataset(&mut rng, &[6, 5], 3, 0..=3);
    let config = DmlConfig { learner: small_cv_lasso(), k: 2, seed: 99, ..DmlConfig::default() };
    let report = run_dml(&dataset, &config).unwrap();
    let plan = make_fold_plan(&[6, 5], 2, repetition_seed(99, 0)).unwrap();
    let (single, _) = estimate_with_plan(&dataset, &plan, &config).unwrap();
    assert_eq!(report.theta, single.theta);
    assert_eq!(report.sigma2, single.sigma2);
    assert!(report.ci.lo[0] <= report.theta[0] && report.theta[0] <= report.ci.hi[0]);
}

#[test]
fn robustness_modes_share_point_estimate_and_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dataset = common::random_dataset(&mut rng, &[6, 6], 3, 0..=3);
    let base = DmlConfig { learner: small_cv_lasso(), seed: 12, ..DmlConfig::default() };
    let thetas: Vec<Vec<f64>> = [Robustness::Multiway, Robustness::ZeroWay, Robustness::OneWay(0), Robustness::OneWay(1)]
        .into_iter()
        .map(|r| run_dml(&dataset, &DmlConfig { robustness: r, ..base.clone() }).unwrap().theta)
        .collect();
    assert!(thetas.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn scaling_scores_leaves_variance_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let folds: Vec<FoldScores> = (0..4)
        .map(|f| FoldScores {
            cell_count: 4,
            min_group: 2,
            cells: (0..4).map(|c| vec![f * 2 + c / 2, f * 2 + c % 2]).collect(),
            components: (0..4).map(|_| ScoreComponents::scalar(-1.0 + 0.3 * common::gaussian(&mut rng), common::gaussian(&mut rng))).collect(),
        })
        .collect();
    let scaled: Vec<FoldScores> = folds
        .iter()
        .map(|f| FoldScores {
            components: f.components.iter().map(|c| ScoreComponents { psi_a: &c.psi_a * 3.5, psi_b: &c.psi_b * 3.5 }).collect(),
            ..f.clone()
        })
        .collect();
    let (t1, j1) = solve_theta(&folds).unwrap();
    let (t2, j2) = solve_theta(&scaled).unwrap();
    assert_relative_eq!(t1[0], t2[0], max_relative = 1e-12);
    let s1 = variance(&j1, &gamma_multiway(&folds, &t1)).unwrap();
    let s2 = variance(&j2, &gamma_multiway(&scaled, &t2)).unwrap();
    assert_relative_eq!(s1[(0, 0)], s2[(0, 0)], max_relative = 1e-12);
}

fn vector_folds(rng: &mut ChaCha8Rng, dim: usize) -> Vec<FoldScores> {
    (0..4)
        .map(|f| {
            let n = rng.gen_range(1..6);
            FoldScores {
                cell_count: 6,
                min_group: 2,
                cells: (0..n).map(|_| vec![f / 2 * 3 + rng.gen_range(0..3), f % 2 * 2 + rng.gen_range(0..2)]).collect(),
                components: (0..n)
                    .map(|_| ScoreComponents {
                        psi_a: DMatrix::from_fn(dim, dim, |i, j| if i == j { -1.0 } else { 0.0 } + 0.2 * common::gaussian(rng)),
                        psi_b: DVector::from_fn(dim, |_, _| common::gaussian(rng)),
                    })
                    .collect(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn meat_is_symmetric_psd(seed in any::<u64>(), dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let folds = vector_folds(&mut rng, dim);
        let theta = DVector::from_fn(dim, |_, _| common::gaussian(&mut rng));
        for mode in [Robustness::Multiway, Robustness::ZeroWay, Robustness::OneWay(0), Robustness::OneWay(1)] {
            let g = gamma_reference(&folds, &theta, mode, 5).unwrap();
            prop_assert!((&g - g.transpose()).amax() <= 1e-12 * g.amax().max(1.0));
            let eig = g.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-12 * g.amax().max(1.0), "{mode}: {eig}");
        }
    }

    #[test]
    fn moment_vanishes_at_root(seed in any::<u64>(), dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let folds = vector_folds(&mut rng, dim);
        if let Ok((theta, _)) = solve_theta(&folds) {
            prop_assert!(empirical_moment(&folds, &theta).amax() <= 1e-12);
        }
    }

    #[test]
    fn label_permutation_equivariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = [rng.gen_range(5..=7), rng.gen_range(5..=7)];
        let dataset = common::random_dataset(&mut rng, &counts, 3, 0..=3);
        let plan = make_fold_plan(&counts, 2, rng.gen()).unwrap();
        let perms: Vec<Vec<usize>> = counts.iter().map(|&c| common::permutation(&mut rng, c)).collect();
        let dataset2 = dataset.relabel(&perms).unwrap();
        let plan2 = plan.relabel(&perms).unwrap();
        let config = DmlConfig { learner: small_cv_lasso(), ..DmlConfig::default() };
        for robustness in [Robustness::Multiway, Robustness::OneWay(0), Robustness::ZeroWay] {
            let config = DmlConfig { robustness, ..config.clone() };
            let (a, _) = estimate_with_plan(&dataset, &plan, &config).unwrap();
            let (b, _) = estimate_with_plan(&dataset2, &plan2, &config).unwrap();
            prop_assert_eq!(a.theta[0].to_bits(), b.theta[0].to_bits());
            prop_assert_eq!(a.sigma2[0][0].to_bits(), b.sigma2[0][0].to_bits());
        }
    }
}
