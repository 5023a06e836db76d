use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::*;
use crate::covariance::matern_corr;
use crate::rng::stream_rng;

fn logs(p: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(p.len(), p[0].len(), |i, j| p[i][j].ln())
}

fn random_loo(n: usize, g: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    DMatrix::from_fn(n, g, |_, _| rng.random_range(0.05..2.0f64).ln())
}

/// Best objective over the simplex grid with spacing `1/steps` (G ≤ 3).
fn grid_search(l: &DMatrix<f64>, steps: usize) -> f64 {
    let g = l.ncols();
    let h = 1.0 / steps as f64;
    let mut best = f64::NEG_INFINITY;
    match g {
        1 => best = stacking_objective(l, &[1.0]),
        2 => {
            for i in 0..=steps {
                let a = i as f64 * h;
                best = best.max(stacking_objective(l, &[a, 1.0 - a]));
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (a, b) = (i as f64 * h, j as f64 * h);
                    best = best.max(stacking_objective(l, &[a, b, (1.0 - a - b).max(0.0)]));
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

#[test]
fn single_candidate_gets_all_weight() {
    let w = stacking_weights_from_log(&logs(&[&[0.3], &[0.9]]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert_eq!(w.alpha, vec![1.0]);
    assert!((w.objective - 0.5 * (0.3f64.ln() + 0.9f64.ln())).abs() < 1e-15);
}

#[test]
fn dominant_column_is_a_corner() {
    let l = logs(&[&[0.9, 0.3], &[0.5, 0.4], &[1.2, 0.2]]);
    let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!((w.alpha[0] - 1.0).abs() < 1e-8, "{:?}", w.alpha);
    assert!(w.alpha[1] < 1e-8);
    let l3 = logs(&[&[0.1, 0.3, 0.2], &[0.2, 0.6, 0.5], &[0.3, 0.9, 0.4]]);
    let w3 = stacking_weights_from_log(&l3, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!((w3.alpha[1] - 1.0).abs() < 1e-8, "{:?}", w3.alpha);
}

#[test]
fn symmetric_instance_splits_evenly() {
    let l = logs(&[&[0.8, 0.2], &[0.2, 0.8]]);
    let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!((w.alpha[0] - 0.5).abs() < 1e-8);
    assert!((w.objective - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn matches_simplex_grid_search() {
    for seed in 0..5 {
        let l = random_loo(5, 3, seed);
        let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let best = grid_search(&l, 1000);
        assert!(w.objective >= best - 1e-6, "seed {seed}: {} vs {best}", w.objective);
        // the grid cannot beat the continuous optimum
        assert!(w.objective + 1e-9 >= best);
        assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn optimum_beats_vertices_and_uniform() {
    let l = random_loo(8, 4, 11);
    let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    for g in 0..4 {
        let mut e = vec![0.0; 4];
        e[g] = 1.0;
        assert!(w.objective >= stacking_objective(&l, &e) - 1e-12);
    }
    assert!(w.objective >= stacking_objective(&l, &[0.25; 4]) - 1e-12);
}

#[test]
fn row_rescaling_leaves_weights_unchanged() {
    let l = random_loo(6, 3, 3);
    let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let mut shifted = l.clone();
    for (j, mut row) in shifted.row_iter_mut().enumerate() {
        row.add_scalar_mut((j as f64 * 7.3 - 20.0) * if j % 2 == 0 { 1.0 } else { -1.0 });
    }
    let ws = stacking_weights_from_log(&shifted, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    for (a, b) in w.alpha.iter().zip(&ws.alpha) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn duplicate_columns_are_flagged_and_keep_the_optimum() {
    let l = random_loo(7, 2, 5);
    let single = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(!single.non_unique);
    let dup = l.clone().insert_column(2, 0.0);
    let mut dup = dup;
    dup.set_column(2, &l.column(1));
    let w = stacking_weights_from_log(&dup, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(w.non_unique);
    assert!((w.objective - single.objective).abs() < 1e-9);
}

#[test]
fn iteration_cap_reports_last_iterate() {
    let l = random_loo(5, 3, 2);
    match stacking_weights_from_log(&l, 0.0, 1) {
        Err(Error::NoConvergence { iterations, last }) => {
            assert_eq!(iterations, 1);
            assert_eq!(last.len(), 3);
            assert!((last.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        other => panic!("expected NoConvergence, got {other:?}"),
    }
}

#[test]
fn rejects_bad_matrices() {
    assert!(stacking_weights_from_log(&DMatrix::zeros(0, 2), DEFAULT_TOL, 10).is_err());
    let mut l = random_loo(3, 2, 1);
    l[(0, 0)] = f64::NEG_INFINITY;
    assert!(stacking_weights_from_log(&l, DEFAULT_TOL, 10).is_err());
}

#[test]
fn exponential_range_grid() {
    let phi = effective_range_grid(1.0, 0.5, 2).unwrap();
    let ln20 = 20f64.ln();
    assert!((phi[0] - ln20 / 0.7).abs() < 1e-9);
    assert!((phi[1] - ln20 / 0.2).abs() < 1e-9);
    assert!((phi[0] - 4.280).abs() < 1e-3 && (phi[1] - 14.979).abs() < 1e-3);
    let mid = effective_range_grid(2.0, 0.5, 1).unwrap();
    assert!((mid[0] - ln20 / 0.9).abs() < 1e-9);
}

#[test]
fn range_grid_hits_five_percent_correlation() {
    for nu in [0.5, 0.8, 1.0, 1.5, 2.5] {
        let phi = effective_range_grid(3.0, nu, 5).unwrap();
        assert!(phi.windows(2).all(|w| w[0] < w[1]));
        for (i, p) in phi.iter().enumerate() {
            let r = (0.7 - 0.5 * i as f64 / 4.0) * 3.0;
            assert!((matern_corr(r, *p, nu).unwrap() - 0.05).abs() < 1e-6);
        }
    }
    assert!(effective_range_grid(0.0, 0.5, 3).is_err());
}

#[test]
fn cartesian_grid_order_and_size() {
    let g = CandidateGrid::default_simulation();
    assert_eq!(g.len(), 54);
    assert_eq!(g.specs()[0], CandidateSpec::new(2.0, 0.5, 0.3, 0.75).unwrap());
    assert_eq!(g.specs()[1], CandidateSpec::new(2.0, 0.5, 0.3, 1.5).unwrap());
    assert_eq!(g.specs()[53], CandidateSpec::new(5.0, 1.5, 1.0, 1.5).unwrap());
    assert!(CandidateGrid::cartesian(&[], &[0.5], &[1.0], &[1.0]).is_err());
    assert!(CandidateGrid::cartesian(&[1.0], &[0.5], &[-1.0], &[1.0]).is_err());
}

#[test]
fn corner_weights_sample_one_candidate() {
    let s = stacked_sample(&[1.0, 0.0, 0.0], &[10, 10, 10], 500, &mut stream_rng(1, 0)).unwrap();
    assert!(s.iter().all(|d| d.candidate == 0));
    assert_eq!(s[13].draw, 3);
}

#[test]
fn stacked_frequencies_follow_weights() {
    let b = 100_000;
    let s = stacked_sample(&[0.5, 0.5], &[100, 100], b, &mut stream_rng(2, 0)).unwrap();
    let c = draws_per_candidate(&s, 2);
    let se = (b as f64 * 0.25).sqrt();
    assert!((c[0] as f64 - 0.5 * b as f64).abs() < 3.0 * se);
    assert_eq!(c[0] + c[1], b);
}

#[test]
fn stacked_draws_follow_the_mixture() {
    // candidate predictive draws: N(0, 1) and N(2, 0.25)
    let mut rng = stream_rng(3, 0);
    let b = 50_000;
    let d0: Vec<f64> = (0..b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let d1: Vec<f64> = (0..b).map(|_| 2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let alpha = [0.3, 0.7];
    let s = stacked_sample(&alpha, &[b, b], b, &mut stream_rng(3, 1)).unwrap();
    let (lo, hi) = (0.5, 1.5);
    let hits = s
        .iter()
        .filter(|d| {
            let v = if d.candidate == 0 { d0[d.draw] } else { d1[d.draw] };
            (lo..hi).contains(&v)
        })
        .count() as f64
        / b as f64;
    let n0 = Normal::new(0.0, 1.0).unwrap();
    let n1 = Normal::new(2.0, 0.5).unwrap();
    let p = alpha[0] * (n0.cdf(hi) - n0.cdf(lo)) + alpha[1] * (n1.cdf(hi) - n1.cdf(lo));
    let se = (p * (1.0 - p) / b as f64).sqrt();
    assert!((hits - p).abs() < 4.0 * se, "{hits} vs {p}");
    let ld = stacked_log_density(&alpha, &[n0.ln_pdf(1.0), n1.ln_pdf(1.0)]);
    assert!((ld - (0.3 * n0.pdf(1.0) + 0.7 * n1.pdf(1.0)).ln()).abs() < 1e-14);
}

#[test]
fn stacked_sample_validates_inputs() {
    let mut rng = stream_rng(4, 0);
    assert!(stacked_sample(&[0.5], &[1, 2], 5, &mut rng).is_err());
    assert!(stacked_sample(&[0.0, 0.0], &[1, 2], 5, &mut rng).is_err());
    assert!(stacked_sample(&[1.0, 0.0], &[0, 2], 5, &mut rng).is_err());
}

#[test]
fn weights_file_round_trip() {
    let specs = vec![CandidateSpec::new(2.0, 0.5, 0.3, 0.75).unwrap(), CandidateSpec::new(3.0, 1.0, 0.5, 1.5).unwrap()];
    let w = StackingWeights { alpha: vec![0.25, 0.75], objective: -1.5, iterations: 7, non_unique: false };
    let file = WeightsFile::new(&specs, &w).unwrap();
    let json = serde_json::to_value(&file).unwrap();
    assert_eq!(json["candidates"][1]["phi_s"], 3.0);
    assert_eq!(json["candidates"][1]["weight"], 0.75);
    assert_eq!(json["iterations"], 7);
    let back: WeightsFile = serde_json::from_value(json).unwrap();
    assert_eq!(back.specs().unwrap(), specs);
    assert_eq!(back.alpha(), vec![0.25, 0.75]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_feasible_and_beat_vertices(
        n in 1usize..12,
        g in 1usize..6,
        seed in any::<u64>(),
    ) {
        let l = random_loo(n, g, seed);
        let w = stacking_weights_from_log(&l, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(w.alpha.iter().all(|a| *a >= 0.0));
        for k in 0..g {
            let mut e = vec![0.0; g];
            e[k] = 1.0;
            prop_assert!(w.objective >= stacking_objective(&l, &e) - 1e-9);
        }
        prop_assert!(w.objective >= stacking_objective(&l, &vec![1.0 / g as f64; g]) - 1e-9);
    }
}
