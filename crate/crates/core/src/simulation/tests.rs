use nalgebra::{DMatrix, DVector};

use super::*;
use crate::covariance::avg_time_corr;
use crate::geometry::polygon_area;
use crate::linalg::cholesky;

fn small_config() -> SimConfig {
    SimConfig {
        n_sites: 12,
        n_times: 48,
        mc_samples: 40,
        quarters: vec![
            QuarterSpec { count: 4, t_start: 0.0, t_end: 6.0 },
            QuarterSpec { count: 5, t_start: 6.0, t_end: 12.0 },
        ],
        ..SimConfig::default()
    }
}

#[test]
fn periodic_kernel_values() {
    assert_eq!(periodic_kernel(2.3, 2.3, 7.0, 0.1), 1.0);
    assert!((periodic_kernel(1.0, 8.0, 7.0, 0.1) - 1.0).abs() < 1e-15);
    assert!((periodic_kernel(0.0, 3.5, 7.0, 0.1) - (-0.02f64).exp()).abs() < 1e-15);
    assert!((periodic_kernel(0.0, 3.5, 7.0, 0.1) - 0.980199).abs() < 1e-6);
}

#[test]
fn default_design_yields_1080_records() {
    let cfg = SimConfig::default();
    let (data, truth) = simulate_exposure(&cfg, &mut stream_rng(1, 0)).unwrap();
    assert_eq!(data.len(), 1080);
    assert_eq!(truth.z.shape(), (100, 360));
    assert_eq!(truth.period_z.shape(), (100, 12));
    assert_eq!(data.basis_dim(), 12);
    let mut per_site = vec![0; 100];
    for &s in &truth.record_sites {
        per_site[s] += 1;
    }
    assert_eq!(per_site.iter().sum::<usize>(), 1080);
}

#[test]
fn noiseless_constant_mean_averages_latent_truth() {
    let cfg = SimConfig {
        noise_variance: 0.0,
        missing_fraction: 0.0,
        mean: MeanGp { variance: 0.0, ..MeanGp::default() },
        ..small_config()
    };
    let (data, truth) = simulate_exposure(&cfg, &mut stream_rng(2, 0)).unwrap();
    assert_eq!(data.len(), 12 * 12);
    assert!(truth.mu.iter().all(|m| *m == 5.0));
    for (row, (&i, &m)) in truth.record_sites.iter().zip(&truth.record_periods).enumerate() {
        let per = 4;
        let avg = (0..per).map(|d| truth.z[(i, m * per + d)]).sum::<f64>() / per as f64;
        assert_eq!(data.x[row], truth.period_z[(i, m)]);
        assert!((data.x[row] - avg).abs() < 1e-12);
        assert_eq!(data.coords[row].s, truth.sites[i]);
        assert_eq!(data.coords[row].interval, truth.periods[m]);
    }
}

#[test]
fn kronecker_sampling_matches_dense_covariance() {
    let sites: Vec<Point2> = (0..5).map(|i| Point2::new(0.2 * i as f64, 0.1 * (i % 2) as f64)).collect();
    let times: Vec<f64> = (0..6).map(|j| 0.5 * j as f64).collect();
    let params = ProcessParams::new(3.0, 0.5, 0.8).unwrap();
    let cs = spatial_corr_matrix(&sites, &params);
    let ct = temporal_corr_matrix(&times, params.phi_t);
    let ls = cholesky(&cs).unwrap();
    let lt = cholesky(&ct).unwrap();
    let reps = 10_000;
    let n = 30;
    let mut sum = DVector::<f64>::zeros(n);
    let mut outer = DMatrix::<f64>::zeros(n, n);
    let mut rng = stream_rng(3, 0);
    for _ in 0..reps {
        let z = sample_kronecker(ls.l(), lt.l(), &mut rng);
        // row-major flattening: index = site * n_t + time
        let v = DVector::from_iterator(n, (0..5).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| z[(i, j)]));
        sum += &v;
        outer += &v * v.transpose();
    }
    let mean = sum / reps as f64;
    let cov = (outer - &mean * mean.transpose() * reps as f64) / (reps - 1) as f64;
    for a in 0..n {
        for b in 0..n {
            let target = cs[(a / 6, b / 6)] * ct[(a % 6, b % 6)];
            let var_a = cs[(a / 6, a / 6)] * ct[(a % 6, a % 6)];
            let var_b = cs[(b / 6, b / 6)] * ct[(b % 6, b % 6)];
            let se = ((var_a * var_b + target * target) / reps as f64).sqrt();
            assert!((cov[(a, b)] - target).abs() < 4.0 * se, "({a},{b}) {} vs {target}", cov[(a, b)]);
        }
    }
}

#[test]
fn default_block_design_has_180_blocks() {
    let cfg = SimConfig::default();
    let blocks = simulate_block_design(&cfg.quarter_design().unwrap(), &cfg.bbox, &mut stream_rng(4, 0)).unwrap();
    assert_eq!(blocks.len(), 180);
    let mut start = 0;
    for (count, iv) in cfg.quarter_design().unwrap() {
        let q = &blocks[start..start + count];
        assert!(q.iter().all(|b| b.interval == iv));
        let area: f64 = q.iter().map(|b| polygon_area(&b.region)).sum();
        assert!((area - 1.0).abs() < 1e-9);
        start += count;
    }
}

#[test]
fn single_seed_block_is_the_whole_box() {
    let iv = Interval::new(0.0, 3.0).unwrap();
    let bbox = BoundingBox::new(Point2::new(0.0, 0.0), Point2::new(2.0, 1.0)).unwrap();
    let blocks = simulate_block_design(&[(1, iv)], &bbox, &mut stream_rng(5, 0)).unwrap();
    assert_eq!(blocks.len(), 1);
    assert!((blocks[0].region.area() - 2.0).abs() < 1e-12);
    assert!((blocks[0].volume() - 6.0).abs() < 1e-12);
}

#[test]
fn noiseless_outcome_is_linear_in_w() {
    let cfg = small_config();
    let (_, truth) = simulate_exposure(&cfg, &mut stream_rng(6, 0)).unwrap();
    let blocks = simulate_block_design(&cfg.quarter_design().unwrap(), &cfg.bbox, &mut stream_rng(6, 1)).unwrap();
    let sim = OutcomeSim { beta1: vec![5.0, 1.0], beta2: 0.0, tau2: 0.0 };
    let (out, bt) = simulate_outcome(&blocks, &truth, &sim, 30, &mut stream_rng(6, 2)).unwrap();
    assert_eq!(out.len(), 9);
    assert_eq!(out.columns, vec!["intercept", "w1"]);
    let fitted = &out.w * DVector::from_vec(vec![5.0, 1.0]);
    assert!((fitted - &out.y).abs().max() < 1e-12);
    assert_eq!(bt.z.len(), 9);
    assert!(out.w.column(0).iter().all(|v| *v == 1.0));
}

/// Dense oracle: condition on every grid value through the full joint
/// covariance of `[Z_grid, Z_L]`.
#[test]
fn block_conditional_matches_dense_gaussian_conditioning() {
    let cfg = SimConfig { n_sites: 4, n_times: 12, ..small_config() };
    let (_, truth) = simulate_exposure(&cfg, &mut stream_rng(7, 0)).unwrap();
    let blocks =
        simulate_block_design(&[(3, Interval::new(1.0, 4.0).unwrap())], &cfg.bbox, &mut stream_rng(7, 1)).unwrap();
    let samples = BlockSamples::for_blocks(&blocks, 200, 9).unwrap();
    let (mean, cov) = block_conditional(&blocks, &truth, &samples).unwrap();

    let params = truth.params;
    let m = params.matern();
    let (ns, nt) = (4, 12);
    let n = ns * nt;
    let idx = |a: usize| (a / nt, a % nt);
    let c_grid = DMatrix::from_fn(n, n, |a, b| {
        let ((i, j), (k, l)) = (idx(a), idx(b));
        m.corr(truth.sites[i].dist(&truth.sites[k])) * exp_time_corr(truth.times[j], truth.times[l], params.phi_t)
    });
    let cross = DMatrix::from_fn(n, blocks.len(), |a, kk| {
        let (i, j) = idx(a);
        let iv = &blocks[kk].interval;
        let tb = time_point_interval_integral(truth.times[j], iv.start, iv.end, params.phi_t) / iv.len();
        spatial_point_block_avg(&m, &truth.sites[i], samples.block(kk)) * tb
    });
    let c_l = cov_block_block(&blocks, &samples, &params).unwrap();
    let resid = DVector::from_fn(n, |a, _| {
        let (i, j) = idx(a);
        truth.z[(i, j)] - truth.mu[j]
    });
    let inv = c_grid.clone().try_inverse().unwrap();
    let dense_mean = cross.transpose() * &inv * resid;
    let dense_cov = &c_l - cross.transpose() * &inv * &cross;
    for kk in 0..blocks.len() {
        let mu = truth.interval_mean(&blocks[kk].interval).unwrap();
        assert!((mean[kk] - mu - dense_mean[kk]).abs() < 1e-7, "{} vs {}", mean[kk] - mu, dense_mean[kk]);
        for l in 0..blocks.len() {
            assert!((cov[(kk, l)] - dense_cov[(kk, l)]).abs() < 1e-7);
        }
    }
    // block truth never exceeds its prior variance
    for kk in 0..blocks.len() {
        assert!(cov[(kk, kk)] <= c_l[(kk, kk)] + 1e-12);
        assert!(c_l[(kk, kk)] <= avg_time_corr(&blocks[kk].interval, &blocks[kk].interval, params.phi_t) + 1e-12);
    }
}

#[test]
fn regression_on_true_exposure_recovers_coefficients() {
    let cfg = small_config();
    let (_, truth) = simulate_exposure(&cfg, &mut stream_rng(8, 0)).unwrap();
    let design: Vec<(usize, Interval)> =
        (0..4).map(|q| (30, Interval::new(3.0 * q as f64, 3.0 * (q + 1) as f64).unwrap())).collect();
    let blocks = simulate_block_design(&design, &cfg.bbox, &mut stream_rng(8, 1)).unwrap();
    let sim = OutcomeSim { beta1: vec![5.0, 1.0], beta2: -1.0, tau2: 1e-4 };
    let (out, bt) = simulate_outcome(&blocks, &truth, &sim, 30, &mut stream_rng(8, 2)).unwrap();
    let k = out.len();
    let x = DMatrix::from_fn(k, 3, |r, c| if c < 2 { out.w[(r, c)] } else { bt.z[r] });
    let wts = DVector::from_iterator(k, out.blocks.iter().map(|b| b.volume()));
    let xw = DMatrix::from_fn(k, 3, |r, c| x[(r, c)] * wts[r]);
    let xtx = x.tr_mul(&xw);
    let xtx_inv = xtx.clone().try_inverse().unwrap();
    let beta = &xtx_inv * x.tr_mul(&out.y.component_mul(&wts));
    let resid = &out.y - &x * &beta;
    let s2 = resid.iter().zip(wts.iter()).map(|(r, w)| r * r * w).sum::<f64>() / (k - 3) as f64;
    let truth_beta = [5.0, 1.0, -1.0];
    for c in 0..3 {
        let se = (s2 * xtx_inv[(c, c)]).sqrt();
        assert!((beta[c] - truth_beta[c]).abs() < 2.0 * se.max(1e-12), "coef {c}: {} ± {se}", beta[c]);
    }
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let cfg = SimConfig { seed: 42, ..small_config() };
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.outcome, b.outcome);
    assert_eq!(a.block_truth, b.block_truth);
    let c = simulate(&SimConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.data.x, c.data.x);
}

#[test]
fn config_validation_and_serde_defaults() {
    let cfg: SimConfig = serde_json::from_str(r#"{"n_sites": 10, "seed": 3}"#).unwrap();
    assert_eq!(cfg.n_sites, 10);
    assert_eq!(cfg.n_times, 360);
    assert_eq!(cfg.quarters.len(), 4);
    assert!(serde_json::from_str::<SimConfig>(r#"{"n_site": 10}"#).is_err());
    assert!(SimConfig { n_times: 100, ..SimConfig::default() }.validate().is_err());
    assert!(SimConfig { missing_fraction: 1.0, ..SimConfig::default() }.validate().is_err());
    assert!(SimConfig { process_variance: 0.0, ..SimConfig::default() }.validate().is_err());
}
