use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::covariance::{Interval, SpaceTimePoint};
use crate::geometry::{Point2, Polygon};
use crate::io::read_outcomes;

fn toy_data(n: usize, seed: u64) -> (Vec<String>, PointDataset) {
    let mut rng = stream_rng(seed, 0);
    let mut coords = Vec::new();
    let mut x = Vec::new();
    for i in 0..n {
        let s = Point2::new(rng.random(), rng.random());
        let iv = if i % 2 == 0 { Interval::new(0.0, 1.0) } else { Interval::new(1.0, 2.0) };
        coords.push(SpaceTimePoint { s, interval: iv.unwrap() });
        x.push((3.0 * s.x).sin() + s.y + 0.3 * rng.random::<f64>());
    }
    let ids = (0..n).map(|i| format!("p{i}")).collect();
    (ids, PointDataset::new(coords, x, BasisSpec::Constant).unwrap())
}

fn toy_config(grids: Grids) -> RunConfig {
    let mut cfg = RunConfig::new(grids);
    cfg.basis = BasisSpec::Constant;
    cfg.draws = 200;
    cfg.mc_samples = 100;
    cfg.seed = 5;
    cfg
}

fn small_grids() -> Grids {
    Grids { phi_s: vec![2.0, 6.0], nu: vec![0.5], phi_t: vec![0.5], delta2: vec![0.5, 2.0] }
}

#[test]
fn type7_quantiles() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    assert!((quantile_sorted(&v, 0.025) - 1.075).abs() < 1e-15);
    assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    assert_eq!(quantile_sorted(&[7.0], 0.3), 7.0);
}

proptest! {
    #[test]
    fn summary_is_ordered(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
        let s = Summary::of(v.iter().copied());
        prop_assert!(s.q025 <= s.median && s.median <= s.q975);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= min - 1e-9 && s.mean <= max + 1e-9);
    }
}

#[test]
fn config_defaults_and_validation() {
    let cfg: RunConfig =
        serde_json::from_str(r#"{"grids":{"phi_s":[3],"nu":[0.5],"phi_t":[0.5],"delta2":[1]}}"#).unwrap();
    assert_eq!(cfg.draws, DEFAULT_DRAWS);
    assert_eq!(cfg.basis, BasisSpec::Monthly);
    assert_eq!(cfg.loo, LooMethod::Auto);
    assert!(cfg.outcome.include_interval);
    cfg.validate().unwrap();
    assert!(serde_json::from_str::<RunConfig>(r#"{"grids":{"phi_s":[3],"nu":[0.5],"phi_t":[0.5]}}"#).is_err());
    assert!(serde_json::from_str::<RunConfig>(
        r#"{"grids":{"phi_s":[3],"nu":[0.5],"phi_t":[0.5],"delta2":[1]},"drawz":5}"#
    )
    .is_err());
    let mut bad = cfg.clone();
    bad.draws = 99;
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.grids.nu.clear();
    assert!(bad.validate().is_err());
}

#[test]
fn single_candidate_gets_full_weight() {
    let (_, data) = toy_data(20, 1);
    let cfg = toy_config(Grids { phi_s: vec![3.0], nu: vec![0.5], phi_t: vec![0.5], delta2: vec![1.0] });
    let stack = fit_stack(&data, &cfg).unwrap();
    assert_eq!(stack.weights.alpha, vec![1.0]);
    assert_eq!(stack.fits.len(), 1);
}

#[test]
fn persisted_model_predicts_identically() {
    let (ids, data) = toy_data(25, 2);
    let cfg = toy_config(small_grids());
    let stack = fit_stack(&data, &cfg).unwrap();
    assert!((stack.weights.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    let model = StackedModel::new(ids, data, stack.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_stack_outputs(dir.path(), &model, &stack.loo).unwrap();
    let loaded = load_model(&dir.path().join("fits")).unwrap();
    assert_eq!(loaded.fits.len(), model.fits.len());
    assert_eq!(loaded.data.x, model.data.x);
    let targets = Targets::Instants(vec![
        InstantPoint { s: Point2::new(0.2, 0.3), t: 0.5 },
        InstantPoint { s: Point2::new(0.8, 0.1), t: 1.7 },
    ]);
    let a = predict(&model, &targets, 150, 50, 9).unwrap();
    let b = predict(&loaded, &targets, 150, 50, 9).unwrap();
    assert_eq!(a, b);
    let weights: WeightsFile =
        serde_json::from_reader(std::fs::File::open(dir.path().join("weights.json")).unwrap()).unwrap();
    assert_eq!(weights, model.weights);
}

#[test]
fn prediction_is_thread_count_invariant() {
    let (ids, data) = toy_data(25, 3);
    let cfg = toy_config(small_grids());
    let blocks = vec![
        SpaceTimeBlock {
            region: Polygon::new(vec![Point2::new(0.0, 0.0), Point2::new(0.5, 0.0), Point2::new(0.5, 0.5)]).unwrap(),
            interval: Interval::new(0.0, 2.0).unwrap(),
        },
        SpaceTimeBlock {
            region: Polygon::new(vec![
                Point2::new(0.5, 0.5),
                Point2::new(1.0, 0.5),
                Point2::new(1.0, 1.0),
                Point2::new(0.5, 1.0),
            ])
            .unwrap(),
            interval: Interval::new(1.0, 2.0).unwrap(),
        },
    ];
    let run = |threads| {
        run_with_threads(Some(threads), || {
            let stack = fit_stack(&data, &cfg).unwrap();
            let model = StackedModel::new(ids.clone(), data.clone(), stack).unwrap();
            (model.weights.clone(), predict(&model, &Targets::Blocks(blocks.clone()), 200, 50, 4).unwrap())
        })
        .unwrap()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn training_point_prediction_recovers_observation() {
    let (ids, data) = toy_data(30, 4);
    let mut cfg = toy_config(Grids { phi_s: vec![3.0], nu: vec![0.5], phi_t: vec![0.01], delta2: vec![1e-4] });
    cfg.draws = 400;
    let model = StackedModel::new(ids, data.clone(), fit_stack(&data, &cfg).unwrap()).unwrap();
    let j = 6;
    let c = data.coords[j];
    let target = Targets::Instants(vec![InstantPoint { s: c.s, t: 0.5 * (c.interval.start + c.interval.end) }]);
    let pred = predict(&model, &target, 400, 50, 1).unwrap();
    let s = &summarize_rows(&pred.values)[0];
    assert!((s.median - data.x[j]).abs() < 0.05, "median {} vs {}", s.median, data.x[j]);
}

fn outcome_table(text: &str) -> OutcomeTable {
    read_outcomes(text.as_bytes()).unwrap()
}

#[test]
fn dummy_encoding_drops_reference_level() {
    let mut text = String::from("block_id,t_start,t_end,y,county,w\n");
    for (i, c) in ["e", "a", "c", "b", "d", "a", "e"].iter().enumerate() {
        text.push_str(&format!("k{i},0,1,{i},{c},{}\n", i as f64 * 0.5));
    }
    let t = outcome_table(&text);
    let (w, names) = encode_predictors(&t, &[]).unwrap();
    assert_eq!(names, vec!["intercept", "county_b", "county_c", "county_d", "county_e", "w"]);
    assert_eq!(w.ncols(), 6);
    assert_eq!(w.column(4).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(w[(2, 5)], 1.0);
    let (w, names) = encode_predictors(&t, &["w".to_string()]).unwrap();
    assert_eq!(names.len(), 5 + 6);
    assert_eq!(w.ncols(), 11);
    assert!(encode_predictors(&t, &["nope".to_string()]).is_err());
}

fn unit_blocks(n: usize) -> BlockTable {
    let sq =
        Polygon::new(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(1.0, 1.0), Point2::new(0.0, 1.0)])
            .unwrap();
    BlockTable {
        ids: (0..n).map(|i| format!("k{i}")).collect(),
        blocks: (0..n)
            .map(|_| SpaceTimeBlock { region: sq.clone(), interval: Interval::new(0.0, 1.0).unwrap() })
            .collect(),
    }
}

#[test]
fn log_transform_lists_bad_rows() {
    let t = outcome_table("block_id,t_start,t_end,y,w\nk0,0,1,2,1\nk1,0,1,0,2\nk2,0,1,-3,3\nk3,0,1,4,1\n");
    let cfg = OutcomeConfig { log_transform: true, ..OutcomeConfig::default() };
    let err = build_outcome_dataset(&t, &unit_blocks(4), &cfg).unwrap_err().to_string();
    assert!(err.contains("lines 3, 4"), "{err}");
    let t = outcome_table("block_id,t_start,t_end,y,w\nk0,0,1,2,1\nk1,0,1,1,2\nk2,0,1,3,3\nk3,0,1,4,1\n");
    let d = build_outcome_dataset(&t, &unit_blocks(4), &cfg).unwrap();
    assert!((d.y[2] - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn outcome_join_checks_ids_and_intervals() {
    let cfg = OutcomeConfig::default();
    let t = outcome_table("block_id,t_start,t_end,y,w\nk0,0,1,2,1\nzz,0,1,1,2\nk2,0,1,3,3\n");
    assert!(build_outcome_dataset(&t, &unit_blocks(3), &cfg).is_err());
    let t = outcome_table("block_id,t_start,t_end,y,w\nk0,0,1,2,1\nk1,0,2,1,2\nk2,0,1,3,3\n");
    assert!(build_outcome_dataset(&t, &unit_blocks(3), &cfg).unwrap_err().to_string().contains("line 3"));
}

#[test]
fn outcome_run_summaries_and_alignment() {
    let k = 20;
    let mut rng = stream_rng(11, 0);
    let z: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut text = String::from("block_id,t_start,t_end,y,w\n");
    for (i, zi) in z.iter().enumerate() {
        let w = (i as f64 * 0.37).sin();
        let y = 1.0 + 2.0 * w - zi + 0.05 * rng.random::<f64>();
        text.push_str(&format!("k{i},0,1,{y},{w}\n"));
    }
    let t = outcome_table(&text);
    let outcome = build_outcome_dataset(&t, &unit_blocks(k), &OutcomeConfig::default()).unwrap();
    // samples stored in reverse order to exercise the id join
    let ids: Vec<String> = (0..k).rev().map(|i| format!("k{i}")).collect();
    let values = DMatrix::from_fn(k, 150, |r, b| z[k - 1 - r] + 0.01 * ((r * 7 + b) % 5) as f64);
    let samples = SampleTable { ids, values, candidates: vec![0; 150] };
    let zl = align_samples(&t.block_ids, &samples).unwrap();
    assert!((zl[(3, 0)] - z[3]).abs() < 0.05);
    let report = run_outcome(&outcome, &zl, &PriorConfig::default(), 3).unwrap();
    let names: Vec<&str> = report.summary.coefficients.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, vec!["intercept", "w", "exposure"]);
    let beta2 = &report.summary.coefficients[2].summary;
    assert!(beta2.q025 < -1.0 && -1.0 < beta2.q975, "{beta2:?}");
    assert!(report.waic.p_waic >= 0.0);
    let dir = tempfile::tempdir().unwrap();
    write_outcome(dir.path(), &report).unwrap();
    let beta = std::fs::read_to_string(dir.path().join("beta_samples.csv")).unwrap();
    assert!(beta.starts_with("draw,intercept,w,exposure,tau2\n"));
    assert_eq!(beta.lines().count(), 151);
    assert!(align_samples(&["missing".to_string()], &samples).is_err());
}
