//! Synthetic exposure and outcome data: a separable space-time GP with a
//! periodic random mean, observed daily at fixed sites and averaged to
//! months, plus Voronoi block designs and block-level outcomes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    cov_block_block, exp_time_corr, spatial_point_block_avg, time_point_interval_integral, BlockSamples, Interval,
    ProcessParams, SpaceTimeBlock, SpaceTimePoint, DEFAULT_MC_SAMPLES,
};
use crate::error::{Error, Result};
use crate::geometry::{voronoi_blocks, BoundingBox, Point2};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::model::{BasisSpec, BlockOutcomeDataset, PointDataset, MAX_REL_JITTER};
use crate::rng::{derive_seed, stream_rng};

/// Random mean curve `μ(t) ~ GP(level, variance · R(t, t'; period, decay))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanGp {
    pub level: f64,
    pub variance: f64,
    pub period: f64,
    pub decay: f64,
}

impl Default for MeanGp {
    fn default() -> Self {
        Self { level: 5.0, variance: 4.0, period: 7.0, decay: 0.1 }
    }
}

/// `count` Voronoi blocks paired with `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarterSpec {
    pub count: usize,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSim {
    /// Coefficients of `W`, intercept first; the other columns are standard
    /// normal predictors.
    pub beta1: Vec<f64>,
    pub beta2: f64,
    pub tau2: f64,
}

impl Default for OutcomeSim {
    fn default() -> Self {
        Self { beta1: vec![5.0, 1.0], beta2: -1.0, tau2: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_sites: usize,
    /// Daily time points, equally spaced over `time_span`.
    pub n_times: usize,
    /// Number of equal aggregation periods (months) over `time_span`.
    pub n_periods: usize,
    pub bbox: BoundingBox,
    pub time_span: [f64; 2],
    pub params: ProcessParams,
    pub process_variance: f64,
    pub noise_variance: f64,
    pub mean: MeanGp,
    pub missing_fraction: f64,
    pub quarters: Vec<QuarterSpec>,
    pub outcome: OutcomeSim,
    pub mc_samples: usize,
    /// Basis attached to the returned point dataset.
    pub basis: BasisSpec,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sites: 100,
            n_times: 360,
            n_periods: 12,
            bbox: BoundingBox::unit(),
            time_span: [0.0, 12.0],
            params: ProcessParams { phi_s: 4.0, nu: 0.5, phi_t: 0.6 },
            process_variance: 1.0,
            noise_variance: 1.0,
            mean: MeanGp::default(),
            missing_fraction: 0.1,
            quarters: [(40, 0.0), (50, 3.0), (30, 6.0), (60, 9.0)]
                .into_iter()
                .map(|(count, t)| QuarterSpec { count, t_start: t, t_end: t + 3.0 })
                .collect(),
            outcome: OutcomeSim::default(),
            mc_samples: DEFAULT_MC_SAMPLES,
            basis: BasisSpec::Monthly,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_sites == 0 || self.n_times == 0 || self.n_periods == 0 {
            return bad("n_sites, n_times and n_periods must be at least 1".into());
        }
        if !self.n_times.is_multiple_of(self.n_periods) {
            return bad(format!("n_times ({}) must be a multiple of n_periods ({})", self.n_times, self.n_periods));
        }
        Interval::new(self.time_span[0], self.time_span[1])?;
        self.params.validate()?;
        if !(self.process_variance > 0.0) {
            return bad(format!("process_variance must be positive, got {}", self.process_variance));
        }
        if !(self.noise_variance >= 0.0) || !(self.mean.variance >= 0.0) {
            return bad("noise_variance and mean.variance must be nonnegative".into());
        }
        if !(self.mean.period > 0.0) {
            return bad(format!("mean.period must be positive, got {}", self.mean.period));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad(format!("missing_fraction must be in [0, 1), got {}", self.missing_fraction));
        }
        for q in &self.quarters {
            if q.count == 0 {
                return bad("every quarter needs at least one block".into());
            }
            Interval::new(q.t_start, q.t_end)?;
        }
        if self.outcome.beta1.is_empty() {
            return bad("outcome.beta1 needs at least the intercept".into());
        }
        if !(self.outcome.tau2 >= 0.0) {
            return bad(format!("outcome.tau2 must be nonnegative, got {}", self.outcome.tau2));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        self.basis.validate()
    }

    /// Midpoints of the daily grid.
    pub fn times(&self) -> Vec<f64> {
        let [a, b] = self.time_span;
        let h = (b - a) / self.n_times as f64;
        (0..self.n_times).map(|j| a + (j as f64 + 0.5) * h).collect()
    }

    pub fn periods(&self) -> Vec<Interval> {
        let [a, b] = self.time_span;
        let w = (b - a) / self.n_periods as f64;
        (0..self.n_periods).map(|m| Interval { start: a + m as f64 * w, end: a + (m + 1) as f64 * w }).collect()
    }

    pub fn quarter_design(&self) -> Result<Vec<(usize, Interval)>> {
        self.quarters.iter().map(|q| Ok((q.count, Interval::new(q.t_start, q.t_end)?))).collect()
    }
}

/// `exp(−2λ² sin²(π|t − t'|/p))`.
pub fn periodic_kernel(t: f64, t2: f64, p: f64, lambda: f64) -> f64 {
    let s = (PI * (t - t2).abs() / p).sin();
    (-2.0 * lambda * lambda * s * s).exp()
}

/// Square root `Q Λ^{1/2}` of a PSD matrix, negative eigenvalues clamped to
/// zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let mut q = eig.eigenvectors;
    for (j, l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        q.column_mut(j).scale_mut(s);
    }
    q
}

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw with covariance `(L_s L_sᵀ) ⊗ (L_t L_tᵀ)`, arranged `n_s × n_t`:
/// `L_s E L_tᵀ` with `E` standard normal.
pub fn sample_kronecker<R: Rng + ?Sized>(ls: &DMatrix<f64>, lt: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let (ns, nt) = (ls.ncols(), lt.ncols());
    let e = DMatrix::from_iterator(ns, nt, (0..ns * nt).map(|_| rng.sample::<f64, _>(StandardNormal)));
    ls * e * lt.transpose()
}

pub fn spatial_corr_matrix(sites: &[Point2], params: &ProcessParams) -> DMatrix<f64> {
    let m = params.matern();
    DMatrix::from_fn(sites.len(), sites.len(), |i, j| m.corr(sites[i].dist(&sites[j])))
}

pub fn temporal_corr_matrix(times: &[f64], phi_t: f64) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), times.len(), |i, j| exp_time_corr(times[i], times[j], phi_t))
}

/// Everything about the simulated exposure that the data do not reveal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub sites: Vec<Point2>,
    pub times: Vec<f64>,
    pub periods: Vec<Interval>,
    pub params: ProcessParams,
    pub process_variance: f64,
    /// `μ(t)` on the daily grid.
    pub mu: Vec<f64>,
    /// Latent `Z` (mean included), `n_s × n_t`.
    pub z: DMatrix<f64>,
    /// Period averages of `Z`, `n_s × n_periods`.
    pub period_z: DMatrix<f64>,
    pub period_mu: Vec<f64>,
    /// Site index of each dataset row.
    pub record_sites: Vec<usize>,
    /// Period index of each dataset row.
    pub record_periods: Vec<usize>,
}

impl SimTruth {
    /// Latent value at site `i` and daily index `j`.
    pub fn latent(&self, i: usize, j: usize) -> f64 {
        self.z[(i, j)]
    }

    /// Average of the daily mean curve over the grid points inside `iv`.
    pub fn interval_mean(&self, iv: &Interval) -> Result<f64> {
        let vals: Vec<f64> =
            self.times.iter().zip(&self.mu).filter(|(t, _)| **t >= iv.start && **t < iv.end).map(|(_, m)| *m).collect();
        if vals.is_empty() {
            return Err(Error::InvalidArgument(format!("no simulated times in ({}, {})", iv.start, iv.end)));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn bucket_average(row: impl Iterator<Item = f64>, per: usize, n_periods: usize) -> Vec<f64> {
    let v: Vec<f64> = row.collect();
    (0..n_periods).map(|m| v[m * per..(m + 1) * per].iter().sum::<f64>() / per as f64).collect()
}

/// Daily latent field and noisy observations at uniformly placed sites,
/// averaged to periods, with a fixed fraction of site-period records
/// removed at random. Rows are ordered by site, then period.
pub fn simulate_exposure<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(PointDataset, SimTruth)> {
    cfg.validate()?;
    let (ns, nt, np) = (cfg.n_sites, cfg.n_times, cfg.n_periods);
    let sites: Vec<Point2> = (0..ns).map(|_| cfg.bbox.sample(rng)).collect();
    let times = cfg.times();
    let periods = cfg.periods();

    let mean_cov = DMatrix::from_fn(nt, nt, |i, j| {
        cfg.mean.variance * periodic_kernel(times[i], times[j], cfg.mean.period, cfg.mean.decay)
    });
    let mu = DVector::from_element(nt, cfg.mean.level) + psd_sqrt(&mean_cov) * standard_normals(nt, rng);

    let (ls, _) = cholesky_jittered(&spatial_corr_matrix(&sites, &cfg.params), MAX_REL_JITTER)?;
    let (lt, _) = cholesky_jittered(&temporal_corr_matrix(&times, cfg.params.phi_t), MAX_REL_JITTER)?;
    let mut z = sample_kronecker(ls.l(), lt.l(), rng) * cfg.process_variance.sqrt();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(mu[j]);
    }
    let noise_sd = cfg.noise_variance.sqrt();
    let x = DMatrix::from_fn(ns, nt, |i, j| z[(i, j)] + noise_sd * rng.sample::<f64, _>(StandardNormal));

    let per = nt / np;
    let mut period_x = DMatrix::zeros(ns, np);
    let mut period_z = DMatrix::zeros(ns, np);
    for i in 0..ns {
        let ax = bucket_average(x.row(i).iter().copied(), per, np);
        let az = bucket_average(z.row(i).iter().copied(), per, np);
        for m in 0..np {
            period_x[(i, m)] = ax[m];
            period_z[(i, m)] = az[m];
        }
    }
    let period_mu = bucket_average(mu.iter().copied(), per, np);

    let total = ns * np;
    let n_missing = (cfg.missing_fraction * total as f64).round() as usize;
    let mut missing = vec![false; total];
    for k in index::sample(rng, total, n_missing) {
        missing[k] = true;
    }
    let mut coords = Vec::with_capacity(total - n_missing);
    let mut values = Vec::with_capacity(total - n_missing);
    let mut record_sites = Vec::with_capacity(total - n_missing);
    let mut record_periods = Vec::with_capacity(total - n_missing);
    for i in 0..ns {
        for m in 0..np {
            if missing[i * np + m] {
                continue;
            }
            coords.push(SpaceTimePoint { s: sites[i], interval: periods[m] });
            values.push(period_x[(i, m)]);
            record_sites.push(i);
            record_periods.push(m);
        }
    }
    if coords.is_empty() {
        return Err(Error::InvalidArgument("missingness removed every record".into()));
    }
    let data = PointDataset::new(coords, values, cfg.basis.clone())?;
    let truth = SimTruth {
        sites,
        times,
        periods,
        params: cfg.params,
        process_variance: cfg.process_variance,
        mu: mu.iter().copied().collect(),
        z,
        period_z,
        period_mu,
        record_sites,
        record_periods,
    };
    Ok((data, truth))
}

/// Per quarter, a Voronoi partition of `bbox` from `count` uniform seeds,
/// every cell paired with the quarter's interval.
pub fn simulate_block_design<R: Rng + ?Sized>(
    quarters: &[(usize, Interval)],
    bbox: &BoundingBox,
    rng: &mut R,
) -> Result<Vec<SpaceTimeBlock>> {
    let mut blocks = Vec::new();
    for &(count, interval) in quarters {
        if count == 0 {
            return Err(Error::InvalidArgument("a quarter needs at least one block".into()));
        }
        let seeds: Vec<Point2> = (0..count).map(|_| bbox.sample(rng)).collect();
        for region in voronoi_blocks(&seeds, bbox)? {
            blocks.push(SpaceTimeBlock { region, interval });
        }
    }
    Ok(blocks)
}

/// Block-level truth: `z` includes the mean, `mu` is the interval average of
/// the mean curve.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTruth {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
}

impl BlockTruth {
    pub fn detrended(&self) -> Vec<f64> {
        self.z.iter().zip(&self.mu).map(|(z, m)| z - m).collect()
    }
}

/// Mean and covariance of `Z_L` given the latent daily grid. The block
/// cross-covariance with the grid factorizes as `a_k ⊗ b_k`, so only the
/// spatial and temporal factors are ever inverted.
pub fn block_conditional(
    blocks: &[SpaceTimeBlock],
    truth: &SimTruth,
    samples: &BlockSamples,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("at least one block is required".into()));
    }
    let k = blocks.len();
    let params = &truth.params;
    let (ls, _) = cholesky_jittered(&spatial_corr_matrix(&truth.sites, params), MAX_REL_JITTER)?;
    let (lt, _) = cholesky_jittered(&temporal_corr_matrix(&truth.times, params.phi_t), MAX_REL_JITTER)?;
    let m = params.matern();
    let mut resid = truth.z.clone();
    for (j, mut col) in resid.column_iter_mut().enumerate() {
        col.add_scalar_mut(-truth.mu[j]);
    }
    let mut wa = DMatrix::zeros(truth.sites.len(), k);
    let mut wb = DMatrix::zeros(truth.times.len(), k);
    let mut mean = DVector::zeros(k);
    for (kk, b) in blocks.iter().enumerate() {
        let a = DVector::from_iterator(
            truth.sites.len(),
            truth.sites.iter().map(|s| spatial_point_block_avg(&m, s, samples.block(kk))),
        );
        let iv = &b.interval;
        let bt = DVector::from_iterator(
            truth.times.len(),
            truth.times.iter().map(|t| time_point_interval_integral(*t, iv.start, iv.end, params.phi_t) / iv.len()),
        );
        mean[kk] = truth.interval_mean(iv)? + ls.solve_vec(&a).dot(&(&resid * lt.solve_vec(&bt)));
        wa.set_column(kk, &ls.whiten_vec(&a));
        wb.set_column(kk, &lt.whiten_vec(&bt));
    }
    let c_l = cov_block_block(blocks, samples, params)?;
    let mut cov = (c_l - wa.tr_mul(&wa).component_mul(&wb.tr_mul(&wb))) * truth.process_variance;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Draws `Z_L` from its conditional given the latent daily grid, using
/// `mc_samples` within-polygon draws per block, then
/// `y = Wβ₁ + β₂ Z_L + ε` with `ε_k ~ N(0, τ² / (|B_k||I_k|))`.
pub fn simulate_outcome<R: Rng + ?Sized>(
    blocks: &[SpaceTimeBlock],
    truth: &SimTruth,
    outcome: &OutcomeSim,
    mc_samples: usize,
    rng: &mut R,
) -> Result<(BlockOutcomeDataset, BlockTruth)> {
    let samples = BlockSamples::for_blocks(blocks, mc_samples, rng.random::<u64>())?;
    let (mean, cov) = block_conditional(blocks, truth, &samples)?;
    let k = blocks.len();
    let z_l = mean + psd_sqrt(&cov) * standard_normals(k, rng);
    let mu_l = blocks.iter().map(|b| truth.interval_mean(&b.interval)).collect::<Result<Vec<_>>>()?;

    let p = outcome.beta1.len();
    let w = DMatrix::from_fn(k, p, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
    let mean_y = &w * DVector::from_column_slice(&outcome.beta1) + &z_l * outcome.beta2;
    let y: Vec<f64> = blocks
        .iter()
        .enumerate()
        .map(|(r, b)| mean_y[r] + (outcome.tau2 / b.volume()).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let columns: Vec<String> = (0..p).map(|c| if c == 0 { "intercept".to_string() } else { format!("w{c}") }).collect();
    let dataset = BlockOutcomeDataset::new(blocks.to_vec(), y, w, columns, true)?;
    Ok((dataset, BlockTruth { z: z_l.iter().copied().collect(), mu: mu_l }))
}

/// A full simulated study.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: PointDataset,
    pub truth: SimTruth,
    pub blocks: Vec<SpaceTimeBlock>,
    pub outcome: BlockOutcomeDataset,
    pub block_truth: BlockTruth,
}

/// Runs every stage from `cfg.seed`, each on its own random stream.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (data, truth) = simulate_exposure(cfg, &mut stream_rng(cfg.seed, 0))?;
    let blocks = simulate_block_design(&cfg.quarter_design()?, &cfg.bbox, &mut stream_rng(cfg.seed, 1))?;
    let (outcome, block_truth) =
        simulate_outcome(&blocks, &truth, &cfg.outcome, cfg.mc_samples, &mut stream_rng(derive_seed(cfg.seed, 2), 0))?;
    Ok(Simulation { data, truth, blocks, outcome, block_truth })
}

#[cfg(test)]
mod tests;
