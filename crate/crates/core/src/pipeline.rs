//! End-to-end runs: fitting and stacking the candidate grid, persisting the
//! weighted fits, stacked prediction, and the downstream outcome regression.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{spatial_block_block_matrix, BlockSamples, InstantPoint, SpaceTimeBlock, DEFAULT_MC_SAMPLES};
use crate::error::{Error, Result};
use crate::evaluation::{waic, WaicReport};
use crate::io::{self, BlockTable, OutcomeTable, SampleTable};
use crate::linalg::CholFactor;
use crate::loo::{loo_column, LooMatrix, LooMethod, KHAT_WARN, PSIS_MIN_DRAWS};
use crate::model::{
    fit_candidate, fit_outcome_regression, log_pointwise_outcome_density, sample_candidate, BasisSpec,
    BlockOutcomeDataset, CandidateFit, ConditionalPlan, OutcomeDraws, PointDataset, Priors,
};
use crate::rng::{derive_seed, stream_rng};
use crate::simulation::Simulation;
use crate::stacking::{
    draws_per_candidate, stacked_sample, stacking_weights, CandidateGrid, StackingWeights, WeightsFile,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};

/// Candidates at or below this weight are neither persisted nor sampled.
pub const WEIGHT_EPS: f64 = 1e-12;
pub const DEFAULT_DRAWS: usize = 1000;
pub const MIN_DRAWS: usize = PSIS_MIN_DRAWS;
pub const INTERCEPT_COLUMN: &str = "intercept";
const INTERVAL_MATCH_TOL: f64 = 1e-9;

const STREAM_LOO: u64 = 0;
const STREAM_STACK: u64 = 1;
const STREAM_PREDICT: u64 = 2;
const STREAM_BLOCKS: u64 = 3;
const STREAM_OUTCOME: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    pub phi_s: Vec<f64>,
    pub nu: Vec<f64>,
    pub phi_t: Vec<f64>,
    pub delta2: Vec<f64>,
}

/// Scalar prior settings; means are zero and covariances isotropic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub gamma_variance: f64,
    pub beta_variance: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_tau: f64,
    pub b_tau: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            gamma_variance: Priors::DEFAULT_VARIANCE,
            beta_variance: Priors::DEFAULT_VARIANCE,
            a_sigma: Priors::DEFAULT_SHAPE,
            b_sigma: Priors::DEFAULT_SCALE,
            a_tau: Priors::DEFAULT_SHAPE,
            b_tau: Priors::DEFAULT_SCALE,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.gamma_variance, self.beta_variance, self.a_sigma, self.b_sigma, self.a_tau, self.b_tau];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("prior variances, shapes and scales must be positive".into()));
        }
        Ok(())
    }

    /// Priors for basis dimension `r` and `q` outcome coefficients.
    pub fn priors(&self, r: usize, q: usize) -> Priors {
        Priors {
            mu_beta: DVector::zeros(q),
            v_beta: DMatrix::identity(q, q) * self.beta_variance,
            a_tau: self.a_tau,
            b_tau: self.b_tau,
            mu_gamma: DVector::zeros(r),
            v_gamma: DMatrix::identity(r, r) * self.gamma_variance,
            a_sigma: self.a_sigma,
            b_sigma: self.b_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeConfig {
    /// Regress `ln y` instead of `y`.
    pub log_transform: bool,
    /// Predictor columns to dummy-encode even when their cells parse as numbers.
    pub categorical: Vec<String>,
    /// Scale the error variance by the interval length as well as the area.
    pub include_interval: bool,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self { log_transform: false, categorical: Vec::new(), include_interval: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoPaths {
    pub points: Option<PathBuf>,
    pub blocks: Option<PathBuf>,
    pub instants: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub fits: Option<PathBuf>,
}

fn default_basis() -> BasisSpec {
    BasisSpec::Monthly
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_loo() -> LooMethod {
    LooMethod::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grids: Grids,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default = "default_basis")]
    pub basis: BasisSpec,
    /// Posterior draws `B` per stacked sample.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loo")]
    pub loo: LooMethod,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub paths: IoPaths,
}

impl RunConfig {
    pub fn new(grids: Grids) -> Self {
        Self {
            grids,
            priors: PriorConfig::default(),
            basis: default_basis(),
            draws: DEFAULT_DRAWS,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            loo: LooMethod::Auto,
            threads: None,
            outcome: OutcomeConfig::default(),
            paths: IoPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.candidate_grid()?;
        self.priors.validate()?;
        self.basis.validate()?;
        if self.draws < MIN_DRAWS {
            return Err(Error::InvalidArgument(format!("draws must be at least {MIN_DRAWS}, got {}", self.draws)));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn candidate_grid(&self) -> Result<CandidateGrid> {
        let g = &self.grids;
        for (name, v) in [("phi_s", &g.phi_s), ("nu", &g.nu), ("phi_t", &g.phi_t), ("delta2", &g.delta2)] {
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("grid {name} is empty")));
            }
        }
        CandidateGrid::cartesian(&g.phi_s, &g.nu, &g.phi_t, &g.delta2)
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn run_with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Result of fitting and stacking a candidate grid.
#[derive(Debug, Clone)]
pub struct StackFit {
    pub grid: CandidateGrid,
    pub loo: LooMatrix,
    pub weights: StackingWeights,
    /// Candidates with weight above [`WEIGHT_EPS`], keyed by grid index.
    pub fits: Vec<(usize, CandidateFit)>,
}

impl StackFit {
    pub fn weights_file(&self) -> Result<WeightsFile> {
        WeightsFile::new(self.grid.specs(), &self.weights)
    }
}

/// Fits every candidate in parallel, builds the leave-one-out matrix and
/// solves for stacking weights. Fits are dropped after their LOO column and
/// only the weighted candidates are refitted.
pub fn fit_stack(data: &PointDataset, cfg: &RunConfig) -> Result<StackFit> {
    cfg.validate()?;
    if data.basis != cfg.basis {
        return Err(Error::InvalidArgument("dataset basis differs from the configured basis".into()));
    }
    let grid = cfg.candidate_grid()?;
    let priors = cfg.priors.priors(data.basis_dim(), 1);
    let method = cfg.loo.resolve(data.len());
    let loo_seed = derive_seed(cfg.seed, STREAM_LOO);
    log::info!("fitting {} candidates on {} points ({} leave-one-out)", grid.len(), data.len(), method.as_str());
    let columns = grid
        .specs()
        .par_iter()
        .enumerate()
        .map(|(g, spec)| {
            let fit = fit_candidate(data, spec, &priors)?;
            let draws = match method {
                LooMethod::Psis => Some(sample_candidate(&fit, data, cfg.draws, &mut stream_rng(loo_seed, g as u64))?),
                _ => None,
            };
            loo_column(&fit, data, &priors, method, draws.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let loo = LooMatrix::from_columns(columns)?;
    let high = loo.khat.iter().flatten().filter(|k| k.is_some_and(|k| k > KHAT_WARN)).count();
    if high > 0 {
        log::warn!("{high} leave-one-out densities have Pareto k-hat above {KHAT_WARN}");
    }
    let weights = stacking_weights(&loo, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    if weights.non_unique {
        log::warn!("duplicate leave-one-out columns: stacking weights are not unique");
    }
    let keep: Vec<usize> = (0..grid.len()).filter(|&g| weights.alpha[g] > WEIGHT_EPS).collect();
    let fits = keep
        .par_iter()
        .map(|&g| fit_candidate(data, &grid.specs()[g], &priors).map(|f| (g, f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StackFit { grid, loo, weights, fits })
}

/// Everything needed to predict from a stacked fit without refitting.
#[derive(Debug, Clone)]
pub struct StackedModel {
    pub site_ids: Vec<String>,
    pub data: PointDataset,
    pub weights: WeightsFile,
    pub fits: Vec<(usize, CandidateFit)>,
}

impl StackedModel {
    pub fn new(site_ids: Vec<String>, data: PointDataset, stack: StackFit) -> Result<Self> {
        if site_ids.len() != data.len() {
            return Err(Error::Dimension(format!("{} site ids for {} points", site_ids.len(), data.len())));
        }
        let weights = stack.weights_file()?;
        Ok(Self { site_ids, data, weights, fits: stack.fits })
    }

    /// Stacking weights restricted to persisted candidates and renormalized.
    pub fn effective_alpha(&self) -> Vec<f64> {
        let mut alpha = vec![0.0; self.weights.candidates.len()];
        for (g, _) in &self.fits {
            alpha[*g] = self.weights.candidates[*g].weight;
        }
        let total: f64 = alpha.iter().sum();
        alpha.iter().map(|a| a / total).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    index: usize,
    dir: String,
    a_sigma_star: f64,
    b_sigma_star: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    basis: BasisSpec,
    n_points: usize,
    weights: WeightsFile,
    candidates: Vec<ManifestEntry>,
}

const POINTS_FILE: &str = "points.csv";
const MANIFEST_FILE: &str = "manifest.json";

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn save_blob(dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<()> {
    io::write_matrix_blob(io::create(&dir.join(format!("{name}.bin")))?, m)
}

fn load_blob(dir: &Path, name: &str) -> Result<DMatrix<f64>> {
    io::read_matrix_blob(io::open(&dir.join(format!("{name}.bin")))?)
}

fn load_vec(dir: &Path, name: &str) -> Result<DVector<f64>> {
    let m = load_blob(dir, name)?;
    if m.ncols() != 1 {
        return Err(Error::Data(format!("{name}.bin is not a vector")));
    }
    Ok(m.column(0).into_owned())
}

/// Writes the training points, a manifest and per-candidate matrix blobs.
pub fn save_model(dir: &Path, model: &StackedModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_points(
        io::create(&dir.join(POINTS_FILE))?,
        &model.site_ids,
        &model.data.coords,
        model.data.x.as_slice(),
    )?;
    let mut entries = Vec::new();
    for (g, fit) in &model.fits {
        let name = format!("candidate_{g}");
        let sub = dir.join(&name);
        fs::create_dir_all(&sub)?;
        save_blob(&sub, "chol_vx", fit.chol_vx.l())?;
        save_blob(&sub, "chol_c", fit.chol_c.l())?;
        save_blob(&sub, "chol_mz", fit.chol_mz.l())?;
        save_blob(&sub, "m_gamma_cov", &fit.m_gamma_cov)?;
        save_blob(&sub, "chol_m_gamma", fit.chol_m_gamma.l())?;
        save_blob(&sub, "m_gamma", &col(&fit.m_gamma))?;
        save_blob(&sub, "gamma_mean", &col(&fit.gamma_mean))?;
        save_blob(&sub, "z_shift", &col(&fit.z_shift))?;
        save_blob(&sub, "z_trend", &fit.z_trend)?;
        entries.push(ManifestEntry {
            index: *g,
            dir: name,
            a_sigma_star: fit.a_sigma_star,
            b_sigma_star: fit.b_sigma_star,
        });
    }
    let manifest = Manifest {
        basis: model.data.basis.clone(),
        n_points: model.data.len(),
        weights: model.weights.clone(),
        candidates: entries,
    };
    let mut w = io::create(&dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<StackedModel> {
    let manifest: Manifest = serde_json::from_reader(io::open(&dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let table = io::read_points(io::open(&dir.join(POINTS_FILE))?)?;
    let data = PointDataset::new(table.coords, table.values, manifest.basis.clone())?;
    if data.len() != manifest.n_points {
        return Err(Error::Data(format!("manifest expects {} points, found {}", manifest.n_points, data.len())));
    }
    let specs = manifest.weights.specs()?;
    let mut fits = Vec::with_capacity(manifest.candidates.len());
    for e in &manifest.candidates {
        let spec =
            *specs.get(e.index).ok_or_else(|| Error::Data(format!("candidate index {} out of range", e.index)))?;
        let sub = dir.join(&e.dir);
        let fit = CandidateFit {
            spec,
            chol_vx: CholFactor::from_lower(load_blob(&sub, "chol_vx")?)?,
            chol_c: CholFactor::from_lower(load_blob(&sub, "chol_c")?)?,
            chol_mz: CholFactor::from_lower(load_blob(&sub, "chol_mz")?)?,
            m_gamma_cov: load_blob(&sub, "m_gamma_cov")?,
            chol_m_gamma: CholFactor::from_lower(load_blob(&sub, "chol_m_gamma")?)?,
            m_gamma: load_vec(&sub, "m_gamma")?,
            gamma_mean: load_vec(&sub, "gamma_mean")?,
            a_sigma_star: e.a_sigma_star,
            b_sigma_star: e.b_sigma_star,
            z_shift: load_vec(&sub, "z_shift")?,
            z_trend: load_blob(&sub, "z_trend")?,
        };
        if fit.z_shift.len() != data.len() || fit.z_trend.shape() != (data.len(), data.basis_dim()) {
            return Err(Error::Data(format!("stored fit for candidate {} does not match the points", e.index)));
        }
        fits.push((e.index, fit));
    }
    if fits.is_empty() {
        return Err(Error::Data("manifest lists no candidates".into()));
    }
    Ok(StackedModel { site_ids: table.site_ids, data, weights: manifest.weights, fits })
}

/// Writes `weights.json`, `loo.csv`, `khat.csv` (PSIS runs only) and the
/// persisted fits under `fits/`.
pub fn write_stack_outputs(out: &Path, model: &StackedModel, loo: &LooMatrix) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = io::create(&out.join("weights.json"))?;
    serde_json::to_writer_pretty(&mut w, &model.weights)?;
    w.flush()?;
    loo.write_csv(io::create(&out.join("loo.csv"))?)?;
    if loo.methods.contains(&LooMethod::Psis) {
        loo.write_khat_csv(io::create(&out.join("khat.csv"))?)?;
    }
    save_model(&out.join("fits"), model)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Instants(Vec<InstantPoint>),
    Blocks(Vec<SpaceTimeBlock>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Instants(v) => v.len(),
            Targets::Blocks(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedPrediction {
    /// `targets × B`.
    pub values: DMatrix<f64>,
    /// Source candidate (grid index) of each draw.
    pub candidates: Vec<usize>,
}

/// Draws `B` samples from the stacked predictive at the targets: each draw
/// picks a candidate by weight, then one exact posterior predictive draw of
/// that candidate.
pub fn predict(
    model: &StackedModel,
    targets: &Targets,
    draws: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<StackedPrediction> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be positive".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no prediction targets".into()));
    }
    let alpha = model.effective_alpha();
    let g_total = alpha.len();
    let picks = stacked_sample(&alpha, &vec![draws; g_total], draws, &mut stream_rng(seed, STREAM_STACK))?;
    let counts = draws_per_candidate(&picks, g_total);
    let samples = match targets {
        Targets::Blocks(b) => Some(BlockSamples::for_blocks(b, mc_samples, derive_seed(seed, STREAM_BLOCKS))?),
        Targets::Instants(_) => None,
    };
    let predict_seed = derive_seed(seed, STREAM_PREDICT);
    let data = &model.data;
    let active: Vec<&(usize, CandidateFit)> = model.fits.iter().filter(|(g, _)| counts[*g] > 0).collect();
    // the spatial block-block factor depends only on (phi_s, nu)
    let mut spatial: HashMap<(u64, u64), DMatrix<f64>> = HashMap::new();
    if let Some(s) = &samples {
        for (_, fit) in &active {
            let p = fit.spec.params;
            spatial
                .entry((p.phi_s.to_bits(), p.nu.to_bits()))
                .or_insert_with(|| spatial_block_block_matrix(s, &p.matern()));
        }
    }
    let per_candidate = active
        .par_iter()
        .map(|&(g, fit)| {
            let mut rng = stream_rng(predict_seed, *g as u64);
            let post = sample_candidate(fit, data, counts[*g], &mut rng)?;
            let plan = match (targets, &samples) {
                (Targets::Instants(t), _) => ConditionalPlan::for_instants(fit, data, t)?,
                (Targets::Blocks(b), Some(s)) => {
                    let key = (fit.spec.params.phi_s.to_bits(), fit.spec.params.nu.to_bits());
                    ConditionalPlan::for_blocks_with_spatial(fit, data, b, s, &spatial[&key])?
                }
                (Targets::Blocks(_), None) => unreachable!("block samples are drawn for block targets"),
            };
            Ok((*g, plan.sample(data, &post, &mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;
    let by_candidate: HashMap<usize, DMatrix<f64>> = per_candidate.into_iter().collect();
    let mut values = DMatrix::zeros(targets.len(), draws);
    for (b, pick) in picks.iter().enumerate() {
        values.set_column(b, &by_candidate[&pick.candidate].column(pick.draw));
    }
    Ok(StackedPrediction { values, candidates: picks.iter().map(|p| p.candidate).collect() })
}

/// Sample quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            q025: quantile_sorted(&v, 0.025),
            q975: quantile_sorted(&v, 0.975),
        }
    }
}

pub fn summarize_rows(values: &DMatrix<f64>) -> Vec<Summary> {
    values.row_iter().map(|r| Summary::of(r.iter().copied())).collect()
}

pub fn write_summary_csv<W: Write>(w: W, ids: &[String], summaries: &[Summary]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["target_id", "mean", "median", "q025", "q975"])?;
    for (id, s) in ids.iter().zip(summaries) {
        wr.write_record([
            id.clone(),
            s.mean.to_string(),
            s.median.to_string(),
            s.q025.to_string(),
            s.q975.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes `samples.csv` and `summary.csv` for a stacked prediction.
pub fn write_prediction(out: &Path, ids: &[String], pred: &StackedPrediction) -> Result<()> {
    fs::create_dir_all(out)?;
    let table = SampleTable { ids: ids.to_vec(), values: pred.values.clone(), candidates: pred.candidates.clone() };
    io::write_samples(io::create(&out.join("samples.csv"))?, &table)?;
    write_summary_csv(io::create(&out.join("summary.csv"))?, ids, &summarize_rows(&pred.values))
}

/// Design matrix with a leading intercept. Columns that are listed as
/// categorical, or that contain a non-numeric cell, become indicators of
/// every level but the first in sorted order.
pub fn encode_predictors(table: &OutcomeTable, categorical: &[String]) -> Result<(DMatrix<f64>, Vec<String>)> {
    for c in categorical {
        if !table.predictors.iter().any(|(n, _)| n == c) {
            return Err(Error::Data(format!("categorical column '{c}' is not in the outcomes file")));
        }
    }
    let k = table.y.len();
    let mut names = vec![INTERCEPT_COLUMN.to_string()];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; k]];
    for (name, cells) in &table.predictors {
        let numeric: Option<Vec<f64>> = cells.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        match numeric {
            Some(v) if !categorical.contains(name) => {
                names.push(name.clone());
                cols.push(v);
            }
            _ => {
                let levels: BTreeSet<&str> = cells.iter().map(String::as_str).collect();
                if levels.len() < 2 {
                    log::warn!("categorical column '{name}' has a single level and contributes no indicators");
                }
                for level in levels.iter().skip(1) {
                    names.push(format!("{name}_{level}"));
                    cols.push(cells.iter().map(|c| if c == level { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let w = DMatrix::from_fn(k, cols.len(), |i, j| cols[j][i]);
    Ok((w, names))
}

/// Joins outcome rows to their blocks by `block_id`, checks the intervals
/// agree, encodes predictors and applies the optional log transform.
pub fn build_outcome_dataset(
    table: &OutcomeTable,
    blocks: &BlockTable,
    cfg: &OutcomeConfig,
) -> Result<BlockOutcomeDataset> {
    let index: HashMap<&str, usize> = blocks.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut joined = Vec::with_capacity(table.y.len());
    for (r, id) in table.block_ids.iter().enumerate() {
        let line = table.lines[r];
        let &b =
            index.get(id.as_str()).ok_or_else(|| Error::Data(format!("line {line}: block_id '{id}' not in blocks")))?;
        let (iv, biv) = (table.intervals[r], blocks.blocks[b].interval);
        if (iv.start - biv.start).abs() > INTERVAL_MATCH_TOL || (iv.end - biv.end).abs() > INTERVAL_MATCH_TOL {
            return Err(Error::Data(format!(
                "line {line}: interval ({}, {}) differs from block '{id}' interval ({}, {})",
                iv.start, iv.end, biv.start, biv.end
            )));
        }
        joined.push(blocks.blocks[b].clone());
    }
    let y = if cfg.log_transform {
        let bad: Vec<String> =
            table.y.iter().zip(&table.lines).filter(|(y, _)| **y <= 0.0).map(|(_, l)| l.to_string()).collect();
        if !bad.is_empty() {
            return Err(Error::Data(format!(
                "log transform needs positive outcomes; nonpositive at lines {}",
                bad.join(", ")
            )));
        }
        table.y.iter().map(|y| y.ln()).collect()
    } else {
        table.y.clone()
    };
    let (w, names) = encode_predictors(table, &cfg.categorical)?;
    BlockOutcomeDataset::new(joined, y, w, names, cfg.include_interval)
}

/// Rows of the sample table in the order of `ids`; `K × B`.
pub fn align_samples(ids: &[String], samples: &SampleTable) -> Result<DMatrix<f64>> {
    let index: HashMap<&str, usize> = samples.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows = ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("no samples for block '{id}'"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(samples.values.select_rows(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub n_outcomes: usize,
    pub n_draws: usize,
    pub coefficients: Vec<CoefficientSummary>,
    pub tau2: Summary,
}

#[derive(Debug, Clone)]
pub struct OutcomeReport {
    pub draws: OutcomeDraws,
    pub summary: OutcomeSummary,
    pub waic: WaicReport,
}

/// One conjugate outcome-regression draw per exposure draw (columns of
/// `zl`), coefficient summaries and WAIC.
pub fn run_outcome(
    outcome: &BlockOutcomeDataset,
    zl: &DMatrix<f64>,
    priors: &PriorConfig,
    seed: u64,
) -> Result<OutcomeReport> {
    priors.validate()?;
    let p = priors.priors(1, outcome.n_coefficients());
    let draws = fit_outcome_regression(outcome, zl, &p, &mut stream_rng(seed, STREAM_OUTCOME))?;
    let loglik = log_pointwise_outcome_density(outcome, &draws, zl)?;
    let waic = waic(&loglik)?;
    let coefficients = draws
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| CoefficientSummary { name: n.clone(), summary: Summary::of(draws.beta.row(i).iter().copied()) })
        .collect();
    let summary = OutcomeSummary {
        n_outcomes: outcome.len(),
        n_draws: draws.len(),
        coefficients,
        tau2: Summary::of(draws.tau2.iter().copied()),
    };
    Ok(OutcomeReport { draws, summary, waic })
}

/// Writes `beta_samples.csv`, `summary.json` and `waic.json`.
pub fn write_outcome(out: &Path, report: &OutcomeReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut wr = csv::Writer::from_writer(io::create(&out.join("beta_samples.csv"))?);
    let mut header = vec!["draw".to_string()];
    header.extend(report.draws.names.iter().cloned());
    header.push("tau2".into());
    wr.write_record(&header)?;
    for b in 0..report.draws.len() {
        let mut rec = vec![b.to_string()];
        rec.extend(report.draws.beta.column(b).iter().map(f64::to_string));
        rec.push(report.draws.tau2[b].to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    for (name, value) in
        [("summary.json", serde_json::to_value(&report.summary)?), ("waic.json", serde_json::to_value(&report.waic)?)]
    {
        let mut w = io::create(&out.join(name))?;
        serde_json::to_writer_pretty(&mut w, &value)?;
        w.flush()?;
    }
    Ok(())
}

/// Writes `points.csv`, `blocks.geojson`, `outcomes.csv` and `truth.csv`.
pub fn write_simulation(out: &Path, sim: &Simulation) -> Result<()> {
    fs::create_dir_all(out)?;
    let site_ids: Vec<String> = sim.truth.record_sites.iter().map(|s| format!("s{s}")).collect();
    io::write_points(io::create(&out.join("points.csv"))?, &site_ids, &sim.data.coords, sim.data.x.as_slice())?;
    let block_ids: Vec<String> = (0..sim.blocks.len()).map(|k| format!("b{k}")).collect();
    fs::write(out.join("blocks.geojson"), io::blocks_to_geojson(&block_ids, &sim.blocks))?;
    let o = &sim.outcome;
    let predictors: Vec<(String, Vec<f64>)> = o
        .columns
        .iter()
        .enumerate()
        .filter(|(_, n)| n.as_str() != INTERCEPT_COLUMN)
        .map(|(j, n)| (n.clone(), o.w.column(j).iter().copied().collect()))
        .collect();
    let intervals: Vec<_> = o.blocks.iter().map(|b| b.interval).collect();
    io::write_outcomes(io::create(&out.join("outcomes.csv"))?, &block_ids, &intervals, o.y.as_slice(), &predictors)?;

    let mut wr = csv::Writer::from_writer(io::create(&out.join("truth.csv"))?);
    wr.write_record(["kind", "id", "t_start", "t_end", "z", "mu"])?;
    let t = &sim.truth;
    for (r, (&s, &m)) in t.record_sites.iter().zip(&t.record_periods).enumerate() {
        let iv = t.periods[m];
        wr.write_record([
            "point".to_string(),
            site_ids[r].clone(),
            iv.start.to_string(),
            iv.end.to_string(),
            t.period_z[(s, m)].to_string(),
            t.period_mu[m].to_string(),
        ])?;
    }
    for (k, b) in sim.blocks.iter().enumerate() {
        wr.write_record([
            "block".to_string(),
            block_ids[k].clone(),
            b.interval.start.to_string(),
            b.interval.end.to_string(),
            sim.block_truth.z[k].to_string(),
            sim.block_truth.mu[k].to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
