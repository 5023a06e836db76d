//! Leave-one-out predictive densities per candidate: exact Student-t closed
//! form using Cholesky row/column removal, or Pareto-smoothed importance
//! sampling over posterior draws.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_sum_exp, student_t_logpdf, symmetrize};
use crate::model::{CandidateFit, CandidateSpec, PointDataset, PosteriorDraws, Priors};

/// `auto` switches from the exact path to PSIS above this many points.
pub const AUTO_EXACT_MAX_N: usize = 2000;
/// Pareto k-hat above which importance weights are unreliable.
pub const KHAT_WARN: f64 = 0.7;
/// Fewest draws accepted by [`psis_loo`].
pub const PSIS_MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LooMethod {
    Exact,
    Psis,
    Auto,
}

impl LooMethod {
    /// Concrete method for a dataset of `n` points.
    pub fn resolve(self, n: usize) -> LooMethod {
        match self {
            LooMethod::Auto if n > AUTO_EXACT_MAX_N => LooMethod::Psis,
            LooMethod::Auto => LooMethod::Exact,
            m => m,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LooMethod::Exact => "exact",
            LooMethod::Psis => "psis",
            LooMethod::Auto => "auto",
        }
    }
}

struct ExactSetup {
    vg_inv: DMatrix<f64>,
    vg_inv_mu: DVector<f64>,
    mu_quad: f64,
    /// `L⁻¹ [X, Ψ̃]` for the full factor.
    white: DMatrix<f64>,
}

impl ExactSetup {
    fn new(fit: &CandidateFit, data: &PointDataset, priors: &Priors) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("leave-one-out needs at least 2 points".into()));
        }
        if fit.chol_vx.dim() != data.len() {
            return Err(Error::Dimension("fit and dataset sizes differ".into()));
        }
        let vg_inv = cholesky(&priors.v_gamma)?.inverse();
        let vg_inv_mu = &vg_inv * &priors.mu_gamma;
        let mu_quad = priors.mu_gamma.dot(&vg_inv_mu);
        let mut rhs = data.psi.clone().insert_column(0, 0.0);
        rhs.set_column(0, &data.x);
        fit.chol_vx.solve_lower_in_place(&mut rhs);
        Ok(Self { vg_inv, vg_inv_mu, mu_quad, white: rhs })
    }
}

/// Log of `p(x_j | x_{−j})`: a Student-t with `2a*_j` degrees of freedom built
/// from the factor of `V_X` with row and column `j` removed.
fn exact_point(fit: &CandidateFit, data: &PointDataset, priors: &Priors, setup: &ExactSetup, j: usize) -> Result<f64> {
    let n = data.len();
    let r = data.basis_dim();
    let l = fit.chol_vx.l();
    let lm = fit.chol_vx.drop_index(j)?;
    let lm = lm.l();
    let m = n - 1;
    let ncol = r + 2;

    // right-hand sides [X_{-j}, R, Ψ̃_{-j}] whitened by L_{-j}; rows before j
    // coincide with the full factor's forward solve
    let mut y = DMatrix::zeros(m, ncol);
    for i in 0..j {
        y[(i, 0)] = setup.white[(i, 0)];
        y[(i, 1)] = l[(j, i)];
        for c in 0..r {
            y[(i, 2 + c)] = setup.white[(i, 1 + c)];
        }
    }
    for i in j..m {
        let oi = i + 1;
        y[(i, 0)] = data.x[oi];
        // R_i = V[oi, j] = Σ_{k ≤ j} L[oi, k] L[j, k]
        let mut rv = 0.0;
        for k in 0..=j {
            rv += l[(oi, k)] * l[(j, k)];
        }
        y[(i, 1)] = rv;
        for c in 0..r {
            y[(i, 2 + c)] = data.psi[(oi, c)];
        }
    }
    let lm_data = lm.as_slice();
    for c in 0..ncol {
        let col = &mut y.as_mut_slice()[c * m..(c + 1) * m];
        for k in 0..m {
            let lk = &lm_data[k * m..(k + 1) * m];
            if k >= j {
                col[k] /= lk[k];
            }
            let yk = col[k];
            if yk != 0.0 {
                let start = (k + 1).max(j);
                for i in start..m {
                    col[i] -= lk[i] * yk;
                }
            }
        }
    }

    let ux = y.column(0);
    let ur = y.column(1);
    let upsi = y.columns(2, r);
    let xx = ux.dot(&ux);
    let rx = ur.dot(&ux);
    let rr = ur.dot(&ur);
    let psi_x = upsi.tr_mul(&ux);
    let psi_r = upsi.tr_mul(&ur);
    let mut prec = upsi.tr_mul(&upsi) + &setup.vg_inv;
    symmetrize(&mut prec);
    let mut mj = cholesky(&prec)?.inverse();
    symmetrize(&mut mj);
    let m_vec = psi_x + &setup.vg_inv_mu;
    let mean_gamma = &mj * &m_vec;
    let h = data.psi.row(j).transpose() - psi_r;
    let vjj: f64 = (0..=j).map(|k| l[(j, k)] * l[(j, k)]).sum();

    let a_star = priors.a_sigma + m as f64 / 2.0;
    let b_star = priors.b_sigma + 0.5 * (xx + setup.mu_quad - m_vec.dot(&mean_gamma));
    let loc = rx + h.dot(&mean_gamma);
    let s2 = (vjj - rr) + h.dot(&(&mj * &h));
    let scale2 = b_star / a_star * s2;
    if !(scale2 > 0.0) || !(b_star > 0.0) {
        return Err(Error::NotPositiveDefinite { pivot: j });
    }
    Ok(student_t_logpdf(data.x[j], 2.0 * a_star, loc, scale2.sqrt()))
}

/// Exact leave-one-out log predictive density of point `j`.
pub fn exact_loo(fit: &CandidateFit, data: &PointDataset, priors: &Priors, j: usize) -> Result<f64> {
    if j >= data.len() {
        return Err(Error::InvalidArgument(format!("index {j} out of range for {} points", data.len())));
    }
    let setup = ExactSetup::new(fit, data, priors)?;
    exact_point(fit, data, priors, &setup, j)
}

/// Exact leave-one-out log predictive densities for every point.
pub fn exact_loo_all(fit: &CandidateFit, data: &PointDataset, priors: &Priors) -> Result<Vec<f64>> {
    let setup = ExactSetup::new(fit, data, priors)?;
    (0..data.len()).map(|j| exact_point(fit, data, priors, &setup, j)).collect()
}

/// Generalized Pareto shape `k` and scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub k: f64,
    pub sigma: f64,
}

/// Zhang–Stephens empirical-Bayes fit of a generalized Pareto distribution
/// to positive exceedances, with the weakly informative shrinkage of `k`
/// toward 0.5 used by PSIS.
pub fn gpd_fit_tail(tail: &[f64]) -> Result<GpdFit> {
    let n = tail.len();
    if n < 5 {
        return Err(Error::TailTooSmall { n });
    }
    let mut x = tail.to_vec();
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("exceedances must be finite and nonnegative".into()));
    }
    x.sort_by(f64::total_cmp);
    let (lo, hi) = (x[0], x[n - 1]);
    if !(hi > 0.0) || hi - lo <= 1e-12 * hi {
        return Err(Error::DegenerateTail);
    }
    const PRIOR: f64 = 3.0;
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let theta: Vec<f64> =
        (1..=m).map(|jj| 1.0 / hi + (1.0 - (m as f64 / (jj as f64 - 0.5)).sqrt()) / PRIOR / xstar).collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = x.iter().map(|&xi| (1.0 - t * xi).ln()).sum::<f64>() / n as f64;
            n as f64 * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(profile.iter().copied());
    let theta_hat: f64 = theta.iter().zip(&profile).map(|(t, l)| t * (l - lse).exp()).sum();
    let k = x.iter().map(|&xi| (1.0 - theta_hat * xi).ln()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let k = (k * n as f64 + 0.5 * 10.0) / (n as f64 + 10.0);
    if !k.is_finite() || !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateTail);
    }
    Ok(GpdFit { k, sigma })
}

/// Quantile function of the generalized Pareto distribution.
pub fn gpd_quantile(p: f64, fit: &GpdFit) -> f64 {
    if fit.k == 0.0 {
        -fit.sigma * (-p).ln_1p()
    } else {
        fit.sigma * (-fit.k * (-p).ln_1p()).exp_m1() / fit.k
    }
}

/// Smoothed log weights `lw = log r − max log r` with the tail replaced.
struct Smoothed {
    lw: Vec<f64>,
    shift: f64,
    /// Indices whose weight was replaced; every other entry is the raw ratio.
    tail: Vec<usize>,
    k: Option<f64>,
}

fn smooth(log_ratios: &[f64]) -> Smoothed {
    let s = log_ratios.len();
    let shift = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - shift).collect();
    let tail_len = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    let raw = |lw| Smoothed { lw, shift, tail: Vec::new(), k: None };
    if tail_len < 5 || tail_len + 1 > s {
        return raw(lw);
    }
    // index tie-break keeps the order identical to a stable sort
    let by_weight = |a: &usize, b: &usize| lw[*a].total_cmp(&lw[*b]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..s).collect();
    let split = s - tail_len - 1;
    order.select_nth_unstable_by(split, by_weight);
    let cutoff = lw[order[split]];
    let mut tail = order.split_off(split + 1);
    tail.sort_unstable_by(by_weight);
    let exp_cut = cutoff.exp();
    let exceed: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - exp_cut).collect();
    let fit = match gpd_fit_tail(&exceed) {
        Ok(f) => f,
        Err(_) => return raw(lw),
    };
    for (rank, &i) in tail.iter().enumerate() {
        let p = (rank as f64 + 0.5) / tail_len as f64;
        // truncate at the largest raw weight, which is 0 after the shift
        lw[i] = (gpd_quantile(p, &fit) + exp_cut).ln().min(0.0);
    }
    Smoothed { lw, shift, tail, k: Some(fit.k) }
}

/// Pareto-smoothed log weights and the tail shape estimate (`None` when the
/// tail could not be fitted and raw weights were kept).
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, Option<f64>) {
    let sm = smooth(log_ratios);
    (sm.lw, sm.k)
}

/// PSIS leave-one-out output for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PsisResult {
    pub log_density: Vec<f64>,
    pub khat: Vec<Option<f64>>,
}

/// PSIS estimate of one leave-one-out log density from per-draw log likelihoods.
fn psis_point(ll: &[f64]) -> (f64, Option<f64>) {
    let lr: Vec<f64> = ll.iter().map(|v| -v).collect();
    let sm = smooth(&lr);
    // an untouched weight times its likelihood is exp(−shift)
    let untouched = (ll.len() - sm.tail.len()) as f64;
    let num = log_sum_exp(std::iter::once(untouched.ln() - sm.shift).chain(sm.tail.iter().map(|&s| sm.lw[s] + ll[s])));
    let den = log_sum_exp(sm.lw.iter().copied());
    (num - den, sm.k)
}

/// PSIS estimates of `log p(x_j | x_{−j})` from draws of `(Z_ℓ̃, σ²)`, with
/// observation variance `σ² δ² / |Ĩ_j|`.
pub fn psis_loo(draws: &PosteriorDraws, data: &PointDataset, delta2: f64) -> Result<PsisResult> {
    let b = draws.len();
    if b < PSIS_MIN_DRAWS {
        return Err(Error::InvalidArgument(format!("PSIS needs at least {PSIS_MIN_DRAWS} draws, got {b}")));
    }
    if draws.z.nrows() != data.len() {
        return Err(Error::Dimension("draws and dataset sizes differ".into()));
    }
    if !(delta2 > 0.0) {
        return Err(Error::InvalidArgument(format!("delta2 must be positive, got {delta2}")));
    }
    let d = data.d_diag();
    let log_s2: Vec<f64> = draws.sigma2.iter().map(|v| v.ln()).collect();
    let inv_s2: Vec<f64> = draws.sigma2.iter().map(|v| 1.0 / v).collect();
    let scale: Vec<f64> = d.iter().map(|dj| delta2 * dj).collect();
    let log_norm: Vec<f64> = scale.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    // points in chunks so each draw column is read contiguously
    let per_point: Vec<(f64, Option<f64>)> = idx
        .par_chunks(32)
        .map(|js| {
            let mut ll = vec![vec![0.0; b]; js.len()];
            for s in 0..b {
                let col = draws.z.column(s);
                for (row, &j) in ll.iter_mut().zip(js) {
                    let r = data.x[j] - col[j];
                    row[s] = -0.5 * (log_norm[j] + log_s2[s] + r * r * inv_s2[s] / scale[j]);
                }
            }
            ll.iter().map(|ll| psis_point(ll)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let khat: Vec<Option<f64>> = per_point.iter().map(|p| p.1).collect();
    let bad = khat.iter().filter(|k| k.is_some_and(|v| v > KHAT_WARN)).count();
    if bad > 0 {
        log::warn!("{bad} of {} points have Pareto k-hat above {KHAT_WARN}", data.len());
    }
    Ok(PsisResult { log_density: per_point.into_iter().map(|p| p.0).collect(), khat })
}

/// One column of the leave-one-out matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LooColumn {
    pub spec: CandidateSpec,
    pub method: LooMethod,
    pub log_density: Vec<f64>,
    pub khat: Vec<Option<f64>>,
}

/// Leave-one-out column for one candidate; `draws` is required for PSIS.
pub fn loo_column(
    fit: &CandidateFit,
    data: &PointDataset,
    priors: &Priors,
    method: LooMethod,
    draws: Option<&PosteriorDraws>,
) -> Result<LooColumn> {
    let method = method.resolve(data.len());
    let (log_density, khat) = match method {
        LooMethod::Psis => {
            let draws =
                draws.ok_or_else(|| Error::InvalidArgument("PSIS leave-one-out needs posterior draws".into()))?;
            let r = psis_loo(draws, data, fit.spec.delta2)?;
            (r.log_density, r.khat)
        }
        _ => (exact_loo_all(fit, data, priors)?, vec![None; data.len()]),
    };
    if let Some(j) = log_density.iter().position(|v| !v.is_finite()) {
        return Err(Error::CandidateFit {
            spec: fit.spec.to_string(),
            source: Box::new(Error::Prediction(format!("leave-one-out density at point {j} is not finite"))),
        });
    }
    Ok(LooColumn { spec: fit.spec, method, log_density, khat })
}

/// `N × G` leave-one-out predictive densities, stored on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LooMatrix {
    pub log_density: DMatrix<f64>,
    pub specs: Vec<CandidateSpec>,
    pub methods: Vec<LooMethod>,
    pub khat: Vec<Vec<Option<f64>>>,
}

impl LooMatrix {
    pub fn from_columns(columns: Vec<LooColumn>) -> Result<Self> {
        let g = columns.len();
        if g == 0 {
            return Err(Error::InvalidArgument("at least one candidate is required".into()));
        }
        let n = columns[0].log_density.len();
        if columns.iter().any(|c| c.log_density.len() != n) {
            return Err(Error::Dimension("leave-one-out columns differ in length".into()));
        }
        let mut m = DMatrix::zeros(n, g);
        for (c, col) in columns.iter().enumerate() {
            m.set_column(c, &DVector::from_column_slice(&col.log_density));
        }
        Ok(Self {
            log_density: m,
            specs: columns.iter().map(|c| c.spec).collect(),
            methods: columns.iter().map(|c| c.method).collect(),
            khat: columns.into_iter().map(|c| c.khat).collect(),
        })
    }

    /// Wraps a raw log-density matrix, e.g. for optimizer tests.
    pub fn from_log_densities(log_density: DMatrix<f64>) -> Result<Self> {
        if log_density.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("log densities must be finite".into()));
        }
        let (n, g) = log_density.shape();
        let spec = CandidateSpec::new(1.0, 0.5, 1.0, 1.0)?;
        Ok(Self { log_density, specs: vec![spec; g], methods: vec![LooMethod::Exact; g], khat: vec![vec![None; n]; g] })
    }

    pub fn from_densities(p: &DMatrix<f64>) -> Result<Self> {
        if p.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("densities must be finite and positive".into()));
        }
        Self::from_log_densities(p.map(f64::ln))
    }

    pub fn n_points(&self) -> usize {
        self.log_density.nrows()
    }

    pub fn n_candidates(&self) -> usize {
        self.log_density.ncols()
    }

    pub fn densities(&self) -> DMatrix<f64> {
        self.log_density.map(f64::exp)
    }

    /// CSV with one row per point and one log-density column per candidate.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["point".to_string()];
        header.extend((0..self.n_candidates()).map(|g| format!("candidate_{g}")));
        wr.write_record(&header)?;
        for j in 0..self.n_points() {
            let mut rec = vec![j.to_string()];
            rec.extend(self.log_density.row(j).iter().map(|v| format!("{v:.17e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Companion CSV of Pareto k-hat diagnostics (empty cells for exact
    /// columns or unfitted tails).
    pub fn write_khat_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["point".to_string()];
        header.extend((0..self.n_candidates()).map(|g| format!("candidate_{g}")));
        wr.write_record(&header)?;
        for j in 0..self.n_points() {
            let mut rec = vec![j.to_string()];
            rec.extend(self.khat.iter().map(|col| col[j].map(|k| format!("{k:.6}")).unwrap_or_default()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Leave-one-out matrix over candidates, computed in parallel.
pub fn build_loo_matrix(
    fits: &[CandidateFit],
    draws: &[Option<PosteriorDraws>],
    data: &PointDataset,
    priors: &Priors,
    method: LooMethod,
) -> Result<LooMatrix> {
    if draws.len() != fits.len() {
        return Err(Error::Dimension(format!("{} draw sets for {} fits", draws.len(), fits.len())));
    }
    let cols = fits
        .par_iter()
        .zip(draws.par_iter())
        .map(|(f, d)| loo_column(f, data, priors, method, d.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    LooMatrix::from_columns(cols)
}
