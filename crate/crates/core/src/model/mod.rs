//! The exposure module (conjugate Gaussian-process regression on temporally
//! averaged point data, with prediction at instants and blocks) and the
//! downstream heteroskedastic outcome regression.

pub mod basis;
mod outcome;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use basis::{build_basis, BasisSpec, TimeSupport};
pub use outcome::{
    fit_outcome_regression, log_pointwise_outcome_density, outcome_posterior, BlockOutcomeDataset, OutcomeDraws,
    OutcomePosterior, EXPOSURE_COLUMN,
};

use crate::covariance::{
    cov_block_block_with_spatial, cov_instant, cov_point_block, cov_point_point, spatial_block_block_matrix,
    BlockSamples, InstantPoint, ProcessParams, SpaceTimeBlock, SpaceTimePoint,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_jittered, invgamma_sample, symmetrize, CholFactor, TriSide};

/// Largest relative diagonal jitter tried before a factorization is declared
/// failed.
pub const MAX_REL_JITTER: f64 = 1e-6;

/// One candidate model: process parameters plus the noise-to-signal ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    #[serde(flatten)]
    pub params: ProcessParams,
    pub delta2: f64,
}

impl CandidateSpec {
    pub fn new(phi_s: f64, nu: f64, phi_t: f64, delta2: f64) -> Result<Self> {
        let s = Self { params: ProcessParams { phi_s, nu, phi_t }, delta2 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.delta2 > 0.0 && self.delta2.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta2 must be positive, got {}", self.delta2)));
        }
        Ok(())
    }
}

impl fmt::Display for CandidateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phi_s={} nu={} phi_t={} delta2={}",
            self.params.phi_s, self.params.nu, self.params.phi_t, self.delta2
        )
    }
}

/// Conjugate priors for both modules: `β | τ² ~ N(μ_β, τ²V_β)`, `τ² ~ IG(a_τ, b_τ)`,
/// `γ | σ² ~ N(μ_γ, σ²V_γ)`, `σ² ~ IG(a_σ, b_σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub mu_beta: DVector<f64>,
    pub v_beta: DMatrix<f64>,
    pub a_tau: f64,
    pub b_tau: f64,
    pub mu_gamma: DVector<f64>,
    pub v_gamma: DMatrix<f64>,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Priors {
    pub const DEFAULT_SHAPE: f64 = 2.0;
    pub const DEFAULT_SCALE: f64 = 0.1;
    pub const DEFAULT_VARIANCE: f64 = 1e3;

    /// Zero means, `10³ I` covariances, `IG(2, 0.1)` variances, for basis
    /// dimension `r` and `q` outcome coefficients.
    pub fn vague(r: usize, q: usize) -> Self {
        Self {
            mu_beta: DVector::zeros(q),
            v_beta: DMatrix::identity(q, q) * Self::DEFAULT_VARIANCE,
            a_tau: Self::DEFAULT_SHAPE,
            b_tau: Self::DEFAULT_SCALE,
            mu_gamma: DVector::zeros(r),
            v_gamma: DMatrix::identity(r, r) * Self::DEFAULT_VARIANCE,
            a_sigma: Self::DEFAULT_SHAPE,
            b_sigma: Self::DEFAULT_SCALE,
        }
    }

    fn check_ig(name: &str, a: f64, b: f64) -> Result<()> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} prior needs positive shape and scale")));
        }
        Ok(())
    }

    pub(crate) fn check_exposure(&self, r: usize) -> Result<()> {
        Self::check_ig("sigma2", self.a_sigma, self.b_sigma)?;
        if self.mu_gamma.len() != r || self.v_gamma.shape() != (r, r) {
            return Err(Error::Dimension(format!(
                "gamma prior has dimension {} / {:?}, basis has {r}",
                self.mu_gamma.len(),
                self.v_gamma.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_outcome(&self, q: usize) -> Result<()> {
        Self::check_ig("tau2", self.a_tau, self.b_tau)?;
        if self.mu_beta.len() != q || self.v_beta.shape() != (q, q) {
            return Err(Error::Dimension(format!(
                "beta prior has dimension {} / {:?}, design has {q} columns",
                self.mu_beta.len(),
                self.v_beta.shape()
            )));
        }
        Ok(())
    }
}

/// Temporally averaged point observations `X(ℓ̃_j)` with their basis rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    pub coords: Vec<SpaceTimePoint>,
    pub x: DVector<f64>,
    /// `Ψ̃`: interval-averaged basis, `N × r`.
    pub psi: DMatrix<f64>,
    pub basis: BasisSpec,
}

impl PointDataset {
    pub fn new(coords: Vec<SpaceTimePoint>, x: Vec<f64>, basis: BasisSpec) -> Result<Self> {
        if coords.len() != x.len() {
            return Err(Error::Dimension(format!("{} coordinates, {} values", coords.len(), x.len())));
        }
        if coords.is_empty() {
            return Err(Error::Data("point dataset is empty".into()));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("value at row {j} is not finite")));
        }
        let intervals: Vec<_> = coords.iter().map(|p| p.interval).collect();
        let psi = basis.interval_matrix(&intervals)?;
        if coords.len() < psi.ncols() {
            return Err(Error::Data(format!(
                "{} points cannot support a basis of dimension {}",
                coords.len(),
                psi.ncols()
            )));
        }
        Ok(Self { coords, x: DVector::from_vec(x), psi, basis })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn basis_dim(&self) -> usize {
        self.psi.ncols()
    }

    /// Diagonal of `D_ℓ̃`: `|Ĩ_j|⁻¹`.
    pub fn d_diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.coords.iter().map(|p| 1.0 / p.interval.len()))
    }

    /// Rows `keep`, in that order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            x: DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.x[i])),
            psi: self.psi.select_rows(keep),
            basis: self.basis.clone(),
        }
    }
}

/// Cached factors and conjugate posterior hyperparameters for one candidate.
#[derive(Debug, Clone)]
pub struct CandidateFit {
    pub spec: CandidateSpec,
    /// `chol(V_X)`, `V_X = C_ℓ̃ + δ² D_ℓ̃`.
    pub chol_vx: CholFactor,
    /// `chol(C_ℓ̃)`, possibly with diagonal jitter.
    pub chol_c: CholFactor,
    /// `chol(M_z)`, `M_z = δ² D_ℓ̃ V_X⁻¹ C_ℓ̃`.
    pub chol_mz: CholFactor,
    /// `M_γ`.
    pub m_gamma_cov: DMatrix<f64>,
    pub chol_m_gamma: CholFactor,
    /// `m_γ`.
    pub m_gamma: DVector<f64>,
    /// `M_γ m_γ`.
    pub gamma_mean: DVector<f64>,
    pub a_sigma_star: f64,
    pub b_sigma_star: f64,
    /// `C_ℓ̃ V_X⁻¹ X`.
    pub z_shift: DVector<f64>,
    /// `Ψ̃ − C_ℓ̃ V_X⁻¹ Ψ̃`.
    pub z_trend: DMatrix<f64>,
}

impl CandidateFit {
    /// Conditional mean of `Z_ℓ̃` given `γ`: `Ψ̃γ + C V⁻¹(X − Ψ̃γ)`.
    pub fn z_mean(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.z_shift + &self.z_trend * gamma
    }
}

fn tag(spec: &CandidateSpec) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::CandidateFit { spec: spec.to_string(), source: Box::new(e) }
}

/// Conjugate fit of one candidate; failures are tagged with the spec.
pub fn fit_candidate(data: &PointDataset, spec: &CandidateSpec, priors: &Priors) -> Result<CandidateFit> {
    spec.validate()?;
    priors.check_exposure(data.basis_dim())?;
    fit_inner(data, spec, priors).map_err(tag(spec))
}

fn fit_inner(data: &PointDataset, spec: &CandidateSpec, priors: &Priors) -> Result<CandidateFit> {
    let n = data.len();
    let d = data.d_diag();
    let c = cov_point_point(&data.coords, &spec.params)?;
    let mut v = c.clone();
    for j in 0..n {
        v[(j, j)] += spec.delta2 * d[j];
    }
    let (chol_vx, _) = cholesky_jittered(&v, MAX_REL_JITTER)?;
    drop(v);
    let (chol_c, _) = cholesky_jittered(&c, MAX_REL_JITTER)?;

    let vinv_x = chol_vx.solve_vec(&data.x);
    let vinv_psi = chol_vx.solve(&data.psi);
    let vg_inv = cholesky(&priors.v_gamma)?.inverse();
    let vg_inv_mu = &vg_inv * &priors.mu_gamma;

    let mut prec = data.psi.tr_mul(&vinv_psi) + &vg_inv;
    symmetrize(&mut prec);
    let mut m_gamma_cov = cholesky(&prec)?.inverse();
    symmetrize(&mut m_gamma_cov);
    let (chol_m_gamma, _) = cholesky_jittered(&m_gamma_cov, MAX_REL_JITTER)?;
    let m_gamma = data.psi.tr_mul(&vinv_x) + &vg_inv_mu;
    let gamma_mean = &m_gamma_cov * &m_gamma;

    let quad = data.x.dot(&vinv_x) + priors.mu_gamma.dot(&vg_inv_mu) - m_gamma.dot(&gamma_mean);
    let a_sigma_star = priors.a_sigma + n as f64 / 2.0;
    let b_sigma_star = priors.b_sigma + quad / 2.0;
    if !(b_sigma_star > 0.0) || !b_sigma_star.is_finite() {
        return Err(Error::Prediction(format!("posterior scale b*_sigma = {b_sigma_star} is not positive")));
    }

    let vinv_c = chol_vx.solve(&c);
    drop(c);
    let mut mz = vinv_c.clone();
    for j in 0..n {
        let s = spec.delta2 * d[j];
        mz.row_mut(j).scale_mut(s);
    }
    symmetrize(&mut mz);
    let (chol_mz, _) = cholesky_jittered(&mz, MAX_REL_JITTER)?;
    drop(mz);
    let z_shift = vinv_c.tr_mul(&data.x);
    let z_trend = &data.psi - vinv_c.tr_mul(&data.psi);

    Ok(CandidateFit {
        spec: *spec,
        chol_vx,
        chol_c,
        chol_mz,
        m_gamma_cov,
        chol_m_gamma,
        m_gamma,
        gamma_mean,
        a_sigma_star,
        b_sigma_star,
        z_shift,
        z_trend,
    })
}

/// Composition-sampled posterior draws of `(σ², γ, Z_ℓ̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub sigma2: Vec<f64>,
    /// `r × B`.
    pub gamma: DMatrix<f64>,
    /// `N × B`.
    pub z: DMatrix<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }
}

/// `L ξ` with `ξ` standard normal, `L` lower triangular.
fn lower_times_normal<R: Rng + ?Sized>(l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = l.nrows();
    let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = DVector::zeros(n);
    for (k, &xk) in xi.iter().enumerate() {
        let lk = l.column(k);
        for i in k..n {
            out[i] += lk[i] * xk;
        }
    }
    out
}

/// `B` exact posterior draws: `σ² ~ IG(a*, b*)`, `γ | σ² ~ N(M_γ m_γ, σ² M_γ)`,
/// `Z_ℓ̃ | γ, σ² ~ N(Ψ̃γ + C V⁻¹(X − Ψ̃γ), σ² M_z)`.
pub fn sample_candidate<R: Rng + ?Sized>(
    fit: &CandidateFit,
    data: &PointDataset,
    draws: usize,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be at least 1".into()));
    }
    if fit.z_shift.len() != data.len() {
        return Err(Error::Dimension("fit and dataset sizes differ".into()));
    }
    let (n, r) = (data.len(), data.basis_dim());
    let mut sigma2 = Vec::with_capacity(draws);
    let mut gamma = DMatrix::zeros(r, draws);
    let mut z = DMatrix::zeros(n, draws);
    for b in 0..draws {
        let s2 = invgamma_sample(fit.a_sigma_star, fit.b_sigma_star, rng)?;
        let sd = s2.sqrt();
        let g = &fit.gamma_mean + lower_times_normal(fit.chol_m_gamma.l(), rng) * sd;
        let zb = fit.z_mean(&g) + lower_times_normal(fit.chol_mz.l(), rng) * sd;
        sigma2.push(s2);
        gamma.set_column(b, &g);
        z.set_column(b, &zb);
    }
    Ok(PosteriorDraws { sigma2, gamma, z })
}

/// Gaussian conditional of new process values given `Z_ℓ̃`:
/// mean `Ψ_* γ + A (Z_ℓ̃ − Ψ̃γ)` with `A = C_{*,ℓ̃} C_ℓ̃⁻¹`, covariance
/// `σ² (C_* − A C_{ℓ̃,*})`.
#[derive(Debug, Clone)]
pub struct ConditionalPlan {
    psi: DMatrix<f64>,
    a: DMatrix<f64>,
    cov: DMatrix<f64>,
    chol: CholFactor,
}

impl ConditionalPlan {
    fn build(fit: &CandidateFit, psi: DMatrix<f64>, c_target: DMatrix<f64>, cross: DMatrix<f64>) -> Result<Self> {
        // cross is N × N*
        let w = crate::linalg::tri_solve(&fit.chol_c, &cross, TriSide::Lower)?;
        let a = crate::linalg::tri_solve(&fit.chol_c, &w, TriSide::UpperTranspose)?.transpose();
        let mut cov = c_target - w.tr_mul(&w);
        symmetrize(&mut cov);
        let (chol, _) = cholesky_jittered(&cov, MAX_REL_JITTER).map_err(|e| {
            Error::Prediction(format!("conditional covariance for {} is not positive definite: {e}", fit.spec))
        })?;
        Ok(Self { psi, a, cov, chol })
    }

    pub fn for_instants(fit: &CandidateFit, data: &PointDataset, targets: &[InstantPoint]) -> Result<Self> {
        let (c_inst, cross) = cov_instant(targets, &data.coords, &fit.spec.params)?;
        let times: Vec<f64> = targets.iter().map(|t| t.t).collect();
        let psi = data.basis.instant_matrix(&times)?;
        Self::build(fit, psi, c_inst, cross.transpose())
    }

    pub fn for_blocks(
        fit: &CandidateFit,
        data: &PointDataset,
        blocks: &[SpaceTimeBlock],
        samples: &BlockSamples,
    ) -> Result<Self> {
        let spatial = spatial_block_block_matrix(samples, &fit.spec.params.matern());
        Self::for_blocks_with_spatial(fit, data, blocks, samples, &spatial)
    }

    /// As [`for_blocks`](Self::for_blocks), reusing a spatial block-block
    /// matrix computed for the same samples and Matérn parameters.
    pub fn for_blocks_with_spatial(
        fit: &CandidateFit,
        data: &PointDataset,
        blocks: &[SpaceTimeBlock],
        samples: &BlockSamples,
        spatial: &DMatrix<f64>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("at least one block is required".into()));
        }
        let cross = cov_point_block(&data.coords, blocks, samples, &fit.spec.params)?;
        let c_l = cov_block_block_with_spatial(blocks, spatial, fit.spec.params.phi_t)?;
        let intervals: Vec<_> = blocks.iter().map(|b| b.interval).collect();
        let psi = data.basis.interval_matrix(&intervals)?;
        Self::build(fit, psi, c_l, cross)
    }

    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.nrows() == 0
    }

    /// Conditional mean for one draw of `(γ, Z_ℓ̃)`.
    pub fn mean(&self, data: &PointDataset, gamma: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let resid = z - &data.psi * gamma;
        &self.psi * gamma + &self.a * resid
    }

    /// Conditional covariance divided by `σ²`.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// One predictive draw conditional on posterior draw `b`.
    pub fn sample_one<R: Rng + ?Sized>(
        &self,
        data: &PointDataset,
        draws: &PosteriorDraws,
        b: usize,
        rng: &mut R,
    ) -> DVector<f64> {
        let g = draws.gamma.column(b).into_owned();
        let z = draws.z.column(b).into_owned();
        self.mean(data, &g, &z) + lower_times_normal(self.chol.l(), rng) * draws.sigma2[b].sqrt()
    }

    /// One predictive draw per posterior draw; `N_* × B`.
    pub fn sample<R: Rng + ?Sized>(&self, data: &PointDataset, draws: &PosteriorDraws, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.len(), draws.len());
        for b in 0..draws.len() {
            out.set_column(b, &self.sample_one(data, draws, b, rng));
        }
        out
    }
}

/// Predictive draws of `Z_ℓ` at instants, one per posterior draw.
pub fn predict_instants<R: Rng + ?Sized>(
    fit: &CandidateFit,
    data: &PointDataset,
    draws: &PosteriorDraws,
    targets: &[InstantPoint],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    Ok(ConditionalPlan::for_instants(fit, data, targets)?.sample(data, draws, rng))
}

/// Predictive draws of `Z_L` at space-time blocks, one per posterior draw.
pub fn predict_blocks<R: Rng + ?Sized>(
    fit: &CandidateFit,
    data: &PointDataset,
    draws: &PosteriorDraws,
    blocks: &[SpaceTimeBlock],
    samples: &BlockSamples,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    Ok(ConditionalPlan::for_blocks(fit, data, blocks, samples)?.sample(data, draws, rng))
}
