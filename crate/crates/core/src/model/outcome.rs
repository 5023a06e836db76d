use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{lower_times_normal, Priors, MAX_REL_JITTER};
use crate::covariance::SpaceTimeBlock;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_jittered, invgamma_sample, normal_logpdf, symmetrize};

/// Name given to the latent-exposure column appended to the design.
pub const EXPOSURE_COLUMN: &str = "exposure";

/// Relative residual norm below which a design column counts as a linear
/// combination of the preceding ones.
const COLLINEAR_TOL: f64 = 1e-8;

/// Block-level outcomes `Y(L_k)` with predictors `W` (including any
/// intercept column).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcomeDataset {
    pub blocks: Vec<SpaceTimeBlock>,
    pub y: DVector<f64>,
    /// `K × p`.
    pub w: DMatrix<f64>,
    pub columns: Vec<String>,
    /// Diagonal of `D_L`: the error variance of row `k` is `τ² d_L[k]`.
    pub d_l: DVector<f64>,
}

impl BlockOutcomeDataset {
    /// With `include_interval` the variance multiplier is `(|B_k||I_k|)⁻¹`,
    /// otherwise `|B_k|⁻¹`.
    pub fn new(
        blocks: Vec<SpaceTimeBlock>,
        y: Vec<f64>,
        w: DMatrix<f64>,
        columns: Vec<String>,
        include_interval: bool,
    ) -> Result<Self> {
        let k = blocks.len();
        if y.len() != k || w.nrows() != k {
            return Err(Error::Dimension(format!("{k} blocks, {} outcomes, {} design rows", y.len(), w.nrows())));
        }
        if columns.len() != w.ncols() {
            return Err(Error::Dimension(format!("{} column names for {} columns", columns.len(), w.ncols())));
        }
        if k < w.ncols() + 1 {
            return Err(Error::Data(format!("{k} outcomes cannot support {} coefficients", w.ncols() + 1)));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("outcome at row {i} is not finite")));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("predictor entry {i} (column-major) is not finite")));
        }
        let d_l = DVector::from_iterator(
            k,
            blocks.iter().map(|b| {
                let v = if include_interval { b.volume() } else { b.region.area() };
                1.0 / v
            }),
        );
        Ok(Self { blocks, y: DVector::from_vec(y), w, columns, d_l })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of coefficients including the exposure: `p + 1`.
    pub fn n_coefficients(&self) -> usize {
        self.w.ncols() + 1
    }

    /// Coefficient names, exposure last.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = self.columns.clone();
        names.push(EXPOSURE_COLUMN.to_string());
        names
    }

    fn augmented(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut wt = self.w.clone().insert_column(self.w.ncols(), 0.0);
        wt.set_column(self.w.ncols(), z);
        wt
    }
}

/// Per-draw posterior samples of `(τ², β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDraws {
    pub tau2: Vec<f64>,
    /// `(p + 1) × B`, exposure coefficient last.
    pub beta: DMatrix<f64>,
    pub names: Vec<String>,
}

impl OutcomeDraws {
    pub fn len(&self) -> usize {
        self.tau2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau2.is_empty()
    }
}

/// Gram–Schmidt scan; returns, for the first dependent column, its name and
/// the names of the earlier columns it depends on.
fn first_collinear(x: &DMatrix<f64>, names: &[String]) -> Option<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    for (j, col) in x.column_iter().enumerate() {
        let norm = col.norm();
        let mut r = col.into_owned();
        let mut deps = Vec::new();
        for (q, &o) in basis.iter().zip(&owners) {
            let c = q.dot(&r);
            if c.abs() > COLLINEAR_TOL * norm.max(f64::MIN_POSITIVE) {
                deps.push(o);
            }
            r -= q * c;
        }
        let rn = r.norm();
        if rn <= COLLINEAR_TOL * norm || norm == 0.0 {
            let dep_names: Vec<&str> = deps.iter().map(|&d| names[d].as_str()).collect();
            return Some(if norm == 0.0 {
                format!("column '{}' is identically zero", names[j])
            } else {
                format!("column '{}' is a linear combination of [{}]", names[j], dep_names.join(", "))
            });
        }
        basis.push(r / rn);
        owners.push(j);
    }
    None
}

/// Conjugate posterior of `(τ², β)` given one exposure vector:
/// `β | τ² ~ N(mean, τ² cov)`, `τ² ~ IG(a_star, b_star)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub a_star: f64,
    pub b_star: f64,
}

struct OutcomeSetup {
    names: Vec<String>,
    vb_inv: DMatrix<f64>,
    vb_inv_mu: DVector<f64>,
    prec_w: DVector<f64>,
    py: DVector<f64>,
    base_quad: f64,
    a_star: f64,
}

impl OutcomeSetup {
    fn new(outcome: &BlockOutcomeDataset, priors: &Priors) -> Result<Self> {
        priors.check_outcome(outcome.n_coefficients())?;
        let names = outcome.coefficient_names();
        if let Some(msg) = first_collinear(&outcome.w, &names) {
            return Err(Error::Regression(format!("collinear design: {msg}")));
        }
        let vb_inv = cholesky(&priors.v_beta)?.inverse();
        let vb_inv_mu = &vb_inv * &priors.mu_beta;
        let prec_w = outcome.d_l.map(|d| 1.0 / d);
        let py = outcome.y.component_mul(&prec_w);
        let base_quad = outcome.y.dot(&py) + priors.mu_beta.dot(&vb_inv_mu);
        let a_star = priors.a_tau + outcome.len() as f64 / 2.0;
        Ok(Self { names, vb_inv, vb_inv_mu, prec_w, py, base_quad, a_star })
    }

    fn posterior(
        &self,
        outcome: &BlockOutcomeDataset,
        z: &DVector<f64>,
        b_tau: f64,
        check: bool,
    ) -> Result<OutcomePosterior> {
        if z.len() != outcome.len() {
            return Err(Error::Dimension(format!("{} exposure rows for {} outcomes", z.len(), outcome.len())));
        }
        let wt = outcome.augmented(z);
        if check {
            if let Some(msg) = first_collinear(&wt, &self.names) {
                return Err(Error::Regression(format!("collinear design: {msg}")));
            }
        }
        let mut pw = wt.clone();
        for (i, mut row) in pw.row_iter_mut().enumerate() {
            row *= self.prec_w[i];
        }
        let mut g = wt.tr_mul(&pw) + &self.vb_inv;
        symmetrize(&mut g);
        let chol_g = cholesky(&g).map_err(|e| {
            Error::Regression(format!("posterior precision of [{}] is singular: {e}", self.names.join(", ")))
        })?;
        let mut cov = chol_g.inverse();
        symmetrize(&mut cov);
        let m = wt.tr_mul(&self.py) + &self.vb_inv_mu;
        let mean = &cov * &m;
        let b_star = b_tau + 0.5 * (self.base_quad - m.dot(&mean));
        if !(b_star > 0.0) {
            return Err(Error::Regression(format!("posterior scale b*_tau = {b_star} is not positive")));
        }
        Ok(OutcomePosterior { mean, cov, a_star: self.a_star, b_star })
    }
}

/// Posterior of the outcome regression with the exposure column fixed at `z`.
pub fn outcome_posterior(outcome: &BlockOutcomeDataset, z: &DVector<f64>, priors: &Priors) -> Result<OutcomePosterior> {
    OutcomeSetup::new(outcome, priors)?.posterior(outcome, z, priors.b_tau, true)
}

/// Conjugate regression of `Y` on `[W, Z_L]`, refit for every `Z_L` draw
/// (columns of `zl`, `K × B`), one `(τ², β)` draw each.
pub fn fit_outcome_regression<R: Rng + ?Sized>(
    outcome: &BlockOutcomeDataset,
    zl: &DMatrix<f64>,
    priors: &Priors,
    rng: &mut R,
) -> Result<OutcomeDraws> {
    let (k, q) = (outcome.len(), outcome.n_coefficients());
    if zl.nrows() != k {
        return Err(Error::Dimension(format!("{} exposure rows for {k} outcomes", zl.nrows())));
    }
    if zl.ncols() == 0 {
        return Err(Error::InvalidArgument("at least one exposure draw is required".into()));
    }
    let setup = OutcomeSetup::new(outcome, priors)?;
    let b_draws = zl.ncols();
    let mut tau2 = Vec::with_capacity(b_draws);
    let mut beta = DMatrix::zeros(q, b_draws);
    for b in 0..b_draws {
        let z = zl.column(b).into_owned();
        let post = setup.posterior(outcome, &z, priors.b_tau, b == 0)?;
        let t2 = invgamma_sample(post.a_star, post.b_star, rng)?;
        let (chol_m, _) = cholesky_jittered(&post.cov, MAX_REL_JITTER)?;
        let draw = post.mean + lower_times_normal(chol_m.l(), rng) * t2.sqrt();
        tau2.push(t2);
        beta.set_column(b, &draw);
    }
    Ok(OutcomeDraws { tau2, beta, names: setup.names })
}

/// `B × K` matrix of `log N(y_k | w̃_kᵀβ_b, τ²_b d_L[k])`, pairing draw `b`
/// with exposure draw `b`.
pub fn log_pointwise_outcome_density(
    outcome: &BlockOutcomeDataset,
    draws: &OutcomeDraws,
    zl: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (k, b_draws) = (outcome.len(), draws.len());
    if zl.nrows() != k || zl.ncols() != b_draws {
        return Err(Error::Dimension(format!(
            "exposure draws are {}x{}, expected {k}x{b_draws}",
            zl.nrows(),
            zl.ncols()
        )));
    }
    let p = outcome.w.ncols();
    let mut out = DMatrix::zeros(b_draws, k);
    for b in 0..b_draws {
        let beta = draws.beta.column(b);
        let fitted = &outcome.w * beta.rows(0, p) + zl.column(b) * beta[p];
        for j in 0..k {
            out[(b, j)] = normal_logpdf(outcome.y[j], fitted[j], draws.tau2[b] * outcome.d_l[j]);
        }
    }
    Ok(out)
}
