use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::Matern;
use crate::error::{Error, Result};
use crate::loo::LooMatrix;
use crate::model::CandidateSpec;

pub const DEFAULT_PHI_S: [f64; 3] = [2.0, 3.0, 5.0];
pub const DEFAULT_PHI_T: [f64; 3] = [0.3, 0.5, 1.0];
pub const DEFAULT_NU: [f64; 3] = [0.5, 1.0, 1.5];
pub const DEFAULT_DELTA2: [f64; 2] = [0.75, 1.5];

/// Correlation level defining the effective range.
pub const EFFECTIVE_RANGE_CORR: f64 = 0.05;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
const KKT_TOL: f64 = 1e-8;
/// Residual at which the optimizer stops regardless of progress.
const KKT_TIGHT: f64 = 1e-10;
const ARMIJO_C: f64 = 1e-4;
const DUPLICATE_TOL: f64 = 1e-12;

/// Cartesian product of the four hyperparameter grids, ordered with `δ²`
/// varying fastest and `φ_s` slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    specs: Vec<CandidateSpec>,
}

impl CandidateGrid {
    pub fn cartesian(phi_s: &[f64], nu: &[f64], phi_t: &[f64], delta2: &[f64]) -> Result<Self> {
        for (name, g) in [("phi_s", phi_s), ("nu", nu), ("phi_t", phi_t), ("delta2", delta2)] {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("grid for {name} is empty")));
            }
        }
        let mut specs = Vec::with_capacity(phi_s.len() * nu.len() * phi_t.len() * delta2.len());
        for &ps in phi_s {
            for &n in nu {
                for &pt in phi_t {
                    for &d2 in delta2 {
                        specs.push(CandidateSpec::new(ps, n, pt, d2)?);
                    }
                }
            }
        }
        Ok(Self { specs })
    }

    pub fn from_specs(specs: Vec<CandidateSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("candidate grid is empty".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(Self { specs })
    }

    pub fn default_simulation() -> Self {
        Self::cartesian(&DEFAULT_PHI_S, &DEFAULT_NU, &DEFAULT_PHI_T, &DEFAULT_DELTA2).expect("default grids are valid")
    }

    pub fn specs(&self) -> &[CandidateSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Scaled distance `u = φ d` at which the Matérn correlation with smoothness
/// `nu` equals [`EFFECTIVE_RANGE_CORR`].
pub fn effective_range_scaled(nu: f64) -> Result<f64> {
    let m = Matern::new(1.0, nu)?;
    let f = |u: f64| m.corr_scaled(u) - EFFECTIVE_RANGE_CORR;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Decay values whose effective ranges are spread evenly over
/// `[0.2, 0.7] × max_dist`, returned in ascending order of `φ_s`.
pub fn effective_range_grid(max_dist: f64, nu: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(max_dist > 0.0) || !max_dist.is_finite() {
        return Err(Error::InvalidArgument(format!("max_dist must be positive, got {max_dist}")));
    }
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be at least 1".into()));
    }
    let u = effective_range_scaled(nu)?;
    let ranges: Vec<f64> = if n_points == 1 {
        vec![0.45 * max_dist]
    } else {
        (0..n_points).map(|i| (0.7 - 0.5 * i as f64 / (n_points - 1) as f64) * max_dist).collect()
    };
    Ok(ranges.into_iter().map(|r| u / r).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackingWeights {
    pub alpha: Vec<f64>,
    /// `(1/N) Σ_j log Σ_g α_g p_jg`.
    pub objective: f64,
    pub iterations: usize,
    /// Set when the LOO matrix has duplicate columns, so mass may be split
    /// arbitrarily between them.
    pub non_unique: bool,
}

/// Mean log score of the mixture with weights `alpha`, from log densities.
pub fn stacking_objective(log_density: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    let n = log_density.nrows();
    let mut total = 0.0;
    for j in 0..n {
        let row = log_density.row(j);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().zip(alpha).map(|(l, a)| a * (l - max).exp()).sum();
        total += max + s.ln();
    }
    total / n as f64
}

struct Scaled {
    p: DMatrix<f64>,
    offset: f64,
}

impl Scaled {
    fn new(log_density: &DMatrix<f64>) -> Self {
        let (n, g) = log_density.shape();
        let mut p = DMatrix::zeros(n, g);
        let mut offset = 0.0;
        for j in 0..n {
            let max = log_density.row(j).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            offset += max;
            for k in 0..g {
                p[(j, k)] = (log_density[(j, k)] - max).exp();
            }
        }
        Self { p, offset: offset / n as f64 }
    }

    fn value(&self, alpha: &[f64]) -> f64 {
        let n = self.p.nrows();
        let mut s = 0.0;
        for j in 0..n {
            let m: f64 = self.p.row(j).iter().zip(alpha).map(|(p, a)| p * a).sum();
            s += m.ln();
        }
        s / n as f64
    }

    fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let (n, g) = self.p.shape();
        let mut grad = vec![0.0; g];
        for j in 0..n {
            let row = self.p.row(j);
            let m: f64 = row.iter().zip(alpha).map(|(p, a)| p * a).sum();
            for (gk, p) in grad.iter_mut().zip(row.iter()) {
                *gk += p / m;
            }
        }
        grad.iter_mut().for_each(|v| *v /= n as f64);
        grad
    }
}

/// Optimality residual on the simplex: `g_k ≤ λ` everywhere with equality on
/// the support, where `λ = Σ α_k g_k`.
fn kkt_residual(alpha: &[f64], grad: &[f64]) -> f64 {
    let lambda: f64 = alpha.iter().zip(grad).map(|(a, g)| a * g).sum();
    alpha.iter().zip(grad).map(|(a, g)| (g - lambda).max(0.0).max(a * (lambda - g).abs())).fold(0.0, f64::max)
}

fn has_duplicate_columns(log_density: &DMatrix<f64>) -> bool {
    let g = log_density.ncols();
    (0..g).any(|a| {
        (a + 1..g).any(|b| {
            log_density.column(a).iter().zip(log_density.column(b).iter()).all(|(x, y)| (x - y).abs() <= DUPLICATE_TOL)
        })
    })
}

/// Maximizes the mean log score over the simplex by exponentiated gradient
/// with Armijo backtracking, starting from uniform weights.
pub fn stacking_weights(loo: &LooMatrix, tol: f64, max_iter: usize) -> Result<StackingWeights> {
    stacking_weights_from_log(&loo.log_density, tol, max_iter)
}

pub fn stacking_weights_from_log(log_density: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<StackingWeights> {
    let (n, g) = log_density.shape();
    if n == 0 || g == 0 {
        return Err(Error::InvalidArgument("LOO matrix is empty".into()));
    }
    if log_density.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("LOO log densities must be finite".into()));
    }
    let non_unique = has_duplicate_columns(log_density);
    if g == 1 {
        return Ok(StackingWeights {
            alpha: vec![1.0],
            objective: stacking_objective(log_density, &[1.0]),
            iterations: 0,
            non_unique,
        });
    }
    let scaled = Scaled::new(log_density);
    let mut alpha = vec![1.0 / g as f64; g];
    let mut f = scaled.value(&alpha);
    let mut eta = 1.0;
    for iter in 1..=max_iter {
        let grad = scaled.gradient(&alpha);
        if kkt_residual(&alpha, &grad) < KKT_TIGHT {
            return Ok(finish(alpha, f + scaled.offset, iter - 1, non_unique));
        }
        let gmax = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut accepted = None;
        while eta > 1e-300 {
            let mut cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, gk)| a * (eta * (gk - gmax)).exp()).collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|v| *v /= s);
            let fc = scaled.value(&cand);
            let lin: f64 = cand.iter().zip(&alpha).zip(&grad).map(|((c, a), gk)| (c - a) * gk).sum();
            if fc.is_finite() && fc >= f + ARMIJO_C * lin {
                accepted = Some((cand, fc));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            return Ok(finish(alpha, f + scaled.offset, iter, non_unique));
        };
        let improvement = fc - f;
        alpha = cand;
        f = fc;
        eta = (eta * 2.0).min(1e12);
        if improvement < tol && kkt_residual(&alpha, &scaled.gradient(&alpha)) < KKT_TOL {
            return Ok(finish(alpha, f + scaled.offset, iter, non_unique));
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, last: alpha })
}

fn finish(mut alpha: Vec<f64>, objective: f64, iterations: usize, non_unique: bool) -> StackingWeights {
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|v| *v /= s);
    StackingWeights { alpha, objective, iterations, non_unique }
}

/// One stacked draw: the candidate it came from and the index of the
/// candidate-level posterior draw used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedDraw {
    pub candidate: usize,
    pub draw: usize,
}

/// Samples `g ~ Categorical(α)` for each of `b` stacked draws, then takes the
/// next unused draw of candidate `g` (cycling when its `available[g]` draws
/// run out).
pub fn stacked_sample<R: Rng + ?Sized>(
    alpha: &[f64],
    available: &[usize],
    b: usize,
    rng: &mut R,
) -> Result<Vec<StackedDraw>> {
    if alpha.len() != available.len() {
        return Err(Error::Dimension(format!("{} weights for {} candidates", alpha.len(), available.len())));
    }
    if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let dist = WeightedIndex::new(alpha).map_err(|e| Error::InvalidArgument(format!("invalid weights: {e}")))?;
    let mut used = vec![0usize; alpha.len()];
    let mut out = Vec::with_capacity(b);
    for _ in 0..b {
        let g = dist.sample(rng);
        if available[g] == 0 {
            return Err(Error::InvalidArgument(format!("candidate {g} has positive weight but no draws")));
        }
        out.push(StackedDraw { candidate: g, draw: used[g] % available[g] });
        used[g] += 1;
    }
    Ok(out)
}

/// How many draws each candidate contributes to a stacked sample.
pub fn draws_per_candidate(sample: &[StackedDraw], g: usize) -> Vec<usize> {
    let mut counts = vec![0; g];
    for d in sample {
        counts[d.candidate] += 1;
    }
    counts
}

/// Log density of the stacked mixture given per-candidate log densities.
pub fn stacked_log_density(alpha: &[f64], log_density: &[f64]) -> f64 {
    let max = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = alpha.iter().zip(log_density).map(|(a, l)| a * (l - max).exp()).sum();
    max + s.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCandidate {
    pub phi_s: f64,
    pub nu: f64,
    pub phi_t: f64,
    pub delta2: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub candidates: Vec<WeightedCandidate>,
    pub objective: f64,
    pub iterations: usize,
}

impl WeightsFile {
    pub fn new(specs: &[CandidateSpec], weights: &StackingWeights) -> Result<Self> {
        if specs.len() != weights.alpha.len() {
            return Err(Error::Dimension(format!("{} specs for {} weights", specs.len(), weights.alpha.len())));
        }
        let candidates = specs
            .iter()
            .zip(&weights.alpha)
            .map(|(s, &w)| WeightedCandidate {
                phi_s: s.params.phi_s,
                nu: s.params.nu,
                phi_t: s.params.phi_t,
                delta2: s.delta2,
                weight: w,
            })
            .collect();
        Ok(Self { candidates, objective: weights.objective, iterations: weights.iterations })
    }

    pub fn specs(&self) -> Result<Vec<CandidateSpec>> {
        self.candidates.iter().map(|c| CandidateSpec::new(c.phi_s, c.nu, c.phi_t, c.delta2)).collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.weight).collect()
    }
}

#[cfg(test)]
mod tests;
