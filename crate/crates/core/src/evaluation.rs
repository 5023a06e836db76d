use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::model::PointDataset;

pub const DEFAULT_VARIOGRAM_BINS: usize = 15;
const MIN_VARIOGRAM_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Per-point contribution `−2(lppd_k − p_waic,k)`; these sum to `waic`.
    pub pointwise: Vec<f64>,
}

/// WAIC from a `B × K` matrix of per-draw, per-point log likelihoods, with
/// the unbiased (divisor `B − 1`) variance penalty.
pub fn waic(loglik: &DMatrix<f64>) -> Result<WaicReport> {
    let (b, k) = loglik.shape();
    if b == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("log-likelihood matrix is {b}x{k}")));
    }
    if loglik.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::InvalidArgument("log likelihoods must not be NaN or +inf".into()));
    }
    if b == 1 {
        log::warn!("WAIC from a single draw: variance penalty set to 0");
    }
    let parts: Vec<(f64, f64)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let col = loglik.column(j);
            let lppd = log_sum_exp(col.iter().copied()) - (b as f64).ln();
            let p = if b > 1 {
                let mean = col.mean();
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64
            } else {
                0.0
            };
            (lppd, p)
        })
        .collect();
    let lppd: f64 = parts.iter().map(|p| p.0).sum();
    let p_waic: f64 = parts.iter().map(|p| p.1).sum();
    Ok(WaicReport {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
        pointwise: parts.iter().map(|(l, p)| -2.0 * (l - p)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Mean pair distance in the bin, or the bin midpoint when it is empty.
    pub distance: f64,
    pub gamma: f64,
    pub count: usize,
}

/// Residuals of `x` after a least-squares fit on the dataset's basis.
pub fn detrended_residuals(data: &PointDataset) -> Result<DVector<f64>> {
    let svd = data.psi.clone().svd(true, true);
    let coef = svd.solve(&data.x, 1e-12).map_err(|e| Error::Data(format!("basis least squares failed: {e}")))?;
    Ok(&data.x - &data.psi * coef)
}

/// Matheron estimator on detrended residuals, over pairs observed on the same
/// interval, with `n_bins` equal-width bins up to half the largest such
/// pair distance.
pub fn empirical_semivariogram(data: &PointDataset, n_bins: usize) -> Result<Vec<VariogramBin>> {
    let n = data.len();
    if n < MIN_VARIOGRAM_POINTS {
        return Err(Error::Data(format!("semivariogram needs at least {MIN_VARIOGRAM_POINTS} points, got {n}")));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let r = detrended_residuals(data)?;
    let same = |i: usize, j: usize| data.coords[i].interval == data.coords[j].interval;
    let mut max_dist: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if same(i, j) {
                max_dist = max_dist.max(data.coords[i].s.dist(&data.coords[j].s));
            }
        }
    }
    if !(max_dist > 0.0) {
        return Err(Error::Data("no pairs of distinct locations share an interval".into()));
    }
    let cutoff = 0.5 * max_dist;
    let width = cutoff / n_bins as f64;
    let mut sum_sq = vec![0.0; n_bins];
    let mut sum_d = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..n {
        for j in i + 1..n {
            if !same(i, j) {
                continue;
            }
            let d = data.coords[i].s.dist(&data.coords[j].s);
            if d > cutoff {
                continue;
            }
            let bin = ((d / width) as usize).min(n_bins - 1);
            sum_sq[bin] += (r[i] - r[j]).powi(2);
            sum_d[bin] += d;
            count[bin] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            if count[b] == 0 {
                VariogramBin { distance: (b as f64 + 0.5) * width, gamma: 0.0, count: 0 }
            } else {
                let c = count[b] as f64;
                VariogramBin { distance: sum_d[b] / c, gamma: sum_sq[b] / (2.0 * c), count: count[b] }
            }
        })
        .collect())
}

/// `γ(h) = nugget + partial_sill (1 − e^{−φ h})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialVariogram {
    pub nugget: f64,
    pub partial_sill: f64,
    pub phi: f64,
}

impl ExponentialVariogram {
    pub fn eval(&self, h: f64) -> f64 {
        self.nugget + self.partial_sill * (1.0 - (-self.phi * h).exp())
    }

    /// Nugget-to-partial-sill ratio, a starting point for the `δ²` grid.
    pub fn nugget_ratio(&self) -> f64 {
        self.nugget / self.partial_sill
    }
}

/// Nonnegative weighted least squares of `y ≈ a + b f` with weights `w`.
fn nonneg_line(f: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sse = |a: f64, b: f64| f.iter().zip(y).zip(w).map(|((fi, yi), wi)| wi * (yi - a - b * fi).powi(2)).sum::<f64>();
    let sw: f64 = w.iter().sum();
    let mf = f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sff: f64 = f.iter().zip(w).map(|(fi, wi)| wi * (fi - mf).powi(2)).sum();
    let sfy: f64 = f.iter().zip(y).zip(w).map(|((fi, yi), wi)| wi * (fi - mf) * (yi - my)).sum();
    let mut cands = Vec::with_capacity(3);
    if sff > 0.0 {
        let b = sfy / sff;
        let a = my - b * mf;
        if a >= 0.0 && b >= 0.0 {
            cands.push((a, b));
        }
    }
    cands.push((my.max(0.0), 0.0));
    let sf2: f64 = f.iter().zip(w).map(|(fi, wi)| wi * fi * fi).sum();
    let sfy0: f64 = f.iter().zip(y).zip(w).map(|((fi, yi), wi)| wi * fi * yi).sum();
    if sf2 > 0.0 {
        cands.push((0.0, (sfy0 / sf2).max(0.0)));
    }
    cands
        .into_iter()
        .map(|(a, b)| (a, b, sse(a, b)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .expect("at least one candidate")
}

/// Pair-count weighted least-squares fit of an exponential variogram: a
/// log-spaced scan over `φ` refined by golden-section search, with the
/// nugget and partial sill solved in closed form for each `φ`.
pub fn fit_exponential_variogram(bins: &[VariogramBin]) -> Result<ExponentialVariogram> {
    let used: Vec<&VariogramBin> = bins.iter().filter(|b| b.count > 0).collect();
    if used.len() < 3 {
        return Err(Error::Data(format!("{} nonempty bins; need at least 3 for a variogram fit", used.len())));
    }
    let h: Vec<f64> = used.iter().map(|b| b.distance).collect();
    let y: Vec<f64> = used.iter().map(|b| b.gamma).collect();
    let w: Vec<f64> = used.iter().map(|b| b.count as f64).collect();
    let hmax = h.iter().copied().fold(0.0, f64::max);
    let sse_at = |ln_phi: f64| {
        let phi = ln_phi.exp();
        let f: Vec<f64> = h.iter().map(|hi| 1.0 - (-phi * hi).exp()).collect();
        nonneg_line(&f, &y, &w)
    };
    let (lo, hi) = ((0.01 / hmax).ln(), (1000.0 / hmax).ln());
    let steps = 400;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let best = (0..=steps).min_by(|&a, &b| sse_at(grid[a]).2.total_cmp(&sse_at(grid[b]).2)).expect("nonempty grid");
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - gr * (b - a);
        let d = a + gr * (b - a);
        if sse_at(c).2 < sse_at(d).2 {
            b = d;
        } else {
            a = c;
        }
    }
    let ln_phi = 0.5 * (a + b);
    let (nugget, partial_sill, _) = sse_at(ln_phi);
    Ok(ExponentialVariogram { nugget, partial_sill, phi: ln_phi.exp() })
}

pub fn write_variogram_csv<W: Write>(w: W, bins: &[VariogramBin]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["distance", "gamma", "pair_count"])?;
    for b in bins {
        wr.write_record([b.distance.to_string(), b.gamma.to_string(), b.count.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
