//! Separable space-time correlation: isotropic Matérn in space, exponential in
//! time, with closed-form temporal integrals over intervals and Monte Carlo
//! spatial integrals over polygons.

mod bessel;

pub use bessel::bessel_k;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{sample_in_polygon, Point2, Polygon};
use crate::rng::stream_rng;

/// Default number of within-polygon draws for spatial block integrals.
pub const DEFAULT_MC_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub phi_s: f64,
    pub nu: f64,
    pub phi_t: f64,
}

impl ProcessParams {
    pub fn new(phi_s: f64, nu: f64, phi_t: f64) -> Result<Self> {
        let p = Self { phi_s, nu, phi_t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("phi_s", self.phi_s), ("nu", self.nu), ("phi_t", self.phi_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn matern(&self) -> Matern {
        Matern::new_unchecked(self.phi_s, self.nu)
    }
}

/// Open time interval `(start, end)` with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start < end) || !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidArgument(format!("interval ({start}, {end}) is not ordered")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.start && t < self.end
    }
}

/// A site observed as a temporal average over an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub s: Point2,
    pub interval: Interval,
}

/// A polygon observed as a space-time average over an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeBlock {
    pub region: Polygon,
    pub interval: Interval,
}

impl SpaceTimeBlock {
    pub fn volume(&self) -> f64 {
        self.region.area() * self.interval.len()
    }
}

/// A single space-time coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstantPoint {
    pub s: Point2,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MaternForm {
    Half,
    ThreeHalves,
    FiveHalves,
    General { log_norm: f64 },
}

/// Isotropic Matérn correlation with decay `phi_s` and smoothness `nu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matern {
    phi_s: f64,
    nu: f64,
    form: MaternForm,
}

impl Matern {
    pub fn new(phi_s: f64, nu: f64) -> Result<Self> {
        if !(phi_s > 0.0 && phi_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("phi_s must be positive, got {phi_s}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidArgument(format!("nu must be positive, got {nu}")));
        }
        Ok(Self::new_unchecked(phi_s, nu))
    }

    fn new_unchecked(phi_s: f64, nu: f64) -> Self {
        let form = if nu == 0.5 {
            MaternForm::Half
        } else if nu == 1.5 {
            MaternForm::ThreeHalves
        } else if nu == 2.5 {
            MaternForm::FiveHalves
        } else {
            MaternForm::General { log_norm: (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) }
        };
        Self { phi_s, nu, form }
    }

    pub fn phi_s(&self) -> f64 {
        self.phi_s
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Correlation at scaled lag `x = phi_s * d`.
    pub fn corr_scaled(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match self.form {
            MaternForm::Half => (-x).exp(),
            MaternForm::ThreeHalves => (1.0 + x) * (-x).exp(),
            MaternForm::FiveHalves => (1.0 + x + x * x / 3.0) * (-x).exp(),
            MaternForm::General { log_norm } => {
                if x > 700.0 {
                    return 0.0;
                }
                let k = bessel_k(self.nu, x);
                if k == 0.0 {
                    return 0.0;
                }
                (log_norm + self.nu * x.ln() + k.ln()).exp().min(1.0)
            }
        }
    }

    pub fn corr(&self, d: f64) -> f64 {
        self.corr_scaled(self.phi_s * d)
    }
}

/// Matérn correlation at distance `d`.
pub fn matern_corr(d: f64, phi_s: f64, nu: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be nonnegative, got {d}")));
    }
    Ok(Matern::new(phi_s, nu)?.corr(d))
}

/// `exp(-phi_t |t - t'|)`.
pub fn exp_time_corr(t: f64, t2: f64, phi_t: f64) -> f64 {
    (-phi_t * (t - t2).abs()).exp()
}

#[inline]
fn f_decay(a1: f64, a2: f64, phi: f64) -> f64 {
    (-phi * (a2 - a1)).exp()
}

/// `∫_c^d ∫_a^b exp(-phi |t - t'|) dt dt'` for ordered endpoints.
pub(crate) fn integrated_time_cov_raw(a: f64, b: f64, c: f64, d: f64, phi: f64) -> f64 {
    // put the interval that starts first in (a, b)
    let (a, b, c, d) = if c < a || (c == a && d < b) { (c, d, a, b) } else { (a, b, c, d) };
    let f = |x, y| f_decay(x, y, phi);
    let inv = 1.0 / (phi * phi);
    if b <= c {
        // disjoint
        inv * (f(a, d) + f(b, c) - f(a, c) - f(b, d))
    } else if d <= b {
        // (c, d) nested in (a, b)
        inv * (2.0 * phi * (d - c) + f(c, b) + f(a, d) - f(a, c) - f(d, b))
    } else {
        // a <= c < b < d
        inv * (2.0 * phi * (b - c) + f(a, d) + f(c, b) - f(a, c) - f(b, d))
    }
}

/// Closed-form double integral of the exponential temporal kernel over
/// `(a, b) × (c, d)`.
pub fn integrated_time_cov(a: f64, b: f64, c: f64, d: f64, phi_t: f64) -> Result<f64> {
    if !(a < b) || !(c < d) {
        return Err(Error::InvalidArgument(format!("intervals ({a}, {b}) and ({c}, {d}) must have start < end")));
    }
    if !(phi_t > 0.0) {
        return Err(Error::InvalidArgument(format!("phi_t must be positive, got {phi_t}")));
    }
    Ok(integrated_time_cov_raw(a, b, c, d, phi_t))
}

/// `∫_c^d exp(-phi |t - s|) ds`.
pub fn time_point_interval_integral(t: f64, c: f64, d: f64, phi: f64) -> f64 {
    if t <= c {
        ((-phi * (c - t)).exp() - (-phi * (d - t)).exp()) / phi
    } else if t >= d {
        ((-phi * (t - d)).exp() - (-phi * (t - c)).exp()) / phi
    } else {
        (2.0 - (-phi * (t - c)).exp() - (-phi * (d - t)).exp()) / phi
    }
}

/// Interval-averaged temporal correlation between two intervals.
pub fn avg_time_corr(i: &Interval, j: &Interval, phi_t: f64) -> f64 {
    integrated_time_cov_raw(i.start, i.end, j.start, j.end, phi_t) / (i.len() * j.len())
}

/// `C_ℓ̃(φ)` between temporally averaged sites. No numerical integration.
pub fn cov_point_point(pts: &[SpaceTimePoint], params: &ProcessParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = pts.len();
    if n == 0 {
        return Err(Error::InvalidArgument("at least one point is required".into()));
    }
    let m = params.matern();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|i| {
                    if i < j {
                        return 0.0;
                    }
                    let (p, q) = (&pts[i], &pts[j]);
                    m.corr(p.s.dist(&q.s)) * avg_time_corr(&p.interval, &q.interval, params.phi_t)
                })
                .collect()
        })
        .collect();
    let mut c = DMatrix::zeros(n, n);
    for (j, col) in cols.into_iter().enumerate() {
        for i in j..n {
            c[(i, j)] = col[i];
            c[(j, i)] = col[i];
        }
    }
    Ok(c)
}

/// Fixed within-polygon draws for each block. Both the point-block and the
/// block-block matrices are built from the same draws, which keeps the joint
/// covariance positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSamples {
    points: Vec<Vec<Point2>>,
}

impl BlockSamples {
    /// Block `k` draws from stream `k` of `seed`.
    pub fn draw(regions: &[&Polygon], mc_samples: usize, seed: u64) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
        }
        let points = regions
            .par_iter()
            .enumerate()
            .map(|(k, poly)| {
                let mut rng = stream_rng(seed, k as u64);
                sample_in_polygon(poly, mc_samples, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn for_blocks(blocks: &[SpaceTimeBlock], mc_samples: usize, seed: u64) -> Result<Self> {
        let regions: Vec<&Polygon> = blocks.iter().map(|b| &b.region).collect();
        Self::draw(&regions, mc_samples, seed)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn block(&self, k: usize) -> &[Point2] {
        &self.points[k]
    }

    fn check(&self, blocks: &[SpaceTimeBlock]) -> Result<()> {
        if self.points.len() != blocks.len() {
            return Err(Error::Dimension(format!("{} sampled blocks for {} blocks", self.points.len(), blocks.len())));
        }
        Ok(())
    }
}

/// Monte Carlo estimate of `|B|⁻¹ ∫_B C_s(s, u) du`.
pub fn spatial_point_block_avg(m: &Matern, s: &Point2, draws: &[Point2]) -> f64 {
    draws.iter().map(|u| m.corr(s.dist(u))).sum::<f64>() / draws.len() as f64
}

/// Monte Carlo estimate of `(|B||B'|)⁻¹ ∫_B ∫_B' C_s(u, v) du dv` over all
/// draw pairs.
pub fn spatial_block_block_avg(m: &Matern, a: &[Point2], b: &[Point2]) -> f64 {
    let mut total = 0.0;
    for u in a {
        for v in b {
            total += m.corr(u.dist(v));
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `C_{ℓ̃,L}(φ)`: closed-form temporal factor times Monte Carlo spatial factor.
pub fn cov_point_block(
    pts: &[SpaceTimePoint],
    blocks: &[SpaceTimeBlock],
    samples: &BlockSamples,
    params: &ProcessParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    samples.check(blocks)?;
    let m = params.matern();
    let (n, k) = (pts.len(), blocks.len());
    let cols: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|kk| {
            let blk = &blocks[kk];
            pts.iter()
                .map(|p| {
                    avg_time_corr(&p.interval, &blk.interval, params.phi_t)
                        * spatial_point_block_avg(&m, &p.s, samples.block(kk))
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, k, |i, j| cols[j][i]))
}

/// `K × K` spatial factor of `C_L`: Monte Carlo block-block averages of the
/// Matérn correlation. Only the upper triangle is computed.
pub fn spatial_block_block_matrix(samples: &BlockSamples, m: &Matern) -> DMatrix<f64> {
    let k = samples.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let vals: Vec<f64> =
        pairs.par_iter().map(|&(i, j)| spatial_block_block_avg(m, samples.block(i), samples.block(j))).collect();
    let mut c = DMatrix::zeros(k, k);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        c[(i, j)] = v;
        c[(j, i)] = v;
    }
    c
}

/// `C_L(φ)` from a precomputed [`spatial_block_block_matrix`].
pub fn cov_block_block_with_spatial(
    blocks: &[SpaceTimeBlock],
    spatial: &DMatrix<f64>,
    phi_t: f64,
) -> Result<DMatrix<f64>> {
    let k = blocks.len();
    if spatial.shape() != (k, k) {
        return Err(Error::Dimension(format!("spatial block matrix is {:?} for {k} blocks", spatial.shape())));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| avg_time_corr(&blocks[i].interval, &blocks[j].interval, phi_t) * spatial[(i, j)]))
}

/// `C_L(φ)`.
pub fn cov_block_block(
    blocks: &[SpaceTimeBlock],
    samples: &BlockSamples,
    params: &ProcessParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    samples.check(blocks)?;
    cov_block_block_with_spatial(blocks, &spatial_block_block_matrix(samples, &params.matern()), params.phi_t)
}

/// `(C_ℓ(φ), C_{ℓ,ℓ̃}(φ))` for instant targets against interval-averaged
/// reference points.
pub fn cov_instant(
    pts: &[InstantPoint],
    ref_pts: &[SpaceTimePoint],
    params: &ProcessParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    params.validate()?;
    if pts.is_empty() {
        return Err(Error::InvalidArgument("at least one target is required".into()));
    }
    let m = params.matern();
    let n = pts.len();
    let c_inst = DMatrix::from_fn(n, n, |i, j| {
        m.corr(pts[i].s.dist(&pts[j].s)) * exp_time_corr(pts[i].t, pts[j].t, params.phi_t)
    });
    let rows: Vec<Vec<f64>> = pts
        .par_iter()
        .map(|p| {
            ref_pts
                .iter()
                .map(|q| {
                    let iv = &q.interval;
                    m.corr(p.s.dist(&q.s)) * time_point_interval_integral(p.t, iv.start, iv.end, params.phi_t)
                        / iv.len()
                })
                .collect()
        })
        .collect();
    let cross = DMatrix::from_fn(n, ref_pts.len(), |i, j| rows[i][j]);
    Ok((c_inst, cross))
}
