//! Dense kernels: Cholesky factorization, triangular solves, the row/column
//! removal update used by exact leave-one-out, and distribution helpers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Graded diagonal jitter (relative to the mean diagonal) tried when a
/// factorization fails.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower-triangular `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriSide {
    /// Solve `L X = B`.
    Lower,
    /// Solve `Lᵀ X = B`.
    UpperTranspose,
}

impl CholFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.l
    }

    /// Wraps a lower-triangular matrix, checking the diagonal.
    pub fn from_lower(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::Dimension("Cholesky factor must be square".into()));
        }
        if let Some(i) = (0..l.nrows()).find(|&i| !(l[(i, i)] > 0.0)) {
            return Err(Error::NotPositiveDefinite { pivot: i });
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Reassembles `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn solve_lower_in_place(&self, b: &mut DMatrix<f64>) {
        tri_solve_in_place(&self.l, b, TriSide::Lower);
    }

    /// `A⁻¹ B` via forward then backward substitution.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        tri_solve_in_place(&self.l, &mut x, TriSide::Lower);
        tri_solve_in_place(&self.l, &mut x, TriSide::UpperTranspose);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// `L⁻¹ b`; its squared norm is the quadratic form `bᵀ A⁻¹ b`.
    pub fn whiten_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        tri_solve_in_place(&self.l, &mut m, TriSide::Lower);
        DVector::from_column_slice(m.as_slice())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Factor of `A` with row and column `j` removed.
    ///
    /// With `L = [[L11, 0, 0], [l21ᵀ, l22, 0], [L31, l32, L33]]` the reduced
    /// factor is `[[L11, 0], [L31, L33']]` where `L33' L33'ᵀ = L33 L33ᵀ + l32 l32ᵀ`,
    /// a rank-one update costing `O((n - j)²)`.
    pub fn drop_index(&self, j: usize) -> Result<CholFactor> {
        let n = self.dim();
        if j >= n {
            return Err(Error::InvalidArgument(format!("index {j} out of range for dimension {n}")));
        }
        let mut out = self.l.clone().remove_row(j).remove_column(j);
        let tail = n - 1 - j;
        if tail > 0 {
            let mut w: Vec<f64> = (j + 1..n).map(|i| self.l[(i, j)]).collect();
            let mut block = out.view_mut((j, j), (tail, tail));
            rank_one_update(&mut block, &mut w);
        }
        Ok(CholFactor { l: out })
    }
}

/// In-place `L Lᵀ + w wᵀ` update of a lower-triangular block via Givens-style
/// rotations. `w` is consumed.
fn rank_one_update<S>(l: &mut nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S>, w: &mut [f64])
where
    S: nalgebra::StorageMut<f64, nalgebra::Dyn, nalgebra::Dyn>,
{
    let m = w.len();
    for k in 0..m {
        let lkk = l[(k, k)];
        let r = lkk.hypot(w[k]);
        let c = r / lkk;
        let s = w[k] / lkk;
        l[(k, k)] = r;
        for i in k + 1..m {
            let lik = (l[(i, k)] + s * w[i]) / c;
            w[i] = c * w[i] - s * lik;
            l[(i, k)] = lik;
        }
    }
}

/// Plain column-oriented Cholesky; fails on the first non-positive pivot.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholFactor> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    let mut l = a.clone();
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                for i in j + 1..n {
                    let v = l[(i, k)];
                    l[(i, j)] -= v * ljk;
                }
            }
        }
        for i in j + 1..n {
            l[(i, j)] /= d;
        }
    }
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(CholFactor { l })
}

/// Retries [`cholesky`] along [`JITTER_LADDER`]; returns the factor and the
/// absolute jitter that was needed.
pub fn cholesky_jittered(a: &DMatrix<f64>, max_rel_jitter: f64) -> Result<(CholFactor, f64)> {
    let n = a.nrows().max(1);
    let scale = (a.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    let mut last = Error::NotPositiveDefinite { pivot: 0 };
    for rel in JITTER_LADDER.iter().copied().filter(|&r| r <= max_rel_jitter) {
        let jitter = rel * scale;
        let attempt = if jitter == 0.0 {
            cholesky(a)
        } else {
            let mut b = a.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += jitter;
            }
            cholesky(&b)
        };
        match attempt {
            Ok(f) => return Ok((f, jitter)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Factor of `A` with row/column `j` removed; see [`CholFactor::drop_index`].
pub fn chol_drop_index(l: &CholFactor, j: usize) -> Result<CholFactor> {
    l.drop_index(j)
}

fn tri_solve_column(l: &DMatrix<f64>, col: &mut [f64], side: TriSide) {
    let n = l.nrows();
    match side {
        TriSide::Lower => {
            // column-oriented forward substitution
            for k in 0..n {
                let xk = col[k] / l[(k, k)];
                col[k] = xk;
                if xk != 0.0 {
                    let lk = &l.as_slice()[k * n..(k + 1) * n];
                    for i in k + 1..n {
                        col[i] -= lk[i] * xk;
                    }
                }
            }
        }
        TriSide::UpperTranspose => {
            for k in (0..n).rev() {
                let lk = &l.as_slice()[k * n..(k + 1) * n];
                let mut s = col[k];
                for i in k + 1..n {
                    s -= lk[i] * col[i];
                }
                col[k] = s / l[(k, k)];
            }
        }
    }
}

fn tri_solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>, side: TriSide) {
    let n = l.nrows();
    let ncols = b.ncols();
    if n == 0 || ncols == 0 {
        return;
    }
    let data = b.as_mut_slice();
    if ncols >= 8 && n >= 64 {
        data.par_chunks_mut(n).for_each(|col| tri_solve_column(l, col, side));
    } else {
        data.chunks_mut(n).for_each(|col| tri_solve_column(l, col, side));
    }
}

/// Solves `L X = B` or `Lᵀ X = B`.
pub fn tri_solve(l: &CholFactor, b: &DMatrix<f64>, side: TriSide) -> Result<DMatrix<f64>> {
    if b.nrows() != l.dim() {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, factor is {}x{}",
            b.nrows(),
            l.dim(),
            l.dim()
        )));
    }
    let mut x = b.clone();
    tri_solve_in_place(&l.l, &mut x, side);
    Ok(x)
}

/// `mean + L z`, `z` standard normal. `lower` may be any lower-triangular
/// square root of the covariance, including a zero matrix.
pub fn mvn_sample<R: Rng + ?Sized>(mean: &DVector<f64>, lower: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut out = mean.clone();
    for k in 0..n {
        let zk = z[k];
        let lk = lower.column(k);
        for i in k..n {
            out[i] += lk[i] * zk;
        }
    }
    out
}

fn check_ig(shape: f64, scale: f64) -> Result<()> {
    if !(shape > 0.0 && scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "inverse-gamma needs shape > 0 and scale > 0 (got {shape}, {scale})"
        )));
    }
    Ok(())
}

/// Draw from IG(shape, scale), i.e. the reciprocal of Gamma(shape, rate = scale).
pub fn invgamma_sample<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    check_ig(shape, scale)?;
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::InvalidArgument(format!("gamma distribution: {e}")))?;
    Ok(1.0 / g.sample(rng))
}

pub fn invgamma_logpdf(x: f64, shape: f64, scale: f64) -> Result<f64> {
    check_ig(shape, scale)?;
    if x <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x)
}

/// Location-scale Student-t log density; `scale` is the scale, not its square.
pub fn student_t_logpdf(x: f64, df: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// `log Σ exp(v)` without overflow.
pub fn log_sum_exp(v: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + v.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetrizes in place: `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0);
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g * g.transpose() + DMatrix::identity(n, n) * n as f64 * 0.1
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_and_hand_factor() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_eq!(cholesky(&i).unwrap().l(), &i);
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky(&a).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert_relative_eq!(l.l(), &expect, epsilon = 1e-15);
    }

    #[test]
    fn random_reconstruction_and_nalgebra_agreement() {
        let a = random_spd(50, 1);
        let l = cholesky(&a).unwrap();
        assert!(rel_frob(&l.reconstruct(), &a) < 1e-10);
        let reference = a.clone().cholesky().unwrap().l();
        assert!(rel_frob(l.l(), &reference) < 1e-10);
    }

    #[test]
    fn non_pd_reports_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
        let (_, jitter) = cholesky_jittered(&a, 1e-6).unwrap();
        assert!(jitter > 0.0);
    }

    #[test]
    fn drop_last_keeps_leading_block() {
        let a = random_spd(8, 2);
        let l = cholesky(&a).unwrap();
        let d = l.drop_index(7).unwrap();
        assert_eq!(d.l(), &l.l().view((0, 0), (7, 7)).into_owned());
    }

    #[test]
    fn drop_from_identity() {
        let l = cholesky(&DMatrix::identity(6, 6)).unwrap();
        for j in 0..6 {
            assert_relative_eq!(l.drop_index(j).unwrap().l(), &DMatrix::identity(5, 5));
        }
        assert!(l.drop_index(6).is_err());
    }

    #[test]
    fn drop_matches_recomputation() {
        let a = random_spd(20, 3);
        let l = cholesky(&a).unwrap();
        let dropped = l.drop_index(7).unwrap();
        let direct = cholesky(&a.clone().remove_row(7).remove_column(7)).unwrap();
        assert!(rel_frob(dropped.l(), direct.l()) < 1e-9);
    }

    #[test]
    fn sequential_drops_track_recomputation() {
        let mut a = random_spd(30, 4);
        let mut l = cholesky(&a).unwrap();
        let mut rng = stream_rng(4, 1);
        while a.nrows() > 1 {
            let j = rng.random_range(0..a.nrows());
            l = l.drop_index(j).unwrap();
            a = a.remove_row(j).remove_column(j);
            let direct = cholesky(&a).unwrap();
            assert!(rel_frob(l.l(), direct.l()) < 1e-8);
        }
    }

    #[test]
    fn triangular_solves() {
        let l = cholesky(&DMatrix::identity(3, 3)).unwrap();
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(tri_solve(&l, &b, TriSide::Lower).unwrap(), b);

        let l = cholesky(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        let b = DMatrix::from_column_slice(2, 1, &[2.0, 1.0 + 2f64.sqrt()]);
        let x = tri_solve(&l, &b, TriSide::Lower).unwrap();
        assert_relative_eq!(x, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), epsilon = 1e-15);
        let bu = DMatrix::from_column_slice(2, 1, &[3.0, 2f64.sqrt()]);
        let xu = tri_solve(&l, &bu, TriSide::UpperTranspose).unwrap();
        assert_relative_eq!(xu, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), epsilon = 1e-15);

        let a = random_spd(50, 5);
        let l = cholesky(&a).unwrap();
        let b = random_spd(50, 6);
        let x = tri_solve(&l, &b, TriSide::Lower).unwrap();
        assert!(rel_frob(&(l.l() * &x), &b) < 1e-10);
        let y = tri_solve(&l, &b, TriSide::UpperTranspose).unwrap();
        assert!(rel_frob(&(l.l().transpose() * &y), &b) < 1e-10);
        assert!(tri_solve(&l, &DMatrix::zeros(3, 1), TriSide::Lower).is_err());
    }

    #[test]
    fn mvn_moments() {
        let mut rng = stream_rng(9, 0);
        let n = 100_000;
        let zero = DVector::zeros(1);
        let one = DMatrix::identity(1, 1);
        let mut xs: Vec<f64> = (0..n).map(|_| mvn_sample(&zero, &one, &mut rng)[0]).collect();
        // Kolmogorov-Smirnov against the standard normal
        xs.sort_by(f64::total_cmp);
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // critical value for p = 0.001
        assert!(d < 1.95 / (n as f64).sqrt(), "KS statistic {d}");

        let mean = DVector::from_vec(vec![3.0]);
        assert_eq!(mvn_sample(&mean, &DMatrix::zeros(1, 1), &mut rng), mean);

        let rho = 0.6;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let l = cholesky(&cov).unwrap();
        let m2 = DVector::zeros(2);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let v = mvn_sample(&m2, l.l(), &mut rng);
            sxy += v[0] * v[1];
            sxx += v[0] * v[0];
            syy += v[1] * v[1];
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!((r - rho).abs() < 0.02);
    }

    #[test]
    fn inverse_gamma_mean_and_mode() {
        let mut rng = stream_rng(10, 0);
        let (a, b) = (2.0, 0.1);
        let n = 100_000;
        // variance is infinite at a = 2; a batch-means standard error on the
        // sample is used instead of the analytic one
        let xs: Vec<f64> = (0..n).map(|_| invgamma_sample(a, b, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let batches: Vec<f64> = xs.chunks(1000).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let bm = batches.iter().sum::<f64>() / batches.len() as f64;
        let bse =
            (batches.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (batches.len() - 1) as f64 / batches.len() as f64)
                .sqrt();
        assert!((mean - b / (a - 1.0)).abs() < 3.0 * bse, "{mean} ± {bse}");

        assert!(invgamma_sample(0.0, 1.0, &mut rng).is_err());
        assert!(invgamma_sample(1.0, -1.0, &mut rng).is_err());

        let mode = b / (a + 1.0);
        let h = 1e-6;
        let g = (invgamma_logpdf(mode + h, a, b).unwrap() - invgamma_logpdf(mode - h, a, b).unwrap()) / (2.0 * h);
        assert!(g.abs() < 1e-4);
    }

    #[test]
    fn student_t_limits_and_normalization() {
        assert!((student_t_logpdf(0.0, 1e6, 0.0, 1.0) + 0.918939).abs() < 1e-3);
        let v = 2.5;
        assert_relative_eq!(
            student_t_logpdf(1.3, 1.0, 1.3, v),
            (1.0 / (std::f64::consts::PI * v)).ln(),
            epsilon = 1e-12
        );
        // trapezoid on a substituted infinite range
        for &(df, m, s) in &[(3.0, 0.4, 0.7), (7.5, -2.0, 2.2), (30.0, 1.0, 0.1)] {
            let n = 200_000;
            let mut total = 0.0;
            for i in 1..n {
                let u = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n as f64;
                let x = m + s * u.tan();
                let jac = s / u.cos().powi(2);
                total += student_t_logpdf(x, df, m, s).exp() * jac;
            }
            total *= std::f64::consts::PI / n as f64;
            assert!((total - 1.0).abs() < 1e-6, "df={df}: {total}");
        }
    }
}
