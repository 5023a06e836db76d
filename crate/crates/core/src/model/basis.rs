//! Temporal basis functions for the process mean, evaluated at instants or
//! averaged over intervals.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::Interval;
use crate::error::{Error, Result};

/// Number of month buckets per year; time is measured in months.
pub const MONTHS_PER_YEAR: i64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// Intercept only.
    Constant,
    /// Intercept plus indicators of months 2..12, month `v` being
    /// `(v - 1, v)` modulo 12.
    Monthly,
    /// Intercept plus a sine and cosine per period.
    Fourier { periods: Vec<f64> },
}

/// Where a basis vector is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSupport {
    Instant(f64),
    Interval(Interval),
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if let BasisSpec::Fourier { periods } = self {
            if periods.is_empty() {
                return Err(Error::InvalidArgument("fourier basis needs at least one period".into()));
            }
            if let Some(p) = periods.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                return Err(Error::InvalidArgument(format!("fourier period must be positive, got {p}")));
            }
        }
        Ok(())
    }

    /// Basis dimension `r`.
    pub fn dim(&self) -> usize {
        match self {
            BasisSpec::Constant => 1,
            BasisSpec::Monthly => MONTHS_PER_YEAR as usize,
            BasisSpec::Fourier { periods } => 1 + 2 * periods.len(),
        }
    }

    fn fill(&self, support: TimeSupport, out: &mut [f64]) {
        out[0] = 1.0;
        match self {
            BasisSpec::Constant => {}
            BasisSpec::Monthly => {
                out[1..].iter_mut().for_each(|v| *v = 0.0);
                match support {
                    TimeSupport::Instant(t) => {
                        let m = t.floor() as i64;
                        let month = m.rem_euclid(MONTHS_PER_YEAR) as usize;
                        if month > 0 {
                            out[month] = 1.0;
                        }
                    }
                    TimeSupport::Interval(iv) => {
                        let len = iv.len();
                        let first = iv.start.floor() as i64;
                        let last = iv.end.ceil() as i64;
                        for m in first..last {
                            let lo = iv.start.max(m as f64);
                            let hi = iv.end.min((m + 1) as f64);
                            let month = m.rem_euclid(MONTHS_PER_YEAR) as usize;
                            if hi > lo && month > 0 {
                                out[month] += (hi - lo) / len;
                            }
                        }
                    }
                }
            }
            BasisSpec::Fourier { periods } => {
                for (v, &p) in periods.iter().enumerate() {
                    let w = 2.0 * PI / p;
                    let (s, c) = match support {
                        TimeSupport::Instant(t) => ((w * t).sin(), (w * t).cos()),
                        TimeSupport::Interval(iv) => {
                            let k = 1.0 / (w * iv.len());
                            (
                                k * ((w * iv.start).cos() - (w * iv.end).cos()),
                                k * ((w * iv.end).sin() - (w * iv.start).sin()),
                            )
                        }
                    };
                    out[1 + 2 * v] = s;
                    out[2 + 2 * v] = c;
                }
            }
        }
    }

    /// Basis vector at an instant or averaged over an interval.
    pub fn eval(&self, support: TimeSupport) -> Result<DVector<f64>> {
        self.validate()?;
        let mut v = DVector::zeros(self.dim());
        self.fill(support, v.as_mut_slice());
        Ok(v)
    }

    /// Interval-averaged basis rows, one per interval.
    pub fn interval_matrix(&self, intervals: &[Interval]) -> Result<DMatrix<f64>> {
        self.validate()?;
        let r = self.dim();
        let mut m = DMatrix::zeros(intervals.len(), r);
        let mut row = vec![0.0; r];
        for (i, iv) in intervals.iter().enumerate() {
            self.fill(TimeSupport::Interval(*iv), &mut row);
            m.row_mut(i).copy_from_slice(&row);
        }
        Ok(m)
    }

    /// Basis rows at instants.
    pub fn instant_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        let r = self.dim();
        let mut m = DMatrix::zeros(times.len(), r);
        let mut row = vec![0.0; r];
        for (i, &t) in times.iter().enumerate() {
            self.fill(TimeSupport::Instant(t), &mut row);
            m.row_mut(i).copy_from_slice(&row);
        }
        Ok(m)
    }
}

/// Basis vector for `spec` at `support`.
pub fn build_basis(spec: &BasisSpec, support: TimeSupport) -> Result<DVector<f64>> {
    spec.eval(support)
}
