//! Scalar objectives `h` and their trace-function lifts `H(X) = sum_i h(lambda_i(X))`.
//!
//! All objectives are normalized so that `h(0) = 0` and are extended linearly
//! to negative arguments with slope `h'(0)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{apply_to_eigen, check_psd, eig_sym, SymMatrix};

/// Tolerance used when testing the linear objective's conjugate argument against `1`.
pub const LINEAR_CONJ_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceObjective {
    /// `h(u) = u`
    Linear,
    /// `h(u) = log(1 + u)`
    DOptimal,
    /// `h(u) = 1 - 1/(1 + u)`, i.e. `-tr((I + X)^-1)` shifted by `n`.
    AOptimal,
    /// `h(u) = 1 - (1 + u)^-p`
    PthMean { p: f64 },
}

impl TraceObjective {
    pub fn validate(&self) -> Result<()> {
        match self {
            TraceObjective::PthMean { p } if !(p.is_finite() && *p > 0.0) => {
                Err(Error::Config(format!("p-th mean requires p > 0, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// `h'(0)`.
    pub fn slope_at_zero(&self) -> f64 {
        match self {
            TraceObjective::Linear | TraceObjective::DOptimal | TraceObjective::AOptimal => 1.0,
            TraceObjective::PthMean { p } => *p,
        }
    }

    /// `sup_{u >= 0} h(u)`.
    pub fn supremum(&self) -> f64 {
        match self {
            TraceObjective::Linear | TraceObjective::DOptimal => f64::INFINITY,
            TraceObjective::AOptimal | TraceObjective::PthMean { .. } => 1.0,
        }
    }

    pub fn h(&self, u: f64) -> f64 {
        if u < 0.0 {
            return self.slope_at_zero() * u;
        }
        match self {
            TraceObjective::Linear => u,
            TraceObjective::DOptimal => u.ln_1p(),
            TraceObjective::AOptimal => u / (1.0 + u),
            TraceObjective::PthMean { p } => -(-p * u.ln_1p()).exp_m1(),
        }
    }

    /// `h'(u)`; constant `h'(0)` for `u < 0`.
    pub fn dh(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        match self {
            TraceObjective::Linear => 1.0,
            TraceObjective::DOptimal => 1.0 / (1.0 + u),
            TraceObjective::AOptimal => 1.0 / ((1.0 + u) * (1.0 + u)),
            TraceObjective::PthMean { p } => p * (-(p + 1.0) * u.ln_1p()).exp(),
        }
    }

    /// Inverse of `h` on `[0, sup h)`.
    pub fn h_inverse(&self, v: f64) -> Result<f64> {
        let sup = self.supremum();
        if !(v >= 0.0 && v < sup) {
            return Err(Error::Range { value: v, sup });
        }
        Ok(match self {
            TraceObjective::Linear => v,
            TraceObjective::DOptimal => v.exp_m1(),
            TraceObjective::AOptimal => v / (1.0 - v),
            TraceObjective::PthMean { p } => ((-(1.0 - v).ln()) / p).exp_m1(),
        })
    }

    /// The minimizer `u >= 0` of `y u - h(u)`: solves `h'(u) = y` when
    /// `0 < y < h'(0)`, and is `0` for `y >= h'(0)`. `None` when the infimum is
    /// not attained (`y <= 0`, or the linear objective with `y != 1`).
    pub fn conj_argmin(&self, y: f64) -> Option<f64> {
        let slope = self.slope_at_zero();
        match self {
            TraceObjective::Linear => ((y - 1.0).abs() <= LINEAR_CONJ_TOL).then_some(0.0),
            _ if y <= 0.0 || y.is_nan() => None,
            _ if y >= slope => Some(0.0),
            TraceObjective::DOptimal => Some(1.0 / y - 1.0),
            TraceObjective::AOptimal => Some(1.0 / y.sqrt() - 1.0),
            TraceObjective::PthMean { p } => Some((-(y / p).ln() / (p + 1.0)).exp_m1()),
        }
    }

    /// Concave conjugate `h*(y) = inf_{u >= 0} y u - h(u)`; may be `-inf`.
    pub fn conj(&self, y: f64) -> f64 {
        match self {
            TraceObjective::Linear => {
                if (y - 1.0).abs() <= LINEAR_CONJ_TOL {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            TraceObjective::DOptimal => {
                if y <= 0.0 {
                    f64::NEG_INFINITY
                } else if y >= 1.0 {
                    0.0
                } else {
                    1.0 - y + y.ln()
                }
            }
            TraceObjective::AOptimal => {
                if y < 0.0 {
                    f64::NEG_INFINITY
                } else if y >= 1.0 {
                    0.0
                } else {
                    2.0 * y.sqrt() - y - 1.0
                }
            }
            TraceObjective::PthMean { p } => {
                if y < 0.0 {
                    f64::NEG_INFINITY
                } else if y == 0.0 {
                    -1.0
                } else if y >= *p {
                    0.0
                } else {
                    let u = self.conj_argmin(y).unwrap_or(0.0);
                    y * u - self.h(u)
                }
            }
        }
    }

    /// Whether the unsmoothed trace function already has an order-reversing gradient.
    pub fn is_psd_dr(&self) -> bool {
        matches!(self, TraceObjective::Linear | TraceObjective::DOptimal)
    }

    /// Constant added per eigenvalue by the `h(0) = 0` normalization; the raw
    /// criterion is `H(X) - n * offset`.
    pub fn normalization_offset(&self) -> f64 {
        match self {
            TraceObjective::AOptimal | TraceObjective::PthMean { .. } => 1.0,
            _ => 0.0,
        }
    }

    /// `H(M) = sum_i h(lambda_i(M))`.
    pub fn trace_lift(&self, m: &SymMatrix) -> Result<f64> {
        let eig = eig_sym(m)?;
        check_psd(&eig, m)?;
        Ok(eig.values.iter().map(|&l| self.h(l)).sum())
    }

    /// `grad H(M) = V diag(h'(lambda_i)) V^T`.
    pub fn grad_trace_lift(&self, m: &SymMatrix) -> Result<SymMatrix> {
        let eig = eig_sym(m)?;
        check_psd(&eig, m)?;
        apply_to_eigen(&eig, |l| self.dh(l))
    }

    /// `H*(Y) = sum_i h*(lambda_i(Y))`.
    pub fn trace_conj(&self, y: &SymMatrix) -> Result<f64> {
        Ok(self.trace_conj_eigs(&eig_sym(y)?.values))
    }

    pub fn trace_conj_eigs(&self, eigs: &[f64]) -> f64 {
        eigs.iter().map(|&l| self.conj(l)).sum()
    }
}

impl fmt::Display for TraceObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceObjective::Linear => write!(f, "linear"),
            TraceObjective::DOptimal => write!(f, "d-optimal"),
            TraceObjective::AOptimal => write!(f, "a-optimal"),
            TraceObjective::PthMean { p } => write!(f, "pth-mean:{p}"),
        }
    }
}

impl FromStr for TraceObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let obj = match lower.as_str() {
            "linear" | "trace" => TraceObjective::Linear,
            "d-optimal" | "doptimal" | "d" | "logdet" => TraceObjective::DOptimal,
            "a-optimal" | "aoptimal" | "a" => TraceObjective::AOptimal,
            other => match other.strip_prefix("pth-mean:") {
                Some(p) => TraceObjective::PthMean {
                    p: p.parse()
                        .map_err(|_| Error::Config(format!("bad p-th mean parameter {p:?}")))?,
                },
                None => return Err(Error::Config(format!("unknown objective {s:?}"))),
            },
        };
        obj.validate()?;
        Ok(obj)
    }
}
