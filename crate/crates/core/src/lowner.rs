//! Surrogates with order-reversing gradients, parametrized by atomic measures.
//!
//! A nonnegative measure `mu` on `[0, 1)` defines
//!
//! ```text
//! y(u)   = sum_j mu_j / (u * lambda_j + (1 - lambda_j))
//! h_S(u) = int_0^u y(s) ds
//! ```
//!
//! Each summand of `y` is operator monotone decreasing on the PSD cone, so
//! `H_S(U) = sum_i h_S(lambda_i(U))` has an order-reversing gradient for any
//! nonnegative weights. Atoms at `lambda = 1` are not representable: they
//! contribute `mu / u` and make `h_S'(0)` infinite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TraceObjective;
use crate::par::Execution;
use crate::random::{gaussian_psd, gaussian_vec, stream_rng};
use crate::spectral::{apply_to_eigen, check_psd, eig_sym, psd_order_gap, SymMatrix};

/// Tolerance on `h_S'(0) = h'(0)` for admissible surrogates.
pub const SLOPE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct AtomicMeasure {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomicMeasure {
    /// Builds a measure from `(node, weight)` pairs; atoms are sorted by node
    /// and atoms sharing a node are merged.
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().collect();
        for &(node, weight) in &atoms {
            if !(0.0..1.0).contains(&node) {
                return Err(Error::Config(format!("measure node {node} outside [0, 1)")));
            }
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(Error::Config(format!("measure weight {weight} must be finite and >= 0")));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut nodes: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (node, weight) in atoms {
            match nodes.last() {
                Some(&last) if last == node => *weights.last_mut().unwrap() += weight,
                _ => {
                    nodes.push(node);
                    weights.push(weight);
                }
            }
        }
        Ok(AtomicMeasure { nodes, weights })
    }

    pub fn atom(node: f64, weight: f64) -> Result<Self> {
        Self::new([(node, weight)])
    }

    pub fn zero() -> Self {
        AtomicMeasure {
            nodes: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// The measure whose `h_S` equals the objective itself, when one exists
    /// (the objective is PSD-DR): `u` for linear, `log(1 + u)` for D-optimal.
    pub fn unsmoothed(obj: &TraceObjective) -> Option<Self> {
        match obj {
            TraceObjective::Linear => Some(Self::atom(0.0, 1.0).unwrap()),
            TraceObjective::DOptimal => Some(Self::atom(0.5, 0.5).unwrap()),
            _ => None,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `y(0) = sum_j mu_j / (1 - lambda_j)`.
    pub fn y0(&self) -> f64 {
        self.atoms().map(|(l, w)| w / (1.0 - l)).sum()
    }

    /// `y(u)`; constant `y(0)` for `u < 0`.
    pub fn y(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        self.atoms().map(|(l, w)| w * kernel(u, l)).sum()
    }

    /// `h_S(u)` in closed form; linear with slope `y(0)` for `u < 0`.
    pub fn hs(&self, u: f64) -> f64 {
        if u < 0.0 {
            return self.y0() * u;
        }
        self.atoms().map(|(l, w)| w * primitive(u, l)).sum()
    }

    /// `grad H_S(U) = V diag(y(lambda_i)) V^T`.
    pub fn grad(&self, u: &SymMatrix) -> Result<SymMatrix> {
        let eig = eig_sym(u)?;
        check_psd(&eig, u)?;
        apply_to_eigen(&eig, |l| self.y(l))
    }

    /// `H_S(U) = sum_i h_S(lambda_i(U))`.
    pub fn trace_value(&self, u: &SymMatrix) -> Result<f64> {
        let eig = eig_sym(u)?;
        check_psd(&eig, u)?;
        Ok(eig.values.iter().map(|&l| self.hs(l)).sum())
    }
}

impl TryFrom<Vec<(f64, f64)>> for AtomicMeasure {
    type Error = Error;

    fn try_from(atoms: Vec<(f64, f64)>) -> Result<Self> {
        AtomicMeasure::new(atoms)
    }
}

impl From<AtomicMeasure> for Vec<(f64, f64)> {
    fn from(m: AtomicMeasure) -> Self {
        m.atoms().collect()
    }
}

/// `1 / (u lambda + 1 - lambda)`.
#[inline]
pub fn kernel(u: f64, lambda: f64) -> f64 {
    1.0 / (u * lambda + (1.0 - lambda))
}

/// `int_0^u kernel(s, lambda) ds`.
#[inline]
pub fn primitive(u: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        u
    } else {
        (u * lambda / (1.0 - lambda)).ln_1p() / lambda
    }
}

/// An admissible surrogate `h_S` for a base objective `h`: `h_S(0) = 0` and
/// `h_S'(0) = h'(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedObjective {
    pub base: TraceObjective,
    pub measure: AtomicMeasure,
}

impl SmoothedObjective {
    pub fn new(base: TraceObjective, measure: AtomicMeasure) -> Result<Self> {
        base.validate()?;
        let slope = base.slope_at_zero();
        let y0 = measure.y0();
        if (y0 - slope).abs() > SLOPE_TOL * slope.max(1.0) {
            return Err(Error::Config(format!(
                "surrogate slope at zero {y0} does not match h'(0) = {slope}"
            )));
        }
        Ok(SmoothedObjective { base, measure })
    }

    /// `h_S = h` for objectives that are PSD-DR on their own.
    pub fn unsmoothed(base: TraceObjective) -> Option<Self> {
        AtomicMeasure::unsmoothed(&base).map(|m| SmoothedObjective { base, measure: m })
    }

    pub fn y(&self, u: f64) -> f64 {
        self.measure.y(u)
    }

    pub fn hs(&self, u: f64) -> f64 {
        self.measure.hs(u)
    }

    pub fn grad(&self, u: &SymMatrix) -> Result<SymMatrix> {
        self.measure.grad(u)
    }

    pub fn trace_value(&self, u: &SymMatrix) -> Result<f64> {
        self.measure.trace_value(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdDrReport {
    pub trials: usize,
    pub dim: usize,
    /// Smallest `lambda_min(grad H_S(U') - grad H_S(U))` over pairs `U' <= U`.
    pub min_gap: f64,
    pub passed: bool,
}

/// Gap below which a sampled pair counts as a violation.
pub const PSD_DR_TOL: f64 = -1e-8;

/// Monte Carlo check that `grad H_S` reverses the PSD order: for random
/// `U' <= U` (with `U = U' + sum v v^T`), `grad H_S(U) <= grad H_S(U')`.
pub fn certify_psd_dr(
    measure: &AtomicMeasure,
    trials: usize,
    dim: usize,
    seed: u64,
    exec: Execution,
) -> Result<PsdDrReport> {
    if trials == 0 || dim == 0 {
        return Err(Error::Config("certification needs trials >= 1 and dim >= 1".into()));
    }
    let gaps = exec.map_range(trials, |t| -> Result<f64> {
        let mut rng = stream_rng(seed, t as u64);
        let scale = [0.1, 1.0, 10.0][t % 3];
        let lower = &gaussian_psd(&mut rng, dim, dim) * scale;
        let mut upper = lower.clone();
        for _ in 0..=(t % dim) {
            let v = gaussian_vec(&mut rng, dim);
            upper.add_scaled(&SymMatrix::outer(&v), scale);
        }
        psd_order_gap(&measure.grad(&upper)?, &measure.grad(&lower)?)
    });
    let mut min_gap = f64::INFINITY;
    for g in gaps {
        min_gap = min_gap.min(g?);
    }
    Ok(PsdDrReport {
        trials,
        dim,
        min_gap,
        passed: min_gap >= PSD_DR_TOL,
    })
}
