//! The smoothed budget penalty `G_S` and the budget bound `b'`.
//!
//! `G_S'` is the convolution of `theta h'(theta v)` with an exponential:
//!
//! ```text
//! G_S'(u) = -(gamma theta / (b_eff (e - 1))) int_0^u exp(r (u - v)) h'(theta v) dv,
//! r = gamma / b_eff
//! ```
//!
//! with `b_eff = b` for simultaneous updates and `b_eff = b + rho1 gamma` for
//! sequential updates. It is the pointwise smallest derivative for which
//! `gamma G_S(u) <= G*(G_S'(u)) + gamma/(e-1) h(theta u)` (with the extra
//! `-gamma rho1 G_S'(u)` on the left for sequential updates) holds, and it
//! holds with equality.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TraceObjective;
use crate::quadrature::{integrate, integrate_default};
use crate::E_MINUS_ONE;

/// `r u` above which `G_S'` is reported as `-inf`.
pub const OVERFLOW_EXPONENT: f64 = 700.0;
/// Absolute tolerance of [`BudgetSmoother::gs_prime_inv`].
pub const INVERSE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Integer decisions from the previous step's duals.
    #[serde(alias = "seq")]
    Sequential,
    /// Fractional decisions from a per-step saddle point.
    #[serde(alias = "sim")]
    Simultaneous,
}

impl Variant {
    pub fn short(&self) -> &'static str {
        match self {
            Variant::Sequential => "seq",
            Variant::Simultaneous => "sim",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seq" | "sequential" => Ok(Variant::Sequential),
            "sim" | "simultaneous" => Ok(Variant::Simultaneous),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSmoother {
    pub objective: TraceObjective,
    pub variant: Variant,
    pub gamma: f64,
    pub b: f64,
    /// Lower bound on `tr(A_t) / c_t`.
    pub theta: f64,
    /// Upper bound on `tr(A_t) / c_t`.
    pub theta_max: f64,
    /// Upper bound on `c_t`; only used by sequential updates.
    pub rho1: f64,
}

impl BudgetSmoother {
    pub fn new(
        objective: TraceObjective,
        variant: Variant,
        gamma: f64,
        b: f64,
        theta: f64,
        theta_max: f64,
        rho1: f64,
    ) -> Result<Self> {
        let s = BudgetSmoother {
            objective,
            variant,
            gamma,
            b,
            theta,
            theta_max,
            rho1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::Config(format!("budget must be positive, got {}", self.b)));
        }
        if !(self.theta > 0.0 && self.theta <= self.theta_max && self.theta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < theta <= Theta, got theta = {}, Theta = {}",
                self.theta, self.theta_max
            )));
        }
        match self.variant {
            Variant::Sequential if !(self.rho1 > 0.0 && self.rho1.is_finite()) => Err(Error::Config(
                format!("sequential updates need rho1 > 0, got {}", self.rho1),
            )),
            Variant::Simultaneous if self.rho1 != 0.0 => Err(Error::Config(format!(
                "simultaneous updates take rho1 = 0, got {}",
                self.rho1
            ))),
            _ => Ok(()),
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut s = self.clone();
        s.gamma = gamma;
        s.validate()?;
        Ok(s)
    }

    /// `b` for simultaneous updates, `b + rho1 gamma` for sequential ones.
    pub fn effective_budget(&self) -> f64 {
        match self.variant {
            Variant::Simultaneous => self.b,
            Variant::Sequential => self.b + self.rho1 * self.gamma,
        }
    }

    /// Exponential rate `gamma / b_eff`.
    pub fn rate(&self) -> f64 {
        self.gamma / self.effective_budget()
    }

    fn prefactor(&self) -> f64 {
        self.gamma * self.theta / (self.effective_budget() * E_MINUS_ONE)
    }

    /// `G_S'(u)`; zero for `u <= 0` and `-inf` once `r u` exceeds
    /// [`OVERFLOW_EXPONENT`]. The linear objective uses its closed form.
    pub fn gs_prime(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        let ru = self.rate() * u;
        if ru > OVERFLOW_EXPONENT {
            return Ok(f64::NEG_INFINITY);
        }
        match self.objective {
            TraceObjective::Linear => Ok(-self.theta * ru.exp_m1() / E_MINUS_ONE),
            _ => self.gs_prime_quadrature(u),
        }
    }

    /// `G_S'(u)` by quadrature for every objective, including the linear one.
    pub fn gs_prime_quadrature(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        let r = self.rate();
        if r * u > OVERFLOW_EXPONENT {
            return Ok(f64::NEG_INFINITY);
        }
        let theta = self.theta;
        let obj = self.objective;
        // exp(r u) factored out so the integrand stays bounded by h'(0)
        let damped = integrate_default(|v| (-r * v).exp() * obj.dh(theta * v), 0.0, u)?;
        Ok(-self.prefactor() * (r * u).exp() * damped)
    }

    /// `G_S(u) = int_0^u G_S'(s) ds`; zero for `u <= 0`.
    pub fn gs_value(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        self.gs_increment(0.0, u)
    }

    fn gs_increment(&self, a: f64, b: f64) -> Result<f64> {
        let err = RefCell::new(None);
        let val = integrate(
            |s| match self.gs_prime(s) {
                Ok(v) => v,
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            },
            a,
            b,
            1e-13,
            1e-300,
        );
        // quadrature of gs_prime inherits any inner failure
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        val
    }

    /// `G_S` on an ascending grid of nonnegative points, accumulated panel by panel.
    pub fn gs_values_on_grid(&self, grid: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(grid.len());
        let mut prev_u = 0.0;
        let mut acc = 0.0;
        for &u in grid {
            if u < prev_u {
                return Err(Error::Config("grid must be ascending and nonnegative".into()));
            }
            acc += self.gs_increment(prev_u, u)?;
            out.push(acc);
            prev_u = u;
        }
        Ok(out)
    }

    /// Smallest `u >= 0` with `G_S'(u) <= target`, to [`INVERSE_TOL`].
    ///
    /// The returned point always satisfies `G_S'(u) <= target` (it is the
    /// upper end of the final bisection bracket).
    pub fn gs_prime_inv(&self, target: f64) -> Result<f64> {
        if target >= 0.0 {
            return Ok(0.0);
        }
        if self.objective == TraceObjective::Linear {
            return Ok((-target * E_MINUS_ONE / self.theta).ln_1p() / self.rate());
        }
        let mut lo = 0.0;
        let mut hi = 1.0 / self.rate();
        let mut expansions = 0;
        while self.gs_prime(hi)? > target {
            lo = hi;
            hi *= 2.0;
            expansions += 1;
            if expansions > 200 {
                return Ok(f64::INFINITY);
            }
        }
        while hi - lo > INVERSE_TOL {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.gs_prime(mid)? <= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Certified bound on the budget consumed:
    /// `inf{u : G_S'(u) <= -h'(0) Theta}`, plus `rho1` for sequential updates.
    pub fn b_prime(&self) -> Result<f64> {
        let base = self.gs_prime_inv(-self.objective.slope_at_zero() * self.theta_max)?;
        Ok(match self.variant {
            Variant::Simultaneous => base,
            Variant::Sequential => base + self.rho1,
        })
    }

    /// Elementary upper bound on `b'` from `h'(theta v) >= exp(-k theta v)`
    /// (`k = 1` for D-optimal, `k = 2` for A-optimal); exact for linear `h`.
    pub fn b_prime_analytic_bound(&self) -> Option<f64> {
        let beff = self.effective_budget();
        let g = self.gamma;
        let ratio = match self.objective {
            TraceObjective::Linear => self.theta_max / self.theta,
            TraceObjective::DOptimal => self.theta_max * (1.0 / self.theta + beff / g),
            TraceObjective::AOptimal => self.theta_max * (1.0 / self.theta + 2.0 * beff / g),
            TraceObjective::PthMean { .. } => return None,
        };
        let extra = match self.variant {
            Variant::Simultaneous => 0.0,
            Variant::Sequential => self.rho1,
        };
        Some(beff / g * (E_MINUS_ONE * ratio + 1.0).ln() + extra)
    }

    /// Residuals of `gamma (G_S - rho1 G_S') = b G_S' + gamma/(e-1) h(theta u)`
    /// over an ascending grid; returns the largest absolute residual.
    pub fn gs_gamma_identity_check(&self, grid: &[f64]) -> Result<f64> {
        let values = self.gs_values_on_grid(grid)?;
        let rho1 = match self.variant {
            Variant::Simultaneous => 0.0,
            Variant::Sequential => self.rho1,
        };
        let g = self.gamma;
        let mut worst: f64 = 0.0;
        for (&u, &gs) in grid.iter().zip(&values) {
            let d = self.gs_prime(u)?;
            let lhs = g * (gs - rho1 * d);
            let rhs = self.b * d + g / E_MINUS_ONE * self.objective.h(self.theta * u);
            worst = worst.max((lhs - rhs).abs());
        }
        Ok(worst)
    }
}

/// Smallest `gamma >= 1` (to `1e-7`) whose `b'` fits inside the budget `b`.
///
/// `b'` is non-increasing in `gamma`. For sequential updates `b'` stays above
/// `rho1` plus a positive constant as `gamma` grows, so small budgets can be
/// unattainable; that case is reported as a configuration error.
pub fn gamma_for_budget(template: &BudgetSmoother) -> Result<f64> {
    let fits = |g: f64| -> Result<bool> { Ok(template.with_gamma(g)?.b_prime()? <= template.b) };
    if fits(1.0)? {
        return Ok(1.0);
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    while !fits(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Config(format!(
                "no gamma keeps b' within the budget {}",
                template.b
            )));
        }
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if fits(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use std::f64::consts::E;

    fn sim(obj: TraceObjective, gamma: f64, b: f64, theta: f64, theta_max: f64) -> BudgetSmoother {
        BudgetSmoother::new(obj, Variant::Simultaneous, gamma, b, theta, theta_max, 0.0).unwrap()
    }

    /// The defining convolution integrated directly in its original form
    /// (no factoring), at a panel count four times the converged one.
    fn refined_oracle(s: &BudgetSmoother, u: f64) -> f64 {
        let r = s.rate();
        let f = |v: f64| (r * (u - v)).exp() * s.theta * s.objective.dh(s.theta * v);
        let coarse = integrate(f, 0.0, u, 1e-14, 0.0).unwrap();
        let fine = crate::quadrature::integrate_panels(&f, 0.0, u, 4096);
        assert!((coarse - fine).abs() <= 1e-12 * fine.abs());
        -s.gamma / (s.effective_budget() * E_MINUS_ONE) * fine
    }

    #[test]
    fn linear_closed_form_example() {
        let s = sim(TraceObjective::Linear, 1.0, 10.0, 1.0, 1.0);
        assert!((s.gs_prime(10.0).unwrap() + 1.0).abs() < 1e-14);
        assert!((s.gs_prime_quadrature(10.0).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(s.gs_prime(0.0).unwrap(), 0.0);
        assert_eq!(s.gs_prime(-3.0).unwrap(), 0.0);
    }

    #[test]
    fn d_optimal_matches_refined_oracle() {
        let s = sim(TraceObjective::DOptimal, 2.0, 5.0, 0.5, 1.0);
        let got = s.gs_prime(3.0).unwrap();
        assert!((got - refined_oracle(&s, 3.0)).abs() <= 1e-8);
    }

    #[test]
    fn overflow_guard() {
        let s = sim(TraceObjective::DOptimal, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(s.gs_prime(701.0).unwrap(), f64::NEG_INFINITY);
        assert!(s.gs_prime(600.0).unwrap().is_finite());
    }

    #[test]
    fn inverse_examples() {
        let s = sim(TraceObjective::Linear, 1.0, 10.0, 1.0, 1.0);
        assert_eq!(s.gs_prime_inv(0.0).unwrap(), 0.0);
        assert!((s.gs_prime_inv(-1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((s.b_prime().unwrap() - 10.0).abs() < 1e-12);

        let d = sim(TraceObjective::DOptimal, 1.5, 10.0, 0.7, 4.0);
        let bp = d.b_prime().unwrap();
        assert!(bp <= d.b_prime_analytic_bound().unwrap() + 1e-6);
        assert!(d.gs_prime(bp).unwrap() <= -4.0);
        assert!(d.gs_prime(bp - 1e-9).unwrap() > -4.0);
    }

    #[test]
    fn sequential_adds_rho1() {
        let base = BudgetSmoother::new(TraceObjective::DOptimal, Variant::Sequential, 2.0, 10.0, 1.0, 3.0, 1.0)
            .unwrap();
        let inner = base.gs_prime_inv(-3.0).unwrap();
        assert!((base.b_prime().unwrap() - (inner + 1.0)).abs() < 1e-15);
        assert!((base.effective_budget() - 12.0).abs() < 1e-15);
    }

    #[test]
    fn a_optimal_bound_example() {
        for variant in [Variant::Simultaneous, Variant::Sequential] {
            let rho1 = if variant == Variant::Sequential { 1.0 } else { 0.0 };
            let s = BudgetSmoother::new(TraceObjective::AOptimal, variant, 2.0, 10.0, 0.5, 5.0, rho1).unwrap();
            let bp = s.b_prime().unwrap();
            let bound = s.b_prime_analytic_bound().unwrap();
            assert!(bp <= bound + 1e-6, "{variant}: {bp} > {bound}");
        }
    }

    #[test]
    fn linear_b_prime_is_budget_at_unit_gamma() {
        let s = sim(TraceObjective::Linear, (E_MINUS_ONE + 1.0).ln(), 10.0, 2.0, 2.0);
        assert!((s.b_prime().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_search_examples() {
        let s = sim(TraceObjective::Linear, 1.0, 10.0, 1.0, 1.0);
        assert_eq!(gamma_for_budget(&s).unwrap(), 1.0);
        let s = sim(TraceObjective::Linear, 1.0, 10.0, 1.0, 2.0);
        let g = gamma_for_budget(&s).unwrap();
        assert!((g - (2.0 * (E - 1.0) + 1.0).ln()).abs() < 1e-6);
        let s = sim(TraceObjective::DOptimal, 1.0, 10.0, 1.0, 3.0);
        let g = gamma_for_budget(&s).unwrap();
        assert!(s.with_gamma(g).unwrap().b_prime().unwrap() <= 10.0);
        assert!(s.with_gamma(g - 1e-4).unwrap().b_prime().unwrap() >= 10.0);

        let tight = BudgetSmoother::new(TraceObjective::Linear, Variant::Sequential, 1.0, 2.0, 1.0, 12.0, 1.0)
            .unwrap();
        assert!(matches!(gamma_for_budget(&tight), Err(Error::Config(_))));
    }

    #[test]
    fn identity_residuals() {
        let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.5).collect();
        for obj in [TraceObjective::Linear, TraceObjective::DOptimal, TraceObjective::AOptimal] {
            let s = sim(obj, 2.0, 10.0, 0.8, 3.0);
            assert!(s.gs_gamma_identity_check(&grid).unwrap() <= 1e-7, "{obj}");
            let seq = BudgetSmoother::new(obj, Variant::Sequential, 2.0, 10.0, 0.8, 3.0, 1.5).unwrap();
            assert!(seq.gs_gamma_identity_check(&grid).unwrap() <= 1e-7, "{obj} seq");
        }
        let s = sim(TraceObjective::DOptimal, 1.0, 10.0, 1.0, 1.0);
        assert_eq!(s.gs_gamma_identity_check(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_parameters() {
        let obj = TraceObjective::DOptimal;
        assert!(BudgetSmoother::new(obj, Variant::Simultaneous, 0.9, 10.0, 1.0, 1.0, 0.0).is_err());
        assert!(BudgetSmoother::new(obj, Variant::Simultaneous, 1.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(BudgetSmoother::new(obj, Variant::Simultaneous, 1.0, 1.0, 2.0, 1.0, 0.0).is_err());
        assert!(BudgetSmoother::new(obj, Variant::Sequential, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn sign_monotonicity_and_lower_bound() {
        for obj in [TraceObjective::Linear, TraceObjective::DOptimal, TraceObjective::AOptimal] {
            let s = sim(obj, 1.7, 8.0, 0.6, 2.0);
            let mut prev = 0.0;
            for k in 0..200 {
                let u = k as f64 * 0.1;
                let d = s.gs_prime(u).unwrap();
                assert!(d <= 0.0 && d <= prev + 1e-15);
                let lower = -s.theta * obj.slope_at_zero() * (s.rate() * u).exp_m1() / E_MINUS_ONE;
                assert!(d >= lower - 1e-12 * lower.abs());
                prev = d;
            }
        }
        let s = sim(TraceObjective::DOptimal, 1.0, 10.0, 1.0, 5.0);
        let mut prev = f64::INFINITY;
        for g in [1.0, 1.5, 2.0, 3.0, 5.0] {
            let bp = s.with_gamma(g).unwrap().b_prime().unwrap();
            assert!(bp <= prev);
            prev = bp;
        }
    }
}
