//! Streaming engines: integer decisions from the previous step's duals
//! (sequential) and fractional decisions from a per-step saddle point
//! (simultaneous).
//!
//! Both engines keep the primal state `U = sum A_t x_t`, `u = sum c_t x_t`
//! and the duals `Y = grad H_S(U)`, `z = G_S'(u)`.

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSmoother, Variant};
use crate::error::{Error, Result};
use crate::lowner::SmoothedObjective;
use crate::objectives::TraceObjective;
use crate::spectral::{apply_to_eigen, check_psd, eig_sym, SymMatrix};

/// Bisection tolerance on the simultaneous decision.
pub const DECISION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub a: SymMatrix,
    pub c: f64,
}

impl Arrival {
    pub fn new(a: SymMatrix, c: f64) -> Result<Self> {
        let arrival = Arrival { a, c };
        arrival.validate()?;
        Ok(arrival)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("cost must be positive, got {}", self.c)));
        }
        let eig = eig_sym(&self.a)?;
        check_psd(&eig, &self.a)
    }
}

/// One step of a run. `score_prev = <A_t, Y_{t-1}>` and `score_post = <A_t, Y_t>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: f64,
    pub c: f64,
    /// Cumulative cost after the step.
    pub u: f64,
    pub z: f64,
    pub z_prev: f64,
    pub score_prev: f64,
    pub score_post: f64,
    pub lambda_max_u: f64,
    /// Eigenvalues of `Y_t`, descending.
    pub y_eigs: Vec<f64>,
    /// Full `Y_t`, kept only when the engine retains duals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<SymMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub variant: Variant,
    pub objective: TraceObjective,
    pub n: usize,
    pub b: f64,
    pub steps: Vec<StepRecord>,
}

impl Trace {
    pub fn decisions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.x).collect()
    }

    pub fn budget_used(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.u)
    }

    pub fn has_dual_matrices(&self) -> bool {
        self.steps.iter().all(|s| s.y.is_some())
    }

    /// Eigenvalues of the final `Y`; `h'(0)` repeated `n` times for an empty run.
    pub fn final_y_eigs(&self) -> Vec<f64> {
        match self.steps.last() {
            Some(s) => s.y_eigs.clone(),
            None => vec![self.objective.slope_at_zero(); self.n],
        }
    }

    pub fn final_z(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.z)
    }

    /// Dual objective built from the run's dual iterates, with the conjugates
    /// of the original objective:
    /// `sum_t (score_t + c_t z_t)_+ - H*(Y_m) - b min(z_m, 0)`, where the
    /// per-step scores use the previous duals for sequential updates and the
    /// current ones for simultaneous updates. `+inf` when `H*(Y_m) = -inf`.
    pub fn dual_value(&self) -> f64 {
        let sum: f64 = self
            .steps
            .iter()
            .map(|s| match self.variant {
                Variant::Sequential => (s.score_prev + s.c * s.z_prev).max(0.0),
                Variant::Simultaneous => (s.score_post + s.c * s.z).max(0.0),
            })
            .sum();
        let h_conj = self.objective.trace_conj_eigs(&self.final_y_eigs());
        if h_conj == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        sum - h_conj - self.b * self.final_z().min(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState {
    pub u_mat: SymMatrix,
    pub u: f64,
    pub y: SymMatrix,
    pub z: f64,
    pub decisions: Vec<f64>,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct OnlineEngine {
    smoothed: SmoothedObjective,
    budget: BudgetSmoother,
    state: OnlineState,
    trace: Trace,
    keep_duals: bool,
}

impl OnlineEngine {
    /// Starts from `U = 0`, `u = 0`, `Y = h'(0) I`, `z = 0`.
    pub fn new(smoothed: SmoothedObjective, budget: BudgetSmoother, n: usize, keep_duals: bool) -> Result<Self> {
        if smoothed.base != budget.objective {
            return Err(Error::Config(format!(
                "surrogate built for {} but budget smoother for {}",
                smoothed.base, budget.objective
            )));
        }
        budget.validate()?;
        if n == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        let state = OnlineState {
            u_mat: SymMatrix::zeros(n),
            u: 0.0,
            y: SymMatrix::scaled_identity(n, smoothed.base.slope_at_zero()),
            z: budget.gs_prime(0.0)?,
            decisions: Vec::new(),
            step: 0,
        };
        let trace = Trace {
            variant: budget.variant,
            objective: smoothed.base,
            n,
            b: budget.b,
            steps: Vec::new(),
        };
        Ok(OnlineEngine {
            smoothed,
            budget,
            state,
            trace,
            keep_duals,
        })
    }

    pub fn state(&self) -> &OnlineState {
        &self.state
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn variant(&self) -> Variant {
        self.budget.variant
    }

    pub fn step(&mut self, a: &Arrival) -> Result<f64> {
        match self.budget.variant {
            Variant::Sequential => self.step_sequential(a),
            Variant::Simultaneous => self.step_simultaneous(a),
        }
    }

    pub fn run<'a>(&mut self, arrivals: impl IntoIterator<Item = &'a Arrival>) -> Result<()> {
        for a in arrivals {
            self.step(a)?;
        }
        Ok(())
    }

    fn check_arrival(&self, a: &Arrival) -> Result<()> {
        if a.a.dim() != self.state.u_mat.dim() {
            return Err(Error::Shape {
                expected: self.state.u_mat.dim(),
                found: a.a.dim(),
            });
        }
        a.validate()
    }

    /// Accepts iff `c z_{t-1} + <A, Y_{t-1}> > 0`; a tie rejects.
    pub fn step_sequential(&mut self, a: &Arrival) -> Result<f64> {
        self.check_arrival(a)?;
        let score_prev = a.a.inner(&self.state.y);
        let x = if a.c * self.state.z + score_prev > 0.0 { 1.0 } else { 0.0 };
        self.commit(a, x, score_prev)?;
        Ok(x)
    }

    /// Maximizes `H_S(U + x A) + G_S(u + x c)` over `x in [0, 1]` through
    /// the sign of its derivative.
    pub fn step_simultaneous(&mut self, a: &Arrival) -> Result<f64> {
        self.check_arrival(a)?;
        let score_prev = a.a.inner(&self.state.y);
        let d0 = score_prev + a.c * self.state.z;
        let x = if d0 <= 0.0 {
            0.0
        } else if self.phi_prime(a, 1.0)? >= 0.0 {
            1.0
        } else {
            // keep the side with a positive derivative so the budget bound holds
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > DECISION_TOL {
                let mid = 0.5 * (lo + hi);
                if self.phi_prime(a, mid)? > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        self.commit(a, x, score_prev)?;
        Ok(x)
    }

    /// `<A, grad H_S(U + x A)> + c G_S'(u + c x)`.
    pub fn phi_prime(&self, a: &Arrival, x: f64) -> Result<f64> {
        let mut m = self.state.u_mat.clone();
        m.add_scaled(&a.a, x);
        let g = self.smoothed.grad(&m)?;
        Ok(a.a.inner(&g) + a.c * self.budget.gs_prime(self.state.u + a.c * x)?)
    }

    fn commit(&mut self, a: &Arrival, x: f64, score_prev: f64) -> Result<()> {
        let z_prev = self.state.z;
        if x > 0.0 {
            self.state.u_mat.add_scaled(&a.a, x);
            self.state.u += a.c * x;
        }
        let eig = eig_sym(&self.state.u_mat)?;
        check_psd(&eig, &self.state.u_mat)?;
        if x > 0.0 {
            self.state.y = apply_to_eigen(&eig, |l| self.smoothed.y(l))?;
            self.state.z = self.budget.gs_prime(self.state.u)?;
        }
        self.state.decisions.push(x);
        self.state.step += 1;
        let mut y_eigs: Vec<f64> = eig.values.iter().map(|&l| self.smoothed.y(l)).collect();
        y_eigs.sort_by(|p, q| q.total_cmp(p));
        self.trace.steps.push(StepRecord {
            t: self.state.step,
            x,
            c: a.c,
            u: self.state.u,
            z: self.state.z,
            z_prev,
            score_prev,
            score_post: a.a.inner(&self.state.y),
            lambda_max_u: eig.max().max(0.0),
            y_eigs,
            y: self.keep_duals.then(|| self.state.y.clone()),
        });
        Ok(())
    }

    /// `H(U)` under the original objective.
    pub fn primal_value(&self, original: &TraceObjective) -> Result<f64> {
        primal_value(&self.state.u_mat, original)
    }
}

/// `H(U) = sum_i h(lambda_i(U))`; the guarantee is stated for the original `h`.
pub fn primal_value(u_mat: &SymMatrix, original: &TraceObjective) -> Result<f64> {
    original.trace_lift(u_mat)
}

/// Accumulated `U` from decisions; the checked counterpart of the engine state.
pub fn accumulate(arrivals: &[Arrival], x: &[f64], n: usize) -> Result<SymMatrix> {
    if arrivals.len() != x.len() {
        return Err(Error::Shape {
            expected: arrivals.len(),
            found: x.len(),
        });
    }
    let mut u = SymMatrix::zeros(n);
    for (a, &xi) in arrivals.iter().zip(x) {
        u.add_scaled(&a.a, xi);
    }
    Ok(u)
}
