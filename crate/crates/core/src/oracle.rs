//! Offline optima, dual evaluation and run audits.

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSmoother, Variant};
use crate::designer::cr_bound;
use crate::error::{Error, Result};
use crate::lowner::SmoothedObjective;
use crate::objectives::TraceObjective;
use crate::online::{Arrival, Trace};
use crate::par::Execution;
use crate::spectral::{eig_sym, eigenvalues, psd_order_gap, SymMatrix};

/// Largest `m` accepted by [`offline_integer_opt`].
pub const MAX_INTEGER_M: usize = 22;
pub const STATIONARITY_TOL: f64 = 1e-7;
pub const MAX_PG_ITER: usize = 10_000;
/// Slack allowed by the audit checks.
pub const AUDIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    /// `min_t tr(A_t) / c_t`.
    pub theta: f64,
    /// `max_t tr(A_t) / c_t`.
    pub theta_max: f64,
    /// `max_t c_t`.
    pub rho1: f64,
    /// `max_t lambda_max(A_t)`.
    pub rho2: f64,
    /// `max_t lambda_max(A_t) / c_t`.
    pub max_lambda_per_cost: f64,
}

impl InstanceStats {
    pub fn compute(arrivals: &[Arrival]) -> Result<Self> {
        if arrivals.is_empty() {
            return Err(Error::Config("instance has no arrivals".into()));
        }
        let mut s = InstanceStats {
            theta: f64::INFINITY,
            theta_max: 0.0,
            rho1: 0.0,
            rho2: 0.0,
            max_lambda_per_cost: 0.0,
        };
        for a in arrivals {
            let ratio = a.a.trace() / a.c;
            let lmax = eigenvalues(&a.a)?[0].max(0.0);
            s.theta = s.theta.min(ratio);
            s.theta_max = s.theta_max.max(ratio);
            s.rho1 = s.rho1.max(a.c);
            s.rho2 = s.rho2.max(lmax);
            s.max_lambda_per_cost = s.max_lambda_per_cost.max(lmax / a.c);
        }
        Ok(s)
    }

    /// Pools statistics over several instances so one smoother serves them all.
    pub fn pooled<'a>(stats: impl IntoIterator<Item = &'a InstanceStats>) -> Option<InstanceStats> {
        stats.into_iter().copied().reduce(|a, b| InstanceStats {
            theta: a.theta.min(b.theta),
            theta_max: a.theta_max.max(b.theta_max),
            rho1: a.rho1.max(b.rho1),
            rho2: a.rho2.max(b.rho2),
            max_lambda_per_cost: a.max_lambda_per_cost.max(b.max_lambda_per_cost),
        })
    }

    fn matches(&self, other: &InstanceStats) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        close(self.theta, other.theta)
            && close(self.theta_max, other.theta_max)
            && close(self.rho1, other.rho1)
            && close(self.rho2, other.rho2)
            && close(self.max_lambda_per_cost, other.max_lambda_per_cost)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord")]
pub struct Instance {
    pub n: usize,
    pub b: f64,
    pub arrivals: Vec<Arrival>,
    pub stats: InstanceStats,
}

#[derive(Deserialize)]
struct InstanceRecord {
    n: usize,
    b: f64,
    arrivals: Vec<Arrival>,
    stats: Option<InstanceStats>,
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = Error;

    fn try_from(r: InstanceRecord) -> Result<Self> {
        let inst = Instance::new(r.arrivals, r.b)?;
        if inst.n != r.n {
            return Err(Error::Shape {
                expected: r.n,
                found: inst.n,
            });
        }
        if let Some(stored) = r.stats {
            if !stored.matches(&inst.stats) {
                return Err(Error::Config("stored instance statistics do not match the arrivals".into()));
            }
        }
        Ok(inst)
    }
}

impl Instance {
    pub fn new(arrivals: Vec<Arrival>, b: f64) -> Result<Self> {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::Config(format!("budget must be nonnegative, got {b}")));
        }
        let stats = InstanceStats::compute(&arrivals)?;
        let n = arrivals[0].a.dim();
        for a in &arrivals {
            if a.a.dim() != n {
                return Err(Error::Shape {
                    expected: n,
                    found: a.a.dim(),
                });
            }
            a.validate()?;
        }
        Ok(Instance { n, b, arrivals, stats })
    }

    pub fn m(&self) -> usize {
        self.arrivals.len()
    }

    pub fn with_budget(&self, b: f64) -> Result<Self> {
        Instance::new(self.arrivals.clone(), b)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.arrivals.iter().map(|a| a.c).collect()
    }

    pub fn accumulate(&self, x: &[f64]) -> Result<SymMatrix> {
        crate::online::accumulate(&self.arrivals, x, self.n)
    }

    /// `sum_{s < t} A_s x_s`.
    pub fn accumulate_prefix(&self, x: &[f64], t: usize) -> Result<SymMatrix> {
        let mut u = SymMatrix::zeros(self.n);
        for (a, &xi) in self.arrivals.iter().zip(x).take(t) {
            u.add_scaled(&a.a, xi);
        }
        Ok(u)
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        self.arrivals.iter().zip(x).map(|(a, xi)| a.c * xi).sum()
    }

    /// `H(sum A_t x_t)`.
    pub fn value(&self, obj: &TraceObjective, x: &[f64]) -> Result<f64> {
        obj.trace_lift(&self.accumulate(x)?)
    }

    fn value_and_gradient(&self, obj: &TraceObjective, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = self.accumulate(x)?;
        let f = obj.trace_lift(&u)?;
        let g = obj.grad_trace_lift(&u)?;
        Ok((f, self.arrivals.iter().map(|a| a.a.inner(&g)).collect()))
    }
}

/// Euclidean projection onto `{x in [0,1]^m : c . x <= b}` for `c > 0`.
///
/// Box clipping when it already fits the budget; otherwise bisection on the
/// budget multiplier, returning the feasible end of the final bracket.
pub fn project_box_budget(y: &[f64], c: &[f64], b: f64) -> Vec<f64> {
    let clip = |tau: f64| -> Vec<f64> { y.iter().zip(c).map(|(yi, ci)| (yi - tau * ci).clamp(0.0, 1.0)).collect() };
    let spend = |x: &[f64]| -> f64 { x.iter().zip(c).map(|(xi, ci)| xi * ci).sum() };
    let x0 = clip(0.0);
    if spend(&x0) <= b {
        return x0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while spend(&clip(hi)) > b {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spend(&clip(mid)) > b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clip(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousOpt {
    pub value: f64,
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||P(x + grad) - x||_inf` at the returned point.
    pub stationarity: f64,
    pub converged: bool,
}

pub fn offline_continuous_opt(inst: &Instance, obj: &TraceObjective) -> Result<ContinuousOpt> {
    offline_continuous_opt_from(inst, obj, None)
}

/// Projected gradient ascent with backtracking. A caller-supplied start is
/// projected first; the result is never worse than it.
pub fn offline_continuous_opt_from(inst: &Instance, obj: &TraceObjective, start: Option<&[f64]>) -> Result<ContinuousOpt> {
    let c = inst.costs();
    let m = inst.m();
    let mut x = match start {
        Some(s) if s.len() == m => project_box_budget(s, &c, inst.b),
        Some(s) => {
            return Err(Error::Shape {
                expected: m,
                found: s.len(),
            })
        }
        None => project_box_budget(&vec![1.0; m], &c, inst.b),
    };
    let (mut f, mut g) = inst.value_and_gradient(obj, &x)?;
    let mut step = 1.0;
    let mut stationarity = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_PG_ITER {
        let probe: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + gi).collect();
        let p = project_box_budget(&probe, &c, inst.b);
        stationarity = p.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if stationarity <= STATIONARITY_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        loop {
            let probe: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + step * gi).collect();
            let xn = project_box_budget(&probe, &c, inst.b);
            let fnew = inst.value(obj, &xn)?;
            let lin: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let sq: f64 = xn.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if fnew >= f + lin - sq / (2.0 * step) - 1e-15 * f.abs() || step < 1e-14 {
                x = xn;
                break;
            }
            step *= 0.5;
        }
        let (f2, g2) = inst.value_and_gradient(obj, &x)?;
        f = f2;
        g = g2;
        step *= 2.0;
    }
    Ok(ContinuousOpt {
        value: f,
        x,
        iterations,
        stationarity,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerOpt {
    pub value: f64,
    pub x: Vec<f64>,
}

/// Exhaustive search over feasible binary decisions; ties go to the
/// lexicographically smallest subset mask.
pub fn offline_integer_opt(inst: &Instance, obj: &TraceObjective, exec: Execution) -> Result<IntegerOpt> {
    let m = inst.m();
    if m > MAX_INTEGER_M {
        return Err(Error::Capacity { m, max: MAX_INTEGER_M });
    }
    let high_bits = m.min(8);
    let low_bits = m - high_bits;
    let chunks = exec.map_range(1usize << high_bits, |hi| -> Result<(f64, u64)> {
        let mut best = (f64::NEG_INFINITY, u64::MAX);
        for lo in 0..(1u64 << low_bits) {
            let mask = ((hi as u64) << low_bits) | lo;
            let mut cost = 0.0;
            for (t, a) in inst.arrivals.iter().enumerate() {
                if mask >> t & 1 == 1 {
                    cost += a.c;
                }
            }
            if cost > inst.b {
                continue;
            }
            let mut u = SymMatrix::zeros(inst.n);
            for (t, a) in inst.arrivals.iter().enumerate() {
                if mask >> t & 1 == 1 {
                    u.add_scaled(&a.a, 1.0);
                }
            }
            let v = obj.trace_lift(&u)?;
            if v > best.0 || (v == best.0 && mask < best.1) {
                best = (v, mask);
            }
        }
        Ok(best)
    });
    let mut best = (f64::NEG_INFINITY, u64::MAX);
    for r in chunks {
        let (v, mask) = r?;
        if v > best.0 || (v == best.0 && mask < best.1) {
            best = (v, mask);
        }
    }
    let x = (0..m).map(|t| (best.1 >> t & 1) as f64).collect();
    Ok(IntegerOpt { value: best.0, x })
}

/// `sum_t (<A_t, Y> + c_t z)_+ - H*(Y) - b min(z, 0)`; `+inf` when `H*(Y) = -inf`.
pub fn dual_eval(inst: &Instance, obj: &TraceObjective, y: &SymMatrix, z: f64) -> Result<f64> {
    let h_conj = obj.trace_conj(y)?;
    if h_conj == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = inst.arrivals.iter().map(|a| (a.a.inner(y) + a.c * z).max(0.0)).sum();
    Ok(sum - h_conj - inst.b * z.min(0.0))
}

/// Dual point from a primal solution: `Y = grad H(U)` and the `z <= 0` that
/// minimizes the dual, found among the breakpoints of its piecewise-linear part.
pub fn kkt_dual(inst: &Instance, obj: &TraceObjective, x: &[f64]) -> Result<(SymMatrix, f64, f64)> {
    let y = obj.grad_trace_lift(&inst.accumulate(x)?)?;
    let scores: Vec<f64> = inst.arrivals.iter().map(|a| a.a.inner(&y)).collect();
    let mut candidates = vec![0.0];
    for (s, a) in scores.iter().zip(&inst.arrivals) {
        let zb = -s / a.c;
        if zb <= 0.0 {
            candidates.push(zb);
        }
    }
    let mut best = (f64::INFINITY, 0.0);
    for z in candidates {
        let v = dual_eval(inst, obj, &y, z)?;
        if v < best.0 || (v == best.0 && z > best.1) {
            best = (v, z);
        }
    }
    Ok((y, best.1, best.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    /// Slack of the checked inequality; the check passes when `slack >= -tol`.
    pub slack: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditContext {
    /// Offline optimum, enabling the weak-duality and ratio checks.
    pub p_star: Option<f64>,
    /// Certified constant of the surrogate, enabling the ratio check.
    pub beta: Option<f64>,
    /// Horizon the surrogate was designed for; the ratio check is skipped
    /// when `lambda_max(U)` exceeds it.
    pub u_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub variant: Variant,
    pub budget_used: f64,
    pub b_prime: f64,
    pub primal: f64,
    pub dual: f64,
    pub lambda_max_u: f64,
    pub umax_breached: bool,
    pub checks: Vec<AuditCheck>,
    pub passed: bool,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&AuditCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Checks(Vec<AuditCheck>);

impl Checks {
    fn push(&mut self, name: &str, slack: f64, tol: f64) {
        let passed = slack >= -tol || slack == f64::INFINITY;
        self.0.push(AuditCheck {
            name: name.to_string(),
            slack,
            tol,
            passed,
        });
    }
}

/// Re-derives the run from its decisions and checks the budget bound, the
/// decision rule, the duality-gap and telescoping inequalities, monotone
/// duals and, when the context allows, weak duality and the ratio guarantee.
pub fn audit_run(
    trace: &Trace,
    inst: &Instance,
    smoothed: &SmoothedObjective,
    budget: &BudgetSmoother,
    ctx: &AuditContext,
) -> Result<AuditReport> {
    let m = inst.m();
    if trace.steps.len() != m {
        return Err(Error::Audit(format!("trace has {} steps for {m} arrivals", trace.steps.len())));
    }
    if trace.n != inst.n || trace.variant != budget.variant || trace.objective != smoothed.base {
        return Err(Error::Audit("trace does not belong to this instance and configuration".into()));
    }
    for (t, s) in trace.steps.iter().enumerate() {
        if s.y_eigs.len() != inst.n || s.t != t + 1 {
            return Err(Error::Audit(format!("step {} is missing its dual snapshot", t + 1)));
        }
    }
    let obj = smoothed.base;
    let variant = budget.variant;
    let n = inst.n;
    let x: Vec<f64> = trace.decisions();
    if x.iter().any(|xi| !(0.0..=1.0).contains(xi)) {
        return Err(Error::Audit("decision outside [0, 1]".into()));
    }

    // replay
    let mut ys = vec![SymMatrix::scaled_identity(n, obj.slope_at_zero())];
    let mut zs = vec![0.0];
    let mut us = vec![0.0];
    let mut u_mat = SymMatrix::zeros(n);
    let mut u = 0.0;
    for (a, &xi) in inst.arrivals.iter().zip(&x) {
        u_mat.add_scaled(&a.a, xi);
        u += a.c * xi;
        ys.push(smoothed.grad(&u_mat)?);
        zs.push(budget.gs_prime(u)?);
        us.push(u);
    }
    let mut checks = Checks(Vec::new());

    // recorded state against the replay
    let mut mismatch: f64 = 0.0;
    for (t, s) in trace.steps.iter().enumerate() {
        let a = &inst.arrivals[t];
        mismatch = mismatch
            .max((s.u - us[t + 1]).abs())
            .max((s.z - zs[t + 1]).abs())
            .max((s.z_prev - zs[t]).abs())
            .max((s.c - a.c).abs())
            .max((s.score_prev - a.a.inner(&ys[t])).abs())
            .max((s.score_post - a.a.inner(&ys[t + 1])).abs());
        if let Some(y) = &s.y {
            mismatch = mismatch.max((y - &ys[t + 1]).max_abs());
        }
    }
    checks.push("trace-consistency", -mismatch, 1e-8);

    // decision rule
    let mut rule: f64 = 0.0;
    for (t, (a, &xi)) in inst.arrivals.iter().zip(&x).enumerate() {
        let scale = (a.a.trace() * obj.slope_at_zero() + a.c).max(1.0);
        match variant {
            Variant::Sequential => {
                let score = a.a.inner(&ys[t]) + a.c * zs[t];
                let expect = if score > 0.0 { 1.0 } else { 0.0 };
                if xi != expect && score.abs() > 1e-9 * scale {
                    rule = rule.max(score.abs() / scale);
                }
            }
            Variant::Simultaneous => {
                let prev = inst.accumulate_prefix(&x, t)?;
                let d = |xv: f64| -> Result<f64> {
                    let mut mm = prev.clone();
                    mm.add_scaled(&a.a, xv);
                    Ok(a.a.inner(&smoothed.grad(&mm)?) + a.c * budget.gs_prime(us[t] + a.c * xv)?)
                };
                let v = if xi == 0.0 {
                    d(0.0)?.max(0.0)
                } else if xi == 1.0 {
                    (-d(1.0)?).max(0.0)
                } else {
                    d(xi)?.abs()
                };
                rule = rule.max(v / scale);
            }
        }
    }
    checks.push("decision-rule", -rule, 1e-6);

    // budget
    let b_prime = budget.b_prime()?;
    checks.push("budget", b_prime - u, 1e-9);

    // monotone duals
    let mut y_gap = f64::INFINITY;
    let mut z_gap = f64::INFINITY;
    for t in 1..=m {
        y_gap = y_gap.min(psd_order_gap(&ys[t], &ys[t - 1])?);
        z_gap = z_gap.min(zs[t - 1] - zs[t]);
    }
    if m == 0 {
        y_gap = 0.0;
        z_gap = 0.0;
    }
    checks.push("monotone-y", y_gap, 1e-8);
    checks.push("monotone-z", z_gap, 1e-12);

    // duality gap and telescoping inequalities
    let hs = smoothed.trace_value(&u_mat)?;
    let gs = budget.gs_value(u)?;
    let (positive, correction) = match variant {
        Variant::Simultaneous => {
            let sum: f64 = (0..m)
                .map(|t| {
                    let a = &inst.arrivals[t];
                    (a.a.inner(&ys[t + 1]) + a.c * zs[t + 1]).max(0.0)
                })
                .sum();
            (sum, 0.0)
        }
        Variant::Sequential => {
            let mut sum = 0.0;
            let mut corr = 0.0;
            for t in 0..m {
                let a = &inst.arrivals[t];
                sum += (a.a.inner(&ys[t]) + a.c * zs[t]).max(0.0);
                corr += x[t] * (a.a.inner(&(&ys[t] - &ys[t + 1])) + a.c * (zs[t] - zs[t + 1]));
            }
            (sum, corr)
        }
    };
    // H*(Y_m) + G*(z_m) appears on both sides and cancels
    checks.push("duality-gap", hs + gs + correction - positive, AUDIT_TOL);
    checks.push("increasing", hs + gs + correction, AUDIT_TOL);
    if variant == Variant::Sequential {
        let y0_trace = obj.slope_at_zero() * n as f64;
        let bound = inst.stats.rho2 * (y0_trace - ys[m].trace()) - inst.stats.rho1 * zs[m];
        checks.push("rho-bound", bound - correction, AUDIT_TOL);
    }

    // weak duality and the competitive ratio
    let dual = trace.dual_value();
    let primal = obj.trace_lift(&u_mat)?;
    let lambda_max_u = eig_sym(&u_mat)?.max().max(0.0);
    let umax_breached = ctx.u_max.is_some_and(|um| lambda_max_u > um);
    if let Some(p_star) = ctx.p_star {
        checks.push("weak-duality", dual - p_star, AUDIT_TOL);
        if let (Some(beta), false) = (ctx.beta, umax_breached) {
            checks.push("ratio", primal - cr_bound(budget.gamma, beta) * p_star, AUDIT_TOL);
        }
    }
    let passed = checks.0.iter().all(|c| c.passed);
    Ok(AuditReport {
        variant,
        budget_used: u,
        b_prime,
        primal,
        dual,
        lambda_max_u,
        umax_breached,
        checks: checks.0,
        passed,
    })
}
