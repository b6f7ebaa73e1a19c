//! Design of the smoothed surrogate `h_S` and its certified constant `beta`.
//!
//! For nodes `lambda_j = j/q` the program is
//!
//! ```text
//! minimize beta over mu >= 0
//! s.t. gamma h_S(u) + gamma rho2 (y(0) - y(u)) - h*(y(u)) <= beta h(u)   for u in the sample grid
//!      y(0) = h'(0)
//! ```
//!
//! Every term is linear in `mu` except `-h*(y(u))`, which is convex in `y` and
//! equals `sup_v h(v) - v y`. The solver is a cutting-plane method: each cut
//! fixes one `v` and turns a constraint row into a linear inequality, the
//! resulting LP gives a lower bound on `beta`, and the LP's measure is scored
//! exactly to give an upper bound. Cuts are added at the maximizing `v` of the
//! most violated rows until the two bounds meet.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::budget::Variant;
use crate::error::{Error, Result};
use crate::lowner::{kernel, primitive, AtomicMeasure};
use crate::objectives::TraceObjective;
use crate::E_MINUS_ONE;

/// Largest accepted gap between the dense-grid and sample-grid `beta`.
pub const VERIFY_TOL: f64 = 1e-6;
/// Density factor of the verification grid.
pub const VERIFY_FACTOR: usize = 10;

fn default_q() -> usize {
    100
}

fn default_d() -> usize {
    200
}

fn default_max_iter() -> usize {
    300
}

fn default_gap_tol() -> f64 {
    1e-7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub objective: TraceObjective,
    pub gamma: f64,
    pub u_max: f64,
    /// Number of measure nodes `j/q`, `j = 0..q-1`.
    #[serde(default = "default_q")]
    pub q: usize,
    /// Number of constraint sample points.
    #[serde(default = "default_d")]
    pub d: usize,
    pub variant: Variant,
    /// Largest `lambda_max(A_t)`; only used by sequential updates.
    #[serde(default)]
    pub rho2: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Relative gap between the LP lower bound and the best `beta` at which
    /// the cutting-plane loop stops.
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
}

impl DesignSpec {
    pub fn new(objective: TraceObjective, gamma: f64, u_max: f64, variant: Variant, rho2: f64) -> Self {
        DesignSpec {
            objective,
            gamma,
            u_max,
            q: default_q(),
            d: default_d(),
            variant,
            rho2,
            max_iter: default_max_iter(),
            gap_tol: default_gap_tol(),
        }
    }

    pub fn with_grid(mut self, q: usize, d: usize) -> Self {
        self.q = q;
        self.d = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return Err(Error::Config(format!("u_max must be positive, got {}", self.u_max)));
        }
        if self.q < 2 || self.d < 2 {
            return Err(Error::Config(format!("need q >= 2 and d >= 2, got q = {}, d = {}", self.q, self.d)));
        }
        if !(self.rho2 >= 0.0 && self.rho2.is_finite()) {
            return Err(Error::Config(format!("rho2 must be nonnegative, got {}", self.rho2)));
        }
        if self.rho2 > 0.0 && self.variant == Variant::Simultaneous {
            return Err(Error::Config("rho2 > 0 requires sequential updates".into()));
        }
        if self.max_iter == 0 || self.gap_tol.is_nan() || self.gap_tol <= 0.0 {
            return Err(Error::Config("max_iter and gap_tol must be positive".into()));
        }
        Ok(())
    }

    fn rho2_eff(&self) -> f64 {
        match self.variant {
            Variant::Sequential => self.rho2,
            Variant::Simultaneous => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub objective: TraceObjective,
    pub gamma: f64,
    pub measure: AtomicMeasure,
    /// Certified constant: the largest constraint ratio on the verification grid.
    pub beta: f64,
    /// Largest constraint ratio on the sample grid.
    pub beta_sample: f64,
    /// Cutting-plane lower bound on the optimal sample-grid `beta`.
    pub lower_bound: f64,
    /// `beta - beta_sample`, the one-sided inflation needed on the dense grid.
    pub residual: f64,
    pub iterations: usize,
    pub cuts: usize,
    /// Set when the dense-grid inflation exceeds [`VERIFY_TOL`] or the gap
    /// did not close within the iteration cap.
    pub flagged: bool,
}

impl DesignResult {
    pub fn bound(&self) -> f64 {
        cr_bound(self.gamma, self.beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignProgress {
    pub iteration: usize,
    pub lower_bound: f64,
    pub best_beta: f64,
    pub cuts: usize,
}

/// Certified competitive ratio `1 / (gamma/(e-1) + beta)`.
pub fn cr_bound(gamma: f64, beta: f64) -> f64 {
    1.0 / (gamma / E_MINUS_ONE + beta)
}

/// Sample points `u_i = h^{-1}(i h(u_max) / count)`, `i = 1..count`.
pub fn constraint_points(obj: &TraceObjective, u_max: f64, count: usize) -> Result<Vec<f64>> {
    let top = obj.h(u_max);
    let mut pts = Vec::with_capacity(count);
    for i in 1..=count {
        let u = if i == count { u_max } else { obj.h_inverse(i as f64 * top / count as f64)? };
        pts.push(u);
    }
    Ok(pts)
}

fn ratio_at(spec: &DesignSpec, measure: &AtomicMeasure, u: f64) -> f64 {
    let obj = &spec.objective;
    let y = measure.y(u);
    let conj = obj.conj(y);
    if conj == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let rho2 = spec.rho2_eff();
    let lhs = spec.gamma * measure.hs(u) + spec.gamma * rho2 * (measure.y0() - y) - conj;
    lhs / obj.h(u)
}

/// Constraint ratios `r_i` at the sample points of `spec`; `beta` is feasible
/// iff it is at least every entry.
pub fn constraint_values(spec: &DesignSpec, measure: &AtomicMeasure) -> Result<Vec<f64>> {
    spec.validate()?;
    let pts = constraint_points(&spec.objective, spec.u_max, spec.d)?;
    Ok(pts.iter().map(|&u| ratio_at(spec, measure, u)).collect())
}

fn max_ratio(spec: &DesignSpec, measure: &AtomicMeasure, pts: &[f64]) -> f64 {
    pts.iter().map(|&u| ratio_at(spec, measure, u)).fold(f64::NEG_INFINITY, f64::max)
}

/// Largest constraint ratio of `measure` on the verification grid of `spec`.
pub fn certified_beta(spec: &DesignSpec, measure: &AtomicMeasure) -> Result<f64> {
    spec.validate()?;
    let obj = spec.objective;
    if obj == TraceObjective::Linear && *measure == AtomicMeasure::atom(0.0, obj.slope_at_zero())? {
        return Ok(spec.gamma);
    }
    let dense = constraint_points(&obj, spec.u_max, spec.d * VERIFY_FACTOR)?;
    Ok(max_ratio(spec, measure, &dense))
}

pub fn design_hs(spec: &DesignSpec) -> Result<DesignResult> {
    design_hs_with_progress(spec, |_| {})
}

/// [`design_hs`] reporting after every cutting-plane iteration.
pub fn design_hs_with_progress(
    spec: &DesignSpec,
    mut progress: impl FnMut(&DesignProgress),
) -> Result<DesignResult> {
    spec.validate()?;
    let obj = spec.objective;
    let dense = constraint_points(&obj, spec.u_max, spec.d * VERIFY_FACTOR)?;

    if obj == TraceObjective::Linear {
        // y must be identically h'(0), so the atom at 0 is the only feasible measure
        let measure = AtomicMeasure::atom(0.0, obj.slope_at_zero())?;
        let dense_max = max_ratio(spec, &measure, &dense);
        progress(&DesignProgress {
            iteration: 0,
            lower_bound: spec.gamma,
            best_beta: spec.gamma,
            cuts: 0,
        });
        return Ok(DesignResult {
            objective: obj,
            gamma: spec.gamma,
            measure,
            beta: spec.gamma,
            beta_sample: spec.gamma,
            lower_bound: spec.gamma,
            residual: (dense_max - spec.gamma).max(0.0),
            iterations: 0,
            cuts: 0,
            flagged: (dense_max - spec.gamma) > VERIFY_TOL,
        });
    }

    let mut pts = constraint_points(&obj, spec.u_max, spec.d)?;
    let mut solver = CuttingPlane::new(spec);
    let mut outcome = solver.run(&pts, &mut progress)?;
    let mut dense_max = max_ratio(spec, &outcome.measure, &dense);

    // Refine on the dense grid: add its worst points to the sample set and resolve.
    for _ in 0..4 {
        if dense_max - outcome.beta_sample <= VERIFY_TOL {
            break;
        }
        let mut worst: Vec<(f64, f64)> = dense
            .iter()
            .map(|&u| (ratio_at(spec, &outcome.measure, u), u))
            .filter(|(r, _)| *r > outcome.beta_sample + 0.5 * VERIFY_TOL)
            .collect();
        worst.sort_by(|a, b| b.0.total_cmp(&a.0));
        pts.extend(worst.iter().take(spec.d).map(|&(_, u)| u));
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        outcome = solver.run(&pts, &mut progress)?;
        dense_max = max_ratio(spec, &outcome.measure, &dense);
    }

    let beta = dense_max.max(outcome.beta_sample);
    let residual = beta - outcome.beta_sample;
    Ok(DesignResult {
        objective: obj,
        gamma: spec.gamma,
        measure: outcome.measure,
        beta,
        beta_sample: outcome.beta_sample,
        lower_bound: outcome.lower_bound,
        residual,
        iterations: solver.iterations,
        cuts: solver.cuts.len(),
        flagged: residual > VERIFY_TOL || !outcome.converged,
    })
}

/// Closed-form `beta` of the unsmoothed surrogate for the PSD-DR objectives:
/// `gamma` for linear `h`, `gamma + 1` for D-optimal.
pub fn unsmoothed_beta_bound(obj: &TraceObjective, gamma: f64) -> Option<f64> {
    match obj {
        TraceObjective::Linear => Some(gamma),
        TraceObjective::DOptimal => Some(gamma + 1.0),
        _ => None,
    }
}

struct Outcome {
    measure: AtomicMeasure,
    beta_sample: f64,
    lower_bound: f64,
    converged: bool,
}

struct CuttingPlane<'a> {
    spec: &'a DesignSpec,
    nodes: Vec<f64>,
    /// `(u, v)` pairs already present as LP rows.
    cuts: Vec<(f64, f64)>,
    iterations: usize,
    best: Option<(f64, Vec<f64>)>,
}

impl<'a> CuttingPlane<'a> {
    fn new(spec: &'a DesignSpec) -> Self {
        let nodes = (0..spec.q).map(|j| j as f64 / spec.q as f64).collect();
        CuttingPlane {
            spec,
            nodes,
            cuts: Vec::new(),
            iterations: 0,
            best: None,
        }
    }

    fn measure(&self, weights: &[f64]) -> Result<AtomicMeasure> {
        AtomicMeasure::new(
            self.nodes
                .iter()
                .copied()
                .zip(weights.iter().copied())
                .filter(|&(_, w)| w > 0.0),
        )
    }

    /// Clamps to `mu >= 0` and rescales so that `y(0) = h'(0)` holds exactly.
    fn normalize(&self, weights: &mut [f64]) {
        for w in weights.iter_mut() {
            *w = w.max(0.0);
        }
        let y0: f64 = weights.iter().zip(&self.nodes).map(|(w, l)| w / (1.0 - l)).sum();
        if y0 > 0.0 {
            let s = self.spec.objective.slope_at_zero() / y0;
            for w in weights.iter_mut() {
                *w *= s;
            }
        }
    }

    fn seeds(&self) -> Vec<Vec<f64>> {
        let q = self.spec.q;
        let mut at_zero = vec![0.0; q];
        at_zero[0] = 1.0;
        let mut at_half = vec![0.0; q];
        at_half[q / 2] = 1.0;
        let mut seeds = vec![at_zero, at_half, vec![1.0; q]];
        for s in &mut seeds {
            self.normalize(s);
        }
        seeds
    }

    fn score(&self, weights: &[f64], pts: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.measure(weights)?;
        let r: Vec<f64> = pts.iter().map(|&u| ratio_at(self.spec, &m, u)).collect();
        let beta = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((beta, r))
    }

    fn separation_point(&self, weights: &[f64], u: f64) -> f64 {
        let y: f64 = weights.iter().zip(&self.nodes).map(|(w, &l)| w * kernel(u, l)).sum();
        // y <= 0 only for a degenerate iterate; a far point still gives a valid cut
        self.spec.objective.conj_argmin(y).unwrap_or(10.0 * self.spec.u_max)
    }

    fn add_cut(&mut self, u: f64, v: f64) -> bool {
        let v = if v.is_finite() { v.max(0.0) } else { 10.0 * self.spec.u_max };
        let scale = 1e-12 * (1.0 + v.abs());
        if self.cuts.iter().any(|&(cu, cv)| cu == u && (cv - v).abs() <= scale) {
            return false;
        }
        self.cuts.push((u, v));
        true
    }

    fn solve_lp(&self) -> Result<(f64, Vec<f64>)> {
        let spec = self.spec;
        let obj = spec.objective;
        let g = spec.gamma;
        let rho2 = spec.rho2_eff();
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let mu: Vec<_> = self.nodes.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
        let beta = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
        let norm: Vec<_> = mu.iter().zip(&self.nodes).map(|(&v, &l)| (v, 1.0 / (1.0 - l))).collect();
        lp.add_constraint(norm.as_slice(), ComparisonOp::Eq, obj.slope_at_zero());
        for &(u, v) in &self.cuts {
            let hu = obj.h(u);
            let mut row: Vec<_> = mu
                .iter()
                .zip(&self.nodes)
                .map(|(&var, &l)| (var, (g * primitive(u, l) - (g * rho2 + v) * kernel(u, l)) / hu))
                .collect();
            row.push((beta, -1.0));
            let rhs = -(obj.h(v) + g * rho2 * obj.slope_at_zero()) / hu;
            lp.add_constraint(row.as_slice(), ComparisonOp::Le, rhs);
        }
        let sol = lp
            .solve()
            .map_err(|e| Error::Solver(e.to_string()))?
            .into_solution()
            .map_err(|_| Error::Solver("LP interrupted".into()))?;
        let weights = mu.iter().map(|&v| sol.var_value(v)).collect();
        Ok((sol.var_value(beta), weights))
    }

    fn run(&mut self, pts: &[f64], progress: &mut impl FnMut(&DesignProgress)) -> Result<Outcome> {
        let spec = self.spec;
        // initial cuts: v = 0, v = u, and the maximizers for every seed (and
        // for the previous best when refining)
        let mut starts = self.seeds();
        if let Some((_, w)) = &self.best {
            starts.push(w.clone());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for w in &starts {
            let (b, _) = self.score(w, pts)?;
            if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
                best = Some((b, w.clone()));
            }
            for &u in pts {
                let v = self.separation_point(w, u);
                self.add_cut(u, v);
            }
        }
        for &u in pts {
            self.add_cut(u, 0.0);
            self.add_cut(u, u);
        }
        if let Some(unsmoothed) = AtomicMeasure::unsmoothed(&spec.objective) {
            let mut w = vec![0.0; spec.q];
            for (l, m) in unsmoothed.atoms() {
                let j = (l * spec.q as f64).round() as usize;
                if (j as f64 / spec.q as f64 - l).abs() < 1e-12 && j < spec.q {
                    w[j] += m;
                }
            }
            self.normalize(&mut w);
            let (b, _) = self.score(&w, pts)?;
            if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
                best = Some((b, w));
            }
        }
        let (mut best_beta, mut best_w) = best.expect("seeds are nonempty");
        let mut lower = f64::NEG_INFINITY;
        let mut converged = false;

        for _ in 0..spec.max_iter {
            self.iterations += 1;
            let (lp_beta, mut w) = self.solve_lp()?;
            lower = lower.max(lp_beta);
            self.normalize(&mut w);
            let (beta, r) = self.score(&w, pts)?;
            if beta < best_beta {
                best_beta = beta;
                best_w = w.clone();
            }
            progress(&DesignProgress {
                iteration: self.iterations,
                lower_bound: lower,
                best_beta,
                cuts: self.cuts.len(),
            });
            if best_beta - lower <= spec.gap_tol * best_beta.abs().max(1.0) {
                converged = true;
                break;
            }
            // cut off the LP point at its most violated rows
            let mut violated: Vec<(f64, usize)> = r
                .iter()
                .enumerate()
                .filter(|(_, &ri)| ri > lp_beta + 1e-12)
                .map(|(i, &ri)| (ri, i))
                .collect();
            violated.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut added = 0;
            for &(_, i) in violated.iter().take(40) {
                let v = self.separation_point(&w, pts[i]);
                if self.add_cut(pts[i], v) {
                    added += 1;
                }
            }
            if added == 0 {
                break;
            }
        }
        self.best = Some((best_beta, best_w.clone()));
        Ok(Outcome {
            measure: self.measure(&best_w)?,
            beta_sample: best_beta,
            lower_bound: lower,
            converged,
        })
    }
}
