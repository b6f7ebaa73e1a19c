//! Instance generators and the end-to-end experiment pipeline.
//!
//! A pipeline run pools instance statistics over all repeats, builds one
//! budget smoother and one designed surrogate per (variant, gamma) and then
//! runs, solves offline and audits every (variant, gamma, arm, repeat) task.
//! Tasks are independent; results are collected in task order so output does
//! not depend on scheduling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{BudgetSmoother, Variant};
use crate::designer::{certified_beta, cr_bound, design_hs, unsmoothed_beta_bound, DesignResult, DesignSpec};
use crate::error::{Error, Result};
use crate::lowner::{AtomicMeasure, SmoothedObjective};
use crate::objectives::TraceObjective;
use crate::online::{Arrival, OnlineEngine, Trace};
use crate::oracle::{audit_run, offline_continuous_opt, AuditContext, AuditReport, Instance, InstanceStats};
use crate::par::Execution;
use crate::random::stream_rng;
use crate::spectral::SymMatrix;

const ADVERSARIAL_STREAM: u64 = 1;
const RANDOM_STREAM: u64 = 2;

/// Rank-one arrivals `a_t a_t^T` with `a_t = sqrt((m - t + 1)/n) eta_t`, a fresh
/// sign vector `eta_t` per step and unit costs, so `tr(A_t) = m - t + 1`.
pub fn gen_adversarial(n: usize, m: usize, b: f64, seed: u64) -> Result<Instance> {
    if n == 0 || m == 0 {
        return Err(Error::Config("need n >= 1 and m >= 1".into()));
    }
    let mut rng = stream_rng(seed, ADVERSARIAL_STREAM);
    let mut arrivals = Vec::with_capacity(m);
    for t in 1..=m {
        let scale = ((m - t + 1) as f64 / n as f64).sqrt();
        let a: Vec<f64> = (0..n)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect();
        arrivals.push(Arrival::new(SymMatrix::outer(&a), 1.0)?);
    }
    Instance::new(arrivals, b)
}

/// Rank-one arrivals along sparse Gaussian directions (each coordinate is
/// nonzero with probability `density`, at least one always is) with costs
/// uniform on `[0.5, 1.5]`.
pub fn gen_random(n: usize, m: usize, density: f64, b: f64, seed: u64) -> Result<Instance> {
    if n == 0 || m == 0 {
        return Err(Error::Config("need n >= 1 and m >= 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density must lie in (0, 1], got {density}")));
    }
    let mut rng = stream_rng(seed, RANDOM_STREAM);
    let mut arrivals = Vec::with_capacity(m);
    for _ in 0..m {
        let mut v: Vec<f64> = (0..n)
            .map(|_| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                if rng.random::<f64>() < density {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        if v.iter().all(|x| *x == 0.0) {
            let i = rng.random_range(0..n);
            v[i] = rng.sample(rand_distr::StandardNormal);
        }
        let c = rng.random_range(0.5..1.5);
        arrivals.push(Arrival::new(SymMatrix::outer(&v), c)?);
    }
    Instance::new(arrivals, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Adversarial,
    Random,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adversarial" => Ok(Family::Adversarial),
            "random" => Ok(Family::Random),
            other => Err(Error::Config(format!("unknown instance family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Designed surrogate.
    Smoothed,
    /// `h_S = h`, available for objectives that are PSD-DR on their own.
    Unsmoothed,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Smoothed => "smoothed",
            Arm::Unsmoothed => "unsmoothed",
        })
    }
}

fn default_repeats() -> usize {
    10
}

fn default_density() -> f64 {
    1.0
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Sequential, Variant::Simultaneous]
}

fn default_q() -> usize {
    100
}

fn default_d() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Objective name: `linear`, `d-optimal`, `a-optimal` or `pth-mean:<p>`.
    pub objective: String,
    pub family: Family,
    #[serde(default = "default_density")]
    pub density: f64,
    pub n: usize,
    pub m: usize,
    /// Budget; defaults to `m / 5`.
    #[serde(default)]
    pub b: Option<f64>,
    pub gammas: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Overrides the horizon `b' max_t lambda_max(A_t)/c_t`.
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn objective(&self) -> Result<TraceObjective> {
        self.objective.parse()
    }

    pub fn budget(&self) -> f64 {
        self.b.unwrap_or(self.m as f64 / 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective()?.validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("need n >= 1 and m >= 1".into()));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g >= 1.0 && g.is_finite())) {
            return Err(Error::Config("gammas must be a nonempty list of values >= 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if !(self.budget() > 0.0 && self.budget().is_finite()) {
            return Err(Error::Config(format!("budget must be positive, got {}", self.budget())));
        }
        if let Some(u) = self.u_max {
            if !(u > 0.0 && u.is_finite()) {
                return Err(Error::Config(format!("u_max must be positive, got {u}")));
            }
        }
        Ok(())
    }

    pub fn instance(&self, repeat: usize) -> Result<Instance> {
        let seed = self.seed.wrapping_add(repeat as u64);
        match self.family {
            Family::Adversarial => gen_adversarial(self.n, self.m, self.budget(), seed),
            Family::Random => gen_random(self.n, self.m, self.density, self.budget(), seed),
        }
    }
}

/// Everything needed to run one arm: the surrogate, its certified constant
/// and the budget smoother it was designed against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSetup {
    pub arm: Arm,
    pub smoother: BudgetSmoother,
    pub smoothed: SmoothedObjective,
    pub beta: f64,
    pub b_prime: f64,
    pub u_max: f64,
    pub design_hash: String,
    pub flagged: bool,
}

impl ArmSetup {
    pub fn bound(&self) -> f64 {
        cr_bound(self.smoother.gamma, self.beta)
    }
}

/// Hex prefix of the SHA-256 of the measure's JSON record and its `beta`.
pub fn design_hash(measure: &AtomicMeasure, beta: f64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(measure).expect("measures serialize"));
    h.update(beta.to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Grid parameters and optional horizon override for [`prepare_arms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignGrid {
    pub q: usize,
    pub d: usize,
    pub u_max: Option<f64>,
}

impl Default for DesignGrid {
    fn default() -> Self {
        DesignGrid {
            q: default_q(),
            d: default_d(),
            u_max: None,
        }
    }
}

/// Builds the budget smoother, `b'`, the horizon and the surrogates for one
/// (objective, variant, gamma). The unsmoothed arm is added when the
/// objective is PSD-DR.
pub fn prepare_arms(
    objective: TraceObjective,
    variant: Variant,
    gamma: f64,
    b: f64,
    stats: &InstanceStats,
    grid: DesignGrid,
) -> Result<Vec<ArmSetup>> {
    let (smoother, b_prime, spec) = arm_context(objective, variant, gamma, b, stats, grid)?;
    let design = design_hs(&spec)?;
    let mut arms = vec![setup_from_design(Arm::Smoothed, &smoother, b_prime, spec.u_max, design)?];
    if let Some(measure) = AtomicMeasure::unsmoothed(&objective) {
        arms.push(setup_from_measure(Arm::Unsmoothed, &smoother, b_prime, &spec, measure)?);
    }
    Ok(arms)
}

/// Like [`prepare_arms`] but with a fixed measure, whose `beta` is
/// re-certified on the dense grid for this horizon.
pub fn prepare_with_measure(
    objective: TraceObjective,
    variant: Variant,
    gamma: f64,
    b: f64,
    stats: &InstanceStats,
    grid: DesignGrid,
    measure: AtomicMeasure,
) -> Result<ArmSetup> {
    let (smoother, b_prime, spec) = arm_context(objective, variant, gamma, b, stats, grid)?;
    let arm = if Some(&measure) == AtomicMeasure::unsmoothed(&objective).as_ref() {
        Arm::Unsmoothed
    } else {
        Arm::Smoothed
    };
    setup_from_measure(arm, &smoother, b_prime, &spec, measure)
}

fn arm_context(
    objective: TraceObjective,
    variant: Variant,
    gamma: f64,
    b: f64,
    stats: &InstanceStats,
    grid: DesignGrid,
) -> Result<(BudgetSmoother, f64, DesignSpec)> {
    let rho1 = match variant {
        Variant::Sequential => stats.rho1,
        Variant::Simultaneous => 0.0,
    };
    let smoother = BudgetSmoother::new(objective, variant, gamma, b, stats.theta, stats.theta_max, rho1)?;
    let b_prime = smoother.b_prime()?;
    let u_max = grid.u_max.unwrap_or(b_prime * stats.max_lambda_per_cost);
    let rho2 = match variant {
        Variant::Sequential => stats.rho2,
        Variant::Simultaneous => 0.0,
    };
    let spec = DesignSpec::new(objective, gamma, u_max, variant, rho2).with_grid(grid.q, grid.d);
    Ok((smoother, b_prime, spec))
}

fn setup_from_measure(
    arm: Arm,
    smoother: &BudgetSmoother,
    b_prime: f64,
    spec: &DesignSpec,
    measure: AtomicMeasure,
) -> Result<ArmSetup> {
    let beta = certified_beta(spec, &measure)?;
    Ok(ArmSetup {
        arm,
        smoother: smoother.clone(),
        smoothed: SmoothedObjective::new(spec.objective, measure.clone())?,
        beta,
        b_prime,
        u_max: spec.u_max,
        design_hash: design_hash(&measure, beta),
        flagged: false,
    })
}

fn setup_from_design(arm: Arm, smoother: &BudgetSmoother, b_prime: f64, u_max: f64, design: DesignResult) -> Result<ArmSetup> {
    Ok(ArmSetup {
        arm,
        smoother: smoother.clone(),
        smoothed: SmoothedObjective::new(design.objective, design.measure.clone())?,
        beta: design.beta,
        b_prime,
        u_max,
        design_hash: design_hash(&design.measure, design.beta),
        flagged: design.flagged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub objective: String,
    pub variant: Variant,
    pub arm: Arm,
    pub gamma: f64,
    pub repeat: usize,
    pub budget_used: f64,
    pub b_prime: f64,
    pub primal_h: f64,
    /// Constant added by the `h(0) = 0` normalization (`n` for the A-optimal
    /// and p-th mean objectives); subtract it for the raw criterion value.
    pub objective_offset: f64,
    pub p_star: f64,
    pub ratio: f64,
    pub bound: f64,
    pub beta: f64,
    pub u_max: f64,
    pub lambda_max_u: f64,
    pub umax_breached: bool,
    pub audit_pass: bool,
    pub audit_failures: Vec<String>,
    pub design_hash: String,
    pub design_flagged: bool,
}

/// A finished run with everything the `audit` command needs to re-check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub instance: Instance,
    pub setup: ArmSetup,
    pub p_star: f64,
    pub trace: Trace,
}

impl RunArtifact {
    pub fn audit(&self) -> Result<AuditReport> {
        audit_run(
            &self.trace,
            &self.instance,
            &self.setup.smoothed,
            &self.setup.smoother,
            &AuditContext {
                p_star: Some(self.p_star),
                beta: Some(self.setup.beta),
                u_max: Some(self.setup.u_max),
            },
        )
    }
}

/// Runs one arm on one instance and audits the result.
pub fn run_arm(
    inst: &Instance,
    setup: &ArmSetup,
    p_star: f64,
    repeat: usize,
    keep_duals: bool,
) -> Result<(RunReport, RunArtifact, AuditReport)> {
    let mut engine = OnlineEngine::new(setup.smoothed.clone(), setup.smoother.clone(), inst.n, keep_duals)?;
    engine.run(&inst.arrivals)?;
    let objective = setup.smoothed.base;
    let primal_h = engine.primal_value(&objective)?;
    let artifact = RunArtifact {
        instance: inst.clone(),
        setup: setup.clone(),
        p_star,
        trace: engine.into_trace(),
    };
    let audit = artifact.audit()?;
    let ratio = if p_star > 0.0 { primal_h / p_star } else { 1.0 };
    let report = RunReport {
        objective: objective.name(),
        variant: setup.smoother.variant,
        arm: setup.arm,
        gamma: setup.smoother.gamma,
        repeat,
        budget_used: artifact.trace.budget_used(),
        b_prime: setup.b_prime,
        primal_h,
        objective_offset: match objective {
            TraceObjective::AOptimal | TraceObjective::PthMean { .. } => inst.n as f64,
            _ => 0.0,
        },
        p_star,
        ratio,
        bound: setup.bound(),
        beta: setup.beta,
        u_max: setup.u_max,
        lambda_max_u: audit.lambda_max_u,
        umax_breached: audit.umax_breached,
        audit_pass: audit.passed,
        audit_failures: audit.failures().iter().map(|c| c.name.clone()).collect(),
        design_hash: setup.design_hash.clone(),
        design_flagged: setup.flagged,
    };
    Ok((report, artifact, audit))
}

/// The whole pipeline for a configuration; reports come out ordered by
/// (variant, gamma, arm, repeat) as listed in the config.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let objective = cfg.objective()?;
    let instances: Vec<Instance> = exec.map_range(cfg.repeats, |r| cfg.instance(r)).into_iter().collect::<Result<_>>()?;
    let stats = InstanceStats::pooled(instances.iter().map(|i| &i.stats)).expect("repeats >= 1");
    let p_stars: Vec<f64> = exec
        .map(&instances, |inst| offline_continuous_opt(inst, &objective).map(|r| r.value))
        .into_iter()
        .collect::<Result<_>>()?;

    let grid = DesignGrid {
        q: cfg.q,
        d: cfg.d,
        u_max: cfg.u_max,
    };
    let keys: Vec<(Variant, f64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.gammas.iter().map(move |&g| (v, g)))
        .collect();
    let setups: Vec<ArmSetup> = exec
        .map(&keys, |&(v, g)| prepare_arms(objective, v, g, cfg.budget(), &stats, grid))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let tasks: Vec<(usize, usize)> = (0..setups.len())
        .flat_map(|s| (0..cfg.repeats).map(move |r| (s, r)))
        .collect();
    exec.map(&tasks, |&(s, r)| run_arm(&instances[r], &setups[s], p_stars[r], r, false).map(|(rep, _, _)| rep))
        .into_iter()
        .collect()
}

/// Twelve significant digits, plain decimal.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub const CSV_HEADER: [&str; 14] = [
    "objective",
    "gamma",
    "repeat",
    "budget_used",
    "b_prime",
    "primal_H",
    "p_star",
    "ratio",
    "bound",
    "umax_breached",
    "audit_pass",
    "variant",
    "arm",
    "design_hash",
];

pub fn write_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.objective.clone(),
            fmt_sig(r.gamma),
            r.repeat.to_string(),
            fmt_sig(r.budget_used),
            fmt_sig(r.b_prime),
            fmt_sig(r.primal_h),
            fmt_sig(r.p_star),
            fmt_sig(r.ratio),
            fmt_sig(r.bound),
            r.umax_breached.to_string(),
            r.audit_pass.to_string(),
            r.variant.to_string(),
            r.arm.to_string(),
            r.design_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(reports: &[RunReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to write".into()));
    }
    write_csv(reports, fs::File::create(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub gamma: f64,
    pub beta: f64,
    pub bound_smoothed: f64,
    /// `NaN` when the objective is not PSD-DR on its own.
    pub bound_unsmoothed: f64,
}

/// Designed `beta(gamma)` and the two competitive-ratio bounds over a gamma grid.
pub fn bound_curve(
    objective: TraceObjective,
    gammas: &[f64],
    u_max: f64,
    q: usize,
    d: usize,
    exec: Execution,
) -> Result<Vec<CurveRow>> {
    exec.map(gammas, |&g| {
        let spec = DesignSpec::new(objective, g, u_max, Variant::Simultaneous, 0.0).with_grid(q, d);
        let design = design_hs(&spec)?;
        let unsmoothed = unsmoothed_beta_bound(&objective, g).map_or(f64::NAN, |b| cr_bound(g, b));
        Ok(CurveRow {
            gamma: g,
            beta: design.beta,
            bound_smoothed: cr_bound(g, design.beta),
            bound_unsmoothed: unsmoothed,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_curve<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "beta", "bound_smoothed", "bound_unsmoothed"])?;
    for r in rows {
        w.write_record([
            fmt_sig(r.gamma),
            fmt_sig(r.beta),
            fmt_sig(r.bound_smoothed),
            fmt_sig(r.bound_unsmoothed),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_curve(rows: &[CurveRow], path: &Path) -> Result<()> {
    write_curve(rows, fs::File::create(path)?)
}

/// `G_S'` sampled on `points` evenly spaced values over `[0, u_hi]`.
pub fn emit_gs_csv(smoother: &BudgetSmoother, u_hi: f64, points: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    w.write_record(["u", "gs_prime"])?;
    let steps = points.max(2) - 1;
    for k in 0..=steps {
        let u = u_hi * k as f64 / steps as f64;
        w.write_record([fmt_sig(u), fmt_sig(smoother.gs_prime(u)?)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
