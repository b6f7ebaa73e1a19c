//! Command-line front end: design surrogates, run the online engines, run
//! seeded experiment sweeps, audit saved traces and tabulate bound curves.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use psd_online::bench::{
    bound_curve, emit_csv, emit_curve, emit_gs_csv, gen_adversarial, gen_random, prepare_arms,
    prepare_with_measure, read_json, run_arm, run_experiment, write_csv, write_curve, write_json, DesignGrid,
    ExperimentConfig, Family, RunArtifact,
};
use psd_online::budget::Variant;
use psd_online::designer::{design_hs_with_progress, DesignResult, DesignSpec};
use psd_online::lowner::AtomicMeasure;
use psd_online::oracle::{offline_continuous_opt, Instance};
use psd_online::{Execution, TraceObjective};

#[derive(Parser)]
#[command(name = "psd-online", version, about = "Online budgeted allocation over the PSD cone")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design a smoothed surrogate and write it as JSON.
    Design(DesignArgs),
    /// Run one online engine on one instance.
    Run(RunArgs),
    /// Run a seeded experiment sweep and write the per-run CSV.
    Bench(BenchArgs),
    /// Re-audit a saved run.
    Audit(AuditArgs),
    /// Tabulate designed and unsmoothed ratio bounds over a gamma grid.
    Curve(CurveArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// TOML design spec; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<TraceObjective>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    umax: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    rho2: Option<f64>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Print cutting-plane progress to stderr.
    #[arg(long)]
    verbose: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InstanceArgs {
    /// Instance JSON; otherwise one is generated from the flags below.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long, default_value = "adversarial")]
    family: Family,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Budget; defaults to `m / 5` for generated instances.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long)]
    objective: TraceObjective,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value = "sim")]
    variant: Variant,
    /// Design JSON from `design`; its beta is re-certified for this horizon.
    #[arg(long, conflicts_with = "unsmoothed")]
    measure: Option<PathBuf>,
    /// Run on the original objective instead of a designed surrogate.
    #[arg(long)]
    unsmoothed: bool,
    #[arg(long, default_value_t = 100)]
    q: usize,
    #[arg(long, default_value_t = 200)]
    d: usize,
    #[arg(long)]
    umax: Option<f64>,
    /// Write the run (instance, setup, trace) as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the generated or loaded instance as JSON.
    #[arg(long)]
    instance_out: Option<PathBuf>,
    /// Write `G_S'` sampled over `[0, 3 b']` as CSV.
    #[arg(long)]
    gs_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    b: Option<f64>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list of `seq` and `sim`.
    #[arg(long, value_delimiter = ',')]
    variant: Option<Vec<Variant>>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    umax: Option<f64>,
    /// CSV destination; stdout when neither this nor the config names one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Run JSON written by `run --out`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, default_value = "d-optimal")]
    objective: TraceObjective,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,3,4")]
    gamma: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    umax: f64,
    #[arg(long, default_value_t = 100)]
    q: usize,
    #[arg(long, default_value_t = 200)]
    d: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let outcome = match cli.command {
        Command::Design(args) => design(args),
        Command::Run(args) => run(args),
        Command::Bench(args) => bench(args, exec),
        Command::Audit(args) => audit(args),
        Command::Curve(args) => curve(args, exec),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn design(args: DesignArgs) -> Result<ExitCode> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<DesignSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let (Some(objective), Some(gamma), Some(umax)) = (args.objective, args.gamma, args.umax) else {
                bail!("without --config, --objective, --gamma and --umax are required");
            };
            DesignSpec::new(objective, gamma, umax, Variant::Simultaneous, 0.0)
        }
    };
    if let Some(o) = args.objective {
        spec.objective = o;
    }
    if let Some(g) = args.gamma {
        spec.gamma = g;
    }
    if let Some(u) = args.umax {
        spec.u_max = u;
    }
    if let Some(v) = args.variant {
        spec.variant = v;
    }
    if let Some(r) = args.rho2 {
        spec.rho2 = r;
    }
    if let Some(q) = args.q {
        spec.q = q;
    }
    if let Some(d) = args.d {
        spec.d = d;
    }
    let verbose = args.verbose;
    let result = design_hs_with_progress(&spec, |p| {
        if verbose {
            eprintln!(
                "iter {:4}  lower {:.9}  best {:.9}  cuts {}",
                p.iteration, p.lower_bound, p.best_beta, p.cuts
            );
        }
    })?;
    eprintln!(
        "beta {:.9}  bound {:.9}  atoms {}  residual {:.2e}{}",
        result.beta,
        result.bound(),
        result.measure.len(),
        result.residual,
        if result.flagged { "  FLAGGED" } else { "" }
    );
    emit_json(&result, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn load_instance(args: &InstanceArgs) -> Result<Instance> {
    if let Some(path) = &args.instance {
        let inst: Instance = read_json(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(match args.b {
            Some(b) => inst.with_budget(b)?,
            None => inst,
        });
    }
    let (Some(n), Some(m)) = (args.n, args.m) else {
        bail!("without --instance, --n and --m are required");
    };
    let b = args.b.unwrap_or(m as f64 / 5.0);
    Ok(match args.family {
        Family::Adversarial => gen_adversarial(n, m, b, args.seed)?,
        Family::Random => gen_random(n, m, args.density, b, args.seed)?,
    })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let inst = load_instance(&args.instance)?;
    if let Some(path) = &args.instance_out {
        write_json(&inst, path)?;
    }
    let grid = DesignGrid {
        q: args.q,
        d: args.d,
        u_max: args.umax,
    };
    let obj = args.objective;
    let setup = if let Some(path) = &args.measure {
        let design: DesignResult = read_json(path).with_context(|| format!("reading {}", path.display()))?;
        if design.objective != obj {
            bail!("measure was designed for {}, not {}", design.objective, obj);
        }
        if design.gamma != args.gamma {
            bail!("measure was designed for gamma {}, not {}", design.gamma, args.gamma);
        }
        prepare_with_measure(obj, args.variant, args.gamma, inst.b, &inst.stats, grid, design.measure)?
    } else if args.unsmoothed {
        let Some(measure) = AtomicMeasure::unsmoothed(&obj) else {
            bail!("{obj} has no unsmoothed surrogate");
        };
        prepare_with_measure(obj, args.variant, args.gamma, inst.b, &inst.stats, grid, measure)?
    } else {
        prepare_arms(obj, args.variant, args.gamma, inst.b, &inst.stats, grid)?.swap_remove(0)
    };
    if let Some(path) = &args.gs_out {
        emit_gs_csv(&setup.smoother, 3.0 * setup.b_prime, 200, path)?;
    }
    let p_star = offline_continuous_opt(&inst, &obj)?.value;
    let (report, artifact, _) = run_arm(&inst, &setup, p_star, 0, true)?;
    if let Some(path) = &args.out {
        write_json(&artifact, path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs, exec: Execution) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let (Some(objective), Some(n), Some(m), Some(gammas)) =
                (args.objective.clone(), args.n, args.m, args.gamma.clone())
            else {
                bail!("without --config, --objective, --n, --m and --gamma are required");
            };
            ExperimentConfig::from_toml(&format!(
                "objective = {}\nfamily = \"adversarial\"\nn = {n}\nm = {m}\ngammas = {gammas:?}\n",
                toml::Value::String(objective)
            ))?
        }
    };
    if let Some(o) = args.objective {
        cfg.objective = o;
    }
    if let Some(f) = args.family {
        cfg.family = f;
    }
    if let Some(x) = args.density {
        cfg.density = x;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(b) = args.b {
        cfg.b = Some(b);
    }
    if let Some(g) = args.gamma {
        cfg.gammas = g;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.variants = v;
    }
    if let Some(q) = args.q {
        cfg.q = q;
    }
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(u) = args.umax {
        cfg.u_max = Some(u);
    }
    if let Some(out) = args.out {
        cfg.out = Some(out);
    }
    cfg.validate()?;

    let reports = run_experiment(&cfg, exec)?;
    match &cfg.out {
        Some(path) => emit_csv(&reports, path)?,
        None => write_csv(&reports, io::stdout().lock())?,
    }
    let failed = reports.iter().filter(|r| !r.audit_pass).count();
    eprintln!("{} runs, {} audit failures", reports.len(), failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn audit(args: AuditArgs) -> Result<ExitCode> {
    let artifact: RunArtifact =
        read_json(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let report = artifact.audit()?;
    emit_json(&report, args.out.as_deref())?;
    for c in report.failures() {
        eprintln!("FAIL {}  slack {:.3e}  tol {:.1e}", c.name, c.slack, c.tol);
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn curve(args: CurveArgs, exec: Execution) -> Result<ExitCode> {
    let rows = bound_curve(args.objective, &args.gamma, args.umax, args.q, args.d, exec)?;
    match &args.out {
        Some(path) => emit_curve(&rows, path)?,
        None => write_curve(&rows, io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(value, path)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}
