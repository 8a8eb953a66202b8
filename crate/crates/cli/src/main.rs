//! `w2`: exact and semi-discrete quadratic optimal transport, confidence
//! intervals and Monte Carlo experiments.
//!
//! Results go to stdout as JSON; diagnostics go to stderr. Exit codes: 0
//! success, 1 usage or validation error, 2 numerical failure, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use w2core::exact_ot::w2_exact;
use w2core::inference::{clt_one_sample, efron_stein_constant};
use w2core::io::{read_distribution, read_points_csv, write_plan_csv};
use w2core::measures::Measure;
use w2core::semidiscrete::{SemiDiscreteSolver, SolverConfig, NONNEG_TOL};
use w2core::sim::{run_experiment, ExperimentConfig};
use w2core::{Error, SeedSpec};

#[derive(Parser, Debug)]
#[command(name = "w2", version, about = "Quadratic optimal transport and inference on empirical transport costs")]
struct Cli {
    /// Print the resolved configuration, defaults included, to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    /// Worker threads for `sim` (default: all cores). Other commands use one thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact W_2^2 between two finitely supported measures.
    Exact(ExactArgs),
    /// Semi-discrete dual potentials from a continuous Q to a finite support.
    Semidiscrete(SemidiscreteArgs),
    /// One-sample confidence interval for W_2^2(P, Q) with finitely supported P.
    Ci(CiArgs),
    /// Efron-Stein variance bound constant C(P, Q) from a sample of P.
    Esbound(EsboundArgs),
    /// Monte Carlo experiment from a JSON config; writes raw.csv and summary.json.
    Sim(SimArgs),
}

#[derive(Args, Debug, Serialize)]
struct ExactArgs {
    /// Points CSV for P (`x1,...,xd[,weight]`).
    #[arg(long)]
    p: PathBuf,
    /// Points CSV for Q.
    #[arg(long)]
    q: PathBuf,
    /// Write the optimal plan as CSV with columns `i,j,mass`.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Write the dual potentials as JSON `{"phi", "psi", "value"}`.
    #[arg(long)]
    dual: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SemidiscreteArgs {
    /// Points CSV with the support of P.
    #[arg(long)]
    support: PathBuf,
    /// Distribution JSON for Q.
    #[arg(long)]
    q: PathBuf,
    /// Monte Carlo draws for the refinement and evaluation pools.
    #[arg(long, default_value_t = 200_000)]
    mc: usize,
    /// Root seed (defaults to 0 with a warning).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the result JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CiArgs {
    /// Points CSV for P. With `--n`, P is the population and a sample of size
    /// `n` is drawn from it; otherwise the file must be an unweighted sample.
    #[arg(long)]
    p: PathBuf,
    /// Distribution JSON for Q.
    #[arg(long)]
    q: PathBuf,
    /// Sample size to draw from P.
    #[arg(long)]
    n: Option<usize>,
    /// Miscoverage level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Monte Carlo draws for the solver pools.
    #[arg(long, default_value_t = 200_000)]
    mc: usize,
    /// Root seed (defaults to 0 with a warning).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EsboundArgs {
    /// Points CSV holding a sample of P.
    #[arg(long)]
    sample: PathBuf,
    /// Distribution JSON for Q.
    #[arg(long)]
    q: PathBuf,
    /// Monte Carlo draws for E||Y||^4 when Q has no closed form.
    #[arg(long, default_value_t = 1_000_000)]
    mc: usize,
    /// Root seed (defaults to 0 with a warning).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct SimArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; overrides the seed in the config.
    #[arg(long)]
    seed: u64,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 3,
            Error::NonConvergence(_) | Error::Refused(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn numerical(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_failure(path: &std::path::Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let threads = match &cli.command {
        Command::Sim(_) => cli.threads.unwrap_or(0),
        _ => 1,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| usage(format!("cannot start {threads} worker threads: {e}")))?;
    let verbose = cli.verbose;
    pool.install(|| match cli.command {
        Command::Exact(a) => exact(a, verbose),
        Command::Semidiscrete(a) => semidiscrete(a, verbose),
        Command::Ci(a) => ci(a, verbose),
        Command::Esbound(a) => esbound(a, verbose),
        Command::Sim(a) => sim(a, verbose, cli.threads),
    })
}

fn show_config(verbose: bool, config: &impl Serialize) {
    if verbose {
        let text = serde_json::to_string_pretty(config).expect("config serializes");
        eprintln!("{text}");
    }
}

fn seed_or_default(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        eprintln!("warning: no --seed given; using 0");
        0
    })
}

fn emit(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| numerical(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_json(path: &std::path::Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| numerical(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn with_path<T>(path: &std::path::Path, r: w2core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => io_failure(path, io),
        other => {
            let f = Failure::from(other);
            Failure {
                message: format!("{}: {}", path.display(), f.message),
                ..f
            }
        }
    })
}

fn points(path: &std::path::Path) -> Result<w2core::measures::DiscreteMeasure, Failure> {
    with_path(path, read_points_csv(path))
}

fn distribution(path: &std::path::Path) -> Result<w2core::measures::SamplableMeasure, Failure> {
    with_path(path, read_distribution(path))
}

fn check_dims(left: (&str, usize), right: (&str, usize)) -> Outcome {
    if left.1 != right.1 {
        return Err(usage(format!(
            "dimension mismatch: {} has dimension {}, {} has dimension {}",
            left.0, left.1, right.0, right.1
        )));
    }
    Ok(())
}

fn solver_config(mc: usize, seed: u64) -> SolverConfig {
    SolverConfig {
        saa_mc: mc,
        eval_mc: mc,
        seed: SeedSpec::new(seed, 0),
        ..SolverConfig::default()
    }
}

fn exact(a: ExactArgs, verbose: bool) -> Outcome {
    show_config(verbose, &a);
    let p = points(&a.p)?;
    let q = points(&a.q)?;
    check_dims(("--p", p.dim()), ("--q", q.dim()))?;
    let sol = w2_exact(&p, &q)?;
    if let Some(path) = &a.plan {
        let file = std::fs::File::create(path).map_err(|e| io_failure(path, e))?;
        write_plan_csv(file, &sol.plan)?;
    }
    if let Some(path) = &a.dual {
        write_json(path, &sol.dual)?;
    }
    emit(&json!({
        "w2sq": sol.cost,
        "method": sol.method,
        "duality_gap": sol.duality_gap(&p, &q),
    }))
}

fn semidiscrete(a: SemidiscreteArgs, verbose: bool) -> Outcome {
    let seed = seed_or_default(a.seed);
    let cfg = solver_config(a.mc, seed);
    show_config(verbose, &json!({ "args": &a, "seed": seed, "solver": &cfg }));
    let p = points(&a.support)?;
    let q = distribution(&a.q)?;
    check_dims(("--support", p.dim()), ("--q", q.dim()))?;
    let solver = SemiDiscreteSolver::new(q, cfg)?;
    let pot = solver.solve(&p, None)?;
    let est = solver.w2_on_pool(&p, &pot.z)?;
    let mut out = serde_json::to_value(&pot).map_err(|e| numerical(e.to_string()))?;
    if let Value::Object(map) = &mut out {
        map.insert("w2sq".into(), json!(est.w2sq));
        map.insert("se".into(), json!(est.se));
    }
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    emit(&out)?;
    if pot.nonneg_violation > NONNEG_TOL {
        eprintln!(
            "warning: normalized potential is negative by {:.3e} at some support point",
            pot.nonneg_violation
        );
    }
    if !pot.converged {
        return Err(numerical(format!(
            "solver did not converge: gradient {:.3e} > allowance {:.3e} after {} SGD steps and {} refinement sweeps",
            pot.grad_norm, pot.grad_allowance, pot.diagnostics.sgd_steps, pot.diagnostics.saa_sweeps
        )));
    }
    Ok(())
}

fn ci(a: CiArgs, verbose: bool) -> Outcome {
    let seed = seed_or_default(a.seed);
    let cfg = solver_config(a.mc, seed);
    show_config(verbose, &json!({ "args": &a, "seed": seed, "solver": &cfg }));
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let p = points(&a.p)?;
    let q = distribution(&a.q)?;
    check_dims(("--p", p.dim()), ("--q", q.dim()))?;
    let sample = match a.n {
        Some(n) => p.sample_on_support(n, SeedSpec::new(seed, 1))?,
        None if p.sample_size().is_some() => p.clone(),
        None => return Err(usage("--p has a weight column; pass --n to draw a sample from it")),
    };
    let solver = SemiDiscreteSolver::new(q, cfg)?;
    let pot = solver.solve(&p, None)?;
    let report = clt_one_sample(&p, &solver, &sample, &pot, a.alpha, 1000)?;
    if report.degenerate {
        eprintln!("warning: plug-in variance is numerically zero; the normal interval does not apply");
    }
    emit(&report)
}

fn esbound(a: EsboundArgs, verbose: bool) -> Outcome {
    let seed = seed_or_default(a.seed);
    show_config(verbose, &json!({ "args": &a, "seed": seed }));
    let sample = points(&a.sample)?;
    let q = distribution(&a.q)?;
    check_dims(("--sample", sample.dim()), ("--q", q.dim()))?;
    let n = sample
        .sample_size()
        .ok_or_else(|| usage("--sample must be an unweighted sample (no weight column)"))?;
    let c = efron_stein_constant(&sample, &Measure::Continuous(q), a.mc, SeedSpec::new(seed, 0))?;
    let mut out = serde_json::to_value(c).map_err(|e| numerical(e.to_string()))?;
    if let Value::Object(map) = &mut out {
        map.insert("n".into(), json!(n));
        map.insert("variance_bound".into(), json!(c.c_pq / n as f64));
    }
    emit(&out)
}

fn sim(a: SimArgs, verbose: bool, threads: Option<usize>) -> Outcome {
    let text = std::fs::read_to_string(&a.config).map_err(|e| io_failure(&a.config, e))?;
    let mut cfg = with_path(&a.config, ExperimentConfig::from_json(&text))?;
    if cfg.seed != a.seed && text.contains("\"seed\"") {
        eprintln!("warning: --seed {} overrides seed {} from the config", a.seed, cfg.seed);
    }
    cfg.seed = a.seed;
    show_config(verbose, &json!({ "config": &cfg, "out": &a.out, "threads": threads }));
    let report = run_experiment(&cfg)?;
    with_path(&a.out, report.write(&a.out))?;
    if verbose {
        eprintln!("finished in {:.2} s", report.wall_clock_secs);
    }
    print!("{}", report.summary_json()?);
    if report.failed {
        return Err(numerical(report.failure.clone().unwrap_or_else(|| "experiment failed".into())));
    }
    Ok(())
}
