//! Command-line front end: single solves, paired repetitions and the audit.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use marq::experiment::{run_audit, run_reproduce, solve_grid, thread_count, AuditOptions, Experiment, Method};
use marq::{DescendPolicy, Order, ProblemDescriptor, RecursionPolicy, RhsMode, SolverConfigF64};

#[derive(Parser)]
#[command(name = "marq", version, about = "Adaptive regularization solvers, one-level and multilevel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance of the grid problem.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, value_enum, default_value = "marq")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes `<prefix>.json` and `<prefix>.csv`.
        #[arg(long, short, default_value = "marq_report")]
        output: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run both methods on `reps` consecutive seeds and summarize.
    Reproduce {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// First seed; repetition i uses `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; 0 uses every core. MARQ_THREADS overrides it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Output prefix; writes `<prefix>.json` and `<prefix>.csv`.
        #[arg(long, short, default_value = "marq_reproduce")]
        output: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run the invariant checks on a small instance.
    Audit {
        #[arg(long, default_value_t = 16)]
        n1d: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 2)]
        q: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the finest restriction so the transfer check must fail.
        #[arg(long)]
        corrupt_transfer: bool,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

#[derive(Args)]
struct ProblemArgs {
    /// Interior points per dimension on the finest grid.
    #[arg(long, default_value_t = 64)]
    n1d: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Regularization order.
    #[arg(long, default_value_t = 2)]
    q: u32,
    /// Initial guess entries are drawn uniformly from [0, a].
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, value_enum, default_value = "discrete")]
    rhs: RhsArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Arq,
    Marq,
}

#[derive(Clone, Copy, ValueEnum)]
enum RhsArg {
    Discrete,
    Analytic,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecursionArg {
    Free,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum DescendArg {
    Always,
    Alternate,
}

/// Overrides of the solver defaults; unset flags keep the default.
#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    gamma3: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    kappa_h: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated tolerances, coarsest level first.
    #[arg(long, value_delimiter = ',')]
    eps_per_level: Option<Vec<f64>>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    #[arg(long, value_enum)]
    recursion: Option<RecursionArg>,
    /// Iteration cap of the free-form lower level.
    #[arg(long)]
    max_coarse_iters: Option<usize>,
    /// Successful iterations of the fixed-form lower level.
    #[arg(long)]
    max_successful: Option<usize>,
    #[arg(long, value_enum)]
    descend: Option<DescendArg>,
    #[arg(long)]
    subsolver_max_iters: Option<usize>,
    #[arg(long)]
    secular_tol: Option<f64>,
    #[arg(long)]
    pred_floor_rel: Option<f64>,
    /// Wall-clock budget in seconds; 0 disables it.
    #[arg(long)]
    wall_budget: Option<f64>,
    /// Record the in-run invariant checks.
    #[arg(long)]
    audit_checks: bool,
    #[arg(long)]
    record_iterates: bool,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfigF64> {
        let mut c = SolverConfigF64::default();
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.eta1, self.eta1);
        set(&mut c.eta2, self.eta2);
        set(&mut c.gamma1, self.gamma1);
        set(&mut c.gamma2, self.gamma2);
        set(&mut c.gamma3, self.gamma3);
        set(&mut c.lambda0, self.lambda0);
        set(&mut c.lambda_min, self.lambda_min);
        set(&mut c.theta, self.theta);
        set(&mut c.kappa_h, self.kappa_h);
        set(&mut c.epsilon, self.epsilon);
        set(&mut c.secular_tol, self.secular_tol);
        set(&mut c.pred_floor_rel, self.pred_floor_rel);
        if let Some(v) = &self.eps_per_level {
            c.eps_per_level = v.clone();
        }
        if let Some(v) = self.max_outer_iters {
            c.max_outer_iters = v;
        }
        if let Some(v) = self.subsolver_max_iters {
            c.subsolver_max_iters = v;
        }

        let (free_cap, fixed_cap) = match c.recursion_policy {
            RecursionPolicy::FreeForm { max_coarse_iters } => (max_coarse_iters, 2),
            RecursionPolicy::FixedForm { max_successful } => (50, max_successful),
        };
        let free = match self.recursion {
            Some(RecursionArg::Free) => true,
            Some(RecursionArg::Fixed) => false,
            None => matches!(c.recursion_policy, RecursionPolicy::FreeForm { .. }),
        };
        c.recursion_policy = if free {
            RecursionPolicy::FreeForm { max_coarse_iters: self.max_coarse_iters.unwrap_or(free_cap) }
        } else {
            RecursionPolicy::FixedForm { max_successful: self.max_successful.unwrap_or(fixed_cap) }
        };
        if let Some(d) = self.descend {
            c.descend_policy = match d {
                DescendArg::Always => DescendPolicy::AlwaysWhenAllowed,
                DescendArg::Alternate => DescendPolicy::Alternate,
            };
        }
        if let Some(s) = self.wall_budget {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("wall budget must be a nonnegative number of seconds");
            }
            c.wall_budget = (s > 0.0).then(|| Duration::from_secs_f64(s));
        }
        c.audit |= self.audit_checks;
        c.record_iterates |= self.record_iterates;
        c.validate()?;
        Ok(c)
    }
}

impl ProblemArgs {
    fn rhs(&self) -> RhsMode {
        match self.rhs {
            RhsArg::Discrete => RhsMode::Discrete,
            RhsArg::Analytic => RhsMode::Analytic,
        }
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_header(cfg: &SolverConfigF64, problem: serde_json::Value) {
    println!("# problem {problem}");
    println!("# config {}", cfg.record());
}

/// Returns whether the run converged.
fn run_solve(problem: &ProblemArgs, method: MethodArg, seed: u64, output: &Path, solver: &SolverArgs) -> Result<bool> {
    let cfg = solver.config()?;
    let order = Order::from_q(problem.q)?;
    let desc = ProblemDescriptor { n1d: problem.n1d, levels: problem.levels, seed, a: problem.a, rhs: problem.rhs() };
    // Build once up front so that bad grid sizes fail before any output.
    desc.hierarchy::<f64>()?;
    let method = match method {
        MethodArg::Arq => Method::Arq,
        MethodArg::Marq => Method::Marq,
    };
    print_header(&cfg, serde_json::to_value(&desc)?);

    let report = solve_grid(&desc, method, &cfg, order)?;
    report.write_json(create(&with_ext(output, "json"))?)?;
    report.write_csv(create(&with_ext(output, "csv"))?)?;

    let rmse = report.rmse_final.map_or("-".to_string(), |e| format!("{e:.3e}"));
    if report.converged {
        println!(
            "{} converged: it_T {} it_f {} f {:.10e} |g| {:.3e} flops {} rmse {rmse}",
            method.name(),
            report.it_t,
            report.it_f,
            report.final_value,
            report.final_grad_norm,
            report.total_flops()
        );
    } else {
        println!(
            "{} FAIL after {} iterations (|g| {:.3e}{})",
            method.name(),
            report.it_t,
            report.final_grad_norm,
            if report.timed_out { ", wall budget exceeded" } else { "" }
        );
    }
    Ok(report.converged)
}

/// Returns whether every run of both methods converged.
fn run_reproduce_cmd(problem: &ProblemArgs, reps: usize, seed: u64, threads: usize, output: &Path, solver: &SolverArgs) -> Result<bool> {
    let cfg = solver.config()?;
    let exp = Experiment { n1d: problem.n1d, levels: problem.levels, a: problem.a, reps, base_seed: seed, rhs: problem.rhs(), q: problem.q };
    exp.descriptor(0, exp.levels).hierarchy::<f64>()?;
    let threads = thread_count(threads);
    print_header(&cfg, serde_json::to_value(&exp)?);
    log::info!("running {reps} repetitions on {} threads", if threads == 0 { "all".to_string() } else { threads.to_string() });

    let (runs, summary) = run_reproduce(&exp, &cfg, threads)?;
    let title = format!("n1d={} levels={} a={} q={} reps={}", exp.n1d, exp.levels, exp.a, exp.q, exp.reps);
    print!("{}", summary.table(&title));

    let mut w = csv::Writer::from_writer(create(&with_ext(output, "csv"))?);
    w.write_record(["seed", "method", "converged", "it_t", "it_f", "flops", "rmse", "final_grad_norm", "save"])?;
    for r in &runs {
        let save = if r.arc.converged && r.marc.converged {
            marq::save_ratio(&r.arc, &r.marc).map_or(String::new(), |s| s.to_string())
        } else {
            String::new()
        };
        for (rep, s) in [(&r.arc, ""), (&r.marc, save.as_str())] {
            w.write_record([
                r.seed.to_string(),
                rep.method.clone(),
                rep.converged.to_string(),
                rep.it_t.to_string(),
                rep.it_f.to_string(),
                rep.total_flops().to_string(),
                rep.rmse_final.map_or(String::new(), |e| format!("{e:e}")),
                format!("{:e}", rep.final_grad_norm),
                s.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let doc = serde_json::json!({
        "experiment": exp,
        "config": cfg.record(),
        "summary": summary,
        "runs": runs,
    });
    serde_json::to_writer_pretty(create(&with_ext(output, "json"))?, &doc)?;
    Ok(runs.iter().all(|r| r.arc.converged && r.marc.converged))
}

/// Returns whether every check passed.
fn run_audit_cmd(opts: &AuditOptions, solver: &SolverArgs) -> Result<bool> {
    let cfg = solver.config()?;
    print_header(&cfg, serde_json::to_value(opts)?);
    let summary = run_audit(opts, &cfg)?;
    for c in &summary.checks {
        println!(
            "{} {:<32} level {} cycle {:>3} value {:.3e} bound {:.3e} margin {:.3e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.check,
            c.level,
            c.cycle,
            c.value,
            c.bound,
            c.bound - c.value
        );
    }
    let failures = summary.failures();
    if failures.is_empty() {
        println!("all {} checks passed", summary.checks.len());
    } else {
        println!("{} of {} checks failed:", failures.len(), summary.checks.len());
        for c in failures {
            println!("  {} (level {}, cycle {})", c.check, c.level, c.cycle);
        }
    }
    Ok(summary.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Solve { problem, method, seed, output, solver } => run_solve(problem, *method, *seed, output, solver),
        Command::Reproduce { problem, reps, seed, threads, output, solver } => {
            run_reproduce_cmd(problem, *reps, *seed, *threads, output, solver)
        }
        Command::Audit { n1d, levels, a, q, seed, corrupt_transfer, solver } => {
            let opts = AuditOptions { n1d: *n1d, levels: *levels, a: *a, seed: *seed, q: *q, corrupt_transfer: *corrupt_transfer };
            run_audit_cmd(&opts, solver)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
