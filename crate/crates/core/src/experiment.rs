//! Benchmark harness: single solves on the grid problem, paired ARC/MARC
//! repetitions, and the invariant audit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{arq_minimize, lambda_ceiling, marq_minimize, SolverConfig};
use crate::linalg::{norm2, Csr};
use crate::metrics::{aggregate, AuditRecord, ComparisonSummary, PairedRun, RunReport};
use crate::model::{Objective, Order};
use crate::multilevel::{LevelHierarchy, TransferPair};
use crate::problems::{analytic, GridProblem, ProblemDescriptor};
use crate::subproblem::{solve_q2, solve_q2_smallscale_oracle, SubproblemOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Arq,
    Marq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Arq => "arq",
            Method::Marq => "marq",
        }
    }
}

/// Solves one grid instance and fills in the RMSE against the exact solution.
///
/// `Method::Arq` ignores all but the finest level of the hierarchy.
pub fn solve_grid(desc: &ProblemDescriptor, method: Method, cfg: &SolverConfig<f64>, order: Order) -> Result<RunReport> {
    let x0: Vec<f64> = desc.initial_guess()?;
    let (mut report, rmse) = match method {
        Method::Arq => {
            let p = GridProblem::<f64>::assemble(desc.n1d, desc.rhs)?;
            let r = arq_minimize(&p, &x0, cfg, order)?;
            let e = p.rmse(&r.solution)?;
            (r, e)
        }
        Method::Marq => {
            let h: LevelHierarchy<f64> = desc.hierarchy()?;
            let r = marq_minimize(&h, &x0, cfg, order)?;
            let p = GridProblem::<f64>::assemble(desc.n1d, desc.rhs)?;
            let e = p.rmse(&r.solution)?;
            (r, e)
        }
    };
    report.rmse_final = Some(rmse);
    Ok(report)
}

/// Parameters of a paired ARC-vs-MARC comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Experiment {
    pub n1d: usize,
    pub levels: usize,
    pub a: f64,
    pub reps: usize,
    pub base_seed: u64,
    pub rhs: crate::problems::RhsMode,
    pub q: u32,
}

impl Experiment {
    pub fn descriptor(&self, rep: usize, levels: usize) -> ProblemDescriptor {
        ProblemDescriptor { n1d: self.n1d, levels, seed: self.base_seed + rep as u64, a: self.a, rhs: self.rhs }
    }
}

/// Worker count: `MARQ_THREADS` if set and positive, else `default`.
pub fn thread_count(default: usize) -> usize {
    std::env::var("MARQ_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(default)
}

/// Runs both methods on the same seeds in a pool of `threads` workers
/// (`0` means the number of cores) and aggregates the pairs.
pub fn run_reproduce(exp: &Experiment, cfg: &SolverConfig<f64>, threads: usize) -> Result<(Vec<PairedRun>, ComparisonSummary)> {
    if exp.reps == 0 {
        return Err(Error::invalid("need at least one repetition"));
    }
    let order = Order::from_q(exp.q)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let runs: Result<Vec<PairedRun>> = pool.install(|| {
        (0..exp.reps)
            .into_par_iter()
            .map(|rep| {
                let desc = exp.descriptor(rep, exp.levels);
                let arc = solve_grid(&desc, Method::Arq, cfg, order)?;
                let marc = solve_grid(&desc, Method::Marq, cfg, order)?;
                Ok(PairedRun { seed: desc.seed, arc, marc })
            })
            .collect()
    });
    let runs = runs?;
    let summary = aggregate(&runs)?;
    Ok((runs, summary))
}

/// Settings of [`run_audit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditOptions {
    pub n1d: usize,
    pub levels: usize,
    pub a: f64,
    pub seed: u64,
    pub q: u32,
    /// Perturb one entry of the finest restriction so that `P != alpha R^T`.
    pub corrupt_transfer: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { n1d: 16, levels: 3, a: 1.0, seed: 0, q: 2, corrupt_transfer: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditSummary {
    pub checks: Vec<AuditRecord>,
}

impl AuditSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&AuditRecord> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn corrupt(pair: &TransferPair<f64>) -> Result<TransferPair<f64>> {
    let r = pair.restriction();
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(r.nnz());
    for i in 0..r.nrows() {
        trip.extend(r.row(i).map(|(j, v)| (i, j, v)));
    }
    trip[0].2 *= 1.5;
    let r = Csr::from_triplets(r.nrows(), r.ncols(), trip)?;
    TransferPair::from_parts(pair.prolongation().clone(), r, pair.alpha())
}

/// Runs the invariant checks on a small instance.
pub fn run_audit(opts: &AuditOptions, cfg: &SolverConfig<f64>) -> Result<AuditSummary> {
    let order = Order::from_q(opts.q)?;
    let mut checks = Vec::new();
    let desc = ProblemDescriptor { n1d: opts.n1d, levels: opts.levels, seed: opts.seed, a: opts.a, rhs: Default::default() };
    let mut h: LevelHierarchy<f64> = desc.hierarchy()?;
    if opts.corrupt_transfer && opts.levels > 1 {
        let top = opts.levels;
        let bad = corrupt(h.level(top).transfer.as_ref().expect("finer levels carry a transfer"))?;
        h.level_mut(top).transfer = Some(bad);
    }

    for l in 2..=h.num_levels() {
        let pair = h.level(l).transfer.as_ref().expect("finer levels carry a transfer");
        checks.push(AuditRecord::new("transfer_adjointness", l, 0, pair.adjoint_defect(), 1e-15));
    }

    let audit_cfg = SolverConfig { audit: true, ..cfg.clone() };
    let x0: Vec<f64> = desc.initial_guess()?;
    let fine = GridProblem::<f64>::assemble(opts.n1d, desc.rhs)?;
    for (method, report) in [
        ("arq", arq_minimize(&fine, &x0, &audit_cfg, order)?),
        ("marq", marq_minimize(&h, &x0, &audit_cfg, order)?),
    ] {
        checks.extend(report.audit.iter().cloned());
        checks.push(AuditRecord::new(
            &format!("{method}_converged"),
            desc.levels,
            report.it_t,
            if report.converged { 0.0 } else { 1.0 },
            0.0,
        ));
        let g = fine.gradient(&report.solution)?;
        checks.push(AuditRecord::new(&format!("{method}_final_gradient"), desc.levels, report.it_t, norm2(&g), cfg.epsilon));
        if let Some(lip) = &report.lipschitz {
            let bound = lambda_ceiling(report.q, lip, cfg.lambda0, cfg.gamma3, cfg.eta1, 10.0);
            let max_lambda = report.trace.iter().chain(&report.coarse_trace).map(|r| r.lambda).fold(0.0, f64::max);
            checks.push(AuditRecord::new(&format!("{method}_lambda_ceiling"), desc.levels, report.it_t, max_lambda, bound));
        }
    }

    // Identity collapse against the one-level method on a convex quartic.
    let quartic = analytic::convex_quartic::<f64>(12, opts.seed);
    let mut ident = LevelHierarchy::single(Box::new(analytic::convex_quartic::<f64>(12, opts.seed)) as Box<dyn Objective<f64>>);
    ident.push_finer(Box::new(analytic::convex_quartic::<f64>(12, opts.seed)), TransferPair::identity(12))?;
    let y0 = vec![0.5; 12];
    let a = arq_minimize(&quartic, &y0, cfg, order)?;
    let m = marq_minimize(&ident, &y0, cfg, order)?;
    let diff = norm2(&crate::linalg::sub(&a.solution, &m.solution));
    checks.push(AuditRecord::new("identity_collapse_solution", 2, 0, diff, 1e-6));

    if order == Order::Second {
        // Step computation against exhaustive search on small random 2-D models.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        for i in 0..5 {
            let g: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let b = crate::linalg::SymBand::from_dense(&[
                vec![rng.gen_range(-2.0..2.0), 0.0],
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0)],
            ])?;
            let b = {
                let mut s = b.clone();
                s.set(0, 1, b.get(1, 0));
                s
            };
            let lam: f64 = rng.gen_range(0.5..2.0);
            let res = solve_q2(&g, &b, lam, &SubproblemOptions::default())?;
            // Any minimizer has lam/3 t^2 - |B| t / 2 - |g| <= 0 at t = |s|.
            let (bn, gn) = (b.norm2_estimate(50), norm2(&g));
            let radius = 1.01 * (bn / 2.0 + (bn * bn / 4.0 + 4.0 * lam / 3.0 * gn).sqrt()) / (2.0 * lam / 3.0);
            let o = solve_q2_smallscale_oracle(&g, &b, lam, radius, 1e-3)?;
            let err = norm2(&crate::linalg::sub(&res.step, &o));
            checks.push(AuditRecord::new("subproblem_vs_grid_oracle", 0, i, err, 2e-3 * 2f64.sqrt()));
        }
    } else {
        let g: [f64; 2] = [0.3, -0.4];
        let res = crate::subproblem::solve_q1(&g, 2.0)?;
        let err = (res.step[0] + 0.15).abs().max((res.step[1] - 0.2).abs());
        checks.push(AuditRecord::new("first_order_closed_form", 0, 0, err, 1e-15));
    }

    let e15 = GridProblem::<f64>::assemble(15, desc.rhs)?.truncation_error();
    let e31 = GridProblem::<f64>::assemble(31, desc.rhs)?.truncation_error();
    let ratio = e15 / e31;
    checks.push(AuditRecord::new("truncation_ratio_low", 0, 0, 3.0 - ratio, 0.0));
    checks.push(AuditRecord::new("truncation_ratio_high", 0, 0, ratio - 5.0, 0.0));

    Ok(AuditSummary { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_audit_passes() {
        let s = run_audit(&AuditOptions::default(), &SolverConfig::default()).unwrap();
        for c in s.failures() {
            eprintln!("failed: {c:?}");
        }
        assert!(s.passed());
    }

    #[test]
    fn corrupted_transfer_is_caught() {
        let opts = AuditOptions { corrupt_transfer: true, ..AuditOptions::default() };
        let s = run_audit(&opts, &SolverConfig::default()).unwrap();
        assert!(!s.passed());
        assert!(s.failures().iter().any(|c| c.check == "transfer_adjointness"));
    }

    #[test]
    fn first_order_audit_uses_closed_form() {
        let opts = AuditOptions { q: 1, ..AuditOptions::default() };
        let s = run_audit(&opts, &SolverConfig::default()).unwrap();
        assert!(s.checks.iter().any(|c| c.check == "first_order_closed_form" && c.passed));
    }
}
