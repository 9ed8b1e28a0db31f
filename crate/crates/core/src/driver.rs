//! One-level (AR q) and recursive multilevel (MAR q) adaptive regularization.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dense_model_flops, dot, norm2, sub, SymBand};
use crate::metrics::{AuditRecord, IterateSample, IterationRecord, LipschitzSample, ModelKind, RunReport};
use crate::model::{Objective, Order};
use crate::multilevel::{build_coarse_model, descend_test, LevelHierarchy, TransferPair};
use crate::subproblem::{solve_q1, solve_q2, SubproblemOptions};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecursionPolicy {
    /// Lower level runs to its own tolerance or `max_coarse_iters` iterations.
    FreeForm { max_coarse_iters: usize },
    /// Lower level stops after `max_successful` successful iterations.
    FixedForm { max_successful: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescendPolicy {
    /// Use the lower level whenever the descend test passes.
    AlwaysWhenAllowed,
    /// Never use the lower level on two consecutive iterations of a level.
    Alternate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    pub eta1: T,
    pub eta2: T,
    pub gamma1: T,
    pub gamma2: T,
    pub gamma3: T,
    pub lambda0: T,
    pub lambda_min: T,
    /// Inner stopping constant of the step computation.
    pub theta: T,
    pub kappa_h: T,
    /// Gradient tolerance at the finest level.
    pub epsilon: T,
    /// Tolerances per level, coarsest first. Empty means `epsilon` everywhere.
    pub eps_per_level: Vec<T>,
    pub max_outer_iters: usize,
    pub recursion_policy: RecursionPolicy,
    pub descend_policy: DescendPolicy,
    pub subsolver_max_iters: usize,
    pub secular_tol: T,
    /// Iterations with `pred <= pred_floor_rel * (1 + |f|)` are unsuccessful.
    /// For objectives that compute `f(x + s) - f(x)` directly the floor is
    /// `pred_floor_rel * |g| |s|` instead.
    pub pred_floor_rel: T,
    /// Wall-clock budget; exceeding it ends the run unconverged.
    pub wall_budget: Option<Duration>,
    /// Run and record the in-run invariant checks.
    pub audit: bool,
    pub record_iterates: bool,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            eta1: T::lit(0.1),
            eta2: T::lit(0.75),
            gamma1: T::lit(0.85),
            gamma2: T::lit(0.5),
            gamma3: T::lit(2.0),
            lambda0: T::lit(0.05),
            lambda_min: T::lit(1e-8),
            theta: T::lit(0.5),
            kappa_h: T::lit(0.1),
            epsilon: T::lit(1e-7),
            eps_per_level: Vec::new(),
            max_outer_iters: 1000,
            recursion_policy: RecursionPolicy::FreeForm { max_coarse_iters: 50 },
            descend_policy: DescendPolicy::AlwaysWhenAllowed,
            subsolver_max_iters: 100,
            secular_tol: T::lit(1e-8),
            pred_floor_rel: T::lit(1e-16),
            wall_budget: Some(Duration::from_secs(600)),
            audit: false,
            record_iterates: false,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        let one = T::one();
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if !(z < self.eta1 && self.eta1 <= self.eta2 && self.eta2 < one) {
            return fail("need 0 < eta1 <= eta2 < 1");
        }
        if !(z < self.gamma2 && self.gamma2 <= self.gamma1 && self.gamma1 < one && one < self.gamma3) {
            return fail("need 0 < gamma2 <= gamma1 < 1 < gamma3");
        }
        if !(self.lambda_min > z && self.lambda0 > self.lambda_min) {
            return fail("need lambda0 > lambda_min > 0");
        }
        if !(self.theta > z) {
            return fail("theta must be positive");
        }
        if !(z < self.kappa_h && self.kappa_h < one) {
            return fail("kappa_h must lie in (0, 1)");
        }
        if !(self.epsilon > z) || self.eps_per_level.iter().any(|e| !(*e > z)) {
            return fail("tolerances must be positive");
        }
        if self.max_outer_iters == 0 || self.subsolver_max_iters == 0 {
            return fail("iteration caps must be positive");
        }
        match self.recursion_policy {
            RecursionPolicy::FreeForm { max_coarse_iters: 0 } | RecursionPolicy::FixedForm { max_successful: 0 } => {
                return fail("lower-level iteration caps must be positive")
            }
            _ => {}
        }
        if !(self.secular_tol > z) || !(self.pred_floor_rel >= z) {
            return fail("secular_tol must be positive and pred_floor_rel non-negative");
        }
        Ok(())
    }

    fn eps_at(&self, level: usize, num_levels: usize) -> Result<T> {
        if self.eps_per_level.is_empty() {
            return Ok(self.epsilon);
        }
        if self.eps_per_level.len() != num_levels {
            return Err(Error::invalid(format!(
                "eps_per_level has {} entries for {} levels",
                self.eps_per_level.len(),
                num_levels
            )));
        }
        Ok(self.eps_per_level[level - 1])
    }

    fn subproblem_options(&self) -> SubproblemOptions<T> {
        SubproblemOptions { theta: self.theta, max_iters: self.subsolver_max_iters, secular_tol: self.secular_tol }
    }

    /// All constants as `f64`, for report headers.
    pub fn record(&self) -> serde_json::Value {
        let f = |v: T| v.to_f64_lossy();
        serde_json::json!({
            "eta1": f(self.eta1),
            "eta2": f(self.eta2),
            "gamma1": f(self.gamma1),
            "gamma2": f(self.gamma2),
            "gamma3": f(self.gamma3),
            "lambda0": f(self.lambda0),
            "lambda_min": f(self.lambda_min),
            "theta": f(self.theta),
            "kappa_h": f(self.kappa_h),
            "epsilon": f(self.epsilon),
            "eps_per_level": self.eps_per_level.iter().map(|&e| f(e)).collect::<Vec<_>>(),
            "max_outer_iters": self.max_outer_iters,
            "recursion_policy": self.recursion_policy,
            "descend_policy": self.descend_policy,
            "subsolver_max_iters": self.subsolver_max_iters,
            "secular_tol": f(self.secular_tol),
            "pred_floor_rel": f(self.pred_floor_rel),
            "wall_budget_secs": self.wall_budget.map(|d| d.as_secs_f64()),
            "audit": self.audit,
            "record_iterates": self.record_iterates,
            "scalar": std::any::type_name::<T>(),
        })
    }
}

/// `ared / pred`, or `None` when `pred` does not exceed `floor`.
pub fn compute_rho<T: Scalar>(ared: T, pred: T, floor: T) -> Option<T> {
    if pred > floor && pred.is_finite() && ared.is_finite() {
        Some(ared / pred)
    } else {
        None
    }
}

/// Regularization update. A rejected `rho` (`None`) counts as unsuccessful.
pub fn update_lambda<T: Scalar>(rho: Option<T>, lambda: T, cfg: &SolverConfig<T>) -> T {
    match rho {
        Some(r) if r >= cfg.eta2 => cfg.lambda_min.max(cfg.gamma2 * lambda),
        Some(r) if r >= cfg.eta1 => cfg.lambda_min.max(cfg.gamma1 * lambda),
        _ => cfg.gamma3 * lambda,
    }
}

/// Upper bound on the regularization weight implied by Lipschitz constants `lip`:
/// `max(lambda0, slack * gamma3 * K / (1 - eta1))`.
pub fn lambda_ceiling(q: u32, lip: &LipschitzSample, lambda0: f64, gamma3: f64, eta1: f64, slack: f64) -> f64 {
    let c = (q as f64 + 1.0) / q as f64;
    let k_taylor = c * lip.fine;
    let k_coarse = c * (lip.coarse + lip.fine * lip.kappa_r.powi(q as i32 + 1));
    let k = k_taylor.max(k_coarse);
    lambda0.max(slack * gamma3 * k / (1.0 - eta1))
}

/// Whether every `lambda` in the run, at every level, stays below [`lambda_ceiling`]
/// with a 10x slack on the sampled constants.
pub fn lambda_ceiling_check<T: Scalar>(report: &RunReport, lip: &LipschitzSample, cfg: &SolverConfig<T>) -> bool {
    let bound = lambda_ceiling(
        report.q,
        lip,
        cfg.lambda0.to_f64_lossy(),
        cfg.gamma3.to_f64_lossy(),
        cfg.eta1.to_f64_lossy(),
        10.0,
    );
    report.trace.iter().chain(&report.coarse_trace).all(|r| r.lambda <= bound)
}

/// One-level adaptive regularization of order `q`.
pub fn arq_minimize<T: Scalar>(
    objective: &dyn Objective<T>,
    x0: &[T],
    cfg: &SolverConfig<T>,
    order: Order,
) -> Result<RunReport> {
    let levels = [LevelRef { objective, transfer: None }];
    Run::new(&levels, cfg, order)?.execute(x0, "arq")
}

/// Multilevel adaptive regularization on `hierarchy`, starting at the finest level.
pub fn marq_minimize<T: Scalar>(
    hierarchy: &LevelHierarchy<T>,
    x0: &[T],
    cfg: &SolverConfig<T>,
    order: Order,
) -> Result<RunReport> {
    let levels: Vec<LevelRef<'_, T>> = (1..=hierarchy.num_levels())
        .map(|l| {
            let lev = hierarchy.level(l);
            LevelRef { objective: lev.objective.as_ref(), transfer: lev.transfer.as_ref() }
        })
        .collect();
    Run::new(&levels, cfg, order)?.execute(x0, "marq")
}

#[derive(Clone, Copy)]
struct LevelRef<'h, T> {
    objective: &'h dyn Objective<T>,
    /// Transfer to the level below.
    transfer: Option<&'h TransferPair<T>>,
}

struct Outcome<T> {
    x: Vec<T>,
    value: T,
    grad_norm: T,
    converged: bool,
    successes: usize,
    /// Sum of the actual reductions of the accepted steps.
    total_decrease: T,
    /// Largest sampled Lipschitz constant of the order-q derivative at this level.
    lip: f64,
}

struct Step<T> {
    s: Vec<T>,
    pred: T,
    kind: ModelKind,
    /// Data needed to audit the iteration once the trial point is known.
    coarse: Option<CoarseInfo<T>>,
    residual: T,
}

struct CoarseInfo<T> {
    s_coarse_norm: T,
    final_grad_norm: T,
    lip: f64,
    kappa_r: f64,
}

struct Run<'a, 'h, T> {
    levels: &'a [LevelRef<'h, T>],
    cfg: &'a SolverConfig<T>,
    order: Order,
    opts: SubproblemOptions<T>,
    flops: Vec<u64>,
    dense_flops: Vec<u64>,
    factorizations: Vec<usize>,
    trace: Vec<IterationRecord>,
    coarse_trace: Vec<IterationRecord>,
    audit: Vec<AuditRecord>,
    iterates: Vec<IterateSample>,
    lip_coarse: f64,
    kappa_r: f64,
    deadline: Option<Instant>,
    timed_out: bool,
    cycle: usize,
}

impl<'a, 'h, T: Scalar> Run<'a, 'h, T> {
    fn new(levels: &'a [LevelRef<'h, T>], cfg: &'a SolverConfig<T>, order: Order) -> Result<Self> {
        cfg.validate()?;
        let n = levels.len();
        for l in 2..=n {
            if levels[l - 1].transfer.is_none() {
                return Err(Error::invalid(format!("level {l} has no transfer to the level below")));
            }
        }
        Ok(Run {
            levels,
            cfg,
            order,
            opts: cfg.subproblem_options(),
            flops: vec![0; n],
            dense_flops: vec![0; n],
            factorizations: vec![0; n],
            trace: Vec::new(),
            coarse_trace: Vec::new(),
            audit: Vec::new(),
            iterates: Vec::new(),
            lip_coarse: 0.0,
            kappa_r: 0.0,
            deadline: None,
            timed_out: false,
            cycle: 0,
        })
    }

    fn execute(mut self, x0: &[T], method: &str) -> Result<RunReport> {
        let top = self.levels.len();
        let f = self.levels[top - 1].objective;
        crate::error::check_dim(f.dim(), x0.len())?;
        let start = Instant::now();
        self.deadline = self.cfg.wall_budget.map(|d| start + d);
        let eps = self.cfg.eps_at(top, top)?;
        let out = self.minimize_level(top, f, x0.to_vec(), self.cfg.lambda0, eps)?;
        let wall_time = start.elapsed();

        let it_t = self.trace.len();
        let it_f = self.trace.iter().filter(|r| r.model_kind == ModelKind::Taylor).count();
        let lipschitz = self.cfg.audit.then_some(LipschitzSample {
            fine: out.lip,
            coarse: self.lip_coarse,
            kappa_r: self.kappa_r,
        });
        Ok(RunReport {
            method: method.to_string(),
            q: self.order.q(),
            converged: out.converged,
            timed_out: self.timed_out,
            it_t,
            it_f,
            per_level_flops: self.flops.iter().rev().copied().collect(),
            per_level_dense_flops: self.dense_flops.iter().rev().copied().collect(),
            per_level_factorizations: self.factorizations.iter().rev().copied().collect(),
            rmse_final: None,
            final_value: out.value.to_f64_lossy(),
            final_grad_norm: out.grad_norm.to_f64_lossy(),
            epsilon: eps.to_f64_lossy(),
            trace: self.trace,
            coarse_trace: self.coarse_trace,
            audit: self.audit,
            lipschitz,
            iterates: self.iterates,
            solution: out.x.iter().map(|v| v.to_f64_lossy()).collect(),
            wall_time,
            config: self.cfg.record(),
        })
    }

    fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    fn out_of_time(&mut self) -> bool {
        if let Some(d) = self.deadline {
            if Instant::now() >= d {
                self.timed_out = true;
            }
        }
        self.timed_out
    }

    fn minimize_level(&mut self, l: usize, f: &dyn Objective<T>, x0: Vec<T>, lambda0: T, eps: T) -> Result<Outcome<T>> {
        let top = l == self.levels.len();
        let cfg = self.cfg;
        let second = self.order == Order::Second;
        let mut x = x0;
        let mut fx = f.value(&x)?;
        let mut g = f.gradient(&x)?;
        let mut hess = if second { Some(f.hessian(&x)?) } else { None };
        let mut lambda = lambda0;
        let mut lip = 0.0f64;
        let mut k = 0usize;
        let mut successes = 0usize;
        let mut last_recursive = false;
        let mut converged = false;
        let mut total_decrease = T::zero();

        if cfg.record_iterates {
            self.push_iterate(l, 0, &x);
        }
        loop {
            let gnorm = norm2(&g);
            if gnorm <= eps {
                converged = true;
                break;
            }
            if k >= cfg.max_outer_iters || self.out_of_time() {
                break;
            }
            if !top {
                match cfg.recursion_policy {
                    RecursionPolicy::FreeForm { max_coarse_iters } if k >= max_coarse_iters => break,
                    RecursionPolicy::FixedForm { max_successful } if successes >= max_successful => break,
                    _ => {}
                }
            }
            if top {
                self.cycle = k;
            }

            let flops_before = self.total_flops();
            let descend = l > 1
                && !(cfg.descend_policy == DescendPolicy::Alternate && last_recursive)
                && {
                    let r = self.levels[l - 1].transfer.expect("validated").restriction();
                    descend_test(norm2(&r.matvec(&g)), gnorm, cfg.kappa_h, self.eps_for(l - 1)?)
                };

            let step = if descend {
                self.recursive_step(l, &x, &g, hess.as_ref(), lambda)?
            } else {
                self.taylor_step(l, &g, hess.as_ref(), lambda)?
            };
            last_recursive = descend;

            let (rho, trial) = match &step {
                Some(st) => match self.trial(f, &x, fx, &g, st)? {
                    Some((xt, ft, ared, floor)) => (compute_rho(ared, st.pred, floor), Some((xt, ft, ared))),
                    None => (None, None),
                },
                None => (None, None),
            };
            let successful = rho.is_some_and(|r| r >= cfg.eta1);
            let step_norm = step.as_ref().map_or(T::zero(), |s| norm2(&s.s));
            let kind = step.as_ref().map_or(if descend { ModelKind::Coarse } else { ModelKind::Taylor }, |s| s.kind);
            let rec = IterationRecord {
                level: l,
                cycle: self.cycle,
                iterate_index: k,
                model_kind: kind,
                rho: rho.map(|r| r.to_f64_lossy()),
                lambda: lambda.to_f64_lossy(),
                step_norm: step_norm.to_f64_lossy(),
                f_value: fx.to_f64_lossy(),
                grad_norm: gnorm.to_f64_lossy(),
                successful,
                flops_this_iter: self.total_flops() - flops_before,
                pred: step.as_ref().map_or(0.0, |s| s.pred.to_f64_lossy()),
            };
            if top {
                self.trace.push(rec);
            } else {
                self.coarse_trace.push(rec);
            }

            if successful {
                let (xt, ft, ared) = trial.expect("successful steps have a trial point");
                let st = step.as_ref().expect("successful steps have a step");
                let gt = f.gradient(&xt)?;
                let ht = if second { Some(f.hessian(&xt)?) } else { None };
                if cfg.audit {
                    let sample = match (&hess, &ht) {
                        (Some(h0), Some(h1)) => h1.add_scaled(-T::one(), h0)?.norm2_estimate(30).to_f64_lossy(),
                        _ => norm2(&sub(&gt, &g)).to_f64_lossy(),
                    } / step_norm.to_f64_lossy();
                    if sample.is_finite() {
                        lip = lip.max(sample);
                    }
                    // Level below which the computed gradient is rounding noise.
                    let scale = match &ht {
                        Some(h1) => h1.norm_inf().to_f64_lossy() * norm2(&xt).to_f64_lossy(),
                        None => lip * norm2(&xt).to_f64_lossy(),
                    } + norm2(&g).to_f64_lossy();
                    let grad_floor = 64.0 * T::epsilon().to_f64_lossy() * (1.0 + scale);
                    self.audit_success(l, st, ared, &gt, lambda, lip, grad_floor)?;
                }
                x = xt;
                fx = ft;
                total_decrease += ared;
                g = gt;
                hess = ht;
                successes += 1;
                if cfg.record_iterates {
                    self.push_iterate(l, k + 1, &x);
                }
            }
            lambda = update_lambda(rho, lambda, cfg);
            k += 1;
        }

        if !top {
            self.lip_coarse = self.lip_coarse.max(lip);
        }
        let grad_norm = norm2(&g);
        Ok(Outcome { x, value: fx, grad_norm, converged, successes, lip, total_decrease })
    }

    /// Trial point `x + s` with its value, the actual reduction and the
    /// `pred` floor that goes with the way the reduction was computed.
    /// `None` when the objective overflows there.
    #[allow(clippy::type_complexity)]
    fn trial(&self, f: &dyn Objective<T>, x: &[T], fx: T, g: &[T], st: &Step<T>) -> Result<Option<(Vec<T>, T, T, T)>> {
        let s = &st.s;
        let xt: Vec<T> = x.iter().zip(s).map(|(&a, &b)| a + b).collect();
        let ft = match f.value(&xt) {
            Ok(v) => v,
            Err(Error::ObjectiveOverflow(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let rel = self.cfg.pred_floor_rel;
        // A reduction that is accurate relative to its first-order term, not to the size of f.
        let first_order_floor = rel * norm2(g) * norm2(s);
        match f.value_change(x, s) {
            Some(Ok(d)) => return Ok(Some((xt, ft, -d, first_order_floor))),
            Some(Err(Error::ObjectiveOverflow(_))) => return Ok(None),
            Some(Err(e)) => return Err(e),
            None => {}
        }
        let floor = rel * (T::one() + fx.abs());
        if st.pred > T::lit(1e4) * floor {
            return Ok(Some((xt, ft, fx - ft, floor)));
        }
        // The difference of values is mostly rounding noise here; use the trapezoid rule on the gradients.
        let gt = match f.gradient(&xt) {
            Ok(v) => v,
            Err(Error::ObjectiveOverflow(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let ared = -T::lit(0.5) * (dot(g, s) + dot(&gt, s));
        Ok(Some((xt, ft, ared, first_order_floor)))
    }

    fn eps_for(&self, l: usize) -> Result<T> {
        self.cfg.eps_at(l, self.levels.len())
    }

    fn push_iterate(&mut self, l: usize, k: usize, x: &[T]) {
        self.iterates.push(IterateSample {
            level: l,
            cycle: self.cycle,
            iterate_index: k,
            x: x.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }

    fn charge(&mut self, l: usize, factorizations: usize, flops: u64, dense: u64) {
        self.flops[l - 1] += flops;
        self.dense_flops[l - 1] += dense;
        self.factorizations[l - 1] += factorizations;
    }

    /// Taylor step at level `l`; `None` when the step computation failed.
    fn taylor_step(&mut self, l: usize, g: &[T], hess: Option<&SymBand<T>>, lambda: T) -> Result<Option<Step<T>>> {
        let res = match (self.order, hess) {
            (Order::First, _) => solve_q1(g, lambda),
            (Order::Second, Some(b)) => solve_q2(g, b, lambda, &self.opts),
            (Order::Second, None) => unreachable!("Hessian is kept for second-order runs"),
        };
        match res {
            Ok(r) => {
                self.charge(l, r.factorizations, r.flops, r.dense_flops);
                Ok(Some(Step { s: r.step, pred: r.model_decrease, kind: ModelKind::Taylor, coarse: None, residual: r.residual_norm }))
            }
            Err(Error::SubsolverFailure { reason, factorizations, flops }) => {
                log::debug!("level {l}: step computation failed: {reason}");
                let dense = factorizations as u64 * dense_model_flops(g.len());
                self.charge(l, factorizations, flops, dense);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Recursive step: minimize the corrected model one level down and prolongate.
    fn recursive_step(
        &mut self,
        l: usize,
        x: &[T],
        g: &[T],
        hess: Option<&SymBand<T>>,
        lambda: T,
    ) -> Result<Option<Step<T>>> {
        let pair = self.levels[l - 1].transfer.expect("validated");
        let coarse_obj = self.levels[l - 2].objective;
        let cm = build_coarse_model(g, hess, x, pair, coarse_obj, self.order)?;
        if self.cfg.audit {
            self.audit_coherence(l, &cm, g, hess, pair)?;
        }
        let xh0 = cm.start().to_vec();
        let eps = self.eps_for(l - 1)?;
        let out = match self.minimize_level(l - 1, &cm, xh0.clone(), lambda, eps) {
            Ok(o) => o,
            Err(Error::ObjectiveOverflow(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if out.successes == 0 {
            return Ok(None);
        }
        let s_coarse = sub(&out.x, &xh0);
        let mut lip_coarse = out.lip;
        if self.cfg.audit {
            // Secant estimate over the whole lower-level displacement.
            let s_norm = norm2(&s_coarse).to_f64_lossy();
            let seg = match self.order {
                Order::Second => cm.hessian(&out.x)?.add_scaled(-T::one(), &cm.hessian(&xh0)?)?.norm2_estimate(30),
                Order::First => norm2(&sub(&cm.gradient(&out.x)?, &cm.gradient(&xh0)?)),
            }
            .to_f64_lossy()
                / s_norm;
            if seg.is_finite() {
                lip_coarse = lip_coarse.max(seg);
                self.lip_coarse = self.lip_coarse.max(seg);
            }
            self.kappa_r = self.kappa_r.max(pair.kappa_r().to_f64_lossy());
        }
        Ok(Some(Step {
            s: pair.prolong(&s_coarse),
            pred: out.total_decrease,
            kind: ModelKind::Coarse,
            coarse: Some(CoarseInfo {
                s_coarse_norm: norm2(&s_coarse),
                final_grad_norm: out.grad_norm,
                lip: lip_coarse,
                kappa_r: pair.kappa_r().to_f64_lossy(),
            }),
            residual: T::zero(),
        }))
    }

    fn record(&mut self, check: &str, level: usize, value: f64, bound: f64) {
        let rec = AuditRecord::new(check, level, self.cycle, value, bound);
        if !rec.passed {
            log::warn!("audit check {check} failed at level {level}: {value:e} > {bound:e}");
        }
        self.audit.push(rec);
    }

    /// First- and second-order coherence of the lower-level model at its start point.
    fn audit_coherence(
        &mut self,
        l: usize,
        cm: &crate::multilevel::CoarseModel<'_, T>,
        g: &[T],
        hess: Option<&SymBand<T>>,
        pair: &TransferPair<T>,
    ) -> Result<()> {
        let x0 = cm.start();
        let rg = pair.restrict(g);
        let cg = cm.gradient(x0)?;
        let d1 = norm2(&sub(&cg, &rg)).to_f64_lossy();
        let gn = norm2(g).to_f64_lossy();
        self.record("coherence_first_order", l - 1, d1, 1e-12 * (1.0 + gn));

        if let (Order::Second, Some(b)) = (self.order, hess) {
            let hc = cm.hessian(x0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(((self.cycle as u64) << 8) ^ l as u64);
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let mut s: Vec<T> = (0..x0.len()).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
                let sn = norm2(&s);
                s.iter_mut().for_each(|v| *v /= sn);
                let lhs = hc.quad_form(&s);
                let rhs = dot(&pair.restriction().transpose().matvec(&s), &b.matvec(&pair.prolong(&s)));
                worst = worst.max((lhs - rhs).abs().to_f64_lossy());
            }
            self.record("coherence_second_order", l - 1, worst, 1e-10);
        }
        Ok(())
    }

    /// Checks tied to an accepted step: descent, predicted-reduction lower bound
    /// and the step-versus-gradient bound.
    #[allow(clippy::too_many_arguments)]
    fn audit_success(
        &mut self,
        l: usize,
        st: &Step<T>,
        ared: T,
        g_new: &[T],
        lambda: T,
        lip: f64,
        grad_floor: f64,
    ) -> Result<()> {
        let q = self.order.q() as i32;
        let lam = lambda.to_f64_lossy();
        let theta = self.cfg.theta.to_f64_lossy();
        self.record("monotone_descent", l, -ared.to_f64_lossy(), 0.0);
        match &st.coarse {
            None => {
                let sn = norm2(&st.s).to_f64_lossy();
                let pred_lb = lam / (q as f64 + 1.0) * sn.powi(q + 1);
                // Rounding slack relative to the model decrease itself.
                let pred = st.pred.to_f64_lossy();
                self.record("pred_lower_bound", l, pred_lb - pred, 1e-10 * pred.abs().max(pred_lb));
                let gn = norm2(g_new).to_f64_lossy();
                let resid = st.residual.to_f64_lossy();
                let bound = (10.0 * lip + lam) * sn.powi(q) + (theta * sn.powi(q)).max(resid) + grad_floor;
                self.record("step_gradient_bound", l, gn, bound);
            }
            Some(c) => {
                let pair = self.levels[l - 1].transfer.expect("validated");
                let rg = norm2(&pair.restrict(g_new)).to_f64_lossy();
                let sh = c.s_coarse_norm.to_f64_lossy();
                let kr = c.kappa_r;
                let bound = (10.0 * lip * kr.powi(q + 1) + 10.0 * c.lip + lam) * sh.powi(q)
                    + (theta * sh.powi(q)).max(c.final_grad_norm.to_f64_lossy())
                    + pair.norm_r().to_f64_lossy() * grad_floor;
                self.record("coarse_step_gradient_bound", l, rg, bound);
                self.record("pred_positive", l, -st.pred.to_f64_lossy(), 0.0);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::analytic;

    type C = SolverConfig<f64>;

    #[test]
    fn rho_examples() {
        assert_eq!(compute_rho(0.9, 1.0, 1e-16), Some(0.9));
        assert_eq!(compute_rho(1.0, 1e-18, 1e-16), None);
        assert_eq!(compute_rho(1.0, -1.0, 1e-16), None);
    }

    #[test]
    fn lambda_update_examples() {
        let c = C::default();
        assert!((update_lambda(Some(0.8), 0.05, &c) - 0.025).abs() < 1e-15);
        assert!((update_lambda(Some(0.5), 0.05, &c) - 0.0425).abs() < 1e-15);
        assert!((update_lambda(Some(0.05), 0.05, &c) - 0.1).abs() < 1e-15);
        assert!((update_lambda(None, 0.05, &c) - 0.1).abs() < 1e-15);
        assert_eq!(update_lambda(Some(1.0), 1e-8, &c), 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(C::default().validate().is_ok());
        let bad = [
            C { eta1: 0.8, ..C::default() },
            C { gamma1: 0.4, ..C::default() },
            C { gamma3: 1.0, ..C::default() },
            C { lambda0: 1e-9, ..C::default() },
            C { theta: 0.0, ..C::default() },
            C { kappa_h: 1.0, ..C::default() },
            C { recursion_policy: RecursionPolicy::FixedForm { max_successful: 0 }, ..C::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn quadratic_has_unit_rho_and_shrinking_lambda() {
        let f = analytic::diagonal_quadratic(vec![1.0, 2.0, 3.0], vec![0.0; 3]);
        let r = arq_minimize(&f, &[1.0, -2.0, 0.5], &C::default(), Order::Second).unwrap();
        assert!(r.converged);
        for w in r.trace.windows(2) {
            assert!(w[1].lambda < w[0].lambda || w[1].lambda == 1e-8);
        }
        for rec in &r.trace {
            assert!((rec.rho.unwrap() - 1.0).abs() < 1e-10, "rho = {:?}", rec.rho);
        }
    }

    #[test]
    fn first_step_on_half_square() {
        let f = analytic::diagonal_quadratic(vec![1.0], vec![0.0]);
        let cfg = C { record_iterates: true, ..C::default() };
        let r = arq_minimize(&f, &[1.0], &cfg, Order::Second).unwrap();
        let x1 = r.iterates[1].x[0];
        assert!((x1 - 1.0 + 0.95445).abs() < 1e-4, "x1 = {x1}");
    }

    #[test]
    fn rosenbrock_converges() {
        let f = analytic::rosenbrock();
        let r = arq_minimize(&f, &[-1.2, 1.0], &C::default(), Order::Second).unwrap();
        assert!(r.converged);
        let g = f.gradient(&r.solution).unwrap();
        assert!(norm2(&g) <= 1e-7);
    }

    #[test]
    fn first_order_on_quadratic() {
        let f = analytic::diagonal_quadratic(vec![1.0, 2.0], vec![1.0, -1.0]);
        let r = arq_minimize(&f, &[0.0, 0.0], &C::default(), Order::First).unwrap();
        assert!(r.converged);
        assert!(r.total_flops() == 0);
    }

    #[test]
    fn single_level_marq_equals_arq() {
        let h = LevelHierarchy::single(Box::new(analytic::rosenbrock::<f64>()));
        let a = arq_minimize(h.top().objective.as_ref(), &[-1.2, 1.0], &C::default(), Order::Second).unwrap();
        let m = marq_minimize(&h, &[-1.2, 1.0], &C::default(), Order::Second).unwrap();
        assert_eq!(a.trace, m.trace);
        assert_eq!(a.solution, m.solution);
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let f = analytic::rosenbrock();
        let cfg = C { max_outer_iters: 3, ..C::default() };
        let r = arq_minimize(&f, &[-1.2, 1.0], &cfg, Order::Second).unwrap();
        assert!(!r.converged);
        assert_eq!(r.it_t, 3);
    }

    #[test]
    fn lambda_ceiling_examples() {
        let lip = LipschitzSample::default();
        assert_eq!(lambda_ceiling(2, &lip, 0.05, 2.0, 0.1, 10.0), 0.05);
        let lip = LipschitzSample { fine: 1.0, coarse: 0.0, kappa_r: 0.0 };
        assert!((lambda_ceiling(2, &lip, 0.05, 2.0, 0.1, 1.0) - 2.0 * 1.5 / 0.9).abs() < 1e-12);
    }
}
