//! Run reports, flop accounting and ARC-vs-MARC comparison statistics.
//!
//! # CSV trace schema
//!
//! One row per iteration, top level first followed by every lower-level
//! iteration, with the header
//!
//! ```text
//! level,cycle,iterate_index,model_kind,rho,lambda,step_norm,f_value,grad_norm,successful,flops_this_iter
//! ```
//!
//! `level` counts from 1 at the coarsest grid. `cycle` is the index of the
//! top-level iteration the row belongs to. `rho` is empty when the predicted
//! reduction was below the floor. `flops_this_iter` includes the flops of all
//! recursive calls made by that iteration.

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Taylor,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub cycle: usize,
    pub iterate_index: usize,
    pub model_kind: ModelKind,
    pub rho: Option<f64>,
    /// Regularization weight used to compute this step.
    pub lambda: f64,
    pub step_norm: f64,
    /// Objective value at the iterate the step starts from.
    pub f_value: f64,
    pub grad_norm: f64,
    pub successful: bool,
    pub flops_this_iter: u64,
    /// Predicted reduction used as the denominator of `rho`.
    pub pred: f64,
}

/// Outcome of one in-run invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub check: String,
    pub level: usize,
    pub cycle: usize,
    /// Observed quantity; passes when `value <= bound`.
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl AuditRecord {
    pub fn new(check: &str, level: usize, cycle: usize, value: f64, bound: f64) -> Self {
        AuditRecord { check: check.into(), level, cycle, value, bound, passed: value <= bound }
    }
}

/// Largest sampled Lipschitz constants of the `q`-th derivative along a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSample {
    /// Top-level objective.
    pub fine: f64,
    /// Lower-level objectives, over all recursion entries.
    pub coarse: f64,
    /// `max(|P|, |R|)` over the transfers used.
    pub kappa_r: f64,
}

/// Iterate snapshot, recorded only when requested in the solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateSample {
    pub level: usize,
    pub cycle: usize,
    pub iterate_index: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub q: u32,
    pub converged: bool,
    pub timed_out: bool,
    /// Total top-level iterations.
    pub it_t: usize,
    /// Top-level iterations that used the Taylor model.
    pub it_f: usize,
    /// Factorization flops by level, finest first.
    pub per_level_flops: Vec<u64>,
    /// Same factorizations priced at the dense-matrix cost.
    pub per_level_dense_flops: Vec<u64>,
    pub per_level_factorizations: Vec<usize>,
    pub rmse_final: Option<f64>,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub epsilon: f64,
    /// Top-level trace, one record per top-level iteration.
    pub trace: Vec<IterationRecord>,
    /// Iterations on all lower levels, in execution order.
    pub coarse_trace: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditRecord>,
    pub lipschitz: Option<LipschitzSample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<IterateSample>,
    pub solution: Vec<f64>,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    /// Every solver constant used for the run.
    pub config: serde_json::Value,
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl RunReport {
    pub fn total_flops(&self) -> u64 {
        self.per_level_flops.iter().sum()
    }

    pub fn total_dense_flops(&self) -> u64 {
        self.per_level_dense_flops.iter().sum()
    }

    /// FAIL in the comparison tables: not converged, for any reason.
    pub fn failed(&self) -> bool {
        !self.converged
    }

    pub fn audit_passed(&self) -> bool {
        self.audit.iter().all(|a| a.passed)
    }

    pub fn max_lambda(&self) -> f64 {
        self.trace.iter().map(|r| r.lambda).fold(0.0, f64::max)
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        &a == other
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Writes the trace in the CSV schema documented at module level.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "level",
            "cycle",
            "iterate_index",
            "model_kind",
            "rho",
            "lambda",
            "step_norm",
            "f_value",
            "grad_norm",
            "successful",
            "flops_this_iter",
        ])?;
        for r in self.trace.iter().chain(&self.coarse_trace) {
            wr.write_record([
                r.level.to_string(),
                r.cycle.to_string(),
                r.iterate_index.to_string(),
                match r.model_kind {
                    ModelKind::Taylor => "taylor".to_string(),
                    ModelKind::Coarse => "coarse".to_string(),
                },
                r.rho.map(|v| format!("{v:e}")).unwrap_or_default(),
                format!("{:e}", r.lambda),
                format!("{:e}", r.step_norm),
                format!("{:e}", r.f_value),
                format!("{:e}", r.grad_norm),
                r.successful.to_string(),
                r.flops_this_iter.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `sum(arc flops) / sum(marc flops over all levels)`.
pub fn save_ratio(arc: &RunReport, marc: &RunReport) -> Result<f64> {
    let m = marc.total_flops();
    if m == 0 {
        return Err(Error::invalid("multilevel run recorded no factorization flops"));
    }
    Ok(arc.total_flops() as f64 / m as f64)
}

/// Means over the converged runs of one method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub runs: usize,
    pub failures: usize,
    pub mean_it_t: f64,
    pub mean_it_f: f64,
    pub mean_rmse: Option<f64>,
    pub mean_flops: f64,
}

impl MethodStats {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Self {
        let all: Vec<&RunReport> = reports.into_iter().collect();
        let ok: Vec<&RunReport> = all.iter().copied().filter(|r| r.converged).collect();
        let n = ok.len() as f64;
        let mean = |f: &dyn Fn(&RunReport) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / n };
        let rmses: Vec<f64> = ok.iter().filter_map(|r| r.rmse_final).collect();
        MethodStats {
            runs: all.len(),
            failures: all.len() - ok.len(),
            mean_it_t: mean(&|r| r.it_t as f64),
            mean_it_f: mean(&|r| r.it_f as f64),
            mean_rmse: if rmses.is_empty() { None } else { Some(rmses.iter().sum::<f64>() / rmses.len() as f64) },
            mean_flops: mean(&|r| r.total_flops() as f64),
        }
    }
}

/// Paired ARC / MARC runs on the same instance and starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub arc: RunReport,
    pub marc: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub arc_stats: MethodStats,
    pub marc_stats: MethodStats,
    /// `None` when no repetition had both methods converge.
    pub save_min: Option<f64>,
    pub save_avg: Option<f64>,
    pub save_max: Option<f64>,
    /// Save ratio per repetition, `None` when either run failed.
    pub saves: Vec<Option<f64>>,
}

/// Aggregates paired repetitions; FAIL runs are excluded from the save statistics.
pub fn aggregate(runs: &[PairedRun]) -> Result<ComparisonSummary> {
    if runs.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list of runs"));
    }
    let saves: Vec<Option<f64>> = runs
        .iter()
        .map(|p| if p.arc.converged && p.marc.converged { save_ratio(&p.arc, &p.marc).ok() } else { None })
        .collect();
    let valid: Vec<f64> = saves.iter().flatten().copied().collect();
    let (save_min, save_avg, save_max) = if valid.is_empty() {
        (None, None, None)
    } else {
        (
            Some(valid.iter().copied().fold(f64::INFINITY, f64::min)),
            Some(valid.iter().sum::<f64>() / valid.len() as f64),
            Some(valid.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        )
    };
    Ok(ComparisonSummary {
        arc_stats: MethodStats::from_reports(runs.iter().map(|p| &p.arc)),
        marc_stats: MethodStats::from_reports(runs.iter().map(|p| &p.marc)),
        save_min,
        save_avg,
        save_max,
        saves,
    })
}

impl ComparisonSummary {
    /// Table-style text summary.
    pub fn table(&self, title: &str) -> String {
        let fmt_stats = |name: &str, s: &MethodStats, save: &str| {
            if s.failures == s.runs {
                format!("{name:<5} | FAIL ({}/{} runs)            | FAIL     | {save}\n", s.failures, s.runs)
            } else {
                format!(
                    "{name:<5} | {:>5.1}/{:<5.1} ({} of {} failed) | {:8.1e} | {save}\n",
                    s.mean_it_t,
                    s.mean_it_f,
                    s.failures,
                    s.runs,
                    s.mean_rmse.unwrap_or(f64::NAN)
                )
            }
        };
        let save = match (self.save_min, self.save_avg, self.save_max) {
            (Some(a), Some(b), Some(c)) => format!("{a:.1}-{b:.1}-{c:.1}"),
            _ => "-".to_string(),
        };
        let mut out = format!("{title}\nmethod| it_T/it_f                   | RMSE     | save\n");
        out += &fmt_stats("ARC", &self.arc_stats, "");
        out += &fmt_stats("MARC", &self.marc_stats, &save);
        out
    }
}
