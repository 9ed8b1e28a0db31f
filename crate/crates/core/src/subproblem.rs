//! Approximate minimization of the regularized model.
//!
//! For `q = 1` the minimizer of `g's + lambda/2 |s|^2` is `-g / lambda`.
//! For `q = 2` the global minimizer of `g's + s'Bs/2 + lambda/3 |s|^3` satisfies
//!
//! ```text
//! (B + sigma I) s = -g,   sigma = lambda |s|,   B + sigma I >= 0
//! ```
//!
//! so we search the scalar `sigma` with a safeguarded Newton iteration on
//! `phi(sigma) = |s(sigma)| - sigma / lambda`, one Cholesky factorization of
//! `B + sigma I` per trial. Trial shifts where the factorization breaks down
//! raise the lower bracket. If `phi` stays negative all the way down to the
//! definiteness boundary (the hard case) the step is completed along an
//! approximate eigenvector of the leftmost eigenvalue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::linalg::{axpy, dense_model_flops, dot, norm2, BandCholesky, SymBand};
use crate::model::{Order, RegularizedModel};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubproblemOptions<T> {
    /// Inner stopping constant: `|grad of regularized model| <= theta |s|^q`.
    pub theta: T,
    /// Cap on secular iterations (factorizations).
    pub max_iters: usize,
    /// Required `|sigma - lambda |s|| <= secular_tol * (1 + sigma)` on exit.
    pub secular_tol: T,
}

impl<T: Scalar> Default for SubproblemOptions<T> {
    fn default() -> Self {
        SubproblemOptions { theta: T::lit(0.5), max_iters: 100, secular_tol: T::lit(1e-8) }
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemResult<T> {
    pub step: Vec<T>,
    /// Shift with `(B + sigma I) s = -g`; `lambda |s|` for `q = 1` as well.
    pub sigma: T,
    /// Taylor model decrease from `0` to `step`.
    pub model_decrease: T,
    /// Norm of the regularized model gradient at `step`.
    pub residual_norm: T,
    pub factorizations: usize,
    /// Operations actually executed by the factorizations.
    pub flops: u64,
    /// Same factorizations priced at the dense `n^3/3 + 2n^2`.
    pub dense_flops: u64,
    pub hard_case: bool,
}

/// Closed-form minimizer for the first-order model.
pub fn solve_q1<T: Scalar>(g: &[T], lambda: T) -> Result<SubproblemResult<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let step: Vec<T> = g.iter().map(|&gi| -gi / lambda).collect();
    let model_decrease = -dot(g, &step);
    let sigma = lambda * norm2(&step);
    Ok(SubproblemResult {
        step,
        sigma,
        model_decrease,
        residual_norm: T::zero(),
        factorizations: 0,
        flops: 0,
        dense_flops: 0,
        hard_case: false,
    })
}

/// Dispatches on the model order.
pub fn solve_model<T: Scalar>(m: &RegularizedModel<T>, opts: &SubproblemOptions<T>) -> Result<SubproblemResult<T>> {
    match (m.order(), m.hessian()) {
        (Order::First, _) => solve_q1(m.gradient(), m.lambda()),
        (Order::Second, Some(b)) => solve_q2(m.gradient(), b, m.lambda(), opts),
        (Order::Second, None) => Err(Error::invalid("second-order model without Hessian")),
    }
}

struct Counters {
    factorizations: usize,
    flops: u64,
}

/// Cubic-regularized subproblem by secular Newton iteration on Cholesky factorizations.
pub fn solve_q2<T: Scalar>(
    g: &[T],
    b: &SymBand<T>,
    lambda: T,
    opts: &SubproblemOptions<T>,
) -> Result<SubproblemResult<T>> {
    check_dim(g.len(), b.dim())?;
    if !(lambda > T::zero()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if !(opts.theta >= T::zero()) {
        return Err(Error::invalid("theta must be non-negative"));
    }
    let zero = T::zero();
    let one = T::one();
    let half = T::lit(0.5);
    let gnorm = norm2(g);
    let neg_g: Vec<T> = g.iter().map(|&x| -x).collect();
    let mut ctr = Counters { factorizations: 0, flops: 0 };

    // Any sigma above this makes B + sigma I strictly diagonally dominant.
    let sigma_safe = zero.max(-b.gershgorin_lower()) * (one + T::lit(1e-10)) + T::lit(1e-12) * (one + b.norm_inf());

    let mut sigma = lambda * gnorm / (one + b.norm_inf());
    // phi > 0 below the root, phi < 0 above it.
    let mut lo = zero;
    let mut hi = T::infinity();
    // Largest shift known to break the factorization.
    let mut fail_max = T::neg_infinity();
    let mut last_ok: Option<(T, BandCholesky<T>, Vec<T>)> = None;

    for _ in 0..opts.max_iters {
        if hi.is_finite() && fail_max.is_finite() && hi - fail_max <= T::lit(1e-9) * (one + hi) {
            if let Some((s_hi, chol, s)) = last_ok.take() {
                return Ok(hard_case_step(g, b, lambda, s_hi, &chol, s, ctr));
            }
        }
        match b.cholesky(sigma) {
            Err(fail) => {
                ctr.factorizations += 1;
                ctr.flops += fail.flops;
                fail_max = fail_max.max(sigma);
                let upper = if hi.is_finite() { hi } else { sigma_safe.max(sigma * T::lit(2.0) + T::lit(1e-12)) };
                sigma = half * (fail_max.max(lo) + upper);
            }
            Ok(chol) => {
                ctr.factorizations += 1;
                ctr.flops += chol.flops();
                let s = chol.solve(&neg_g);
                let ns = norm2(&s);
                let phi = ns - sigma / lambda;
                if (sigma - lambda * ns).abs() <= opts.secular_tol * (one + sigma) {
                    let residual = residual_norm(g, b, lambda, &s);
                    // Below the rounding level of the residual itself the theta rule cannot bite.
                    let floor = T::lit(64.0) * T::epsilon() * (gnorm + (b.norm_inf() + sigma) * ns);
                    if residual <= (opts.theta * ns * ns).max(floor) {
                        return Ok(finish(g, b, s, sigma, residual, ctr, false));
                    }
                }
                let next = if ns > zero {
                    let w = chol.solve_lower(&s);
                    let dphi = -dot(&w, &w) / ns - one / lambda;
                    sigma - phi / dphi
                } else {
                    zero
                };
                if phi > zero {
                    lo = lo.max(sigma);
                } else {
                    hi = hi.min(sigma);
                    last_ok = Some((sigma, chol, s));
                }
                let lower = lo.max(fail_max);
                sigma = if next > lower && next < hi {
                    next
                } else if hi.is_finite() {
                    half * (lower + hi)
                } else {
                    (sigma * T::lit(2.0)).max(sigma_safe).max(T::lit(1e-12))
                };
            }
        }
    }
    Err(Error::SubsolverFailure {
        reason: format!("secular iteration did not converge in {} factorizations", opts.max_iters),
        factorizations: ctr.factorizations,
        flops: ctr.flops,
    })
}

fn residual_norm<T: Scalar>(g: &[T], b: &SymBand<T>, lambda: T, s: &[T]) -> T {
    let mut r = b.matvec(s);
    axpy(T::one(), g, &mut r);
    axpy(lambda * norm2(s), s, &mut r);
    norm2(&r)
}

fn finish<T: Scalar>(
    g: &[T],
    b: &SymBand<T>,
    step: Vec<T>,
    sigma: T,
    residual_norm: T,
    ctr: Counters,
    hard_case: bool,
) -> SubproblemResult<T> {
    let model_decrease = -dot(g, &step) - T::lit(0.5) * b.quad_form(&step);
    SubproblemResult {
        step,
        sigma,
        model_decrease,
        residual_norm,
        factorizations: ctr.factorizations,
        flops: ctr.flops,
        dense_flops: ctr.factorizations as u64 * dense_model_flops(g.len()),
        hard_case,
    }
}

/// Completes `s(sigma)` along the leftmost eigenvector so that `|step| = sigma / lambda`.
#[allow(clippy::too_many_arguments)]
fn hard_case_step<T: Scalar>(
    g: &[T],
    b: &SymBand<T>,
    lambda: T,
    sigma: T,
    chol: &BandCholesky<T>,
    s: Vec<T>,
    ctr: Counters,
) -> SubproblemResult<T> {
    let n = g.len();
    // inverse iteration on the nearly singular B + sigma I
    let mut u: Vec<T> = (0..n).map(|i| T::one() + T::lit(((i * 37) % 11) as f64 / 11.0)).collect();
    for _ in 0..8 {
        let nu = norm2(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        u = chol.solve(&u);
    }
    let nu = norm2(&u);
    u.iter_mut().for_each(|x| *x /= nu);

    let target = sigma / lambda;
    let su = dot(&s, &u);
    let ss = dot(&s, &s);
    let disc = (su * su - ss + target * target).max(T::zero()).sqrt();
    let m = RegularizedModel::second_order(T::zero(), g.to_vec(), b.clone(), lambda)
        .expect("validated dimensions");
    let candidate = |tau: T| {
        let mut st = s.clone();
        axpy(tau, &u, &mut st);
        st
    };
    let a = candidate(-su + disc);
    let c = candidate(-su - disc);
    let va = m.regularized_value(&a).unwrap_or(T::infinity());
    let vc = m.regularized_value(&c).unwrap_or(T::infinity());
    let step = if va <= vc { a } else { c };
    let res = residual_norm(g, b, lambda, &step);
    finish(g, b, step, sigma, res, ctr, true)
}

/// Brute-force grid minimizer of the cubic-regularized model, for `dim <= 3`.
///
/// Scans `[-radius, radius]^dim` with spacing `grid_step`. When the full grid
/// would exceed `2e7` points the scan runs coarse to fine: a full grid over the
/// box at a spacing that fits the budget, then repeated full scans of a window
/// of a few cells around every grid-local minimum from the previous pass, at a
/// spacing ten times finer, ending at `grid_step`.
pub fn solve_q2_smallscale_oracle<T: Scalar>(
    g: &[T],
    b: &SymBand<T>,
    lambda: T,
    radius: T,
    grid_step: T,
) -> Result<Vec<T>> {
    let dim = g.len();
    check_dim(dim, b.dim())?;
    if dim == 0 || dim > 3 {
        return Err(Error::invalid(format!("grid oracle supports 1 <= dim <= 3, got {dim}")));
    }
    if !(grid_step > T::zero()) || !(radius > T::zero()) {
        return Err(Error::invalid("grid radius and step must be positive"));
    }
    let m = RegularizedModel::second_order(T::zero(), g.to_vec(), b.clone(), lambda)?;
    let eval = |p: &[T]| m.regularized_value(p).unwrap_or(T::infinity());
    const BUDGET: f64 = 2e7;

    let per_axis = |r: T, h: T| (r / h).to_f64_lossy().floor() as i64;
    let full = (2 * per_axis(radius, grid_step) + 1) as f64;
    if full.powi(dim as i32) <= BUDGET {
        return Ok(scan(&eval, &vec![T::zero(); dim], per_axis(radius, grid_step), grid_step, 1)
            .into_iter()
            .next()
            .map(|(p, _)| p)
            .unwrap());
    }

    let side = BUDGET.powf(1.0 / dim as f64).floor() as i64;
    let half = (side - 1) / 2;
    let mut h = radius / T::lit(half as f64);
    let mut cands = scan(&eval, &vec![T::zero(); dim], half, h, 6);
    while h > grid_step {
        let next_h = (h / T::lit(10.0)).max(grid_step);
        let k = per_axis(h * T::lit(3.0), next_h);
        let mut refined: Vec<(Vec<T>, T)> = cands
            .iter()
            .flat_map(|(c, _)| scan(&eval, c, k, next_h, 2))
            .collect();
        refined.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        refined.truncate(6);
        cands = refined;
        h = next_h;
    }
    Ok(cands.into_iter().next().unwrap().0)
}

/// Full grid scan of `center + h * [-k, k]^dim`; returns the `keep` best grid-local
/// minima, best first.
fn scan<T: Scalar, F>(eval: &F, center: &[T], k: i64, h: T, keep: usize) -> Vec<(Vec<T>, T)>
where
    F: Fn(&[T]) -> T + Sync,
{
    let dim = center.len();
    let side = (2 * k + 1) as usize;
    let total = side.pow(dim as u32);
    let point = |idx: usize| -> Vec<T> {
        let mut rem = idx;
        (0..dim)
            .map(|d| {
                let i = (rem % side) as i64 - k;
                rem /= side;
                center[d] + h * T::lit(i as f64)
            })
            .collect()
    };
    if keep == 1 {
        let best = (0..total)
            .into_par_iter()
            .map(|i| (eval(&point(i)), i))
            .reduce(|| (T::infinity(), 0), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        return vec![(point(best.1), best.0)];
    }
    let values: Vec<T> = (0..total).into_par_iter().map(|i| eval(&point(i))).collect();
    let strides: Vec<usize> = (0..dim).map(|d| side.pow(d as u32)).collect();
    let mut minima: Vec<(usize, T)> = (0..total)
        .filter(|&i| {
            let v = values[i];
            (0..dim).all(|d| {
                let coord = (i / strides[d]) % side;
                (coord == 0 || values[i - strides[d]] >= v) && (coord + 1 == side || values[i + strides[d]] >= v)
            })
        })
        .map(|i| (i, values[i]))
        .collect();
    minima.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    minima.truncate(keep);
    minima.into_iter().map(|(i, v)| (point(i), v)).collect()
}
