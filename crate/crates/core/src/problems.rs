//! Benchmark objectives.
//!
//! The main one is the finite-difference discretization of
//! `-Lap u + exp(u) = g` on the unit square with zero Dirichlet data, posed as
//! the minimization of `u'Au/2 + sum(exp(u)) - g'u`, whose exact solution is
//! `u*(x, y) = sin(2 pi x (1 - x)) sin(2 pi y (1 - y))`.

use std::f64::consts::PI;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::linalg::{dot, SymBand};
use crate::model::Objective;
use crate::multilevel::{build_grid_transfer, grid_index, LevelHierarchy};
use crate::{Error, Result, Scalar};

/// How the right-hand side `g` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhsMode {
    /// `g = A u* + exp(u*)`: the discrete minimizer is exactly the sampled `u*`.
    #[default]
    Discrete,
    /// `g = -Lap u* + exp(u*)` evaluated in closed form at the grid points.
    Analytic,
}

/// Exact solution `u*(x, y)`.
pub fn exact_solution(x: f64, y: f64) -> f64 {
    (2.0 * PI * x * (1.0 - x)).sin() * (2.0 * PI * y * (1.0 - y)).sin()
}

/// `-Lap u*` in closed form.
pub fn exact_neg_laplacian(x: f64, y: f64) -> f64 {
    // u = sin(p(x)) sin(p(y)), p(t) = 2 pi t (1 - t), p' = 2 pi (1 - 2t), p'' = -4 pi
    let p = |t: f64| 2.0 * PI * t * (1.0 - t);
    let dp = |t: f64| 2.0 * PI * (1.0 - 2.0 * t);
    let d2 = |t: f64| -(p(t).sin()) * dp(t).powi(2) - 4.0 * PI * p(t).cos();
    -(d2(x) * p(y).sin() + p(x).sin() * d2(y))
}

/// The discretized PDE at one resolution.
#[derive(Debug, Clone)]
pub struct GridProblem<T> {
    n1d: usize,
    h: T,
    a: SymBand<T>,
    rhs: Vec<T>,
    u_star: Vec<T>,
}

impl<T: Scalar> GridProblem<T> {
    /// Assembles the `n1d x n1d` interior grid with mesh width `1 / (n1d + 1)`.
    pub fn assemble(n1d: usize, mode: RhsMode) -> Result<Self> {
        if n1d < 2 {
            return Err(Error::invalid(format!("grid needs n1d >= 2, got {n1d}")));
        }
        let n = n1d * n1d;
        let h = 1.0 / (n1d + 1) as f64;
        let inv_h2 = T::lit(1.0 / (h * h));
        let mut a = SymBand::zeros(n, n1d);
        for j in 0..n1d {
            for i in 0..n1d {
                let k = grid_index(i, j, n1d);
                a.set(k, k, T::lit(4.0) * inv_h2);
                if i > 0 {
                    a.set(k, k - 1, -inv_h2);
                }
                if j > 0 {
                    a.set(k, k - n1d, -inv_h2);
                }
            }
        }
        let coords = |k: usize| (((k % n1d) + 1) as f64 * h, ((k / n1d) + 1) as f64 * h);
        let u_star: Vec<T> = (0..n)
            .map(|k| {
                let (x, y) = coords(k);
                T::lit(exact_solution(x, y))
            })
            .collect();
        let rhs = match mode {
            RhsMode::Discrete => a
                .matvec(&u_star)
                .into_iter()
                .zip(&u_star)
                .map(|(au, &u)| au + u.exp())
                .collect(),
            RhsMode::Analytic => (0..n)
                .map(|k| {
                    let (x, y) = coords(k);
                    T::lit(exact_neg_laplacian(x, y) + exact_solution(x, y).exp())
                })
                .collect(),
        };
        Ok(GridProblem { n1d, h: T::lit(h), a, rhs, u_star })
    }

    pub fn n1d(&self) -> usize {
        self.n1d
    }

    pub fn mesh_width(&self) -> T {
        self.h
    }

    pub fn laplacian(&self) -> &SymBand<T> {
        &self.a
    }

    pub fn rhs(&self) -> &[T] {
        &self.rhs
    }

    pub fn exact(&self) -> &[T] {
        &self.u_star
    }

    /// Grid coordinates `(x, y)` of unknown `k`.
    pub fn coords(&self, k: usize) -> (f64, f64) {
        let h = self.h.to_f64_lossy();
        (((k % self.n1d) + 1) as f64 * h, ((k / self.n1d) + 1) as f64 * h)
    }

    /// Root-mean-square distance to the sampled exact solution.
    pub fn rmse(&self, u: &[T]) -> Result<T> {
        check_dim(self.u_star.len(), u.len())?;
        let ss: T = u.iter().zip(&self.u_star).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok((ss / T::lit(u.len() as f64)).sqrt())
    }

    /// Max-norm truncation error `|A u* - (-Lap u*)|` at the grid points.
    pub fn truncation_error(&self) -> f64 {
        let au = self.a.matvec(&self.u_star);
        au.iter()
            .enumerate()
            .map(|(k, v)| {
                let (x, y) = self.coords(k);
                (v.to_f64_lossy() - exact_neg_laplacian(x, y)).abs()
            })
            .fold(0.0, f64::max)
    }

    fn exp_checked(&self, u: &[T]) -> Result<Vec<T>> {
        let e: Vec<T> = u.iter().map(|v| v.exp()).collect();
        if e.iter().all(|v| v.is_finite()) {
            Ok(e)
        } else {
            Err(Error::ObjectiveOverflow("exp(u) overflowed".into()))
        }
    }
}

impl<T: Scalar> Objective<T> for GridProblem<T> {
    fn dim(&self) -> usize {
        self.u_star.len()
    }

    fn value(&self, u: &[T]) -> Result<T> {
        check_dim(self.dim(), u.len())?;
        let e = self.exp_checked(u)?;
        let v = T::lit(0.5) * self.a.quad_form(u) + e.iter().copied().sum::<T>() - dot(&self.rhs, u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::ObjectiveOverflow("objective value is not finite".into()))
        }
    }

    fn gradient(&self, u: &[T]) -> Result<Vec<T>> {
        check_dim(self.dim(), u.len())?;
        let e = self.exp_checked(u)?;
        Ok(self
            .a
            .matvec(u)
            .into_iter()
            .zip(e)
            .zip(&self.rhs)
            .map(|((au, eu), &g)| au + eu - g)
            .collect())
    }

    fn hessian(&self, u: &[T]) -> Result<SymBand<T>> {
        check_dim(self.dim(), u.len())?;
        let e = self.exp_checked(u)?;
        let mut hess = self.a.clone();
        hess.add_diag(&e);
        Ok(hess)
    }

    /// `grad f(u)'s + s'As/2 + sum exp(u) (exp(s) - 1 - s)`
    fn value_change(&self, u: &[T], s: &[T]) -> Option<Result<T>> {
        Some((|| {
            check_dim(self.dim(), s.len())?;
            let g = self.gradient(u)?;
            let e = self.exp_checked(u)?;
            let mut tail = T::zero();
            for (&ei, &si) in e.iter().zip(s) {
                let t = ei * exp_tail(si);
                if !t.is_finite() {
                    return Err(Error::ObjectiveOverflow("exp(u + s) overflowed".into()));
                }
                tail += t;
            }
            Ok(dot(&g, s) + T::lit(0.5) * self.a.quad_form(s) + tail)
        })())
    }
}

/// `exp(s) - 1 - s`, accurate for small `|s|`.
fn exp_tail<T: Scalar>(s: T) -> T {
    if s.abs() < T::lit(1e-2) {
        // Horner form of s^2/2 + s^3/6 + ... + s^7/5040
        let mut acc = T::zero();
        for k in (2..=7).rev() {
            acc = (acc + T::one()) * s / T::lit(k as f64);
        }
        acc * s
    } else {
        s.exp_m1() - s
    }
}

/// Grid hierarchy with `levels` levels whose finest grid is `n1d_top` per side.
pub fn build_hierarchy<T: Scalar>(n1d_top: usize, levels: usize, mode: RhsMode) -> Result<LevelHierarchy<T>> {
    if levels == 0 {
        return Err(Error::invalid("need at least one level"));
    }
    let factor = 1usize << (levels - 1);
    if n1d_top % factor != 0 {
        return Err(Error::invalid(format!(
            "n1d = {n1d_top} is not divisible by 2^(levels - 1) = {factor}"
        )));
    }
    let coarsest = n1d_top / factor;
    let mut h = LevelHierarchy::single(Box::new(GridProblem::<T>::assemble(coarsest, mode)?) as Box<dyn Objective<T>>);
    let mut n = coarsest;
    for _ in 1..levels {
        let pair = build_grid_transfer(n)?;
        n *= 2;
        h.push_finer(Box::new(GridProblem::<T>::assemble(n, mode)?), pair)?;
    }
    Ok(h)
}

/// `a * rand(n)`: entries i.i.d. uniform on `[0, a]`, reproducible per seed.
pub fn random_init<T: Scalar>(n: usize, a: f64, seed: u64) -> Result<Vec<T>> {
    if !(a > 0.0) {
        return Err(Error::invalid(format!("initial-guess amplitude must be positive, got {a}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(0.0, a);
    Ok((0..n).map(|_| T::lit(dist.sample(&mut rng))).collect())
}

/// Reproducible description of one benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub n1d: usize,
    pub levels: usize,
    pub seed: u64,
    pub a: f64,
    #[serde(default)]
    pub rhs: RhsMode,
}

impl ProblemDescriptor {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn hierarchy<T: Scalar>(&self) -> Result<LevelHierarchy<T>> {
        build_hierarchy(self.n1d, self.levels, self.rhs)
    }

    pub fn initial_guess<T: Scalar>(&self) -> Result<Vec<T>> {
        random_init(self.n1d * self.n1d, self.a, self.seed)
    }
}

/// Small analytic objectives used by tests and audits.
pub mod analytic {
    use super::*;
    use crate::model::ObjectiveOracle;

    /// `x'Dx/2 + c'x` with diagonal `D`.
    pub fn diagonal_quadratic<T: Scalar>(d: Vec<T>, c: Vec<T>) -> ObjectiveOracle<T> {
        let n = d.len();
        let (d1, c1) = (d.clone(), c.clone());
        let (d2, c2) = (d.clone(), c);
        ObjectiveOracle::new(
            n,
            move |x: &[T]| {
                x.iter().zip(&d1).zip(&c1).map(|((&xi, &di), &ci)| T::lit(0.5) * di * xi * xi + ci * xi).sum()
            },
            move |x: &[T]| x.iter().zip(&d2).zip(&c2).map(|((&xi, &di), &ci)| di * xi + ci).collect(),
        )
        .with_hessian(move |_x: &[T]| SymBand::from_diag(&d))
    }

    /// Two-dimensional Rosenbrock function `(1 - x)^2 + 100 (y - x^2)^2`.
    pub fn rosenbrock<T: Scalar>() -> ObjectiveOracle<T> {
        let c = T::lit(100.0);
        let two = T::lit(2.0);
        ObjectiveOracle::new(
            2,
            move |x: &[T]| (T::one() - x[0]).powi(2) + c * (x[1] - x[0] * x[0]).powi(2),
            move |x: &[T]| {
                let r = x[1] - x[0] * x[0];
                vec![-two * (T::one() - x[0]) - T::lit(400.0) * x[0] * r, T::lit(200.0) * r]
            },
        )
        .with_hessian(move |x: &[T]| {
            let mut h = SymBand::zeros(2, 1);
            h.set(0, 0, two - T::lit(400.0) * (x[1] - T::lit(3.0) * x[0] * x[0]));
            h.set(1, 0, T::lit(-400.0) * x[0]);
            h.set(1, 1, T::lit(200.0));
            h
        })
    }

    /// Strictly convex quartic `sum_i (w_i x_i^4 / 4) + x'Qx/2 - b'x` with a
    /// dense SPD `Q` drawn from `seed`.
    pub fn convex_quartic<T: Scalar>(n: usize, seed: u64) -> ObjectiveOracle<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| u.sample(&mut rng)).collect()).collect();
        // Q = M'M / n + I
        let q: Vec<Vec<T>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let s: f64 = (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>() / n as f64;
                        T::lit(s + if i == j { 1.0 } else { 0.0 })
                    })
                    .collect()
            })
            .collect();
        let w: Vec<T> = (0..n).map(|_| T::lit(0.5 + 0.5 * (u.sample(&mut rng) + 1.0))).collect();
        let b: Vec<T> = (0..n).map(|_| T::lit(2.0 * u.sample(&mut rng))).collect();
        let qb = SymBand::from_dense(&q).expect("square");
        let (q1, w1, b1) = (qb.clone(), w.clone(), b.clone());
        let (q2, w2, b2) = (qb.clone(), w.clone(), b);
        ObjectiveOracle::new(
            n,
            move |x: &[T]| {
                let quart: T = x.iter().zip(&w1).map(|(&xi, &wi)| wi * xi.powi(4) / T::lit(4.0)).sum();
                quart + T::lit(0.5) * q1.quad_form(x) - dot(&b1, x)
            },
            move |x: &[T]| {
                q2.matvec(x)
                    .into_iter()
                    .zip(x.iter().zip(&w2).zip(&b2))
                    .map(|(qx, ((&xi, &wi), &bi))| qx + wi * xi.powi(3) - bi)
                    .collect()
            },
        )
        .with_hessian(move |x: &[T]| {
            let mut h = qb.clone();
            h.add_diag(&x.iter().zip(&w).map(|(&xi, &wi)| T::lit(3.0) * wi * xi * xi).collect::<Vec<_>>());
            h
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_stencil_entries() {
        let p = GridProblem::<f64>::assemble(3, RhsMode::Discrete).unwrap();
        let a = p.laplacian();
        let c = grid_index(1, 1, 3);
        assert_eq!(a.get(c, c), 64.0);
        for nb in [c - 1, c + 1, c - 3, c + 3] {
            assert_eq!(a.get(c, nb), -16.0);
        }
        assert_eq!(a.get(c, c - 2), 0.0);
        // A 1 >= 0 row-wise, zero only at the centre
        let a1 = a.matvec(&vec![1.0; 9]);
        assert!(a1.iter().all(|&v| v >= 0.0));
        assert_eq!(a1[c], 0.0);
        assert!(a1[0] > 0.0);
        assert!(a.cholesky(0.0).is_ok());
    }

    #[test]
    fn exact_solution_at_corner_point() {
        let p = GridProblem::<f64>::assemble(7, RhsMode::Discrete).unwrap();
        let x = 1.0 / 8.0;
        let e = (2.0 * PI * x * (1.0 - x)).sin().powi(2);
        assert!((p.exact()[0] - e).abs() < 1e-15);
    }

    #[test]
    fn discrete_rhs_makes_exact_solution_stationary() {
        let p = GridProblem::<f64>::assemble(8, RhsMode::Discrete).unwrap();
        let g = p.gradient(p.exact()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0 || v.abs() < 1e-12 * 4.0 * 81.0));
        let resid: Vec<f64> = p
            .laplacian()
            .matvec(p.exact())
            .iter()
            .zip(p.exact())
            .zip(p.rhs())
            .map(|((au, u), g)| au + u.exp() - g)
            .collect();
        assert!(resid.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn hessian_at_zero_is_a_plus_identity() {
        let p = GridProblem::<f64>::assemble(4, RhsMode::Discrete).unwrap();
        let h = p.hessian(&vec![0.0; 16]).unwrap();
        let mut e = p.laplacian().clone();
        e.add_diag(&vec![1.0; 16]);
        assert_eq!(h, e);
    }

    #[test]
    fn overflow_is_reported() {
        let p = GridProblem::<f64>::assemble(2, RhsMode::Discrete).unwrap();
        let u = [800.0, 0.0, 0.0, 0.0];
        assert!(matches!(p.value(&u), Err(Error::ObjectiveOverflow(_))));
        assert!(matches!(p.gradient(&u), Err(Error::ObjectiveOverflow(_))));
    }

    #[test]
    fn rmse_examples() {
        let p = GridProblem::<f64>::assemble(5, RhsMode::Discrete).unwrap();
        assert_eq!(p.rmse(p.exact()).unwrap(), 0.0);
        let shifted: Vec<f64> = p.exact().iter().map(|v| v - 0.3).collect();
        assert!((p.rmse(&shifted).unwrap() - 0.3).abs() < 1e-14);
        assert!(p.rmse(&[0.0]).is_err());
    }

    #[test]
    fn hierarchy_dimensions() {
        let h = build_hierarchy::<f64>(64, 4, RhsMode::Discrete).unwrap();
        assert_eq!(h.dims(), vec![4096, 1024, 256, 64]);
        let h2 = build_hierarchy::<f64>(128, 4, RhsMode::Discrete).unwrap();
        assert_eq!(h2.dims(), vec![16384, 4096, 1024, 256]);
        assert_eq!(build_hierarchy::<f64>(16, 1, RhsMode::Discrete).unwrap().num_levels(), 1);
        assert!(build_hierarchy::<f64>(63, 4, RhsMode::Discrete).is_err());
    }

    #[test]
    fn random_init_range_and_determinism() {
        let a: Vec<f64> = random_init(1000, 1.0, 7).unwrap();
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b: Vec<f64> = random_init(1000, 3.0, 7).unwrap();
        assert!(b.iter().all(|&v| (0.0..=3.0).contains(&v)));
        assert!(b.iter().any(|&v| v > 2.0));
        assert_eq!(a, random_init::<f64>(1000, 1.0, 7).unwrap());
        assert_ne!(a, random_init::<f64>(1000, 1.0, 8).unwrap());
        assert!(random_init::<f64>(3, 0.0, 1).is_err());
    }

    #[test]
    fn analytic_rhs_is_close_to_discrete() {
        let d = GridProblem::<f64>::assemble(31, RhsMode::Discrete).unwrap();
        let a = GridProblem::<f64>::assemble(31, RhsMode::Analytic).unwrap();
        let diff = d.rhs().iter().zip(a.rhs()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!((diff - d.truncation_error()).abs() < 1e-9);
    }

    #[test]
    fn descriptor_round_trip() {
        let d = ProblemDescriptor { n1d: 16, levels: 2, seed: 3, a: 1.0, rhs: RhsMode::Analytic };
        assert_eq!(ProblemDescriptor::from_json(&d.to_json().unwrap()).unwrap(), d);
        let parsed = ProblemDescriptor::from_json(r#"{"n1d": 8, "levels": 1, "seed": 0, "a": 2.0}"#).unwrap();
        assert_eq!(parsed.rhs, RhsMode::Discrete);
    }
}
