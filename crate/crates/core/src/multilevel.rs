//! Level hierarchies, transfer operators and the corrected lower-level model.
//!
//! Given the current fine iterate `x`, its gradient `g` and Hessian `B`, the
//! lower-level model in coarse coordinates `s` around `x0 = R x` is
//!
//! ```text
//! m(s) = f_H(x0 + s) + v's + s'Ms/2
//! v    = R g - grad f_H(x0)
//! M    = R B P - hess f_H(x0)        (second order only)
//! ```
//!
//! so that `grad m(0) = R g` and `hess m(0) = R B P`.

use crate::error::check_dim;
use crate::linalg::{norm2, sub, Csr, SymBand};
use crate::model::{Objective, Order};
use crate::{Error, Result, Scalar};

/// Prolongation `P` (fine x coarse) and restriction `R` (coarse x fine) with `P = alpha R^T`.
#[derive(Debug, Clone)]
pub struct TransferPair<T> {
    p: Csr<T>,
    r: Csr<T>,
    alpha: T,
    norm_p: T,
    norm_r: T,
}

impl<T: Scalar> TransferPair<T> {
    /// Restriction is taken as `P^T / alpha`.
    pub fn from_prolongation(p: Csr<T>, alpha: T) -> Result<Self> {
        if !(alpha > T::zero()) {
            return Err(Error::invalid("transfer scaling alpha must be positive"));
        }
        let r = p.transpose().scaled(T::one() / alpha);
        Ok(Self::assemble(p, r, alpha))
    }

    /// Takes both operators as given. Used for experiments and fault injection;
    /// [`TransferPair::adjoint_defect`] reports how far they are from `P = alpha R^T`.
    pub fn from_parts(p: Csr<T>, r: Csr<T>, alpha: T) -> Result<Self> {
        check_dim(p.nrows(), r.ncols())?;
        check_dim(p.ncols(), r.nrows())?;
        if !(alpha > T::zero()) {
            return Err(Error::invalid("transfer scaling alpha must be positive"));
        }
        Ok(Self::assemble(p, r, alpha))
    }

    pub fn identity(n: usize) -> Self {
        Self::assemble(Csr::identity(n), Csr::identity(n), T::one())
    }

    fn assemble(p: Csr<T>, r: Csr<T>, alpha: T) -> Self {
        let norm_p = p.norm2_estimate(60);
        let norm_r = r.norm2_estimate(60);
        TransferPair { p, r, alpha, norm_p, norm_r }
    }

    pub fn prolongation(&self) -> &Csr<T> {
        &self.p
    }

    pub fn restriction(&self) -> &Csr<T> {
        &self.r
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn fine_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn coarse_dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn norm_p(&self) -> T {
        self.norm_p
    }

    pub fn norm_r(&self) -> T {
        self.norm_r
    }

    /// `max(|P|, |R|)` in the spectral norm (estimated).
    pub fn kappa_r(&self) -> T {
        self.norm_p.max(self.norm_r)
    }

    /// `max |P - alpha R^T|` over all entries.
    pub fn adjoint_defect(&self) -> T {
        self.p
            .max_abs_diff(&self.r.transpose().scaled(self.alpha))
            .expect("shapes validated at construction")
    }

    pub fn prolong(&self, xc: &[T]) -> Vec<T> {
        self.p.matvec(xc)
    }

    pub fn restrict(&self, xf: &[T]) -> Vec<T> {
        self.r.matvec(xf)
    }

    /// `R B P` assembled as a symmetric band matrix.
    pub fn galerkin(&self, b: &SymBand<T>) -> Result<SymBand<T>> {
        let bp = Csr::from_sym_band(b).mul(&self.p)?;
        self.r.mul(&bp)?.to_sym_band()
    }
}

/// Index of interior grid point `(i, j)`, zero-based, `x` running fastest
/// (columns of the grid array stacked).
#[inline]
pub fn grid_index(i: usize, j: usize, n1d: usize) -> usize {
    i + j * n1d
}

/// Nine-point prolongation from an `n1d_coarse`^2 interior grid to the
/// `(2 n1d_coarse)`^2 interior fine grid, with full-weighting restriction
/// `R = P^T / 4`.
///
/// Coarse vertex `(I, J)` (one-based) sits on fine vertex `(2I, 2J)` and
/// spreads with weights `[1/4 1/2 1/4; 1/2 1 1/2; 1/4 1/2 1/4]`. Weights that
/// land on the Dirichlet boundary are dropped without renormalization.
pub fn build_grid_transfer<T: Scalar>(n1d_coarse: usize) -> Result<TransferPair<T>> {
    if n1d_coarse < 1 {
        return Err(Error::invalid("coarse grid needs at least one interior point per side"));
    }
    let nc = n1d_coarse;
    let nf = 2 * nc;
    let weight = |d: i64| match d {
        0 => 1.0,
        -1 | 1 => 0.5,
        _ => 0.0,
    };
    let mut trip = Vec::with_capacity(9 * nc * nc);
    for jc in 1..=nc {
        for ic in 1..=nc {
            let col = grid_index(ic - 1, jc - 1, nc);
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let fi = 2 * ic as i64 + di;
                    let fj = 2 * jc as i64 + dj;
                    if fi < 1 || fj < 1 || fi > nf as i64 || fj > nf as i64 {
                        continue;
                    }
                    let row = grid_index(fi as usize - 1, fj as usize - 1, nf);
                    trip.push((row, col, T::lit(weight(di) * weight(dj))));
                }
            }
        }
    }
    let p = Csr::from_triplets(nf * nf, nc * nc, trip)?;
    TransferPair::from_prolongation(p, T::lit(4.0))
}

/// Lower-level model of a fine objective at one fine iterate.
///
/// Implements [`Objective`] in absolute coarse coordinates `y = x0 + s`, which
/// lets the same minimization loop run on it recursively.
pub struct CoarseModel<'a, T> {
    coarse: &'a dyn Objective<T>,
    x0: Vec<T>,
    v: Vec<T>,
    m: Option<SymBand<T>>,
    order: Order,
}

impl<'a, T: Scalar> CoarseModel<'a, T> {
    pub fn start(&self) -> &[T] {
        &self.x0
    }

    pub fn first_order_correction(&self) -> &[T] {
        &self.v
    }

    pub fn second_order_correction(&self) -> Option<&SymBand<T>> {
        self.m.as_ref()
    }

    pub fn order(&self) -> Order {
        self.order
    }

    fn step_of(&self, y: &[T]) -> Vec<T> {
        sub(y, &self.x0)
    }

    /// `f_H(x0 + s) + v's (+ s'Ms/2)`
    pub fn value_at_step(&self, s: &[T]) -> Result<T> {
        check_dim(self.x0.len(), s.len())?;
        let y: Vec<T> = self.x0.iter().zip(s).map(|(&a, &b)| a + b).collect();
        self.value(&y)
    }

    /// `grad f_H(x0 + s) + v (+ M s)`
    pub fn grad_at_step(&self, s: &[T]) -> Result<Vec<T>> {
        check_dim(self.x0.len(), s.len())?;
        let y: Vec<T> = self.x0.iter().zip(s).map(|(&a, &b)| a + b).collect();
        self.gradient(&y)
    }

    /// `hess f_H(x0 + s) (+ M)`
    pub fn hess_at_step(&self, s: &[T]) -> Result<SymBand<T>> {
        check_dim(self.x0.len(), s.len())?;
        let y: Vec<T> = self.x0.iter().zip(s).map(|(&a, &b)| a + b).collect();
        self.hessian(&y)
    }
}

impl<T: Scalar> Objective<T> for CoarseModel<'_, T> {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn value(&self, y: &[T]) -> Result<T> {
        let s = self.step_of(y);
        let mut val = self.coarse.value(y)? + crate::linalg::dot(&self.v, &s);
        if let Some(m) = &self.m {
            val += T::lit(0.5) * m.quad_form(&s);
        }
        Ok(val)
    }

    fn gradient(&self, y: &[T]) -> Result<Vec<T>> {
        let s = self.step_of(y);
        let mut g = self.coarse.gradient(y)?;
        for (gi, &vi) in g.iter_mut().zip(&self.v) {
            *gi += vi;
        }
        if let Some(m) = &self.m {
            for (gi, mi) in g.iter_mut().zip(m.matvec(&s)) {
                *gi += mi;
            }
        }
        Ok(g)
    }

    fn value_change(&self, y: &[T], s: &[T]) -> Option<Result<T>> {
        let dc = match self.coarse.value_change(y, s)? {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };
        let mut d = dc + crate::linalg::dot(&self.v, s);
        if let Some(m) = &self.m {
            let ms = m.matvec(s);
            d += crate::linalg::dot(&ms, &self.step_of(y)) + T::lit(0.5) * crate::linalg::dot(&ms, s);
        }
        Some(Ok(d))
    }

    fn hessian(&self, y: &[T]) -> Result<SymBand<T>> {
        let h = self.coarse.hessian(y)?;
        match &self.m {
            Some(m) => h.add_scaled(T::one(), m),
            None => Ok(h),
        }
    }
}

/// Builds the corrected lower-level model at fine iterate `x_fine`.
///
/// `fine_hess` is required for [`Order::Second`] and ignored otherwise.
pub fn build_coarse_model<'a, T: Scalar>(
    fine_g: &[T],
    fine_hess: Option<&SymBand<T>>,
    x_fine: &[T],
    pair: &TransferPair<T>,
    coarse: &'a dyn Objective<T>,
    order: Order,
) -> Result<CoarseModel<'a, T>> {
    check_dim(pair.fine_dim(), x_fine.len())?;
    check_dim(pair.fine_dim(), fine_g.len())?;
    check_dim(pair.coarse_dim(), coarse.dim())?;
    let x0 = pair.restrict(x_fine);
    let rg = pair.restrict(fine_g);
    let v = sub(&rg, &coarse.gradient(&x0)?);
    let m = match order {
        Order::First => None,
        Order::Second => {
            let b = fine_hess.ok_or_else(|| Error::invalid("second-order coarse model needs the fine Hessian"))?;
            check_dim(pair.fine_dim(), b.dim())?;
            Some(pair.galerkin(b)?.add_scaled(-T::one(), &coarse.hessian(&x0)?)?)
        }
    };
    Ok(CoarseModel { coarse, x0, v, m, order })
}

/// Whether the lower level is worth using: `|R g| >= kappa_h |g|` and `|R g| > eps_h`.
pub fn should_descend<T: Scalar>(fine_g: &[T], r: &Csr<T>, kappa_h: T, eps_h: T) -> bool {
    let rg = norm2(&r.matvec(fine_g));
    descend_test(rg, norm2(fine_g), kappa_h, eps_h)
}

#[inline]
pub(crate) fn descend_test<T: Scalar>(rg_norm: T, g_norm: T, kappa_h: T, eps_h: T) -> bool {
    rg_norm >= kappa_h * g_norm && rg_norm > eps_h
}

/// One level of a hierarchy: its objective and the transfer to the level below.
pub struct Level<T> {
    pub objective: Box<dyn Objective<T>>,
    pub transfer: Option<TransferPair<T>>,
}

/// Levels ordered coarsest first; the last one carries the objective being minimized.
pub struct LevelHierarchy<T> {
    levels: Vec<Level<T>>,
}

impl<T: Scalar> LevelHierarchy<T> {
    pub fn single(objective: Box<dyn Objective<T>>) -> Self {
        LevelHierarchy { levels: vec![Level { objective, transfer: None }] }
    }

    /// Adds a finer level on top; `transfer` maps between it and the current top.
    pub fn push_finer(&mut self, objective: Box<dyn Objective<T>>, transfer: TransferPair<T>) -> Result<()> {
        let below = self.levels.last().expect("hierarchy is never empty").objective.dim();
        check_dim(below, transfer.coarse_dim())?;
        check_dim(objective.dim(), transfer.fine_dim())?;
        self.levels.push(Level { objective, transfer: Some(transfer) });
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Level `l` counted from one at the coarsest.
    pub fn level(&self, l: usize) -> &Level<T> {
        &self.levels[l - 1]
    }

    pub fn level_mut(&mut self, l: usize) -> &mut Level<T> {
        &mut self.levels[l - 1]
    }

    pub fn top(&self) -> &Level<T> {
        self.levels.last().unwrap()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().rev().map(|l| l.objective.dim()).collect()
    }
}
