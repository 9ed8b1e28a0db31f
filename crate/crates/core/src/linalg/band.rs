use std::cell::Cell;

use crate::{Error, Result, Scalar};

thread_local! {
    static SHADOW_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Total factorization flops performed on the current thread since it started.
///
/// Every call to [`SymBand::cholesky`] adds to this counter independently of the
/// per-call counts returned to the caller, so callers can audit their own
/// bookkeeping against it.
pub fn shadow_factor_flops() -> u64 {
    SHADOW_FLOPS.with(|c| c.get())
}

/// Textbook dense Cholesky cost, `n^3/3 + 2n^2`.
pub fn dense_model_flops(n: usize) -> u64 {
    let n = n as u64;
    n * n * n / 3 + 2 * n * n
}

/// Symmetric matrix stored by its lower band.
///
/// Row `i` keeps columns `i - bw ..= i`; entry `(i, j)` lives at
/// `data[i * (bw + 1) + bw - (i - j)]`. Out-of-band entries are zero.
/// A dense symmetric matrix is the special case `bw = n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand<T> {
    n: usize,
    bw: usize,
    data: Vec<T>,
}

/// Cholesky factor `L` of a [`SymBand`] matrix (same band layout), with the
/// number of floating-point operations the factorization performed.
#[derive(Debug, Clone)]
pub struct BandCholesky<T> {
    l: SymBand<T>,
    flops: u64,
}

/// A factorization that hit a non-positive pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorFailure {
    pub row: usize,
    pub pivot: f64,
    pub flops: u64,
}

impl From<FactorFailure> for Error {
    fn from(f: FactorFailure) -> Self {
        Error::NotPositiveDefinite { row: f.row, pivot: f.pivot }
    }
}

impl<T: Scalar> SymBand<T> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        SymBand { n, bw, data: vec![T::zero(); n * (bw + 1)] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![T::one(); n])
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), 0);
        m.data.copy_from_slice(d);
        m
    }

    /// Builds from a dense row-major square matrix, symmetrizing by averaging
    /// `(i, j)` and `(j, i)` and trimming the band to the outermost nonzero.
    pub fn from_dense(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("dense matrix must be square"));
        }
        let half = T::lit(0.5);
        let mut bw = 0;
        for i in 0..n {
            for j in 0..i {
                if rows[i][j] != T::zero() || rows[j][i] != T::zero() {
                    bw = bw.max(i - j);
                }
            }
        }
        let mut m = Self::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(m.bw)..=i {
                m.set(i, j, half * (rows[i][j] + rows[j][i]));
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> T {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            T::zero()
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Sets `(i, j)` and, implicitly, `(j, i)`. Panics outside the band.
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.n).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn add_diag(&mut self, d: &[T]) {
        assert_eq!(d.len(), self.n);
        for (i, &v) in d.iter().enumerate() {
            let k = self.idx(i, i);
            self.data[k] += v;
        }
    }

    pub fn shifted(&self, sigma: T) -> Self {
        let mut m = self.clone();
        m.add_diag(&vec![sigma; self.n]);
        m
    }

    /// Re-stores the matrix with at least `bw` sub-diagonals.
    pub fn widened(&self, bw: usize) -> Self {
        if bw <= self.bw {
            return self.clone();
        }
        let mut m = Self::zeros(self.n, bw);
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// `self + alpha * other`, band is the wider of the two.
    pub fn add_scaled(&self, alpha: T, other: &SymBand<T>) -> Result<Self> {
        crate::error::check_dim(self.n, other.n)?;
        let mut m = self.widened(other.bw);
        for i in 0..other.n {
            for j in i.saturating_sub(other.bw)..=i {
                m.add_to(i, j, alpha * other.get(i, j));
            }
        }
        Ok(m)
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![T::zero(); self.n];
        for i in 0..self.n {
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            let j0 = i.saturating_sub(self.bw);
            let off = self.bw - (i - j0);
            let mut acc = row[self.bw] * x[i];
            for (t, j) in (j0..i).enumerate() {
                let a = row[off + t];
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc;
        }
        y
    }

    /// `x^T A x`
    pub fn quad_form(&self, x: &[T]) -> T {
        crate::linalg::dot(x, &self.matvec(x))
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> T {
        let mut sums = vec![T::zero(); self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let a = self.get(i, j).abs();
                sums[i] += a;
                if j != i {
                    sums[j] += a;
                }
            }
        }
        sums.into_iter().fold(T::zero(), T::max)
    }

    /// Gershgorin lower bound on the smallest eigenvalue.
    pub fn gershgorin_lower(&self) -> T {
        let mut off = vec![T::zero(); self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..i {
                let a = self.get(i, j).abs();
                off[i] += a;
                off[j] += a;
            }
        }
        (0..self.n)
            .map(|i| self.get(i, i) - off[i])
            .fold(T::infinity(), T::min)
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Spectral norm estimate: power iteration, never below the largest
    /// absolute diagonal entry.
    pub fn norm2_estimate(&self, iters: usize) -> T {
        let mut est = self.diag().into_iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let mut x: Vec<T> = (0..self.n).map(|i| T::one() + T::lit(((i * 7919) % 17) as f64 / 17.0)).collect();
        for _ in 0..iters {
            let nx = crate::linalg::norm2(&x);
            if nx == T::zero() {
                break;
            }
            x.iter_mut().for_each(|v| *v /= nx);
            x = self.matvec(&x);
            est = est.max(crate::linalg::norm2(&x));
        }
        est
    }

    /// Largest absolute entry of the lower band.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Cholesky factorization of `self + shift * I`.
    ///
    /// Fill stays inside the band, so the cost is roughly `n * bw^2` instead of
    /// `n^3 / 3`. Each multiply, subtract, divide and square root is counted.
    pub fn cholesky(&self, shift: T) -> std::result::Result<BandCholesky<T>, FactorFailure> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.clone();
        let mut flops: u64 = 0;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                let mut sum = l.data[ri + j];
                if i == j {
                    sum += shift;
                    flops += 1;
                }
                for k in k0..j {
                    sum -= l.data[ri + k] * l.data[rj + k];
                }
                flops += 2 * (j - k0) as u64;
                if i == j {
                    if !(sum > T::zero()) || !sum.is_finite() {
                        flops += 1;
                        SHADOW_FLOPS.with(|c| c.set(c.get() + flops));
                        return Err(FactorFailure { row: i, pivot: sum.to_f64_lossy(), flops });
                    }
                    l.data[ri + i] = sum.sqrt();
                } else {
                    l.data[ri + j] = sum / l.data[rj + j];
                }
                flops += 1;
            }
        }
        SHADOW_FLOPS.with(|c| c.set(c.get() + flops));
        Ok(BandCholesky { l, flops })
    }
}

impl<T: Scalar> BandCholesky<T> {
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn dim(&self) -> usize {
        self.l.n
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let (n, bw, w) = (self.l.n, self.l.bw, self.l.bw + 1);
        assert_eq!(b.len(), n);
        let d = &self.l.data;
        let mut y = b.to_vec();
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= d[ri + k] * y[k];
            }
            y[i] = s / d[ri + i];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Vec<T> {
        let (n, bw, w) = (self.l.n, self.l.bw, self.l.bw + 1);
        assert_eq!(y.len(), n);
        let d = &self.l.data;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let ri = i * w + bw - i;
            x[i] /= d[ri + i];
            let xi = x[i];
            for k in i.saturating_sub(bw)..i {
                x[k] -= d[ri + k] * xi;
            }
        }
        x
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }
}
