use crate::linalg::{norm2, SymBand};
use crate::{Error, Result, Scalar};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, T)>) -> Result<Self> {
        if let Some(&(r, c, _)) = trip.iter().find(|(r, c, _)| *r >= nrows || *c >= ncols) {
            return Err(Error::invalid(format!("triplet ({r}, {c}) outside {nrows}x{ncols}")));
        }
        trip.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Csr { nrows, ncols, indptr, indices, values })
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Full (both triangles) CSR copy of a symmetric band matrix.
    pub fn from_sym_band(a: &SymBand<T>) -> Self {
        let n = a.dim();
        let bw = a.bandwidth();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let hi = (i + bw).min(n.saturating_sub(1));
            for j in lo..=hi {
                let v = a.get(i, j);
                if v != T::zero() {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Csr { nrows: n, ncols: n, indptr, indices, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => T::zero(),
        }
    }

    /// Mutable access to stored values, for fault injection in audits.
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let trip = (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (j, i, v)))
            .collect();
        Csr::from_triplets(self.ncols, self.nrows, trip).expect("transpose indices in range")
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut m = self.clone();
        for v in &mut m.values {
            *v *= alpha;
        }
        m
    }

    /// Sparse product `self * rhs`.
    pub fn mul(&self, rhs: &Csr<T>) -> Result<Self> {
        crate::error::check_dim(self.ncols, rhs.nrows)?;
        let mut acc = vec![T::zero(); rhs.ncols];
        let mut mark = vec![usize::MAX; rhs.ncols];
        let mut cols: Vec<usize> = Vec::new();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.nrows {
            cols.clear();
            for (k, a) in self.row(i) {
                for (j, b) in rhs.row(k) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = T::zero();
                        cols.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            cols.sort_unstable();
            for &j in &cols {
                indices.push(j);
                values.push(acc[j]);
            }
            indptr.push(indices.len());
        }
        Ok(Csr { nrows: self.nrows, ncols: rhs.ncols, indptr, indices, values })
    }

    /// Symmetric band copy; `(i, j)` and `(j, i)` are averaged.
    pub fn to_sym_band(&self) -> Result<SymBand<T>> {
        if self.nrows != self.ncols {
            return Err(Error::invalid("to_sym_band needs a square matrix"));
        }
        let n = self.nrows;
        let mut bw = 0;
        for i in 0..n {
            for (j, _) in self.row(i) {
                bw = bw.max(i.abs_diff(j));
            }
        }
        let half = T::lit(0.5);
        let mut out = SymBand::zeros(n, bw);
        for i in 0..n {
            for (j, v) in self.row(i) {
                out.add_to(i, j, if i == j { v } else { half * v });
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// Max entrywise `|self - other|` over the union of patterns.
    pub fn max_abs_diff(&self, other: &Csr<T>) -> Result<T> {
        crate::error::check_dim(self.nrows, other.nrows)?;
        crate::error::check_dim(self.ncols, other.ncols)?;
        let mut m = T::zero();
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m = m.max((v - other.get(i, j)).abs());
            }
            for (j, v) in other.row(i) {
                m = m.max((v - self.get(i, j)).abs());
            }
        }
        Ok(m)
    }

    /// Spectral norm estimate by power iteration on `A^T A`.
    pub fn norm2_estimate(&self, iters: usize) -> T {
        if self.nnz() == 0 {
            return T::zero();
        }
        let t = self.transpose();
        // deterministic, non-degenerate start vector
        let mut x: Vec<T> = (0..self.ncols).map(|i| T::one() + T::lit(((i * 7919) % 13) as f64 / 13.0)).collect();
        let mut est = T::zero();
        for _ in 0..iters {
            let nx = norm2(&x);
            if nx == T::zero() {
                return T::zero();
            }
            x.iter_mut().for_each(|v| *v /= nx);
            let y = t.matvec(&self.matvec(&x));
            est = norm2(&y).sqrt();
            x = y;
        }
        est
    }

    /// Column rank via Gaussian elimination with partial pivoting on a dense copy.
    /// Meant for small operators in tests and audits.
    pub fn rank(&self, tol: T) -> usize {
        let mut a = self.to_dense();
        let (m, n) = (self.nrows, self.ncols);
        let mut rank = 0;
        let mut row = 0;
        for col in 0..n {
            if row >= m {
                break;
            }
            let (piv, pv) = (row..m)
                .map(|r| (r, a[r][col].abs()))
                .fold((row, T::zero()), |best, c| if c.1 > best.1 { c } else { best });
            if pv <= tol {
                continue;
            }
            a.swap(row, piv);
            for r in row + 1..m {
                let f = a[r][col] / a[row][col];
                if f != T::zero() {
                    for c in col..n {
                        let sub = f * a[row][c];
                        a[r][c] -= sub;
                    }
                }
            }
            row += 1;
            rank += 1;
        }
        rank
    }
}
