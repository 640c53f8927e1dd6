//! Sparse storage, saddle-point factorization and the dense helpers shared by
//! the solver modules.
//!
//! Dense work uses `nalgebra`; sparse factorizations are delegated to `faer`'s
//! supernodal LU with partial pivoting. Every saddle solve is checked against
//! its residual because a pivoted LU of a singular system silently produces
//! `inf`/`NaN` or garbage instead of failing.

use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DMatrix, DVector, Matrix3};
use thiserror::Error;

/// Relative singular-value cutoff used for ranks and pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// Relative residual above which a factorized solve is rejected.
const SOLVE_RTOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index ({row}, {col}) out of bounds for {nrows}x{ncols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    #[error("singular system of size {dim} (relative residual {residual:.3e}{})",
        .rank_defect.map(|d| format!(", rank defect {d}")).unwrap_or_default())]
    Singular {
        dim: usize,
        residual: f64,
        rank_defect: Option<usize>,
    },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
}

/// Compressed sparse column matrix with sorted, duplicate-free row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinalgError> {
        for &(row, col, _) in triplets {
            if row >= nrows || col >= ncols {
                return Err(LinalgError::OutOfBounds {
                    row,
                    col,
                    nrows,
                    ncols,
                });
            }
        }
        let mut counts = vec![0usize; ncols + 1];
        for &(_, c, _) in triplets {
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut order = vec![0usize; triplets.len()];
        let mut next = counts.clone();
        for (k, &(_, c, _)) in triplets.iter().enumerate() {
            order[next[c]] = k;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend(order[counts[c]..counts[c + 1]].iter().map(|&k| {
                let (r, _, v) = triplets[k];
                (r, v)
            }));
            scratch.sort_by_key(|&(r, _)| r);
            for &(r, v) in &scratch {
                match row_idx.last() {
                    Some(&last) if last == r && row_idx.len() > col_ptr[c] => {
                        *vals.last_mut().unwrap() += v;
                    }
                    _ => {
                        row_idx.push(r);
                        vals.push(v);
                    }
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            vals,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Keeps entries with `|a_ij| > drop_tol`.
    pub fn from_dense(a: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut t = Vec::new();
        for c in 0..a.ncols() {
            for r in 0..a.nrows() {
                let v = a[(r, c)];
                if v.abs() > drop_tol {
                    t.push((r, c, v));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t).expect("indices in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Entries of column `c` as `(row, value)` pairs.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.col(c).map(move |(r, v)| (r, c, v)))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t).expect("indices in range")
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "sparse mat-vec dimension mismatch");
        let mut y = DVector::zeros(self.nrows);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc != 0.0 {
                for (r, v) in self.col(c) {
                    y[r] += v * xc;
                }
            }
        }
        y
    }

    /// `self * b` for a dense right-hand side. Columns are independent, so
    /// the parallel split does not change the result.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        use rayon::prelude::*;
        assert_eq!(b.nrows(), self.ncols, "sparse mat-mat dimension mismatch");
        let mut out = DMatrix::zeros(self.nrows, b.ncols());
        if self.nrows == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(self.nrows)
            .enumerate()
            .for_each(|(j, oj)| {
                let bj = b.column(j);
                for c in 0..self.ncols {
                    let x = bj[c];
                    if x != 0.0 {
                        for (r, v) in self.col(c) {
                            oj[r] += v * x;
                        }
                    }
                }
            });
        out
    }

    /// `selfᵀ * b` without forming the transpose.
    pub fn tr_mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        use rayon::prelude::*;
        assert_eq!(b.nrows(), self.nrows, "sparse mat-mat dimension mismatch");
        let mut out = DMatrix::zeros(self.ncols, b.ncols());
        if self.ncols == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(self.ncols)
            .enumerate()
            .for_each(|(j, oj)| {
                let bj = b.column(j);
                for (c, o) in oj.iter_mut().enumerate() {
                    *o = self.col(c).map(|(r, v)| v * bj[r]).sum();
                }
            });
        out
    }

    /// Sparse product `self * b` (Gustavson, column by column).
    pub fn mul_sparse(&self, b: &SparseMatrix) -> Result<SparseMatrix, LinalgError> {
        if b.nrows != self.ncols {
            return Err(LinalgError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.nrows, self.ncols, b.nrows, b.ncols
            )));
        }
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut pattern: Vec<usize> = Vec::new();
        let mut col_ptr = Vec::with_capacity(b.ncols + 1);
        let mut row_idx = Vec::new();
        let mut vals = Vec::new();
        col_ptr.push(0);
        for j in 0..b.ncols {
            pattern.clear();
            for (k, bkj) in b.col(j) {
                for (i, aik) in self.col(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        pattern.push(i);
                    }
                    acc[i] += aik * bkj;
                }
            }
            pattern.sort_unstable();
            for &i in &pattern {
                row_idx.push(i);
                vals.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseMatrix {
            nrows: self.nrows,
            ncols: b.ncols,
            col_ptr,
            row_idx,
            vals,
        })
    }

    /// Columns `start..start + count` as a new matrix.
    pub fn column_range(&self, start: usize, count: usize) -> SparseMatrix {
        assert!(start + count <= self.ncols, "column range out of bounds");
        let base = self.col_ptr[start];
        let end = self.col_ptr[start + count];
        SparseMatrix {
            nrows: self.nrows,
            ncols: count,
            col_ptr: self.col_ptr[start..=start + count].iter().map(|p| p - base).collect(),
            row_idx: self.row_idx[base..end].to_vec(),
            vals: self.vals[base..end].to_vec(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] += v;
        }
        d
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Entrywise symmetry on the stored pattern, relative to the largest entry.
    pub fn is_symmetric(&self, rtol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        self.triplets()
            .all(|(r, c, v)| (v - self.get(c, r)).abs() <= rtol * scale)
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, LinalgError> {
        let t: Vec<_> = self
            .triplets()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))
    }
}

/// Assembles a symmetric saddle matrix `[[H, B], [Bᵀ, 0]]` where `B` is given
/// column-wise as sparse `(row, value)` lists.
pub fn saddle_matrix(
    h: &SparseMatrix,
    constraint_cols: &[Vec<(usize, f64)>],
) -> Result<SparseMatrix, LinalgError> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(LinalgError::Dimension("saddle block H must be square".into()));
    }
    let p = constraint_cols.len();
    let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(
        h.nnz() + 2 * constraint_cols.iter().map(Vec::len).sum::<usize>(),
    );
    t.extend(h.triplets());
    for (j, col) in constraint_cols.iter().enumerate() {
        for &(r, v) in col {
            t.push((r, n + j, v));
            t.push((n + j, r, v));
        }
    }
    SparseMatrix::from_triplets(n + p, n + p, &t)
}

enum Decomposition {
    Lu(Lu<usize, f64>),
    Llt(Llt<usize, f64>),
}

impl Decomposition {
    fn solve_in_place(&self, rhs: faer::MatMut<'_, f64>) {
        use faer::prelude::Solve;
        match self {
            Decomposition::Lu(lu) => lu.solve_in_place(rhs),
            Decomposition::Llt(llt) => llt.solve_in_place(rhs),
        }
    }
}

/// One sparse factorization of a square system (LU, or Cholesky for
/// positive definite matrices), reused for any number of right-hand sides.
pub struct SparseFactor {
    matrix: SparseMatrix,
    lu: Decomposition,
}

impl std::fmt::Debug for SparseFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseFactor")
            .field("dim", &self.matrix.nrows())
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

impl SparseFactor {
    pub fn new(matrix: SparseMatrix) -> Result<Self, LinalgError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LinalgError::Dimension("factorized matrix must be square".into()));
        }
        let lu = matrix
            .to_faer()?
            .sp_lu()
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            matrix,
            lu: Decomposition::Lu(lu),
        })
    }

    /// Sparse Cholesky; fails unless `matrix` is symmetric positive definite.
    pub fn new_spd(matrix: SparseMatrix) -> Result<Self, LinalgError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LinalgError::Dimension("factorized matrix must be square".into()));
        }
        let llt = matrix
            .to_faer()?
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            matrix,
            lu: Decomposition::Llt(llt),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Solves `K X = B` column-wise. One step of iterative refinement is
    /// applied to columns whose relative residual exceeds the acceptance
    /// threshold; a column that still fails marks the system singular.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        let n = self.dim();
        if rhs.nrows() != n {
            return Err(LinalgError::Dimension(format!(
                "rhs has {} rows, system has {n}",
                rhs.nrows()
            )));
        }
        let mut work = Mat::<f64>::from_fn(n, rhs.ncols(), |i, j| rhs[(i, j)]);
        self.lu.solve_in_place(work.as_mut());
        let mut x = DMatrix::from_fn(n, rhs.ncols(), |i, j| work[(i, j)]);

        let kscale = self.matrix.max_abs();
        let residual_of = |x: &DMatrix<f64>| -> Vec<(f64, DVector<f64>)> {
            let kx = self.matrix.mul_dense(x);
            (0..x.ncols())
                .map(|j| {
                    let r: DVector<f64> = rhs.column(j) - kx.column(j);
                    let denom = kscale * x.column(j).amax() + rhs.column(j).amax();
                    let rel = if denom > 0.0 { r.amax() / denom } else { r.amax() };
                    (if rel.is_finite() { rel } else { f64::INFINITY }, r)
                })
                .collect()
        };
        let res = residual_of(&x);
        let bad: Vec<usize> = (0..res.len()).filter(|&j| res[j].0 > SOLVE_RTOL * 1e-3).collect();
        if !bad.is_empty() {
            let mut corr = Mat::<f64>::from_fn(n, bad.len(), |i, k| res[bad[k]].1[i]);
            self.lu.solve_in_place(corr.as_mut());
            for (k, &j) in bad.iter().enumerate() {
                for i in 0..n {
                    x[(i, j)] += corr[(i, k)];
                }
            }
            let worst = residual_of(&x)
                .into_iter()
                .map(|(rel, _)| rel)
                .fold(0.0, f64::max);
            if worst > SOLVE_RTOL || x.iter().any(|v| !v.is_finite()) {
                return Err(LinalgError::Singular {
                    dim: n,
                    residual: worst,
                    rank_defect: None,
                });
            }
        }
        Ok(x)
    }

    /// Solves for `ncols` right-hand sides produced on demand by `fill(j, col)`
    /// (which receives a zeroed column), keeping only the leading `keep_rows`
    /// entries of each solution. Columns are processed in batches so the
    /// full-height workspace stays bounded for large systems.
    pub fn solve_columns<F>(
        &self,
        ncols: usize,
        keep_rows: usize,
        fill: F,
    ) -> Result<DMatrix<f64>, LinalgError>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        use rayon::prelude::*;
        const BATCH: usize = 32;
        let n = self.dim();
        if keep_rows > n {
            return Err(LinalgError::Dimension(format!(
                "cannot keep {keep_rows} rows of a {n}-dimensional solve"
            )));
        }
        let mut out = DMatrix::zeros(keep_rows, ncols);
        if keep_rows == 0 || ncols == 0 {
            return Ok(out);
        }
        out.as_mut_slice()
            .par_chunks_mut(keep_rows * BATCH)
            .enumerate()
            .try_for_each(|(b, chunk)| {
                let start = b * BATCH;
                let width = chunk.len() / keep_rows;
                let mut rhs = DMatrix::zeros(n, width);
                for k in 0..width {
                    fill(start + k, rhs.column_mut(k).as_mut_slice());
                }
                let x = self.solve(&rhs)?;
                for k in 0..width {
                    chunk[k * keep_rows..(k + 1) * keep_rows].copy_from_slice(&x.column(k).as_slice()[..keep_rows]);
                }
                Ok(())
            })?;
        Ok(out)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        Ok(self.solve(&m)?.column(0).into_owned())
    }
}

/// Dense SVD of a matrix of any shape.
fn svd(a: &DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    a.clone().svd(true, true)
}

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(0);
    }
    a.clone().svd(false, false).singular_values
}

/// Numerical rank with cutoff `rtol * σ_max`.
pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(a);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Induced 2-norm (largest singular value).
pub fn norm2(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

/// σ_max / σ_min over the `min(rows, cols)` singular values; infinite when
/// rank-deficient.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    if s.is_empty() {
        return 1.0;
    }
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Moore–Penrose pseudo-inverse via SVD with cutoff `rtol * σ_max`.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = svd(a);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && s > rtol * smax {
            out += (vt.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Orthonormal basis of the null space of `a` (columns).
pub fn null_space(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so the full right singular basis is returned.
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = svd(&padded);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let vt = svd.v_t.unwrap();
    let cols: Vec<_> = (0..svd.singular_values.len())
        .filter(|&k| smax == 0.0 || svd.singular_values[k] <= rtol * smax)
        .map(|k| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Dense solve of a square system with full pivoting; returns the residual-
/// checked solution or a singularity report including the rank defect.
pub fn dense_solve(k: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = k.nrows();
    if k.ncols() != n || rhs.nrows() != n {
        return Err(LinalgError::Dimension(format!(
            "dense solve: {}x{} system with {} rhs rows",
            k.nrows(),
            k.ncols(),
            rhs.nrows()
        )));
    }
    let singular = |residual: f64| LinalgError::Singular {
        dim: n,
        residual,
        rank_defect: Some(n - rank(k, 1e-13)),
    };
    let x = k
        .clone()
        .full_piv_lu()
        .solve(rhs)
        .ok_or_else(|| singular(f64::INFINITY))?;
    let r = rhs - k * &x;
    let denom = k.amax() * x.amax() + rhs.amax();
    let rel = if denom > 0.0 { r.amax() / denom } else { 0.0 };
    if !rel.is_finite() || rel > SOLVE_RTOL || rank(k, 1e-13) < n {
        return Err(singular(rel));
    }
    Ok(x)
}

/// Closest rotation to `g` in the Frobenius sense that maximizes `tr(Rᵀg)`,
/// with the reflection case resolved by flipping the weakest singular
/// direction.
pub fn polar_rotation(g: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = g.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // nalgebra orders singular values descending, so index 2 is weakest.
        let (smin_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut d = Matrix3::identity();
        d[(smin_idx, smin_idx)] = -1.0;
        r = u * d * vt;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_product_matches_dense() {
        let a = DMatrix::from_row_slice(3, 4, &[1.0, 0.0, 2.0, 0.0, 0.0, -1.0, 0.0, 3.0, 4.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0, -2.0]);
        let sa = SparseMatrix::from_dense(&a, 0.0);
        let sb = SparseMatrix::from_dense(&b, 0.0);
        assert_eq!(sa.mul_sparse(&sb).unwrap().to_dense(), &a * &b);
        assert!(sb.mul_sparse(&sb).is_err());
        assert_eq!(sa.column_range(1, 2).to_dense(), a.columns(1, 2).into_owned());
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = SparseMatrix::from_triplets(
            3,
            2,
            &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 0.5), (1, 1, -1.0)],
        )
        .unwrap();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(2, 0), 1.5);
        assert_eq!(a.get(0, 0), 2.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.col(0).map(|(r, _)| r).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn out_of_bounds_triplet_rejected() {
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]),
            Err(LinalgError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn products_match_dense() {
        let d = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 2.0]);
        let s = SparseMatrix::from_dense(&d, 0.0);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!((s.mul_dense(&b) - &d * &b).amax() < 1e-14);
        assert!((s.tr_mul_dense(&b) - d.transpose() * &b).amax() < 1e-14);
        assert!(s.is_symmetric(1e-12));
        assert_eq!(s.transpose(), s);
    }

    #[test]
    fn saddle_factor_solves_and_flags_singular() {
        let h = SparseMatrix::identity(2);
        let k = saddle_matrix(&h, &[vec![(0, 1.0)]]).unwrap();
        let f = SparseFactor::new(k).unwrap();
        let x = f
            .solve_vec(&DVector::from_vec(vec![0.0, 0.0, 0.5]))
            .unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14 && x[1].abs() < 1e-14);

        // [[0,0],[0,0]] energy with a single constraint on x0: x1 is free.
        let h0 = SparseMatrix::zeros(2, 2);
        let k0 = saddle_matrix(&h0, &[vec![(0, 1.0)]]).unwrap();
        let res = SparseFactor::new(k0).and_then(|f| f.solve_vec(&DVector::from_vec(vec![0.0, 1.0, 0.5])));
        assert!(res.is_err());
    }

    #[test]
    fn pinv_identities() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.0, 0.0]);
        let p = pinv(&a, PINV_RTOL);
        assert!((&a * &p * &a - &a).amax() < 1e-12);
        assert!((&p * &a * &p - &p).amax() < 1e-12);
        assert_eq!(rank(&a, PINV_RTOL), 1);
        let ns = null_space(&a, PINV_RTOL);
        assert_eq!(ns.ncols(), 1);
        assert!((&a * &ns).amax() < 1e-12);
    }

    #[test]
    fn polar_of_rotation_is_itself() {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        assert!((polar_rotation(&r) - r).amax() < 1e-12);
    }

    #[test]
    fn polar_fixes_reflection() {
        let g = Matrix3::from_diagonal(&nalgebra::Vector3::new(2.0, 1.0, -0.1));
        let r = polar_rotation(&g);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r - Matrix3::identity()).amax() < 1e-12);
    }
}
