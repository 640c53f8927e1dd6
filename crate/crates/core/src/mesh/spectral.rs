use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::operators::{cot_stiffness, lumped_mass};
use super::{Mesh, MeshError};
use crate::linalg::{SparseFactor, SparseMatrix};

/// Meshes up to this size use a dense symmetric eigensolver.
const DENSE_LIMIT: usize = 1500;
const MAX_ITERS: usize = 500;
const RESIDUAL_TOL: f64 = 1e-9;

/// Smallest generalized eigenpairs of (stiffness, lumped mass), ascending,
/// with mass-orthonormal columns.
#[derive(Debug, Clone)]
pub struct Eigenbasis {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

fn normalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for i in 0..col.len() {
            if col[i].abs() > col[best].abs() * (1.0 + 1e-9) {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn sort_pairs(values: &DVector<f64>, vectors: &DMatrix<f64>, count: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let vals = order[..count].iter().map(|&i| values[i]).collect();
    let cols: Vec<_> = order[..count].iter().map(|&i| vectors.column(i).into_owned()).collect();
    (vals, DMatrix::from_columns(&cols))
}

pub fn lb_eigenbasis(mesh: &Mesh, count: usize) -> Result<Eigenbasis, MeshError> {
    let n = mesh.n();
    if count == 0 || count > n {
        return Err(MeshError::InvalidParameter(format!(
            "eigenvector count {count} must be in 1..={n}"
        )));
    }
    let k = cot_stiffness(mesh);
    let mass = lumped_mass(mesh);
    let (values, mut vectors) = if n <= DENSE_LIMIT {
        dense_eigen(&k, &mass, count)
    } else {
        subspace_iteration(&k, &mass, count)?
    };
    normalize_signs(&mut vectors);
    Ok(Eigenbasis { values, vectors })
}

fn dense_eigen(k: &SparseMatrix, mass: &[f64], count: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = mass.len();
    let s: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let kd = k.to_dense();
    let a = DMatrix::from_fn(n, n, |i, j| s[i] * kd[(i, j)] * s[j]);
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let (vals, mut vecs) = sort_pairs(&eig.eigenvalues, &eig.eigenvectors, count);
    for (i, mut row) in vecs.row_iter_mut().enumerate() {
        row *= s[i];
    }
    (vals, vecs)
}

/// Rayleigh-Ritz on span(Y) for the pencil (K, M): returns M-orthonormal Ritz
/// vectors and values, ascending.
fn ritz(k: &SparseMatrix, mass: &[f64], y: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let ky = k.mul_dense(y);
    let mut my = y.clone();
    for (i, mut row) in my.row_iter_mut().enumerate() {
        row *= mass[i];
    }
    let kr = y.tr_mul(&ky);
    let mr = y.tr_mul(&my);
    let kr = (&kr + kr.transpose()) * 0.5;
    let mr = (&mr + mr.transpose()) * 0.5;
    let chol = mr.cholesky()?;
    let l = chol.l();
    let linv = l.clone().try_inverse()?;
    let c = &linv * kr * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let w = linv.transpose() * eig.eigenvectors;
    let (vals, wv) = sort_pairs(&eig.eigenvalues, &w, eig.eigenvalues.len());
    Some((DVector::from_vec(vals), y * wv))
}

/// Shift-invert block subspace iteration with a single sparse factorization
/// of `K + σM`.
fn subspace_iteration(k: &SparseMatrix, mass: &[f64], count: usize) -> Result<(Vec<f64>, DMatrix<f64>), MeshError> {
    let n = mass.len();
    let p = (2 * count).max(count + 8).min(n);
    let diag_ratio = (0..n).map(|i| k.get(i, i) / mass[i]).sum::<f64>() / n as f64;
    let sigma = 1e-6 * diag_ratio;
    let mut t: Vec<(usize, usize, f64)> = k.triplets().collect();
    t.extend(mass.iter().enumerate().map(|(i, &m)| (i, i, sigma * m)));
    let shifted = SparseMatrix::from_triplets(n, n, &t)?;
    let factor = SparseFactor::new(shifted)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let kscale = (0..n).map(|i| k.get(i, i)).fold(0.0, f64::max);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut mx = x.clone();
        for (i, mut row) in mx.row_iter_mut().enumerate() {
            row *= mass[i];
        }
        let y = factor.solve(&mx)?;
        let (vals, vecs) = ritz(k, mass, &y).ok_or(MeshError::NoConvergence { residual })?;
        x = vecs;
        let kx = k.mul_dense(&x.columns(0, count).into_owned());
        residual = (0..count)
            .map(|j| {
                let xj = x.column(j);
                let r = DVector::from_fn(n, |i, _| kx[(i, j)] - vals[j] * mass[i] * xj[i]);
                r.norm() / (kscale * xj.norm())
            })
            .fold(0.0, f64::max);
        if residual < RESIDUAL_TOL {
            let vals = DVector::from_iterator(count, vals.iter().take(count).copied());
            return Ok((vals.iter().copied().collect(), x.columns(0, count).into_owned()));
        }
    }
    Err(MeshError::NoConvergence { residual })
}

/// Spectral coordinates used for clustering and proxy sampling: the
/// constant mode is dropped and each remaining eigenvector is weighted by
/// `1/√λ` (near-zero eigenvalues are floored relative to the largest).
pub fn embedding(eig: &Eigenbasis) -> DMatrix<f64> {
    let e = eig.values.len();
    if e <= 1 {
        return DMatrix::zeros(eig.vectors.nrows(), 1);
    }
    let top = eig.values.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = eig.vectors.columns(1, e - 1).into_owned();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col /= eig.values[j + 1].max(1e-10 * top).sqrt();
    }
    out
}
