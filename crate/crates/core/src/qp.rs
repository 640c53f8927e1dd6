//! Equality-constrained quadratic programs
//!
//! ```text
//! min ½ XᵀHX − qᵀX   s.t.  AᵀX = b
//! ```
//!
//! and their variational subspaces: for demand bases `C` (constraint space)
//! and `D` (linear-term space) the first-stage minimizer
//! `X*(Z, Y) = N·Z + UD·Y` is precomputed once from the saddle system
//! `[[H, C], [Cᵀ, 0]]`, after which any demand with `A ∈ Span(C)` and
//! `q ∈ Span(D)` is solved exactly by a tiny dense problem.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::error::ErrorClass;
use crate::linalg::{self, LinalgError, SparseFactor, SparseMatrix, PINV_RTOL};

/// Largest dimension for which dense oracles and exact SVD checks run.
pub const DESK_CAP: usize = 5000;
/// Default cap on cond(C).
pub const DEFAULT_COND_CAP: f64 = 1e8;
/// Relative entrywise tolerance for the symmetry of `H`.
pub const SYMMETRY_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("H is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("constraint matrix A is rank deficient (rank {rank} < {m} columns)")]
    RankDeficientConstraints { rank: usize, m: usize },
    #[error("demand basis C is ill-conditioned: cond {cond:.3e} exceeds cap {cap:.1e}")]
    IllConditioned { cond: f64, cap: f64 },
    #[error("columns of [C, D] are linearly dependent (rank {rank} of {cols})")]
    DependentDemands { rank: usize, cols: usize },
    #[error("degenerate subspace configuration: saddle matrix [[H, C], [Cᵀ, 0]] is singular{}",
        .rank_defect.map(|d| format!(" (rank defect {d})")).unwrap_or_default())]
    DegenerateSubspace { rank_defect: Option<usize> },
    #[error("constraints AᵀX = b are infeasible inside the subspace (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("reduced problem has no unique minimizer inside the subspace")]
    NotUnique,
    #[error("dense oracle refused: n = {n} exceeds desk-scale cap {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("KKT system is singular{}", .rank_defect.map(|d| format!(" (rank defect {d})")).unwrap_or_default())]
    Singular { rank_defect: Option<usize> },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl QpError {
    pub fn class(&self) -> ErrorClass {
        match self {
            QpError::Parse { .. } => ErrorClass::Parse,
            QpError::Io { .. } => ErrorClass::Io,
            QpError::Dimension(_)
            | QpError::NotSymmetric(_)
            | QpError::RankDeficientConstraints { .. }
            | QpError::IllConditioned { .. }
            | QpError::DependentDemands { .. }
            | QpError::SizeCap { .. } => ErrorClass::Validation,
            QpError::Linalg(e) => e.class(),
            _ => ErrorClass::Numeric,
        }
    }
}

/// `(H, q, A, b)` with `H` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: SparseMatrix,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        h: SparseMatrix,
        q: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = h.nrows();
        check_symmetric(&h)?;
        if q.len() != n || a.nrows() != n || b.len() != a.ncols() {
            return Err(QpError::Dimension(format!(
                "H is {n}x{n}, q has {}, A is {}x{}, b has {}",
                q.len(),
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        Ok(Self { h, q, a, b })
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.h.mul_vec(x)) - self.q.dot(x)
    }

    /// Full column rank of `A` with cutoff `1e-10·σ_max`.
    pub fn check_constraint_rank(&self) -> Result<(), QpError> {
        let rank = linalg::rank(&self.a, PINV_RTOL);
        if rank < self.m() {
            return Err(QpError::RankDeficientConstraints { rank, m: self.m() });
        }
        Ok(())
    }

    pub fn exact_solve(&self) -> Result<DVector<f64>, QpError> {
        exact_solve(&self.h, &self.q, &self.a, &self.b)
    }
}

fn check_symmetric(h: &SparseMatrix) -> Result<(), QpError> {
    if h.nrows() != h.ncols() {
        return Err(QpError::Dimension(format!(
            "H must be square, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    if !h.is_symmetric(SYMMETRY_RTOL) {
        let scale = h.max_abs().max(f64::MIN_POSITIVE);
        let asym = h
            .triplets()
            .map(|(r, c, v)| (v - h.get(c, r)).abs())
            .fold(0.0, f64::max);
        return Err(QpError::NotSymmetric(asym / scale));
    }
    Ok(())
}

/// Demand bases `C` (n×d) and `D` (n×k).
#[derive(Debug, Clone)]
pub struct DemandBasis {
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    cond_c: f64,
}

impl DemandBasis {
    pub fn new(c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, QpError> {
        Self::with_cond_cap(c, d, DEFAULT_COND_CAP)
    }

    pub fn with_cond_cap(c: DMatrix<f64>, d: DMatrix<f64>, cap: f64) -> Result<Self, QpError> {
        let n = c.nrows();
        if d.nrows() != n && d.ncols() > 0 {
            return Err(QpError::Dimension(format!(
                "C has {n} rows but D has {}",
                d.nrows()
            )));
        }
        let d = if d.ncols() == 0 { DMatrix::zeros(n, 0) } else { d };
        if c.ncols() == 0 || c.ncols() > n {
            return Err(QpError::Dimension(format!(
                "C must have between 1 and {n} columns, got {}",
                c.ncols()
            )));
        }
        let cond_c = if n <= DESK_CAP {
            linalg::condition_number(&c)
        } else {
            gram_condition(&c)
        };
        if !(cond_c <= cap) {
            return Err(QpError::IllConditioned { cond: cond_c, cap });
        }
        if n <= DESK_CAP && d.ncols() > 0 {
            let mut cd = DMatrix::zeros(n, c.ncols() + d.ncols());
            cd.columns_mut(0, c.ncols()).copy_from(&c);
            cd.columns_mut(c.ncols(), d.ncols()).copy_from(&d);
            let rank = linalg::rank(&cd, PINV_RTOL);
            if rank < cd.ncols() {
                return Err(QpError::DependentDemands {
                    rank,
                    cols: cd.ncols(),
                });
            }
        }
        Ok(Self { c, d, cond_c })
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn cond_c(&self) -> f64 {
        self.cond_c
    }
}

/// cond(C) from the eigenvalues of the d×d Gram matrix; only used where a
/// full SVD of C is too expensive.
fn gram_condition(c: &DMatrix<f64>) -> f64 {
    let gram = c.tr_mul(c);
    let eig = gram.symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

/// Columns of `N` and `U·D`.
#[derive(Debug, Clone)]
pub struct VariationalSubspace {
    pub n_mat: DMatrix<f64>,
    pub ud: DMatrix<f64>,
}

impl VariationalSubspace {
    pub fn d(&self) -> usize {
        self.n_mat.ncols()
    }

    pub fn k(&self) -> usize {
        self.ud.ncols()
    }

    /// `[N, UD]` as one n×(d+k) matrix.
    pub fn basis(&self) -> DMatrix<f64> {
        let n = self.n_mat.nrows();
        let mut b = DMatrix::zeros(n, self.d() + self.k());
        b.columns_mut(0, self.d()).copy_from(&self.n_mat);
        b.columns_mut(self.d(), self.k()).copy_from(&self.ud);
        b
    }

    pub fn reconstruct(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.n_mat * z + &self.ud * y
    }

    /// `max(‖CᵀN − I‖, ‖CᵀUD‖)` entrywise.
    pub fn consistency_error(&self, c: &DMatrix<f64>) -> f64 {
        let ctn = c.tr_mul(&self.n_mat) - DMatrix::identity(self.d(), self.d());
        let ctud = c.tr_mul(&self.ud);
        ctn.amax().max(if ctud.is_empty() { 0.0 } else { ctud.amax() })
    }
}

#[derive(Debug, Clone)]
pub struct ReducedSolution {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
}

fn dense_columns_sparse(c: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..c.ncols())
        .map(|j| {
            c.column(j)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect()
        })
        .collect()
}

fn degenerate(saddle: &SparseMatrix) -> QpError {
    let rank_defect = if saddle.nrows() <= DESK_CAP {
        let dense = saddle.to_dense();
        Some(saddle.nrows() - linalg::rank(&dense, 1e-13))
    } else {
        None
    };
    QpError::DegenerateSubspace { rank_defect }
}

/// Solves the saddle system once per right-hand side family: `N` from
/// `(0; eᵢ)` and `UD` from `(D·eⱼ; 0)`, reusing a single factorization.
pub fn build_subspace(
    h: &SparseMatrix,
    basis: &DemandBasis,
) -> Result<VariationalSubspace, QpError> {
    check_symmetric(h)?;
    let n = h.nrows();
    if basis.c().nrows() != n {
        return Err(QpError::Dimension(format!(
            "H is {n}x{n} but C has {} rows",
            basis.c().nrows()
        )));
    }
    let d = basis.c().ncols();
    let k = basis.d().ncols();
    let saddle = linalg::saddle_matrix(h, &dense_columns_sparse(basis.c()))?;
    let factor = match SparseFactor::new(saddle.clone()) {
        Ok(f) => f,
        Err(_) => return Err(degenerate(&saddle)),
    };
    let dm = basis.d();
    let sol = factor
        .solve_columns(d + k, n, |j, col| {
            if j < d {
                col[n + j] = 1.0;
            } else {
                col[..n].copy_from_slice(dm.column(j - d).as_slice());
            }
        })
        .map_err(|e| match e {
            LinalgError::Singular { .. } => degenerate(&saddle),
            other => QpError::Linalg(other),
        })?;
    Ok(VariationalSubspace {
        n_mat: sol.columns(0, d).into_owned(),
        ud: sol.columns(d, k).into_owned(),
    })
}

/// Minimizes the objective over `X = N·Z + UD·Y` with `AᵀX = b` imposed
/// exactly, via the dense reduced KKT system.
pub fn solve_in_subspace(
    sub: &VariationalSubspace,
    h: &SparseMatrix,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<ReducedSolution, QpError> {
    let n = h.nrows();
    if sub.n_mat.nrows() != n || q.len() != n || a.nrows() != n || b.len() != a.ncols() {
        return Err(QpError::Dimension(
            "subspace, H, q, A and b disagree in size".into(),
        ));
    }
    let raw = sub.basis();
    // `[N, UD]` can be badly scaled when the saddle system is nearly
    // singular; an orthonormal basis of the same span keeps `BᵀHB` usable.
    let qr = raw.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    let orthonormal = rmax > 0.0 && r.diagonal().iter().all(|v| v.abs() > 1e-13 * rmax);
    let basis = if orthonormal { qr.q() } else { raw };
    let p = basis.ncols();
    let m = a.ncols();
    let hb = h.mul_dense(&basis);
    let mut hr = basis.tr_mul(&hb);
    hr = (&hr + hr.transpose()) * 0.5;
    let qr = basis.tr_mul(q);
    let ar = basis.tr_mul(a);
    let rank = linalg::rank(&ar, PINV_RTOL);

    let w = if rank == m {
        let mut kkt = DMatrix::zeros(p + m, p + m);
        kkt.view_mut((0, 0), (p, p)).copy_from(&hr);
        kkt.view_mut((0, p), (p, m)).copy_from(&ar);
        kkt.view_mut((p, 0), (m, p)).copy_from(&ar.transpose());
        let mut rhs = DMatrix::zeros(p + m, 1);
        rhs.view_mut((0, 0), (p, 1)).copy_from(&qr);
        rhs.view_mut((p, 0), (m, 1)).copy_from(b);
        match linalg::dense_solve(&kkt, &rhs) {
            Ok(sol) => sol.rows(0, p).column(0).into_owned(),
            Err(_) => null_space_solve(&hr, &qr, &ar, b)?,
        }
    } else {
        let w0 = linalg::pinv(&ar.transpose(), PINV_RTOL) * b;
        let residual = (ar.tr_mul(&w0) - b).amax();
        if residual > 1e-8 * (1.0 + b.amax()) {
            return Err(QpError::Infeasible { residual });
        }
        null_space_solve(&hr, &qr, &ar, b)?
    };

    let x = &basis * &w;
    let residual = if m == 0 { 0.0 } else { (a.tr_mul(&x) - b).amax() };
    if residual > 1e-8 * (1.0 + b.amax()) {
        return Err(QpError::Infeasible { residual });
    }
    let lambda = linalg::pinv(&ar, PINV_RTOL) * (&qr - &hr * &w);
    let w = if orthonormal {
        r.solve_upper_triangular(&w).expect("nonzero diagonal checked above")
    } else {
        w
    };
    Ok(ReducedSolution {
        z: w.rows(0, sub.d()).into_owned(),
        y: w.rows(sub.d(), sub.k()).into_owned(),
        x,
        lambda,
    })
}

/// Feasible particular solution plus a minimization over the null space of
/// the reduced constraints; handles redundant constraints and singular
/// reduced KKT matrices.
fn null_space_solve(
    hr: &DMatrix<f64>,
    qr: &DVector<f64>,
    ar: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, QpError> {
    let art = ar.transpose();
    let w0 = linalg::pinv(&art, PINV_RTOL) * b;
    let k = linalg::null_space(&art, PINV_RTOL);
    if k.ncols() == 0 {
        return Ok(w0);
    }
    let kh = k.tr_mul(hr) * &k;
    let rhs = k.tr_mul(&(qr - hr * &w0));
    let kh_rank = linalg::rank(&kh, 1e-12);
    if kh_rank < kh.ncols() {
        return Err(QpError::NotUnique);
    }
    let z = linalg::dense_solve(&kh, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))
        .map_err(|_| QpError::NotUnique)?;
    Ok(w0 + k * z.column(0))
}

/// Dense KKT solve of the full problem; returns `(X, Λ)`.
pub fn exact_solve_with_multipliers(
    h: &SparseMatrix,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let n = h.nrows();
    if n > DESK_CAP {
        return Err(QpError::SizeCap { n, cap: DESK_CAP });
    }
    if q.len() != n || a.nrows() != n || b.len() != a.ncols() {
        return Err(QpError::Dimension("H, q, A and b disagree in size".into()));
    }
    let m = a.ncols();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h.to_dense());
    kkt.view_mut((0, n), (n, m)).copy_from(a);
    kkt.view_mut((n, 0), (m, n)).copy_from(&a.transpose());
    let mut rhs = DMatrix::zeros(n + m, 1);
    rhs.view_mut((0, 0), (n, 1)).copy_from(q);
    rhs.view_mut((n, 0), (m, 1)).copy_from(b);
    let sol = linalg::dense_solve(&kkt, &rhs).map_err(|e| match e {
        LinalgError::Singular { rank_defect, .. } => QpError::Singular { rank_defect },
        other => QpError::Linalg(other),
    })?;
    Ok((
        sol.rows(0, n).column(0).into_owned(),
        sol.rows(n, m).column(0).into_owned(),
    ))
}

/// Unique minimizer of the full problem by a dense saddle solve (desk scale).
pub fn exact_solve(
    h: &SparseMatrix,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, QpError> {
    exact_solve_with_multipliers(h, q, a, b).map(|(x, _)| x)
}

/// `(x − y)ᵀ H (x − y)`, clamped at zero against round-off.
pub fn mahalanobis_distance(
    h: &SparseMatrix,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64, QpError> {
    let n = h.nrows();
    if x.len() != n || y.len() != n || h.ncols() != n {
        return Err(QpError::Dimension(format!(
            "H is {}x{}, vectors have {} and {}",
            h.nrows(),
            h.ncols(),
            x.len(),
            y.len()
        )));
    }
    let e = x - y;
    Ok(e.dot(&h.mul_vec(&e)).max(0.0))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> QpError + '_ {
    move |source| QpError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a Matrix Market `coordinate real` file (general or symmetric).
pub fn read_matrix_market(path: &Path) -> Result<SparseMatrix, QpError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let parse = |line: usize, msg: &str| QpError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse(1, "empty file"))?;
    let header = header.map_err(io_err(path))?.to_lowercase();
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(parse(1, "missing %%MatrixMarket matrix header"));
    }
    if fields[2] != "coordinate" || !(fields[3] == "real" || fields[3] == "integer") {
        return Err(parse(1, "only coordinate real/integer matrices are supported"));
    }
    let symmetric = match fields[4] {
        "general" => false,
        "symmetric" => true,
        _ => return Err(parse(1, "unsupported symmetry (general or symmetric)")),
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let tok: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                if tok.len() != 3 {
                    return Err(parse(lineno, "expected 'rows cols nnz'"));
                }
                let v: Result<Vec<usize>, _> = tok.iter().map(|s| s.parse()).collect();
                let v = v.map_err(|_| parse(lineno, "invalid size line"))?;
                size = Some((v[0], v[1], v[2]));
                triplets.reserve(v[2]);
            }
            Some((nr, nc, _)) => {
                if tok.len() != 3 {
                    return Err(parse(lineno, "expected 'row col value'"));
                }
                let r: usize = tok[0].parse().map_err(|_| parse(lineno, "bad row index"))?;
                let c: usize = tok[1].parse().map_err(|_| parse(lineno, "bad column index"))?;
                let v: f64 = tok[2].parse().map_err(|_| parse(lineno, "bad value"))?;
                if r == 0 || c == 0 || r > nr || c > nc {
                    return Err(parse(lineno, "index out of range (1-based)"));
                }
                triplets.push((r - 1, c - 1, v));
                if symmetric && r != c {
                    triplets.push((c - 1, r - 1, v));
                }
            }
        }
    }
    let (nr, nc, nnz) = size.ok_or_else(|| parse(1, "missing size line"))?;
    let stored = if symmetric {
        triplets.iter().filter(|t| t.0 >= t.1).count()
    } else {
        triplets.len()
    };
    if stored != nnz {
        return Err(parse(1, &format!("header declares {nnz} entries, found {stored}")));
    }
    Ok(SparseMatrix::from_triplets(nr, nc, &triplets)?)
}

pub fn write_matrix_market(path: &Path, a: &SparseMatrix) -> Result<(), QpError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    let mut body = String::new();
    body.push_str("%%MatrixMarket matrix coordinate real general\n");
    body.push_str(&format!("{} {} {}\n", a.nrows(), a.ncols(), a.nnz()));
    for (r, c, v) in a.triplets() {
        body.push_str(&format!("{} {} {:e}\n", r + 1, c + 1, v));
    }
    out.write_all(body.as_bytes()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Whitespace-separated dense matrix, one row per line; `#` starts a comment.
pub fn read_dense_text(path: &Path) -> Result<DMatrix<f64>, QpError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = t.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|_| QpError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: "non-numeric entry".into(),
        })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(QpError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn write_dense_text(path: &Path, a: &DMatrix<f64>) -> Result<(), QpError> {
    let mut s = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = a.row(i).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}
