//! Hat-space analysis of variational subspaces.
//!
//! With `H = LᵀL` (pivoted Cholesky, `L` padded to n×n) the problem becomes
//!
//! ```text
//! min ½‖X̂‖² − q̂ᵀX̂   s.t.  ÂᵀX̂ = b̂,
//! q̂ = L⁺ᵀq,  Â = L⁺ᵀA,  b̂ = b − AᵀX̄_min,  X̄_min = (I − L⁺L)X_min
//! ```
//!
//! where Mahalanobis distances under `H` turn into Euclidean distances. All
//! routines here are dense and meant for small instances; they double as
//! oracles for the sparse machinery in [`crate::qp`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::error::ErrorClass;
use crate::linalg::{self, SparseMatrix, PINV_RTOL};
use crate::qp::{self, DemandBasis, QpError, QuadraticProgram, DESK_CAP};

/// Pivot cutoff of the semidefinite Cholesky, relative to the largest diagonal.
pub const CHOLESKY_RTOL: f64 = 1e-10;

/// Random instances whose KKT matrix is worse conditioned than this are
/// redrawn: the dense oracle itself is then only good to about `eps·cond`.
pub const INSTANCE_COND_CAP: f64 = 1e10;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hat-space analysis is dense; n = {n} exceeds cap {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("transformed constraint matrix is rank deficient (rank {rank} < {m})")]
    RankDeficient { rank: usize, m: usize },
    #[error("columns of the transformed demands are linearly dependent (rank {rank} of {cols})")]
    DependentDemands { rank: usize, cols: usize },
    #[error("subspace cannot express the constraints: ÂᵀÎÂ is singular")]
    CannotExpress,
    #[error("bound hypothesis violated: ‖I − Â⁺ÎÂ‖ = {rho:.6} (need ≤ {rho_cap:.6} < 1) or cond(Â) = {omega:.3e} > {omega_cap:.3e}")]
    HypothesisViolated {
        rho: f64,
        rho_cap: f64,
        omega: f64,
        omega_cap: f64,
    },
    #[error("invalid bound parameters: {0}")]
    InvalidParams(String),
    #[error("quotient equivalence is defined for a fixed H; the problems use different H")]
    DifferentH,
    #[error(transparent)]
    Qp(#[from] QpError),
}

impl TheoryError {
    pub fn class(&self) -> ErrorClass {
        match self {
            TheoryError::Qp(e) => e.class(),
            TheoryError::RankDeficient { .. }
            | TheoryError::CannotExpress
            | TheoryError::HypothesisViolated { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}

/// Rank-revealing Cholesky of a symmetric PSD matrix: returns `L` (n×n,
/// zero rows past the numerical rank) with `H = LᵀL`. `L` is upper
/// triangular up to the symmetric pivoting permutation.
pub fn pivoted_cholesky(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let mut s = h.clone();
    let mut piv: Vec<usize> = (0..n).collect();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max);
    let tol = CHOLESKY_RTOL * max_diag;
    for k in 0..n {
        let (p, &best) = (k..n)
            .map(|i| (i, &s[(i, i)]))
            .fold((k, &f64::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
        if best <= tol || best <= 0.0 {
            break;
        }
        if p != k {
            s.swap_rows(k, p);
            s.swap_columns(k, p);
            r.swap_columns(k, p);
            piv.swap(k, p);
        }
        let pivot = s[(k, k)].sqrt();
        r[(k, k)] = pivot;
        for j in k + 1..n {
            r[(k, j)] = s[(k, j)] / pivot;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                s[(i, j)] -= r[(k, i)] * r[(k, j)];
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for (j, &pj) in piv.iter().enumerate() {
        l.set_column(pj, &r.column(j));
    }
    l
}

/// `X̃ = L⁺LX`, `X̄ = (I − L⁺L)X`.
pub fn two_part_decompose(
    l: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), TheoryError> {
    if l.ncols() != x.len() {
        return Err(TheoryError::Dimension(format!(
            "L has {} columns, X has {} entries",
            l.ncols(),
            x.len()
        )));
    }
    let lp = linalg::pinv(l, PINV_RTOL);
    let tilde = &lp * (l * x);
    let bar = x - &tilde;
    Ok((tilde, bar))
}

#[derive(Debug, Clone)]
pub struct HatProblem {
    pub l: DMatrix<f64>,
    pub l_plus: DMatrix<f64>,
    pub q_hat: DVector<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub x_bar_min: DVector<f64>,
    /// Minimizer of the original problem (dense oracle).
    pub x_min: DVector<f64>,
}

impl HatProblem {
    /// `cond(Â)` and `‖Â⁺‖`.
    pub fn a_hat_pinv(&self) -> DMatrix<f64> {
        linalg::pinv(&self.a_hat, PINV_RTOL)
    }
}

fn desk_check(n: usize) -> Result<(), TheoryError> {
    if n > DESK_CAP {
        Err(TheoryError::SizeCap { n, cap: DESK_CAP })
    } else {
        Ok(())
    }
}

pub fn hat_transform(p: &QuadraticProgram) -> Result<HatProblem, TheoryError> {
    desk_check(p.n())?;
    let hd = p.h.to_dense();
    let l = pivoted_cholesky(&hd);
    let l_plus = linalg::pinv(&l, PINV_RTOL);
    let x_min = p.exact_solve()?;
    let x_bar_min = &x_min - &l_plus * (&l * &x_min);
    let lpt = l_plus.transpose();
    Ok(HatProblem {
        q_hat: &lpt * &p.q,
        a_hat: &lpt * &p.a,
        b_hat: &p.b - p.a.tr_mul(&x_bar_min),
        x_bar_min,
        x_min,
        l,
        l_plus,
    })
}

/// `X̂_min = (I − ÂÂ⁺)q̂ + (Â⁺)ᵀb̂`.
pub fn exact_hat_solution(hp: &HatProblem) -> Result<DVector<f64>, TheoryError> {
    let m = hp.a_hat.ncols();
    let rank = linalg::rank(&hp.a_hat, PINV_RTOL);
    if rank < m {
        return Err(TheoryError::RankDeficient { rank, m });
    }
    let ap = hp.a_hat_pinv();
    Ok(&hp.q_hat - &hp.a_hat * (&ap * &hp.q_hat) + ap.tr_mul(&hp.b_hat))
}

#[derive(Debug, Clone)]
pub struct HatSubspace {
    pub c_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    pub n_hat: DMatrix<f64>,
    pub ud_hat: DMatrix<f64>,
    pub u_hat: DMatrix<f64>,
    pub i_hat: DMatrix<f64>,
}

/// `Ĉ = L⁺ᵀC`, `D̂ = L⁺ᵀD`.
pub fn hat_demands(hp: &HatProblem, basis: &DemandBasis) -> (DMatrix<f64>, DMatrix<f64>) {
    let lpt = hp.l_plus.transpose();
    (&lpt * basis.c(), &lpt * basis.d())
}

pub fn hat_subspace(c_hat: &DMatrix<f64>, d_hat: &DMatrix<f64>) -> Result<HatSubspace, TheoryError> {
    let n = c_hat.nrows();
    if d_hat.nrows() != n && d_hat.ncols() > 0 {
        return Err(TheoryError::Dimension("Ĉ and D̂ row counts differ".into()));
    }
    let (d, k) = (c_hat.ncols(), d_hat.ncols());
    let mut cd = DMatrix::zeros(n, d + k);
    cd.columns_mut(0, d).copy_from(c_hat);
    if k > 0 {
        cd.columns_mut(d, k).copy_from(d_hat);
    }
    let rank = linalg::rank(&cd, PINV_RTOL);
    if rank < d + k {
        return Err(TheoryError::DependentDemands { rank, cols: d + k });
    }
    let cp = linalg::pinv(c_hat, PINV_RTOL);
    let u_hat = DMatrix::identity(n, n) - c_hat * &cp;
    let ud_hat = &u_hat * d_hat;
    let i_hat = &ud_hat * linalg::pinv(&ud_hat, PINV_RTOL) + c_hat * &cp;
    Ok(HatSubspace {
        c_hat: c_hat.clone(),
        d_hat: if k > 0 { d_hat.clone() } else { DMatrix::zeros(n, 0) },
        n_hat: cp.transpose(),
        ud_hat,
        u_hat,
        i_hat,
    })
}

/// Closest point of `x` in the hat subspace: `(Ẑ, Ŷ, X*)`.
pub fn closest_point(
    x: &DVector<f64>,
    hs: &HatSubspace,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let z = hs.c_hat.tr_mul(x);
    let y = linalg::pinv(&hs.ud_hat, PINV_RTOL) * x;
    let star = &hs.i_hat * x;
    (z, y, star)
}

/// `X̂*_min = (Î − Â_pÂ_p⁺)q̂ + (Â_p⁺)ᵀb̂` with `Â_p = ÎÂ`.
pub fn reduced_hat_solution(hp: &HatProblem, hs: &HatSubspace) -> Result<DVector<f64>, TheoryError> {
    let ap = &hs.i_hat * &hp.a_hat;
    let gram = hp.a_hat.tr_mul(&ap);
    let m = gram.ncols();
    if linalg::rank(&gram, 1e-12) < m {
        return Err(TheoryError::CannotExpress);
    }
    let app = linalg::pinv(&ap, PINV_RTOL);
    Ok(&hs.i_hat * &hp.q_hat - &ap * (&app * &hp.q_hat) + app.tr_mul(&hp.b_hat))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundParams {
    pub rho: f64,
    pub omega: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl BoundParams {
    pub fn new(rho: f64, omega: f64) -> Result<Self, TheoryError> {
        if !(0.0..1.0).contains(&rho) {
            return Err(TheoryError::InvalidParams(format!("rho = {rho} must lie in [0, 1)")));
        }
        if !(omega >= 1.0) || !omega.is_finite() {
            return Err(TheoryError::InvalidParams(format!("omega = {omega} must be finite and ≥ 1")));
        }
        Ok(Self {
            rho,
            omega,
            beta1: (2.0 - rho) / (1.0 - rho),
            beta2: 1.0 + omega / (1.0 - rho),
        })
    }

    /// The instance's own `ρ = ‖I − Â⁺ÎÂ‖` and `ω = cond(Â)`.
    pub fn measured(hp: &HatProblem, hs: &HatSubspace) -> Result<Self, TheoryError> {
        let (rho, omega) = measure_rho_omega(hp, hs);
        if rho >= 1.0 {
            return Err(TheoryError::HypothesisViolated {
                rho,
                rho_cap: rho,
                omega,
                omega_cap: omega,
            });
        }
        Self::new(rho, omega.max(1.0))
    }
}

/// `(‖I − Â⁺ÎÂ‖₂, cond(Â))` for an instance.
pub fn measure_rho_omega(hp: &HatProblem, hs: &HatSubspace) -> (f64, f64) {
    let ap = hp.a_hat_pinv();
    let m = hp.a_hat.ncols();
    let e = DMatrix::identity(m, m) - &ap * &hs.i_hat * &hp.a_hat;
    let rho = linalg::norm2(&e);
    let omega = linalg::norm2(&hp.a_hat) * linalg::norm2(&ap);
    (rho, omega)
}

/// Right-hand side of the approximation-error bound,
/// `‖Îq̂ − q̂‖ + (β₁‖b̂‖‖Â⁺‖² + β₂‖q̂‖‖Â⁺‖)·‖ÎÂ − Â‖`, after checking that
/// the instance satisfies the hypotheses encoded in `bp`.
pub fn bound_rhs(hp: &HatProblem, hs: &HatSubspace, bp: &BoundParams) -> Result<f64, TheoryError> {
    let (rho, omega) = measure_rho_omega(hp, hs);
    // Measured values are compared with a hair of slack for round-off.
    if !(rho <= bp.rho * (1.0 + 1e-12) + 1e-15) || bp.rho >= 1.0 || !(omega <= bp.omega * (1.0 + 1e-12)) {
        return Err(TheoryError::HypothesisViolated {
            rho,
            rho_cap: bp.rho,
            omega,
            omega_cap: bp.omega,
        });
    }
    let ap_norm = linalg::norm2(&hp.a_hat_pinv());
    let iq = (&hs.i_hat * &hp.q_hat - &hp.q_hat).norm();
    let ia = linalg::norm2(&(&hs.i_hat * &hp.a_hat - &hp.a_hat));
    let delta = bp.beta1 * hp.b_hat.norm() * ap_norm * ap_norm + bp.beta2 * hp.q_hat.norm() * ap_norm;
    Ok(iq + delta * ia)
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    pub rho: f64,
    pub cond: f64,
    pub hypothesis_met: bool,
    pub checks: Vec<InequalityCheck>,
}

impl LemmaReport {
    pub fn min_slack(&self) -> f64 {
        self.checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }
}

/// Both sides of the perturbation inequalities behind the bound, evaluated
/// numerically. A violated hypothesis is reported, not raised.
pub fn lemma_inequalities_check(hp: &HatProblem, hs: &HatSubspace) -> LemmaReport {
    let a = &hp.a_hat;
    let apinv = hp.a_hat_pinv();
    let (rho, cond) = measure_rho_omega(hp, hs);
    let hypothesis_met = rho < 1.0;
    if !hypothesis_met {
        return LemmaReport {
            rho,
            cond,
            hypothesis_met,
            checks: Vec::new(),
        };
    }
    let ap = &hs.i_hat * a;
    let ap_pinv = linalg::pinv(&ap, PINV_RTOL);
    let ata_inv = linalg::pinv(&a.tr_mul(a), PINV_RTOL);
    let atia_inv = linalg::pinv(&a.tr_mul(&ap), PINV_RTOL);
    let proj_gap = linalg::norm2(&(a * (&ata_inv - &atia_inv) * a.transpose()));
    let pinv_gap = linalg::norm2(&(&apinv - &ap_pinv));
    let apn = linalg::norm2(&apinv);
    let ia = linalg::norm2(&(&ap - a));
    let mk = |name, lhs: f64, rhs: f64| InequalityCheck {
        name,
        lhs,
        rhs,
        slack: rhs - lhs,
    };
    let checks = vec![
        mk("projector_gap", proj_gap, cond * rho / (1.0 - rho)),
        mk("pinv_gap", pinv_gap, apn * rho / (1.0 - rho) + apn * apn * ia),
        mk("rho_by_subspace_gap", rho, apn * ia),
        mk("projector_gap_by_subspace_gap", proj_gap, cond * apn / (1.0 - rho) * ia),
        mk("pinv_gap_by_subspace_gap", pinv_gap, apn * apn * (2.0 - rho) / (1.0 - rho) * ia),
    ];
    LemmaReport {
        rho,
        cond,
        hypothesis_met,
        checks,
    }
}

fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.norm().max(a.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Whether two problems over the same `H` share their companion problem
/// (same `A`, same `q`, same `b̂`).
pub fn are_quotient_equivalent(p1: &QuadraticProgram, p2: &QuadraticProgram) -> Result<bool, TheoryError> {
    if p1.n() != p2.n() {
        return Err(TheoryError::DifferentH);
    }
    let hscale = p1.h.max_abs().max(p2.h.max_abs()).max(f64::MIN_POSITIVE);
    let hdiff = (p1.h.to_dense() - p2.h.to_dense()).amax();
    if hdiff > 1e-12 * hscale {
        return Err(TheoryError::DifferentH);
    }
    if p1.m() != p2.m() {
        return Ok(false);
    }
    let same = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let s = x.amax().max(y.amax()).max(f64::MIN_POSITIVE);
        (x - y).amax() <= 1e-12 * s
    };
    if !same(&p1.a, &p2.a) || !same(&DMatrix::from_column_slice(p1.n(), 1, p1.q.as_slice()), &DMatrix::from_column_slice(p2.n(), 1, p2.q.as_slice())) {
        return Ok(false);
    }
    let h1 = hat_transform(p1)?;
    let h2 = hat_transform(p2)?;
    let scale = 1.0 + h1.b_hat.amax().max(h2.b_hat.amax());
    Ok((&h1.b_hat - &h2.b_hat).amax() <= 1e-9 * scale)
}

// ---------------------------------------------------------------------------
// Random instances and Monte-Carlo suites
// ---------------------------------------------------------------------------

/// How a random instance relates its demands to the subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandKind {
    /// `A = C·A_c`, `q = D·Y`: the reduced solution is exact.
    InSpan,
    /// `A = C·A_c + ε·G`, `q = D·Y + ε'·g` with random perturbation scales.
    Perturbed,
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub qp: QuadraticProgram,
    pub basis: DemandBasis,
    pub kernel_dim: usize,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn kkt_condition(h: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let (n, m) = a.shape();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((0, n), (n, m)).copy_from(a);
    k.view_mut((n, 0), (m, n)).copy_from(&a.transpose());
    linalg::condition_number(&k)
}

/// Draws a random instance of size `n` with `H` PSD of rank `n − kernel_dim`
/// (`kernel_dim ≤ 2`). Retries internally until the dense oracles accept it.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    kernel_dim: usize,
    kind: DemandKind,
) -> RandomInstance {
    assert!(n >= 6, "random instances need n ≥ 6");
    assert!(kernel_dim <= 2);
    loop {
        let g = uniform(rng, n - kernel_dim, n);
        let mut h = g.tr_mul(&g);
        h = (&h + h.transpose()) * 0.5;
        let dmax = (n / 4).max(2);
        let d = rng.random_range(kernel_dim.max(2)..=dmax);
        let k = rng.random_range(1..=(n / 4).max(1));
        let m = rng.random_range(kernel_dim.max(1)..=d);
        let c = uniform(rng, n, d);
        let dm = uniform(rng, n, k);
        let ac = uniform(rng, d, m);
        let y = uniform(rng, k, 1).column(0).into_owned();
        let mut a = &c * &ac;
        let mut q = &dm * &y;
        if kind == DemandKind::Perturbed {
            let eps_a = 10f64.powf(rng.random_range(-3.0..0.0));
            let eps_q = 10f64.powf(rng.random_range(-3.0..0.0));
            a += uniform(rng, n, m) * eps_a;
            q += uniform(rng, n, 1).column(0) * eps_q;
        }
        let b = uniform(rng, m, 1).column(0).into_owned();
        let hs = SparseMatrix::from_dense(&h, 0.0);
        let Ok(qp) = QuadraticProgram::new(hs, q, a, b) else { continue };
        let Ok(basis) = DemandBasis::new(c, dm) else { continue };
        if qp.check_constraint_rank().is_err() || qp.exact_solve().is_err() {
            continue;
        }
        if kkt_condition(&h, &qp.a) > INSTANCE_COND_CAP {
            continue;
        }
        return RandomInstance {
            qp,
            basis,
            kernel_dim,
        };
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactnessCase {
    pub index: usize,
    pub n: usize,
    pub kernel_dim: usize,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactnessReport {
    pub tolerance: f64,
    pub cases: Vec<ExactnessCase>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `sqrt(d_H(x, x_exact) / d_H(x_exact, 0))`, or the absolute root distance
/// when the exact solution has zero energy norm.
pub fn relative_h_error(h: &SparseMatrix, x: &DVector<f64>, exact: &DVector<f64>) -> f64 {
    let num = qp::mahalanobis_distance(h, x, exact).unwrap_or(f64::INFINITY);
    let den = qp::mahalanobis_distance(h, exact, &DVector::zeros(exact.len())).unwrap_or(0.0);
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Reduced versus exact solutions on instances whose demands lie in the
/// subspace; every case must agree to `tol` in relative `d_H`.
pub fn exactness_suite(seed: u64, instances: usize, max_n: usize, tol: f64) -> ExactnessReport {
    let cases: Vec<ExactnessCase> = (0..instances)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64 * 7919));
            let n = rng.random_range(8..=max_n.max(8));
            let kernel_dim = rng.random_range(0..=2);
            let inst = random_instance(&mut rng, n, kernel_dim, DemandKind::InSpan);
            let exact = inst.qp.exact_solve().expect("instance accepted by oracle");
            let rel_error = qp::build_subspace(&inst.qp.h, &inst.basis)
                .and_then(|sub| qp::solve_in_subspace(&sub, &inst.qp.h, &inst.qp.q, &inst.qp.a, &inst.qp.b))
                .map(|sol| relative_h_error(&inst.qp.h, &sol.x, &exact))
                .unwrap_or(f64::INFINITY);
            ExactnessCase {
                index,
                n,
                kernel_dim,
                rel_error,
                passed: rel_error <= tol,
            }
        })
        .collect();
    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    ExactnessReport {
        tolerance: tol,
        passed: cases.iter().all(|c| c.passed),
        max_rel_error,
        cases,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCase {
    pub index: usize,
    pub n: usize,
    pub kernel_dim: usize,
    pub error: f64,
    pub bound: f64,
    pub slack: f64,
    pub rho: f64,
    pub omega: f64,
    pub hypotheses_met: bool,
    pub lemma_min_slack: f64,
    /// `‖X*_min − X_min‖_H ≤ ‖X̂*_min − X̂_min‖` for the sparse reduced
    /// solution; only meaningful (and only checked) for definite `H`.
    pub chain_slack: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub slack_tolerance: f64,
    pub attempts: usize,
    pub cases: Vec<BoundCase>,
    pub satisfied: usize,
    pub lemma_satisfied: usize,
    pub chain_checked: usize,
    pub chain_satisfied: usize,
    pub min_slack: f64,
    pub passed: bool,
}

fn bound_case(index: usize, inst: &RandomInstance) -> Result<BoundCase, TheoryError> {
    let hp = hat_transform(&inst.qp)?;
    let (c_hat, d_hat) = hat_demands(&hp, &inst.basis);
    let hs = hat_subspace(&c_hat, &d_hat)?;
    let (rho, omega) = measure_rho_omega(&hp, &hs);
    if rho >= 1.0 {
        return Ok(BoundCase {
            index,
            n: inst.qp.n(),
            kernel_dim: inst.kernel_dim,
            error: f64::NAN,
            bound: f64::NAN,
            slack: f64::NAN,
            rho,
            omega,
            hypotheses_met: false,
            lemma_min_slack: f64::NAN,
            chain_slack: None,
        });
    }
    let exact = exact_hat_solution(&hp)?;
    let reduced = reduced_hat_solution(&hp, &hs)?;
    let error = (&reduced - &exact).norm();
    let bp = BoundParams::measured(&hp, &hs)?;
    let bound = bound_rhs(&hp, &hs, &bp)?;
    let lemma = lemma_inequalities_check(&hp, &hs);
    let chain_slack = if inst.kernel_dim == 0 {
        let sub = qp::build_subspace(&inst.qp.h, &inst.basis)?;
        let sol = qp::solve_in_subspace(&sub, &inst.qp.h, &inst.qp.q, &inst.qp.a, &inst.qp.b)?;
        let lhs = qp::mahalanobis_distance(&inst.qp.h, &sol.x, &hp.x_min)?.sqrt();
        // Round-off allowance relative to the solution scale.
        Some(error + 1e-10 * (1.0 + exact.norm()) - lhs)
    } else {
        None
    };
    Ok(BoundCase {
        index,
        n: inst.qp.n(),
        kernel_dim: inst.kernel_dim,
        error,
        bound,
        slack: bound - error,
        rho,
        omega,
        hypotheses_met: true,
        lemma_min_slack: lemma.min_slack(),
        chain_slack,
    })
}

/// Monte-Carlo check of the approximation-error bound over `instances`
/// random perturbed instances that satisfy `ρ < 1`. Instances violating the
/// hypothesis are drawn again and counted in `attempts`.
pub fn bound_suite(seed: u64, instances: usize, max_n: usize, slack_tol: f64) -> BoundReport {
    let draws: Vec<(usize, BoundCase)> = (0..instances)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)));
            let mut attempts = 0;
            loop {
                attempts += 1;
                let n = rng.random_range(8..=max_n.max(8));
                let kernel_dim = rng.random_range(0..=2);
                let inst = random_instance(&mut rng, n, kernel_dim, DemandKind::Perturbed);
                match bound_case(index, &inst) {
                    Ok(case) if case.hypotheses_met => return (attempts, case),
                    _ if attempts < 1000 => continue,
                    Ok(case) => return (attempts, case),
                    Err(_) => {
                        return (
                            attempts,
                            BoundCase {
                                index,
                                n,
                                kernel_dim,
                                error: f64::NAN,
                                bound: f64::NAN,
                                slack: f64::NAN,
                                rho: f64::NAN,
                                omega: f64::NAN,
                                hypotheses_met: false,
                                lemma_min_slack: f64::NAN,
                                chain_slack: None,
                            },
                        )
                    }
                }
            }
        })
        .collect();
    let attempts = draws.iter().map(|(a, _)| a).sum();
    let cases: Vec<BoundCase> = draws.into_iter().map(|(_, c)| c).collect();
    let ok = |c: &BoundCase| c.hypotheses_met && c.slack >= -slack_tol;
    let satisfied = cases.iter().filter(|c| ok(c)).count();
    let lemma_satisfied = cases
        .iter()
        .filter(|c| c.hypotheses_met && c.lemma_min_slack >= -slack_tol)
        .count();
    let chain_checked = cases.iter().filter(|c| c.chain_slack.is_some()).count();
    let chain_satisfied = cases
        .iter()
        .filter(|c| c.chain_slack.is_some_and(|s| s >= -slack_tol))
        .count();
    let min_slack = cases.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min);
    BoundReport {
        slack_tolerance: slack_tol,
        attempts,
        passed: satisfied == instances && lemma_satisfied == instances && chain_satisfied == chain_checked,
        satisfied,
        lemma_satisfied,
        chain_checked,
        chain_satisfied,
        min_slack,
        cases,
    }
}

/// Worst relative discrepancies between hat-space closed forms and
/// independent dense oracles over one instance.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EquivalenceCase {
    pub index: usize,
    pub n: usize,
    pub kernel_dim: usize,
    /// `L·X_min` against `L·L⁺·X̂_min`.
    pub energy_image: f64,
    /// Constrained companion solution against `L⁺L·X_min` and `L⁺L·X̃_min`.
    pub companion: f64,
    /// Exact closed form against a saddle solve in hat space.
    pub exact_closed_form: f64,
    /// `L·X*` from the sparse subspace against the hat-space first stage.
    pub first_stage_image: f64,
    /// `N̂`, `ÛD̂` against saddle solves with identity energy.
    pub subspace_closed_form: f64,
    /// Closest point against least squares over the subspace coordinates.
    pub closest_point: f64,
    /// Reduced closed form against a reduced saddle solve, and (definite
    /// `H`) against the image of the sparse reduced solution.
    pub reduced_closed_form: f64,
}

impl EquivalenceCase {
    pub fn worst(&self) -> f64 {
        [
            self.energy_image,
            self.companion,
            self.exact_closed_form,
            self.first_stage_image,
            self.subspace_closed_form,
            self.closest_point,
            self.reduced_closed_form,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub cases: Vec<EquivalenceCase>,
    pub worst: f64,
    pub passed: bool,
}

/// Dense solve of `[[G, B], [Bᵀ, 0]] (x; λ) = (f; g)`, returning `x`.
fn dense_saddle(g: &DMatrix<f64>, bmat: &DMatrix<f64>, f: &DVector<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.nrows();
    let m = bmat.ncols();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(g);
    k.view_mut((0, n), (n, m)).copy_from(bmat);
    k.view_mut((n, 0), (m, n)).copy_from(&bmat.transpose());
    let mut r = DVector::zeros(n + m);
    r.rows_mut(0, n).copy_from(f);
    r.rows_mut(n, m).copy_from(rhs);
    k.full_piv_lu().solve(&r).map(|s| s.rows(0, n).into_owned())
}

fn equivalence_case(index: usize, inst: &RandomInstance) -> Result<EquivalenceCase, TheoryError> {
    let p = &inst.qp;
    let n = p.n();
    let hd = p.h.to_dense();
    let hp = hat_transform(p)?;
    let l = &hp.l;
    let lp = &hp.l_plus;
    let lpl = lp * l;
    let mut out = EquivalenceCase {
        index,
        n,
        kernel_dim: inst.kernel_dim,
        ..Default::default()
    };
    let fail = || TheoryError::CannotExpress;

    // Exact closed form vs saddle solve of the hat problem.
    let x_hat = exact_hat_solution(&hp)?;
    let oracle = dense_saddle(&DMatrix::identity(n, n), &hp.a_hat, &hp.q_hat, &hp.b_hat).ok_or_else(fail)?;
    out.exact_closed_form = rel_diff(&x_hat, &oracle);

    // L·X_min = L·L⁺·X̂_min.
    out.energy_image = rel_diff(&(l * &hp.x_min), &(l * (lp * &x_hat)));

    // Companion problems: constrained to the row space of L, and relaxed.
    let b_tilde = &p.b - p.a.tr_mul(&hp.x_bar_min);
    let v = {
        let svd = l.clone().svd(false, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let vt = svd.v_t.unwrap();
        let cols: Vec<_> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > PINV_RTOL * smax)
            .map(|i| vt.row(i).transpose())
            .collect();
        DMatrix::from_columns(&cols)
    };
    let g = v.tr_mul(&hd) * &v;
    let t = dense_saddle(&g, &v.tr_mul(&p.a), &v.tr_mul(&p.q), &b_tilde).ok_or_else(fail)?;
    let x_circ = &v * t;
    let x_tilde = qp::exact_solve(&p.h, &p.q, &p.a, &b_tilde)?;
    out.companion = rel_diff(&x_circ, &(&lpl * &hp.x_min)).max(rel_diff(&x_circ, &(&lpl * &x_tilde)));

    // First stage: L·X* solves the hat saddle with Ẑ = Z − Cᵀ(I − L⁺L)X*.
    let (c_hat, d_hat) = hat_demands(&hp, &inst.basis);
    let hs = hat_subspace(&c_hat, &d_hat)?;
    let sub = qp::build_subspace(&p.h, &inst.basis)?;
    let d = c_hat.ncols();
    let k = d_hat.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
    let z = uniform(&mut rng, d, 1).column(0).into_owned();
    let y = uniform(&mut rng, k, 1).column(0).into_owned();
    let x_star = sub.reconstruct(&z, &y);
    let z_hat = &z - inst.basis.c().tr_mul(&(&x_star - &lpl * &x_star));
    let hat_star = dense_saddle(&DMatrix::identity(n, n), &c_hat, &(&d_hat * &y), &z_hat).ok_or_else(fail)?;
    out.first_stage_image = rel_diff(&(l * &x_star), &hat_star);

    // N̂ and ÛD̂ against identity-energy saddle solves.
    let mut sc: f64 = 0.0;
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        let col = dense_saddle(&DMatrix::identity(n, n), &c_hat, &DVector::zeros(n), &e).ok_or_else(fail)?;
        sc = sc.max(rel_diff(&hs.n_hat.column(i).into_owned(), &col));
    }
    for j in 0..k {
        let col = dense_saddle(&DMatrix::identity(n, n), &c_hat, &d_hat.column(j).into_owned(), &DVector::zeros(d))
            .ok_or_else(fail)?;
        sc = sc.max(rel_diff(&hs.ud_hat.column(j).into_owned(), &col));
    }
    out.subspace_closed_form = sc;

    // Closest point against normal equations over (Ẑ, Ŷ).
    let xq = uniform(&mut rng, n, 1).column(0).into_owned();
    let (zc, yc, star) = closest_point(&xq, &hs);
    let mut basis = DMatrix::zeros(n, d + k);
    basis.columns_mut(0, d).copy_from(&hs.n_hat);
    basis.columns_mut(d, k).copy_from(&hs.ud_hat);
    let w = basis.tr_mul(&basis).lu().solve(&basis.tr_mul(&xq)).ok_or_else(fail)?;
    let ls = &basis * &w;
    let from_coords = &hs.n_hat * &zc + &hs.ud_hat * &yc;
    out.closest_point = rel_diff(&star, &ls).max(rel_diff(&from_coords, &ls));

    // Reduced closed form against the reduced saddle in hat space, and for
    // definite H against the sparse reduced solution mapped by L.
    let reduced = reduced_hat_solution(&hp, &hs)?;
    let hr = basis.tr_mul(&basis);
    let wr = dense_saddle(&hr, &basis.tr_mul(&hp.a_hat), &basis.tr_mul(&hp.q_hat), &hp.b_hat).ok_or_else(fail)?;
    let mut red = rel_diff(&reduced, &(&basis * wr));
    if inst.kernel_dim == 0 {
        let sol = qp::solve_in_subspace(&sub, &p.h, &p.q, &p.a, &p.b)?;
        red = red.max(rel_diff(&reduced, &(l * &sol.x)));
    }
    out.reduced_closed_form = red;
    Ok(out)
}

/// Hat-space closed forms against dense oracles on random perturbed
/// instances with semidefinite and definite `H`.
pub fn equivalence_suite(seed: u64, instances: usize, max_n: usize, tol: f64) -> EquivalenceReport {
    let cases: Vec<EquivalenceCase> = (0..instances)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(index as u64));
            let n = rng.random_range(8..=max_n.max(8));
            let kernel_dim = rng.random_range(0..=2);
            let inst = random_instance(&mut rng, n, kernel_dim, DemandKind::Perturbed);
            equivalence_case(index, &inst).unwrap_or(EquivalenceCase {
                index,
                n,
                kernel_dim,
                energy_image: f64::INFINITY,
                ..Default::default()
            })
        })
        .collect();
    let worst = cases.iter().map(EquivalenceCase::worst).fold(0.0, f64::max);
    EquivalenceReport {
        tolerance: tol,
        passed: worst <= tol,
        worst,
        cases,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub max_n: usize,
    pub bound: BoundReport,
    pub exactness: ExactnessReport,
    pub passed: bool,
}

/// The `verify` suite: error-bound Monte Carlo plus exactness cases.
pub fn run_verify(seed: u64, instances: usize, max_n: usize) -> VerifyReport {
    let bound = bound_suite(seed, instances, max_n, 1e-12);
    let exactness = exactness_suite(seed.wrapping_add(1), instances, max_n, 1e-8);
    VerifyReport {
        seed,
        max_n,
        passed: bound.passed && exactness.passed,
        bound,
        exactness,
    }
}
