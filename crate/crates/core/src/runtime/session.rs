use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rotation::{conformal_gradient, fit_conformal, fit_rotation, procrustes};
use super::RuntimeError;
use crate::deform::{cluster_block, identity_rotations, set_cluster_block, ControlSelector, PatchMode, PrecomputedModel};
use crate::linalg::{rank, PINV_RTOL};

/// Default alternations per frame.
pub const DEFAULT_ITERS: usize = 8;
/// Default conformal scale bound.
pub const DEFAULT_PSI_CAP: f64 = 2.0;
/// Default soft weight relative to the mean diagonal of `L̃`.
pub const SOFT_DELTA_SCALE: f64 = 1e4;
/// Condition estimate above which a reduced system counts as singular.
const KKT_COND_CAP: f64 = 1e13;

/// A precomputed model plus the derived blocks every session needs.
#[derive(Debug)]
pub struct SharedModel {
    pub model: PrecomputedModel,
    /// Vertex rows of the subspace over interleaved coordinates.
    pub nv: DMatrix<f64>,
    pub uv: DMatrix<f64>,
    pub selector: ControlSelector,
    m_tilde_t: DMatrix<f64>,
    weights: Vec<f64>,
}

impl SharedModel {
    pub fn new(model: PrecomputedModel) -> Result<Self, RuntimeError> {
        let weights = model.cluster_weights();
        if let Some(a) = weights.iter().position(|&c| !(c > 0.0)) {
            return Err(RuntimeError::Config(format!("cluster {a} has non-positive edge weight sum")));
        }
        let (nv, uv) = model.vertex_blocks();
        let selector = model.selector();
        let m_tilde_t = model.m_tilde.transpose();
        Ok(Self {
            model,
            nv,
            uv,
            selector,
            m_tilde_t,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    /// Handle rows: `3v + c` for vertex coordinates, `3n + 3i + c` for the
    /// centroid of patch `i`.
    pub fn row_limit(&self) -> usize {
        3 * self.n() + 3 * self.model.s()
    }

    /// Rest value of a handle row.
    pub fn rest_value(&self, row: usize) -> f64 {
        let n3 = 3 * self.n();
        if row < n3 {
            self.model.mesh().vertices()[row / 3][row % 3]
        } else {
            let h = row - n3;
            self.selector.centroids[h / 3][h % 3]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintMode {
    Hard,
    /// Quadratic penalty; `delta = None` picks the default weight.
    Soft { delta: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub iters: usize,
    pub mode: ConstraintMode,
    pub conformal: bool,
    pub psi_cap: f64,
    pub adapt_rotation: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERS,
            mode: ConstraintMode::Hard,
            conformal: false,
            psi_cap: DEFAULT_PSI_CAP,
            adapt_rotation: true,
        }
    }
}

impl SessionOptions {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.iters == 0 {
            return Err(RuntimeError::Config("iterations per frame must be ≥ 1".into()));
        }
        if !(self.psi_cap > 1.0 && self.psi_cap.is_finite()) {
            return Err(RuntimeError::Config(format!("psi cap must be finite and > 1, got {}", self.psi_cap)));
        }
        if let ConstraintMode::Soft { delta: Some(d) } = self.mode {
            if !(d > 0.0 && d.is_finite()) {
                return Err(RuntimeError::Config(format!("soft weight must be finite and > 0, got {d}")));
            }
        }
        Ok(())
    }
}

/// A point whose model-frame coordinates are `n·X + u·S`.
#[derive(Debug, Clone)]
struct Anchor {
    n: DMatrix<f64>,
    u: DMatrix<f64>,
    rest: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Handle(usize),
    Value(f64),
}

#[derive(Debug, Clone)]
enum RowSpec {
    /// World component `comp` of `r₀·anchor`.
    Anchored { anchor: usize, comp: usize, target: Target },
    /// A frame-independent row over `(X, S)`.
    Linear {
        n: Vec<(usize, f64)>,
        u: Vec<(usize, f64)>,
        target: f64,
    },
}

#[derive(Debug)]
enum Solver {
    Hard(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    Soft {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        delta: f64,
    },
}

#[derive(Debug)]
struct Prepared {
    r0: Matrix3<f64>,
    n_eq: DMatrix<f64>,
    u_eq: DMatrix<f64>,
    solver: Solver,
}

/// Per-frame measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub energy: f64,
    pub residual: f64,
    /// Mean Phase 1 time per iteration.
    pub t_phase1_us: f64,
    /// Mean Phase 2 time per iteration.
    pub t_phase2_us: f64,
}

/// One interactive deformation: constraint handles, the cached Phase 1
/// factorization and the reduced state `(X, S, r₀, Ψ)`. `X` and `S` live in
/// the model frame; world positions are `r₀·(N^v X + U^v S)`.
#[derive(Debug)]
pub struct Session {
    shared: Arc<SharedModel>,
    opts: SessionOptions,
    handles: Vec<usize>,
    targets: DVector<f64>,
    anchors: Vec<Anchor>,
    rows: Vec<RowSpec>,
    prepared: Option<Prepared>,
    x: DVector<f64>,
    s: DVector<f64>,
    rot: DVector<f64>,
    psi: Vec<f64>,
    r0: Matrix3<f64>,
    last_g: Option<DVector<f64>>,
}

impl Session {
    pub fn new(shared: Arc<SharedModel>, opts: SessionOptions) -> Result<Self, RuntimeError> {
        opts.validate()?;
        let d = shared.d();
        let mut session = Self {
            x: shared.model.rest_x(),
            s: identity_rotations(d),
            rot: identity_rotations(d),
            psi: vec![1.0; d],
            r0: Matrix3::identity(),
            shared,
            opts,
            handles: Vec::new(),
            targets: DVector::zeros(0),
            anchors: Vec::new(),
            rows: Vec::new(),
            prepared: None,
            last_g: None,
        };
        session.build_rows()?;
        // Patch rows alone may leave the system singular until handles are
        // set; `frame` reports that if it is still the case.
        if !session.rows.is_empty() {
            let _ = session.prepare();
        }
        Ok(session)
    }

    pub fn shared(&self) -> &Arc<SharedModel> {
        &self.shared
    }

    pub fn options(&self) -> &SessionOptions {
        &self.opts
    }

    pub fn handles(&self) -> &[usize] {
        &self.handles
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn r0(&self) -> &Matrix3<f64> {
        &self.r0
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// Rest values of the current handle rows.
    pub fn rest_targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.handles.len(), self.handles.iter().map(|&h| self.shared.rest_value(h)))
    }

    /// Resets the state to the rest pose.
    pub fn reset(&mut self) {
        let d = self.shared.d();
        self.x = self.shared.model.rest_x();
        self.s = identity_rotations(d);
        self.rot = identity_rotations(d);
        self.psi = vec![1.0; d];
        self.r0 = Matrix3::identity();
        self.last_g = None;
    }

    /// Replaces the constraint handles and refactors. Targets reset to the
    /// rest values of the new rows.
    pub fn set_handles(&mut self, rows: &[usize]) -> Result<(), RuntimeError> {
        let limit = self.shared.row_limit();
        let mut seen = rows.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != rows.len() {
            return Err(RuntimeError::InvalidHandles("duplicate handle rows".into()));
        }
        if let Some(&h) = rows.iter().find(|&&h| h >= limit) {
            return Err(RuntimeError::InvalidHandles(format!("handle row {h} out of range (limit {limit})")));
        }
        let n3 = 3 * self.shared.n();
        for &h in rows.iter().filter(|&&h| h >= n3) {
            let i = (h - n3) / 3;
            if self.shared.model.meta.patches[i].mode == PatchMode::Fixed {
                return Err(RuntimeError::InvalidHandles(format!("patch {i} is fixed and cannot take handles")));
            }
        }
        let old = (std::mem::take(&mut self.handles), self.targets.clone());
        self.handles = rows.to_vec();
        self.targets = self.rest_targets();
        self.prepared = None;
        let result = self.build_rows().and_then(|_| self.prepare());
        if result.is_err() {
            self.handles = old.0;
            self.targets = old.1;
            self.build_rows()?;
            if !self.rows.is_empty() {
                let _ = self.prepare();
            }
        }
        result
    }

    pub fn set_targets(&mut self, values: &[f64]) -> Result<(), RuntimeError> {
        if values.len() != self.handles.len() {
            return Err(RuntimeError::InvalidHandles(format!(
                "{} target values for {} handle rows",
                values.len(),
                self.handles.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RuntimeError::InvalidHandles("target values must be finite".into()));
        }
        self.targets = DVector::from_column_slice(values);
        Ok(())
    }

    pub fn set_iters(&mut self, iters: usize) -> Result<(), RuntimeError> {
        let opts = SessionOptions { iters, ..self.opts };
        opts.validate()?;
        self.opts = opts;
        Ok(())
    }

    pub fn set_mode(&mut self, mode: ConstraintMode) -> Result<(), RuntimeError> {
        let opts = SessionOptions { mode, ..self.opts };
        opts.validate()?;
        let old = std::mem::replace(&mut self.opts, opts);
        if !self.rows.is_empty() {
            if let Err(e) = self.prepare() {
                self.opts = old;
                let _ = self.prepare();
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn set_conformal(&mut self, on: bool, psi_cap: Option<f64>) -> Result<(), RuntimeError> {
        let opts = SessionOptions {
            conformal: on,
            psi_cap: psi_cap.unwrap_or(self.opts.psi_cap),
            ..self.opts
        };
        opts.validate()?;
        self.opts = opts;
        if !on {
            self.psi.iter_mut().for_each(|p| *p = 1.0);
            self.s = self.rot.clone();
        }
        Ok(())
    }

    pub fn set_adapt_rotation(&mut self, on: bool) {
        self.opts.adapt_rotation = on;
    }

    fn anchor_for_vertex(&self, v: usize) -> Anchor {
        Anchor {
            n: self.shared.nv.rows(3 * v, 3).into_owned(),
            u: self.shared.uv.rows(3 * v, 3).into_owned(),
            rest: self.shared.model.mesh().vertices()[v],
        }
    }

    fn build_rows(&mut self) -> Result<(), RuntimeError> {
        let sh = Arc::clone(&self.shared);
        let (k, d9) = (sh.k(), 9 * sh.d());
        let n3 = 3 * sh.n();
        let sel = &sh.selector;
        let d_free = sh.d() - sh.model.s();
        let mut anchors = Vec::new();
        let mut rows = Vec::new();
        let mut by_key: BTreeMap<usize, usize> = BTreeMap::new();
        for (j, &h) in self.handles.iter().enumerate() {
            let key = h / 3;
            let idx = *by_key.entry(key).or_insert_with(|| {
                anchors.push(if h < n3 {
                    self.anchor_for_vertex(h / 3)
                } else {
                    let i = (h - n3) / 3;
                    let mut n = DMatrix::zeros(3, k);
                    for c in 0..3 {
                        n[(c, sel.centroid_row(i) + c)] = 1.0;
                    }
                    Anchor {
                        n,
                        u: DMatrix::zeros(3, d9),
                        rest: sel.centroids[i],
                    }
                });
                anchors.len() - 1
            });
            rows.push(RowSpec::Anchored {
                anchor: idx,
                comp: h % 3,
                target: Target::Handle(j),
            });
        }
        for (i, patch) in sh.model.meta.patches.iter().enumerate() {
            match patch.mode {
                PatchMode::Fixed => {
                    let mut n = DMatrix::zeros(3, k);
                    for c in 0..3 {
                        n[(c, sel.centroid_row(i) + c)] = 1.0;
                    }
                    anchors.push(Anchor {
                        n,
                        u: DMatrix::zeros(3, d9),
                        rest: sel.centroids[i],
                    });
                    let a = anchors.len() - 1;
                    for c in 0..3 {
                        rows.push(RowSpec::Anchored {
                            anchor: a,
                            comp: c,
                            target: Target::Value(sel.centroids[i][c]),
                        });
                    }
                    // Columns of the patch transformation, held at the world
                    // identity.
                    for col in 0..3 {
                        let mut n = DMatrix::zeros(3, k);
                        for r in 0..3 {
                            n[(r, sel.t_row(i) + 3 * r + col)] = 1.0;
                        }
                        anchors.push(Anchor {
                            n,
                            u: DMatrix::zeros(3, d9),
                            rest: Vector3::ith(col, 1.0),
                        });
                        let a = anchors.len() - 1;
                        for r in 0..3 {
                            rows.push(RowSpec::Anchored {
                                anchor: a,
                                comp: r,
                                target: Target::Value(if r == col { 1.0 } else { 0.0 }),
                            });
                        }
                    }
                }
                PatchMode::Rigid => {
                    let a = d_free + i;
                    for e in 0..9 {
                        rows.push(RowSpec::Linear {
                            n: vec![(sel.t_row(i) + e, 1.0)],
                            u: vec![(9 * a + e, -1.0)],
                            target: 0.0,
                        });
                    }
                }
                PatchMode::Affine => {}
            }
        }
        self.anchors = anchors;
        self.rows = rows;
        Ok(())
    }

    fn default_delta(&self) -> f64 {
        let l = &self.shared.model.l_tilde;
        SOFT_DELTA_SCALE * l.diagonal().mean()
    }

    /// Forms `N_eq`, `U_eq` for the current `r₀` and factors the Phase 1
    /// system.
    fn prepare(&mut self) -> Result<(), RuntimeError> {
        let (k, d9) = (self.shared.k(), 9 * self.shared.d());
        let p = self.rows.len();
        if p == 0 {
            return Err(RuntimeError::State("no constraint handles set".into()));
        }
        let mut n_eq = DMatrix::zeros(p, k);
        let mut u_eq = DMatrix::zeros(p, d9);
        for (i, row) in self.rows.iter().enumerate() {
            match row {
                RowSpec::Anchored { anchor, comp, .. } => {
                    let a = &self.anchors[*anchor];
                    let rrow = self.r0.row(*comp);
                    n_eq.row_mut(i).copy_from(&(rrow * &a.n));
                    u_eq.row_mut(i).copy_from(&(rrow * &a.u));
                }
                RowSpec::Linear { n, u, .. } => {
                    for &(c, v) in n {
                        n_eq[(i, c)] = v;
                    }
                    for &(c, v) in u {
                        u_eq[(i, c)] = v;
                    }
                }
            }
        }
        let l = &self.shared.model.l_tilde;
        let solver = match self.opts.mode {
            ConstraintMode::Hard => {
                if p > k {
                    return Err(RuntimeError::Rank(format!(
                        "{p} hard constraint rows exceed the {k} reduced coordinates; constraints not expressible, add linear proxies near handles"
                    )));
                }
                let rk = rank(&n_eq, PINV_RTOL);
                if rk < p {
                    return Err(RuntimeError::Rank(format!(
                        "constraints not expressible (rank {rk} of {p} rows); add linear proxies near handles"
                    )));
                }
                let mut kkt = DMatrix::zeros(k + p, k + p);
                kkt.view_mut((0, 0), (k, k)).copy_from(l);
                kkt.view_mut((k, 0), (p, k)).copy_from(&n_eq);
                kkt.view_mut((0, k), (k, p)).copy_from(&n_eq.transpose());
                let lu = kkt.clone().lu();
                check_conditioning(&kkt, |b| lu.solve(b))?;
                Solver::Hard(lu)
            }
            ConstraintMode::Soft { delta } => {
                let delta = delta.unwrap_or_else(|| self.default_delta());
                let a = l + n_eq.tr_mul(&n_eq) * (2.0 * delta);
                let a = (&a + a.transpose()) * 0.5;
                let chol = a.clone().cholesky().ok_or_else(|| {
                    RuntimeError::Rank("soft constraint system is singular; handles must pin every translation".into())
                })?;
                check_conditioning(&a, |b| Some(chol.solve(b)))?;
                Solver::Soft { chol, delta }
            }
        };
        self.prepared = Some(Prepared {
            r0: self.r0,
            n_eq,
            u_eq,
            solver,
        });
        Ok(())
    }

    /// World-frame right side `P_eq`.
    fn p_eq(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| match r {
                RowSpec::Anchored { target, .. } => match *target {
                    Target::Handle(j) => self.targets[j],
                    Target::Value(v) => v,
                },
                RowSpec::Linear { target, .. } => *target,
            }),
        )
    }

    fn prepared(&self) -> Result<&Prepared, RuntimeError> {
        self.prepared
            .as_ref()
            .ok_or_else(|| RuntimeError::State("constraints are not prepared; set handles first".into()))
    }

    /// Phase 1: the reduced minimizer of `E″(S, ·)` under the constraints.
    pub fn phase1(&mut self) -> Result<(), RuntimeError> {
        let prep = self.prepared()?;
        let k = self.shared.k();
        let p_eq = self.p_eq();
        let mts = &self.shared.m_tilde_t * &self.s;
        let x = match &prep.solver {
            Solver::Hard(lu) => {
                let mut rhs = DVector::zeros(k + p_eq.len());
                rhs.rows_mut(0, k).copy_from(&mts);
                rhs.rows_mut(k, p_eq.len()).copy_from(&(&p_eq - &prep.u_eq * &self.s));
                let sol = lu
                    .solve(&rhs)
                    .ok_or_else(|| RuntimeError::Numeric("Phase 1 system is singular".into()))?;
                sol.rows(0, k).into_owned()
            }
            Solver::Soft { chol, delta } => {
                let resid = &prep.u_eq * &self.s - &p_eq;
                let rhs = mts - prep.n_eq.tr_mul(&resid) * (2.0 * delta);
                chol.solve(&rhs)
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RuntimeError::Numeric("Phase 1 produced non-finite coordinates".into()));
        }
        self.x = x;
        Ok(())
    }

    /// Phase 2: per-cluster polar fit (or conformal fit) of `M_N X + M_U S`.
    pub fn phase2(&mut self) {
        let model = &self.shared.model;
        let g = &model.m_n * &self.x + &model.m_u * &self.s;
        let d = self.shared.d();
        let conformal = self.opts.conformal;
        let cap = self.opts.psi_cap;
        let weights = &self.shared.weights;
        let fits: Vec<Option<(Matrix3<f64>, f64)>> = (0..d)
            .into_par_iter()
            .with_min_len(64)
            .map(|a| {
                let ga = cluster_block(&g, a);
                if conformal {
                    fit_conformal(&ga, weights[a], cap).map(|(t, psi, _)| (t, psi))
                } else {
                    fit_rotation(&ga).map(|t| (t, 1.0))
                }
            })
            .collect();
        for (a, fit) in fits.into_iter().enumerate() {
            if let Some((t, psi)) = fit {
                set_cluster_block(&mut self.rot, a, &t);
                self.psi[a] = psi;
                set_cluster_block(&mut self.s, a, &(t * psi));
            }
        }
        self.last_g = Some(g);
    }

    /// Complete-xyz handle anchors as (rest, target) pairs.
    fn complete_handles(&self) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let mut comps: BTreeMap<usize, [Option<f64>; 3]> = BTreeMap::new();
        for r in &self.rows {
            if let RowSpec::Anchored {
                anchor,
                comp,
                target: Target::Handle(j),
            } = r
            {
                comps.entry(*anchor).or_default()[*comp] = Some(self.targets[*j]);
            }
        }
        let mut rest = Vec::new();
        let mut tgt = Vec::new();
        for (a, c) in comps {
            if let [Some(x), Some(y), Some(z)] = c {
                rest.push(self.anchors[a].rest);
                tgt.push(Vector3::new(x, y, z));
            }
        }
        (rest, tgt)
    }

    /// Fits `r₀` to the handle targets; kept when the fit is underdetermined.
    pub fn adapt_global_rotation(&mut self) -> Result<(), RuntimeError> {
        let (rest, tgt) = self.complete_handles();
        if let Some(r) = procrustes(&rest, &tgt) {
            self.r0 = r;
        }
        let stale = self.prepared.as_ref().is_none_or(|p| p.r0 != self.r0);
        if stale && !self.rows.is_empty() {
            self.prepare()?;
        }
        Ok(())
    }

    /// One frame: global rotation adaption, then `iters` alternations of
    /// Phase 2 and Phase 1, warm-started from the previous state.
    pub fn frame(&mut self) -> Result<FrameStats, RuntimeError> {
        if self.rows.is_empty() {
            return Err(RuntimeError::State("no constraint handles set".into()));
        }
        if self.opts.adapt_rotation {
            self.adapt_global_rotation()?;
        }
        if self.prepared.is_none() {
            self.prepare()?;
        }
        let (mut t1, mut t2) = (0.0, 0.0);
        for _ in 0..self.opts.iters {
            let t = Instant::now();
            self.phase2();
            t2 += t.elapsed().as_secs_f64();
            let t = Instant::now();
            self.phase1()?;
            t1 += t.elapsed().as_secs_f64();
        }
        let it = self.opts.iters as f64;
        Ok(FrameStats {
            energy: self.energy(),
            residual: self.constraint_residual(),
            t_phase1_us: 1e6 * t1 / it,
            t_phase2_us: 1e6 * t2 / it,
        })
    }

    /// `E″` of the current state.
    pub fn energy(&self) -> f64 {
        self.shared.model.reduced_energy(&self.x, &self.s)
    }

    /// Max violation of the constraint rows in world coordinates.
    pub fn constraint_residual(&self) -> f64 {
        let Some(prep) = self.prepared.as_ref() else {
            return 0.0;
        };
        let r = &prep.n_eq * &self.x + &prep.u_eq * &self.s - self.p_eq();
        r.amax()
    }

    /// KKT residual of the hard Phase 1 problem at the current state.
    pub fn phase1_optimality(&self) -> Result<f64, RuntimeError> {
        let prep = self.prepared()?;
        let model = &self.shared.model;
        let grad = &model.l_tilde * &self.x - &self.shared.m_tilde_t * &self.s;
        // Multipliers by least squares on the row space of N_eq.
        let nt = prep.n_eq.transpose();
        let lam = nt
            .clone()
            .svd(true, true)
            .solve(&(-&grad), 1e-14)
            .map_err(|e| RuntimeError::Numeric(e.to_string()))?;
        let stat = (&grad + nt * lam).amax();
        let scale = model.l_tilde.amax() * self.x.amax() + 1.0;
        Ok((stat / scale).max(self.constraint_residual()))
    }

    /// Model-frame vertex coordinates `N^v X + U^v S`, interleaved.
    pub fn local_coordinates(&self) -> DVector<f64> {
        &self.shared.nv * &self.x + &self.shared.uv * &self.s
    }

    /// World vertex positions `r₀·(N^v X + U^v S)`.
    pub fn reconstruct(&self) -> Vec<Vector3<f64>> {
        let local = self.local_coordinates();
        (0..self.shared.n())
            .map(|v| self.r0 * local.fixed_rows::<3>(3 * v))
            .collect()
    }

    /// Max deviation of reconstructed handle rows from their targets.
    pub fn reconstruction_residual(&self, vertices: &[Vector3<f64>]) -> f64 {
        let n3 = 3 * self.shared.n();
        let layout = self.shared.model.layout();
        self.handles
            .iter()
            .zip(self.targets.iter())
            .map(|(&h, &t)| {
                let val = if h < n3 {
                    vertices[h / 3][h % 3]
                } else {
                    let i = (h - n3) / 3;
                    let verts = &layout.patches[i].vertices;
                    verts.iter().map(|&v| vertices[v][h % 3]).sum::<f64>() / verts.len() as f64
                };
                (val - t).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `|∂E/∂ψ_a|` of the last conformal fit for every cluster whose scale
    /// was not clamped, relative to `C_a`.
    pub fn conformal_stationarity(&self) -> Vec<f64> {
        let Some(g) = &self.last_g else {
            return Vec::new();
        };
        let cap = self.opts.psi_cap;
        (0..self.shared.d())
            .filter(|&a| self.psi[a] > 1.0 / cap && self.psi[a] < cap)
            .map(|a| {
                let c = self.shared.weights[a];
                conformal_gradient(&cluster_block(g, a), &cluster_block(&self.rot, a), c, self.psi[a]).abs() / c
            })
            .collect()
    }

    /// Gradient of the last Phase 2 fit.
    pub fn last_gradient(&self) -> Option<&DVector<f64>> {
        self.last_g.as_ref()
    }

    pub fn soft_delta(&self) -> Option<f64> {
        match self.prepared.as_ref()?.solver {
            Solver::Soft { delta, .. } => Some(delta),
            Solver::Hard(_) => None,
        }
    }
}

/// Rejects a factored system whose solution of a generic right side blows
/// up: pivoted LU of a singular matrix rarely fails outright.
fn check_conditioning<F>(a: &DMatrix<f64>, solve: F) -> Result<(), RuntimeError>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0d);
    let b = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-1.0..1.0));
    let cond = solve(&b).map_or(f64::INFINITY, |y| a.amax() * y.amax() / b.amax());
    if !(cond < KKT_COND_CAP) {
        return Err(RuntimeError::Rank(format!(
            "constraint system is singular (condition estimate {cond:.1e}); handles must pin every translation"
        )));
    }
    Ok(())
}
