use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::energy::DeformEnergy;
use super::patches::PatchLayout;
use super::DeformError;
use crate::linalg::{saddle_matrix, LinalgError, SparseFactor, SparseMatrix};
use crate::mesh::ProxySelector;

const BATCH: usize = 32;
/// Condition estimate above which the saddle is treated as singular.
const SADDLE_COND_CAP: f64 = 1e12;

/// Linear proxies over the control layer, in `X` order: vertex proxies of the
/// free vertices, then patch centroids, then the nine entries of each patch
/// transformation.
#[derive(Debug, Clone)]
pub struct ControlSelector {
    pub vertex: ProxySelector,
    pub layout: PatchLayout,
    pub centroids: Vec<Vector3<f64>>,
}

impl ControlSelector {
    pub fn new(vertex: ProxySelector, layout: PatchLayout, rest: &[Vector3<f64>]) -> Result<Self, DeformError> {
        if vertex.n != layout.n {
            return Err(DeformError::InvalidConfig("proxy selector does not match the mesh".into()));
        }
        let fi = layout.free_index();
        for row in &vertex.rows {
            if let Some(&(v, _)) = row.iter().find(|(v, _)| fi[*v].is_none()) {
                return Err(DeformError::InvalidConfig(format!("vertex proxy on patch vertex {v}")));
            }
        }
        let centroids = (0..layout.s()).map(|i| layout.centroid(i, rest)).collect();
        Ok(Self {
            vertex,
            layout,
            centroids,
        })
    }

    /// Proxy count, one per free vertex proxy and one per patch.
    pub fn m(&self) -> usize {
        self.vertex.m() + self.layout.s()
    }

    /// Row count `3m + 9s`.
    pub fn dim(&self) -> usize {
        3 * self.m() + 9 * self.layout.s()
    }

    pub fn centroid_row(&self, i: usize) -> usize {
        3 * self.vertex.m() + 3 * i
    }

    pub fn t_row(&self, i: usize) -> usize {
        3 * self.m() + 9 * i
    }

    /// Sparse rows over the control coordinates.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let fi = self.layout.free_index();
        let mut rows = Vec::with_capacity(self.dim());
        for r in &self.vertex.rows {
            for c in 0..3 {
                rows.push(
                    r.iter()
                        .map(|&(v, w)| (3 * fi[v].expect("checked free") + c, w))
                        .collect(),
                );
            }
        }
        for (i, cen) in self.centroids.iter().enumerate() {
            for r in 0..3 {
                let mut row: Vec<(usize, f64)> =
                    (0..3).map(|c| (self.layout.t_offset(i) + 3 * r + c, cen[c])).collect();
                row.push((self.layout.d_offset(i) + r, 1.0));
                rows.push(row);
            }
        }
        for i in 0..self.layout.s() {
            for e in 0..9 {
                rows.push(vec![(self.layout.t_offset(i) + e, 1.0)]);
            }
        }
        rows
    }

    pub fn matrix(&self, ncols: usize) -> SparseMatrix {
        let t: Vec<_> = self
            .rows()
            .into_iter()
            .enumerate()
            .flat_map(|(i, r)| r.into_iter().map(move |(c, v)| (i, c, v)))
            .collect();
        SparseMatrix::from_triplets(self.dim(), ncols, &t).expect("selector indices in range")
    }

    pub fn apply(&self, control: &DVector<f64>) -> DVector<f64> {
        let rows = self.rows();
        DVector::from_iterator(rows.len(), rows.iter().map(|r| r.iter().map(|&(c, w)| w * control[c]).sum()))
    }
}

/// Solves the saddle system `[[L, Wᵀ], [W, 0]]` and returns `(N_W, U_W)`:
/// column `j` of `N_W` has right side `(0; e_j)`, column `j` of `U_W` has
/// `(Mᵀe_j; 0)`.
///
/// The default route factors `A = L + ρ·PᵀP` by sparse Cholesky, where `P`
/// holds cheap rows of `W` that pin the kernel of `L`. On the constraint set
/// the added term only shifts the multipliers, so with `Y = A⁻¹Wᵀ` and
/// `Z = A⁻¹Mᵀ`:
///
/// `N_W = Y·(WY)⁻¹`, `U_W = Z − N_W·(WZ)`.
///
/// When `A` is not positive definite the full saddle matrix is factored by
/// sparse LU instead.
pub fn precompute_subspace(
    energy: &DeformEnergy,
    selector: &ControlSelector,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DeformError> {
    if selector.layout.pos_dim() != energy.pos_dim {
        return Err(DeformError::InvalidConfig("selector and energy use different control layers".into()));
    }
    if let Some(pair) = augmented_subspace(energy, selector)? {
        return Ok(pair);
    }
    saddle_subspace(energy, selector)
}

fn singular_saddle(e: LinalgError) -> DeformError {
    match e {
        LinalgError::Singular { .. } | LinalgError::Factorization(_) => DeformError::SingularSaddle(format!(
            "saddle system is singular ({e}); proxies do not pin rigid modes, add or spread linear proxies"
        )),
        other => other.into(),
    }
}

fn cond_error(cond: f64) -> DeformError {
    DeformError::SingularSaddle(format!(
        "saddle system is numerically singular (condition estimate {cond:.1e}); proxies do not pin rigid modes, add or spread linear proxies"
    ))
}

/// Rows of `W` added to `L`: every row with at most four entries, plus the
/// xyz rows of the sparsest positional proxy when none of those qualify.
fn augmentation_rows(selector: &ControlSelector, rows: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let positional = 3 * selector.m();
    let mut aug: Vec<usize> = (0..rows.len()).filter(|&j| rows[j].len() <= 4).collect();
    if positional > 0 && !aug.iter().any(|&j| j < positional) {
        let p = (0..positional / 3).min_by_key(|&i| rows[3 * i].len()).unwrap_or(0);
        aug.extend(3 * p..3 * p + 3);
        aug.sort_unstable();
    }
    aug
}

fn augmented_subspace(
    energy: &DeformEnergy,
    selector: &ControlSelector,
) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>, DeformError> {
    let dim = energy.dim();
    let rows = selector.rows();
    let k = rows.len();
    let p = energy.pos_dim;
    let rho = (0..p).map(|i| energy.l.get(i, i)).sum::<f64>() / p.max(1) as f64;
    if !(rho > 0.0 && rho.is_finite()) || k == 0 {
        return Ok(None);
    }
    let mut t: Vec<(usize, usize, f64)> = energy.l.triplets().collect();
    for j in augmentation_rows(selector, &rows) {
        for &(a, va) in &rows[j] {
            for &(b, vb) in &rows[j] {
                t.push((a, b, rho * va * vb));
            }
        }
    }
    let a = SparseMatrix::from_triplets(dim, dim, &t)?;
    drop(t);
    let factor = match SparseFactor::new_spd(a) {
        Ok(f) => f,
        Err(e) => {
            log::debug!("augmented energy is not positive definite ({e}); factoring the saddle system");
            return Ok(None);
        }
    };
    let w = selector.matrix(dim);
    let mut y = match factor.solve_columns(k, dim, |j, col| {
        for &(c, v) in &rows[j] {
            col[c] += v;
        }
    }) {
        Ok(y) => y,
        Err(e) => {
            log::debug!("augmented solve failed ({e}); factoring the saddle system");
            return Ok(None);
        }
    };
    let s = w.mul_dense(&y);
    let s = (&s + s.transpose()) * 0.5;
    let sv = crate::linalg::singular_values(&s);
    let cond = sv.max() / sv.min();
    if !(cond < SADDLE_COND_CAP) {
        return Err(cond_error(cond));
    }
    let s_inv = s.cholesky().ok_or_else(|| cond_error(f64::INFINITY))?.inverse();
    right_multiply(&mut y, &s_inv);
    let n_w = y;

    let mt = energy.m.transpose();
    let mut u_w = factor
        .solve_columns(9 * energy.d, dim, |j, col| {
            for (r, v) in mt.col(j) {
                col[r] = v;
            }
        })
        .map_err(singular_saddle)?;
    let wz = w.mul_dense(&u_w);
    u_w.gemm(-1.0, &n_w, &wz, 1.0);

    // A generic right side measures how close the saddle is to singular.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5add1e);
    let f = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let af = factor.solve_vec(&f).map_err(singular_saddle)?;
    let gap = w.mul_vec(&af) - &b;
    let x = &af - &n_w * &gap;
    let lambda = &s_inv * &gap;
    let scale = energy.l.max_abs().max(w.max_abs());
    let cond = scale * x.amax().max(lambda.amax()) / f.amax().max(b.amax());
    if !(cond < SADDLE_COND_CAP) {
        return Err(cond_error(cond));
    }
    Ok(Some((n_w, u_w)))
}

/// `y ← y·r`, a block of rows at a time.
fn right_multiply(y: &mut DMatrix<f64>, r: &DMatrix<f64>) {
    const ROWS: usize = 2048;
    let mut start = 0;
    while start < y.nrows() {
        let h = ROWS.min(y.nrows() - start);
        let block = y.rows(start, h) * r;
        y.rows_mut(start, h).copy_from(&block);
        start += h;
    }
}

fn saddle_subspace(
    energy: &DeformEnergy,
    selector: &ControlSelector,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DeformError> {
    let dim = energy.dim();
    let k = selector.dim();
    let saddle = saddle_matrix(&energy.l, &selector.rows())?;
    let factor = SparseFactor::new(saddle).map_err(singular_saddle)?;
    // The columns' right sides lie in the range even of a singular saddle, and
    // LU then returns a small-residual answer; a generic right side exposes
    // the kernel through the size of its solution.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5add1e);
    let probe = DVector::from_fn(factor.dim(), |_, _| rng.random_range(-1.0..1.0));
    let y = factor.solve_vec(&probe).map_err(singular_saddle)?;
    let cond = factor.matrix().max_abs() * y.amax() / probe.amax();
    if !(cond < SADDLE_COND_CAP) {
        return Err(cond_error(cond));
    }
    let n_w = factor
        .solve_columns(k, dim, |j, col| col[dim + j] = 1.0)
        .map_err(singular_saddle)?;
    let mt = energy.m.transpose();
    let u_w = factor
        .solve_columns(9 * energy.d, dim, |j, col| {
            for (r, v) in mt.col(j) {
                col[r] = v;
            }
        })
        .map_err(singular_saddle)?;
    Ok((n_w, u_w))
}

/// `leftᵢᵀ·A·right` for each left factor, batching the columns of `right`
/// so the sparse product never materializes at full width.
fn sandwich(a: &SparseMatrix, right: &DMatrix<f64>, lefts: &[&DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let starts: Vec<usize> = (0..right.ncols()).step_by(BATCH).collect();
    let blocks: Vec<Vec<DMatrix<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let width = BATCH.min(right.ncols() - start);
            let ar = a.mul_dense(&right.columns(start, width).into_owned());
            lefts.iter().map(|l| l.tr_mul(&ar)).collect()
        })
        .collect();
    lefts
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut out = DMatrix::zeros(l.ncols(), right.ncols());
            for (&start, b) in starts.iter().zip(&blocks) {
                out.columns_mut(start, b[i].ncols()).copy_from(&b[i]);
            }
            out
        })
        .collect()
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Reduced matrices of a precomputed subspace.
#[derive(Debug, Clone)]
pub struct ReducedMatrices {
    /// `N_WᵀLN_W`.
    pub l_tilde: DMatrix<f64>,
    /// `M·N_W − U_WᵀLN_W`, the coupling of `E″ = ½XᵀL̃X − SᵀM̃X + ½SᵀE_S S`.
    pub m_tilde: DMatrix<f64>,
    /// Rotation fitting: `M_v·N_W` over the control coordinates.
    pub m_n: DMatrix<f64>,
    /// Rotation fitting: `M_v·U_W` over the control coordinates.
    pub m_u: DMatrix<f64>,
    /// `U_WᵀLU_W − MU_W − (MU_W)ᵀ + 2N`.
    pub e_s: DMatrix<f64>,
}

pub fn reduce_model(energy: &DeformEnergy, n_w: &DMatrix<f64>, u_w: &DMatrix<f64>) -> ReducedMatrices {
    let lts = sandwich(&energy.l, n_w, &[n_w, u_w]);
    let l_tilde = symmetrize(lts[0].clone());
    let ut_l_n = &lts[1];
    let lu = sandwich(&energy.l, u_w, &[u_w]);
    let mn = energy.m.mul_dense(n_w);
    let mu = energy.m.mul_dense(u_w);
    let m_tilde = mn - ut_l_n;
    let e_s = symmetrize(&lu[0] - &mu - mu.transpose() + &energy.n_s * 2.0);
    let p = energy.pos_dim;
    let m_v = energy.m.column_range(0, p);
    let m_n = m_v.mul_dense(&n_w.rows(0, p).into_owned());
    let m_u = m_v.mul_dense(&u_w.rows(0, p).into_owned());
    ReducedMatrices {
        l_tilde,
        m_tilde,
        m_n,
        m_u,
        e_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::energy::{assemble_energy, EnergyParams};
    use crate::linalg::dense_solve;
    use crate::mesh::{cotangent_weights, generate_primitive, ClusterAssignment, Primitive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (DeformEnergy, ControlSelector) {
        let mesh = generate_primitive(&Primitive::Plane {
            nx: 5,
            ny: 4,
            width: 2.0,
            height: 1.5,
        })
        .unwrap();
        assert_eq!(mesh.n(), 30);
        let w = cotangent_weights(&mesh);
        let c = ClusterAssignment::new((0..w.r()).map(|k| usize::from(mesh.vertices()[k].x > 0.0)).collect(), 2).unwrap();
        let p = EnergyParams {
            gamma: 0.2,
            ..Default::default()
        };
        let e = assemble_energy(&mesh, &w, &c, &p).unwrap();
        let sel = ProxySelector::from_vertices(30, &[0, 5, 24, 29]).unwrap();
        let cs = ControlSelector::new(sel, PatchLayout::identity(30), mesh.vertices()).unwrap();
        (DeformEnergy {
            layout: Some(PatchLayout::identity(30)),
            ..e
        }, cs)
    }

    #[test]
    fn constraint_rows_hold() {
        let (e, cs) = setup();
        let (n_w, u_w) = precompute_subspace(&e, &cs).unwrap();
        let w = cs.matrix(e.dim());
        assert!((w.mul_dense(&n_w) - DMatrix::identity(12, 12)).amax() < 1e-8);
        assert!(w.mul_dense(&u_w).amax() < 1e-8);
    }

    #[test]
    fn matches_dense_saddle_oracle() {
        let (e, cs) = setup();
        let (n_w, u_w) = precompute_subspace(&e, &cs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let s = DVector::from_fn(18, |_, _| rng.random_range(-1.0..1.0));
        let dim = e.dim();
        let w = cs.matrix(dim).to_dense();
        let mut k = DMatrix::zeros(dim + 12, dim + 12);
        k.view_mut((0, 0), (dim, dim)).copy_from(&e.l.to_dense());
        k.view_mut((dim, 0), (12, dim)).copy_from(&w);
        k.view_mut((0, dim), (dim, 12)).copy_from(&w.transpose());
        let mut rhs = DMatrix::zeros(dim + 12, 1);
        rhs.view_mut((0, 0), (dim, 1)).copy_from(&(e.m.to_dense().transpose() * &s));
        rhs.view_mut((dim, 0), (12, 1)).copy_from(&x);
        let full = dense_solve(&k, &rhs).unwrap();
        let rec = &n_w * &x + &u_w * &s;
        let diff = (full.rows(0, dim) - &rec).amax();
        assert!(diff < 1e-8 * (1.0 + rec.amax()), "{diff}");
    }

    #[test]
    fn reduced_energy_matches_full() {
        let (e, cs) = setup();
        let (n_w, u_w) = precompute_subspace(&e, &cs).unwrap();
        let red = reduce_model(&e, &n_w, &u_w);
        assert!((&red.l_tilde - red.l_tilde.transpose()).amax() < 1e-12);
        assert!(red.l_tilde.clone().symmetric_eigen().eigenvalues.min() > -1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let x = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
            let s = DVector::from_fn(18, |_, _| rng.random_range(-1.0..1.0));
            let rec = &n_w * &x + &u_w * &s;
            let full = e.evaluate(&rec, &s);
            let reduced = 0.5 * x.dot(&(&red.l_tilde * &x)) - s.dot(&(&red.m_tilde * &x))
                + 0.5 * s.dot(&(&red.e_s * &s))
                + e.s_constant(&s);
            assert!((full - reduced).abs() <= 1e-9 * full.abs().max(1.0), "{full} {reduced}");
            let mut vq = rec.clone();
            vq.rows_mut(e.pos_dim, 4 * e.r).fill(0.0);
            let direct = s.dot(&e.m.mul_vec(&vq));
            let fitted = s.dot(&(&red.m_n * &x + &red.m_u * &s));
            assert!((direct - fitted).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn single_proxy_without_regularizers_is_singular() {
        let mesh = generate_primitive(&Primitive::Plane {
            nx: 5,
            ny: 4,
            width: 2.0,
            height: 1.5,
        })
        .unwrap();
        let w = cotangent_weights(&mesh);
        let c = ClusterAssignment::new(vec![0; 30], 1).unwrap();
        let p = EnergyParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let e = assemble_energy(&mesh, &w, &c, &p).unwrap();
        let sel = ProxySelector::from_vertices(30, &[0]).unwrap();
        let cs = ControlSelector::new(sel, PatchLayout::identity(30), mesh.vertices()).unwrap();
        match precompute_subspace(&e, &cs) {
            Err(DeformError::SingularSaddle(msg)) => assert!(msg.contains("rigid modes")),
            other => panic!("expected singular saddle, got {other:?}"),
        }
    }

    fn routes_agree(e: &DeformEnergy, cs: &ControlSelector) {
        let (n_a, u_a) = augmented_subspace(e, cs).unwrap().expect("positive definite augmentation");
        let (n_s, u_s) = saddle_subspace(e, cs).unwrap();
        let scale = n_s.amax().max(u_s.amax());
        assert!((&n_a - &n_s).amax() < 1e-9 * scale);
        assert!((&u_a - &u_s).amax() < 1e-9 * scale);
    }

    #[test]
    fn cholesky_route_matches_saddle_lu() {
        let (e, cs) = setup();
        routes_agree(&e, &cs);
        let mesh = generate_primitive(&Primitive::Plane {
            nx: 5,
            ny: 4,
            width: 2.0,
            height: 1.5,
        })
        .unwrap();
        let groups = ProxySelector {
            n: 30,
            mode: crate::mesh::ProxyMode::Group,
            rows: (0..3).map(|g| (10 * g..10 * g + 10).map(|v| (v, 0.1)).collect()).collect(),
        };
        let cs = ControlSelector::new(groups, PatchLayout::identity(30), mesh.vertices()).unwrap();
        assert_eq!(augmentation_rows(&cs, &cs.rows()).len(), 3);
        routes_agree(&e, &cs);
    }
}
