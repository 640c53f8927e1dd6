use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::patches::PatchLayout;
use super::DeformError;
use crate::linalg::SparseMatrix;
use crate::mesh::{frame_neighbors, vertex_normals, ClusterAssignment, EdgeSetWeights, Mesh, MeshKind};

/// Penalty weights of the linearized energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), DeformError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DeformError::InvalidConfig(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `B(e)` with `q·e = B(e)·(q0, q1, q2, q3)` for `q = q0·I + [ω]×`.
pub fn regulator_basis(e: &Vector3<f64>) -> Matrix3x4<f64> {
    let mut b = Matrix3x4::zeros();
    b.set_column(0, e);
    for i in 0..3 {
        b.set_column(i + 1, &Vector3::ith(i, 1.0).cross(e));
    }
    b
}

/// The 3×3 matrix `q0·I + [ω]×` for `q = (q0, ω)`.
pub fn regulator_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    Matrix3::new(q[0], -q[3], q[2], q[3], q[0], -q[1], -q[2], q[1], q[0])
}

/// Row-major entries of the regulator matrix as a linear map of `q`.
fn regulator_entries() -> SMatrix<f64, 9, 4> {
    let mut d = SMatrix::<f64, 9, 4>::zeros();
    for t in 0..4 {
        let mut q = [0.0; 4];
        q[t] = 1.0;
        let m = regulator_matrix(&q);
        for r in 0..3 {
            for c in 0..3 {
                d[(3 * r + c, t)] = m[(r, c)];
            }
        }
    }
    d
}

/// The quadratic model `E′ = ½xᵀLx − SᵀMx + SᵀNS + ½Σ tr(s_a E_a s_aᵀ)` over
/// `x = [positions; Q]`. Positions are interleaved `3v + c` (or the control
/// layer when patches are applied); `Q` holds four entries per frame; `S`
/// holds each cluster matrix row-major.
#[derive(Debug, Clone)]
pub struct DeformEnergy {
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub pos_dim: usize,
    pub l: SparseMatrix,
    pub m: SparseMatrix,
    pub n_s: DMatrix<f64>,
    /// Per-cluster second moments `Σ c·e·eᵀ` of the rest edges.
    pub moments: Vec<Matrix3<f64>>,
    pub params: EnergyParams,
    pub layout: Option<PatchLayout>,
}

impl DeformEnergy {
    pub fn dim(&self) -> usize {
        self.pos_dim + 4 * self.r
    }

    pub fn q_offset(&self) -> usize {
        self.pos_dim
    }

    /// `½Σ_a tr(s_a E_a s_aᵀ)`, the S-only term.
    pub fn s_constant(&self, s: &DVector<f64>) -> f64 {
        s_constant(&self.moments, s)
    }

    /// Per-cluster weights `C_a = Σ c‖e‖²`.
    pub fn cluster_weights(&self) -> Vec<f64> {
        self.moments.iter().map(|e| e.trace()).collect()
    }

    pub fn evaluate(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        let lx = self.l.mul_vec(x);
        let mx = self.m.mul_vec(x);
        0.5 * x.dot(&lx) - s.dot(&mx) + s.dot(&(&self.n_s * s)) + self.s_constant(s)
    }

    /// Gradient of `E′` in `x`.
    pub fn gradient(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        self.l.mul_vec(x) - self.m.tr_mul_dense(&DMatrix::from_column_slice(s.len(), 1, s.as_slice())).column(0)
    }
}

pub(crate) fn s_constant(moments: &[Matrix3<f64>], s: &DVector<f64>) -> f64 {
    moments
        .iter()
        .enumerate()
        .map(|(a, e)| {
            let sa = cluster_block(s, a);
            0.5 * (sa * e * sa.transpose()).trace()
        })
        .sum()
}

/// Cluster matrix `s_a` from the stacked row-major vector.
pub fn cluster_block(s: &DVector<f64>, a: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&s.as_slice()[9 * a..9 * a + 9])
}

pub fn set_cluster_block(s: &mut DVector<f64>, a: usize, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            s[9 * a + 3 * r + c] = m[(r, c)];
        }
    }
}

/// Stacked identity rotations.
pub fn identity_rotations(d: usize) -> DVector<f64> {
    let mut s = DVector::zeros(9 * d);
    for a in 0..d {
        set_cluster_block(&mut s, a, &Matrix3::identity());
    }
    s
}

/// Expands the edge energy under `r_k ≈ s_{i_k} + q_k` and collects the
/// quadratic, coupling and S-quadratic parts.
pub fn assemble_energy(
    mesh: &Mesh,
    weights: &EdgeSetWeights,
    clusters: &ClusterAssignment,
    params: &EnergyParams,
) -> Result<DeformEnergy, DeformError> {
    params.validate()?;
    let n = mesh.n();
    let r = weights.r();
    let d = clusters.d;
    if clusters.labels.len() != r {
        return Err(DeformError::InvalidConfig(format!(
            "cluster map covers {} frames, energy has {r}",
            clusters.labels.len()
        )));
    }
    if let Some(a) = clusters.sizes().iter().position(|&c| c == 0) {
        return Err(DeformError::InvalidConfig(format!("cluster {a} is empty")));
    }
    let mut params = *params;
    if mesh.kind() == MeshKind::Solid && params.beta > 0.0 {
        log::warn!("normal penalty beta = {} ignored for solid meshes", params.beta);
        params.beta = 0.0;
    }
    let pos_dim = 3 * n;
    let dim = pos_dim + 4 * r;
    let qo = |k: usize| pos_dim + 4 * k;
    let x = mesh.vertices();

    let mut lap: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut lt: Vec<(usize, usize, f64)> = Vec::new();
    let mut mt: Vec<(usize, usize, f64)> = Vec::new();
    let mut mv: BTreeMap<(usize, usize), Vector3<f64>> = BTreeMap::new();
    let mut moments = vec![Matrix3::zeros(); d];

    for (k, frame) in weights.frames.iter().enumerate() {
        let a = clusters.labels[k];
        let mut vq: BTreeMap<usize, Matrix3x4<f64>> = BTreeMap::new();
        let mut qq = Matrix4::zeros();
        // Σ c·e[col]·B(e)[row][t], the S-Q coupling of this frame.
        let mut sq = [[[0.0f64; 4]; 3]; 3];
        for &(i, j, c) in &frame.edges {
            let e = x[i] - x[j];
            let b = regulator_basis(&e);
            *lap.entry((i, j)).or_default() += c;
            *vq.entry(i).or_insert_with(Matrix3x4::zeros) -= b * c;
            *vq.entry(j).or_insert_with(Matrix3x4::zeros) += b * c;
            qq += b.transpose() * b * c;
            *mv.entry((a, i)).or_insert_with(Vector3::zeros) += e * c;
            *mv.entry((a, j)).or_insert_with(Vector3::zeros) -= e * c;
            for row in 0..3 {
                for col in 0..3 {
                    for t in 0..4 {
                        sq[row][col][t] += c * e[col] * b[(row, t)];
                    }
                }
            }
            moments[a] += e * e.transpose() * c;
        }
        for (&v, blk) in &vq {
            for row in 0..3 {
                for t in 0..4 {
                    let val = blk[(row, t)];
                    if val != 0.0 {
                        lt.push((3 * v + row, qo(k) + t, val));
                        lt.push((qo(k) + t, 3 * v + row, val));
                    }
                }
            }
        }
        for row in 0..3 {
            for col in 0..3 {
                for t in 0..4 {
                    let val = sq[row][col][t];
                    if val != 0.0 {
                        mt.push((9 * a + 3 * row + col, qo(k) + t, -val));
                    }
                }
            }
        }

        let ak = weights.measures[k];
        let mut reg = Matrix4::from_diagonal(&nalgebra::Vector4::new(3.0, 2.0, 2.0, 2.0)) * (2.0 * params.alpha * ak);
        reg += qq;
        for s in 0..4 {
            for t in 0..4 {
                lt.push((qo(k) + s, qo(k) + t, reg[(s, t)]));
            }
        }
    }

    if params.beta > 0.0 {
        let normals = vertex_normals(mesh);
        for k in 0..r {
            let bn = regulator_basis(&normals[k]);
            let blk = bn.transpose() * bn * (2.0 * params.beta * weights.measures[k]);
            for s in 0..4 {
                for t in 0..4 {
                    lt.push((qo(k) + s, qo(k) + t, blk[(s, t)]));
                }
            }
        }
    }

    for (&(i, j), &c) in &lap {
        for comp in 0..3 {
            lt.push((3 * i + comp, 3 * i + comp, c));
            lt.push((3 * j + comp, 3 * j + comp, c));
            lt.push((3 * i + comp, 3 * j + comp, -c));
            lt.push((3 * j + comp, 3 * i + comp, -c));
        }
    }
    for (&(a, v), g) in &mv {
        for row in 0..3 {
            for col in 0..3 {
                mt.push((9 * a + 3 * row + col, 3 * v + row, g[col]));
            }
        }
    }

    let mut n_s = DMatrix::zeros(9 * d, 9 * d);
    if params.gamma > 0.0 {
        let de = regulator_entries();
        let dtd = de.transpose() * de;
        for (k, j) in frame_neighbors(mesh) {
            let akj = 0.5 * (weights.measures[k] + weights.measures[j]);
            let w = params.gamma * akj;
            for s in 0..4 {
                for t in 0..4 {
                    let v = 2.0 * w * dtd[(s, t)];
                    lt.push((qo(k) + s, qo(k) + t, v));
                    lt.push((qo(j) + s, qo(j) + t, v));
                    lt.push((qo(k) + s, qo(j) + t, -v));
                    lt.push((qo(j) + s, qo(k) + t, -v));
                }
            }
            let (ca, cb) = (clusters.labels[k], clusters.labels[j]);
            if ca != cb {
                for t in 0..9 {
                    n_s[(9 * ca + t, 9 * ca + t)] += w;
                    n_s[(9 * cb + t, 9 * cb + t)] += w;
                    n_s[(9 * ca + t, 9 * cb + t)] -= w;
                    n_s[(9 * cb + t, 9 * ca + t)] -= w;
                    for u in 0..4 {
                        let v = 2.0 * w * de[(t, u)];
                        mt.push((9 * ca + t, qo(k) + u, -v));
                        mt.push((9 * ca + t, qo(j) + u, v));
                        mt.push((9 * cb + t, qo(k) + u, v));
                        mt.push((9 * cb + t, qo(j) + u, -v));
                    }
                }
            }
        }
    }

    Ok(DeformEnergy {
        n,
        r,
        d,
        pos_dim,
        l: SparseMatrix::from_triplets(dim, dim, &lt)?,
        m: SparseMatrix::from_triplets(9 * d, dim, &mt)?,
        n_s,
        moments,
        params,
        layout: None,
    })
}

/// Reference evaluation of the linearized energy by direct summation over
/// frames, edges and neighbour pairs, independent of the matrix assembly.
#[allow(clippy::too_many_arguments)]
pub fn direct_energy(
    mesh: &Mesh,
    weights: &EdgeSetWeights,
    clusters: &ClusterAssignment,
    params: &EnergyParams,
    deformed: &[Vector3<f64>],
    q: &[[f64; 4]],
    s: &[Matrix3<f64>],
) -> f64 {
    let x = mesh.vertices();
    let beta = if mesh.kind() == MeshKind::Solid { 0.0 } else { params.beta };
    let normals = vertex_normals(mesh);
    let mut e = 0.0;
    for (k, frame) in weights.frames.iter().enumerate() {
        let rk = s[clusters.labels[k]] + regulator_matrix(&q[k]);
        for &(i, j, c) in &frame.edges {
            e += 0.5 * c * ((deformed[i] - deformed[j]) - rk * (x[i] - x[j])).norm_squared();
        }
        let qk = regulator_matrix(&q[k]);
        e += params.alpha * weights.measures[k] * qk.norm_squared();
        if beta > 0.0 {
            e += beta * weights.measures[k] * (qk * normals[k]).norm_squared();
        }
    }
    if params.gamma > 0.0 {
        for (k, j) in frame_neighbors(mesh) {
            let akj = 0.5 * (weights.measures[k] + weights.measures[j]);
            let diff = s[clusters.labels[k]] + regulator_matrix(&q[k]) - s[clusters.labels[j]] - regulator_matrix(&q[j]);
            e += params.gamma * akj * diff.norm_squared();
        }
    }
    e
}

/// Stacks deformed positions and regulators into `x`.
pub fn stack_unknown(deformed: &[Vector3<f64>], q: &[[f64; 4]]) -> DVector<f64> {
    let mut x = DVector::zeros(3 * deformed.len() + 4 * q.len());
    for (v, p) in deformed.iter().enumerate() {
        x.fixed_rows_mut::<3>(3 * v).copy_from(p);
    }
    let off = 3 * deformed.len();
    for (k, qk) in q.iter().enumerate() {
        for t in 0..4 {
            x[off + 4 * k + t] = qk[t];
        }
    }
    x
}

pub fn stack_rotations(s: &[Matrix3<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(9 * s.len());
    for (a, m) in s.iter().enumerate() {
        set_cluster_block(&mut out, a, m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{cotangent_weights, generate_primitive, Primitive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(mesh: &Mesh, d: usize) -> (EdgeSetWeights, ClusterAssignment) {
        let w = cotangent_weights(mesh);
        let labels = (0..w.r()).map(|k| k % d).collect();
        (w, ClusterAssignment::new(labels, d).unwrap())
    }

    fn plane() -> Mesh {
        generate_primitive(&Primitive::Plane {
            nx: 5,
            ny: 4,
            width: 2.0,
            height: 1.5,
        })
        .unwrap()
    }

    #[test]
    fn regulator_basis_matches_matrix() {
        let e = Vector3::new(0.3, -1.2, 0.7);
        let q = [0.4, -0.1, 0.25, 0.9];
        let lhs = regulator_matrix(&q) * e;
        let rhs = regulator_basis(&e) * nalgebra::Vector4::from_row_slice(&q);
        assert!((lhs - rhs).norm() < 1e-15);
    }

    #[test]
    fn rest_state_has_zero_energy_and_gradient() {
        let m = plane();
        let (w, c) = setup(&m, 3);
        let p = EnergyParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let e = assemble_energy(&m, &w, &c, &p).unwrap();
        let x = stack_unknown(m.vertices(), &vec![[0.0; 4]; e.r]);
        let s = identity_rotations(3);
        assert!(e.evaluate(&x, &s).abs() < 1e-12);
        assert!(e.gradient(&x, &s).amax() < 1e-12);
        let p = EnergyParams {
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.3,
        };
        let e = assemble_energy(&m, &w, &c, &p).unwrap();
        assert!(e.evaluate(&x, &s).abs() < 1e-12);
        assert!(e.gradient(&x, &s).amax() < 1e-12);
    }

    #[test]
    fn n_vanishes_without_gamma() {
        let m = plane();
        let (w, c) = setup(&m, 3);
        let e = assemble_energy(&m, &w, &c, &EnergyParams::default()).unwrap();
        assert!(e.n_s.iter().all(|&v| v == 0.0));
        let e = assemble_energy(
            &m,
            &w,
            &c,
            &EnergyParams {
                gamma: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(e.n_s.amax() > 0.0);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mesh in [
            plane(),
            generate_primitive(&Primitive::Bar {
                nx: 2,
                ny: 1,
                nz: 1,
                size: [2.0, 1.0, 1.0],
            })
            .unwrap(),
        ] {
            let d = 3;
            let (w, c) = setup(&mesh, d);
            let p = EnergyParams {
                alpha: 0.3,
                beta: 0.2,
                gamma: 0.4,
            };
            let e = assemble_energy(&mesh, &w, &c, &p).unwrap();
            assert!(e.l.is_symmetric(1e-12));
            let def: Vec<_> = mesh
                .vertices()
                .iter()
                .map(|v| v + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)))
                .collect();
            let q: Vec<[f64; 4]> = (0..e.r).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect();
            let s: Vec<Matrix3<f64>> = (0..d).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let direct = direct_energy(&mesh, &w, &c, &p, &def, &q, &s);
            let model = e.evaluate(&stack_unknown(&def, &q), &stack_rotations(&s));
            assert!((direct - model).abs() <= 1e-9 * direct.abs(), "{direct} {model}");
        }
    }

    #[test]
    fn translation_invariance() {
        let m = plane();
        let (w, c) = setup(&m, 2);
        let e = assemble_energy(&m, &w, &c, &EnergyParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DVector::from_fn(e.dim(), |_, _| rng.random_range(-1.0..1.0));
        let s = DVector::from_fn(9 * 2, |_, _| rng.random_range(-1.0..1.0));
        let mut xt = x.clone();
        for v in 0..m.n() {
            xt[3 * v] += 2.5;
            xt[3 * v + 2] -= 1.0;
        }
        let (a, b) = (e.evaluate(&x, &s), e.evaluate(&xt, &s));
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn monotone_in_penalties() {
        let m = plane();
        let (w, c) = setup(&m, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = assemble_energy(&m, &w, &c, &EnergyParams::default()).unwrap();
        let x = DVector::from_fn(base.dim(), |_, _| rng.random_range(-1.0..1.0));
        let s = DVector::from_fn(18, |_, _| rng.random_range(-1.0..1.0));
        let mut last = f64::NEG_INFINITY;
        for a in [0.0, 0.1, 1.0, 10.0] {
            let e = assemble_energy(
                &m,
                &w,
                &c,
                &EnergyParams {
                    alpha: a,
                    beta: a,
                    gamma: a,
                },
            )
            .unwrap();
            let v = e.evaluate(&x, &s);
            assert!(v >= last - 1e-12);
            last = v;
        }
    }

    #[test]
    fn beta_forced_zero_on_solids() {
        let m = generate_primitive(&Primitive::FiveTetCube { size: 1.0 }).unwrap();
        let (w, c) = setup(&m, 1);
        let e = assemble_energy(&m, &w, &c, &EnergyParams::default()).unwrap();
        assert_eq!(e.params.beta, 0.0);
    }

    #[test]
    fn rejects_mismatched_clusters() {
        let m = plane();
        let w = cotangent_weights(&m);
        let c = ClusterAssignment::new(vec![0; 3], 1).unwrap();
        assert!(assemble_energy(&m, &w, &c, &EnergyParams::default()).is_err());
    }
}
