use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::energy::DeformEnergy;
use super::DeformError;
use crate::linalg::SparseMatrix;
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Held at its rest placement.
    Fixed,
    /// Transformation tied to the patch's cluster rotation.
    Rigid,
    /// Free affine transformation.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub vertices: Vec<usize>,
    pub mode: PatchMode,
}

/// Control-layer layout `[V′₀; t; d]`: free vertices keep their coordinates,
/// vertex `v` of patch `i` moves as `t_i·v + d_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub n: usize,
    pub patches: Vec<PatchSpec>,
    /// Free vertices in control order.
    pub free: Vec<usize>,
    /// Owning patch of each vertex.
    pub owner: Vec<Option<usize>>,
}

impl PatchLayout {
    pub fn new(n: usize, patches: Vec<PatchSpec>) -> Result<Self, DeformError> {
        let mut owner = vec![None; n];
        for (i, p) in patches.iter().enumerate() {
            if p.vertices.is_empty() {
                return Err(DeformError::InvalidConfig(format!("patch {i} has no vertices")));
            }
            for &v in &p.vertices {
                if v >= n {
                    return Err(DeformError::InvalidConfig(format!("patch {i} vertex {v} out of range")));
                }
                if let Some(j) = owner[v] {
                    return Err(DeformError::InvalidConfig(format!(
                        "patches {j} and {i} overlap at vertex {v}"
                    )));
                }
                owner[v] = Some(i);
            }
        }
        let free = (0..n).filter(|&v| owner[v].is_none()).collect();
        Ok(Self {
            n,
            patches,
            free,
            owner,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, Vec::new()).expect("no patches")
    }

    pub fn s(&self) -> usize {
        self.patches.len()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn pos_dim(&self) -> usize {
        3 * self.n_free() + 12 * self.s()
    }

    pub fn t_offset(&self, i: usize) -> usize {
        3 * self.n_free() + 9 * i
    }

    pub fn d_offset(&self, i: usize) -> usize {
        3 * self.n_free() + 9 * self.s() + 3 * i
    }

    /// Control index of each free vertex.
    pub fn free_index(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.n];
        for (k, &v) in self.free.iter().enumerate() {
            idx[v] = Some(k);
        }
        idx
    }

    pub fn centroid(&self, i: usize, rest: &[Vector3<f64>]) -> Vector3<f64> {
        let p = &self.patches[i];
        p.vertices.iter().map(|&v| rest[v]).sum::<Vector3<f64>>() / p.vertices.len() as f64
    }

    /// Sparse map from the control layer to interleaved vertex coordinates.
    pub fn expansion(&self, rest: &[Vector3<f64>]) -> SparseMatrix {
        let mut t = Vec::new();
        let fi = self.free_index();
        for v in 0..self.n {
            match self.owner[v] {
                None => {
                    let k = fi[v].expect("free vertex");
                    for c in 0..3 {
                        t.push((3 * v + c, 3 * k + c, 1.0));
                    }
                }
                Some(i) => {
                    for r in 0..3 {
                        for c in 0..3 {
                            t.push((3 * v + r, self.t_offset(i) + 3 * r + c, rest[v][c]));
                        }
                        t.push((3 * v + r, self.d_offset(i) + r, 1.0));
                    }
                }
            }
        }
        SparseMatrix::from_triplets(3 * self.n, self.pos_dim(), &t).expect("layout indices in range")
    }

    /// Control vector of the rest pose (`t = I`, `d = 0`).
    pub fn rest_control(&self, rest: &[Vector3<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.pos_dim());
        for (k, &v) in self.free.iter().enumerate() {
            x.fixed_rows_mut::<3>(3 * k).copy_from(&rest[v]);
        }
        for i in 0..self.s() {
            for c in 0..3 {
                x[self.t_offset(i) + 4 * c] = 1.0;
            }
        }
        x
    }

    pub fn transform(&self, control: &[f64], i: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let t = Matrix3::from_row_slice(&control[self.t_offset(i)..self.t_offset(i) + 9]);
        let d = Vector3::from_column_slice(&control[self.d_offset(i)..self.d_offset(i) + 3]);
        (t, d)
    }

    /// Vertex positions of a control vector.
    pub fn expand(&self, control: &[f64], rest: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let fi = self.free_index();
        let transforms: Vec<_> = (0..self.s()).map(|i| self.transform(control, i)).collect();
        (0..self.n)
            .map(|v| match self.owner[v] {
                None => {
                    let k = fi[v].expect("free vertex");
                    Vector3::from_column_slice(&control[3 * k..3 * k + 3])
                }
                Some(i) => transforms[i].0 * rest[v] + transforms[i].1,
            })
            .collect()
    }
}

/// Substitutes the control layer into the energy: with
/// `T = blockdiag(expansion, I)`, `L ← TᵀLT` and `M ← MT`.
pub fn apply_affine_patches(energy: DeformEnergy, mesh: &Mesh, layout: PatchLayout) -> Result<DeformEnergy, DeformError> {
    if layout.n != mesh.n() || energy.n != mesh.n() {
        return Err(DeformError::InvalidConfig("patch layout does not match the mesh".into()));
    }
    if energy.layout.is_some() {
        return Err(DeformError::InvalidConfig("patches already applied".into()));
    }
    if layout.s() == 0 {
        return Ok(DeformEnergy {
            layout: Some(layout),
            ..energy
        });
    }
    let p = layout.expansion(mesh.vertices());
    let pos_dim = layout.pos_dim();
    let qdim = 4 * energy.r;
    let mut t: Vec<(usize, usize, f64)> = p.triplets().collect();
    t.extend((0..qdim).map(|k| (3 * energy.n + k, pos_dim + k, 1.0)));
    let tm = SparseMatrix::from_triplets(energy.dim(), pos_dim + qdim, &t)?;
    let l = tm.transpose().mul_sparse(&energy.l.mul_sparse(&tm)?)?;
    let m = energy.m.mul_sparse(&tm)?;
    Ok(DeformEnergy {
        pos_dim,
        l,
        m,
        layout: Some(layout),
        ..energy
    })
}
