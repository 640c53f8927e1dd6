//! Triangle and tetrahedral meshes, discrete operators, spectral embedding,
//! rotational clusters and linear-proxy selectors.

mod cluster;
mod io;
mod operators;
mod primitives;
mod spectral;

pub use cluster::{
    frame_embedding, kmeans, linear_proxy_selector, linear_proxy_selector_among, rotation_clusters,
    ClusterAssignment, ProxyMode, ProxySelector, DEFAULT_SEED,
};
pub use io::{boundary_faces, load_mesh, write_mesh, write_node_ele, write_obj, MeshFormat};
pub use operators::{
    cot_stiffness, cotangent_weights, element_measures, element_sizes, frame_centroids, frame_neighbors,
    lumped_mass, vertex_normals, EdgeSetWeights, Frame,
};
pub use primitives::{generate_primitive, icosphere, Primitive};
pub use spectral::{embedding, lb_eigenbasis, Eigenbasis};

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorClass;
use crate::linalg::LinalgError;

/// Relative measure below which an element counts as degenerate.
pub const DEGENERATE_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown mesh format for {}", .0.display())]
    UnknownFormat(PathBuf),
    #[error("element {element} references vertex {index}, mesh has {n}")]
    IndexOutOfRange { element: usize, index: usize, n: usize },
    #[error("degenerate elements (first few: {elements:?}, {count} total)")]
    Degenerate { elements: Vec<usize>, count: usize },
    #[error("non-manifold edge ({0}, {1}) shared by more than two triangles")]
    NonManifold(usize, usize),
    #[error("empty mesh")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("eigensolver did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl MeshError {
    pub fn class(&self) -> ErrorClass {
        match self {
            MeshError::Parse { .. } | MeshError::UnknownFormat(_) => ErrorClass::Parse,
            MeshError::Io { .. } => ErrorClass::Io,
            MeshError::NoConvergence { .. } => ErrorClass::Numeric,
            MeshError::Linalg(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Surface,
    Solid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elements {
    Triangles(Vec<[usize; 3]>),
    Tetrahedra(Vec<[usize; 4]>),
}

/// A validated mesh. Tetrahedra are stored positively oriented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    elements: Elements,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, mut elements: Elements) -> Result<Self, MeshError> {
        let n = vertices.len();
        let count = match &elements {
            Elements::Triangles(t) => t.len(),
            Elements::Tetrahedra(t) => t.len(),
        };
        if n == 0 || count == 0 {
            return Err(MeshError::Empty);
        }
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(MeshError::InvalidParameter("non-finite vertex coordinate".into()));
        }
        let mut mesh = Mesh {
            vertices,
            elements: Elements::Triangles(Vec::new()),
        };
        for e in 0..count {
            let idx: &[usize] = match &elements {
                Elements::Triangles(t) => &t[e],
                Elements::Tetrahedra(t) => &t[e],
            };
            if let Some(&index) = idx.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange { element: e, index, n });
            }
        }
        let diag = mesh.bbox_diagonal().max(f64::MIN_POSITIVE);
        let mut bad = Vec::new();
        match &mut elements {
            Elements::Triangles(tris) => {
                let tol = DEGENERATE_RTOL * diag * diag;
                for (e, t) in tris.iter().enumerate() {
                    if mesh.triangle_area(t) <= tol {
                        bad.push(e);
                    }
                }
                let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
                for t in tris.iter() {
                    for k in 0..3 {
                        let (a, b) = (t[k], t[(k + 1) % 3]);
                        *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
                    }
                }
                let mut nm: Vec<_> = edge_count.into_iter().filter(|&(_, c)| c > 2).map(|(e, _)| e).collect();
                nm.sort();
                if let Some(&(a, b)) = nm.first() {
                    return Err(MeshError::NonManifold(a, b));
                }
            }
            Elements::Tetrahedra(tets) => {
                let tol = DEGENERATE_RTOL * diag * diag * diag;
                for (e, t) in tets.iter_mut().enumerate() {
                    let v = mesh.signed_volume(t);
                    if v.abs() <= tol {
                        bad.push(e);
                    } else if v < 0.0 {
                        t.swap(2, 3);
                    }
                }
            }
        }
        if !bad.is_empty() {
            let count = bad.len();
            bad.truncate(16);
            return Err(MeshError::Degenerate { elements: bad, count });
        }
        mesh.elements = elements;
        Ok(mesh)
    }

    pub fn kind(&self) -> MeshKind {
        match self.elements {
            Elements::Triangles(_) => MeshKind::Surface,
            Elements::Tetrahedra(_) => MeshKind::Solid,
        }
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn elements(&self) -> &Elements {
        &self.elements
    }

    pub fn element_count(&self) -> usize {
        match &self.elements {
            Elements::Triangles(t) => t.len(),
            Elements::Tetrahedra(t) => t.len(),
        }
    }

    /// Vertex indices of element `e`.
    pub fn element(&self, e: usize) -> &[usize] {
        match &self.elements {
            Elements::Triangles(t) => &t[e],
            Elements::Tetrahedra(t) => &t[e],
        }
    }

    /// Number of local rotation frames: one per vertex for surfaces, one per
    /// tetrahedron for solids.
    pub fn frame_count(&self) -> usize {
        match self.kind() {
            MeshKind::Surface => self.n(),
            MeshKind::Solid => self.element_count(),
        }
    }

    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn signed_volume(&self, t: &[usize; 4]) -> f64 {
        let [a, b, c, d] = t.map(|i| self.vertices[i]);
        (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
    }

    /// Total surface area or volume.
    pub fn total_measure(&self) -> f64 {
        element_sizes(self).iter().sum()
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for e in 0..self.element_count() {
            let idx = self.element(e);
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    let (a, b) = (idx[i], idx[j]);
                    edges.push((a.min(b), a.max(b)));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Returns a copy with every vertex scaled by `s`.
    pub fn scaled(&self, s: f64) -> Result<Mesh, MeshError> {
        Mesh::new(self.vertices.iter().map(|v| v * s).collect(), self.elements.clone())
    }

    /// Disjoint union of two meshes of the same kind.
    pub fn union(&self, other: &Mesh) -> Result<Mesh, MeshError> {
        let off = self.n();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let elements = match (&self.elements, &other.elements) {
            (Elements::Triangles(a), Elements::Triangles(b)) => {
                Elements::Triangles(a.iter().copied().chain(b.iter().map(|t| t.map(|i| i + off))).collect())
            }
            (Elements::Tetrahedra(a), Elements::Tetrahedra(b)) => {
                Elements::Tetrahedra(a.iter().copied().chain(b.iter().map(|t| t.map(|i| i + off))).collect())
            }
            _ => return Err(MeshError::InvalidParameter("cannot join a surface and a solid".into())),
        };
        Mesh::new(vertices, elements)
    }

    /// Number of connected components of the vertex graph.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (a, b) in self.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        (0..self.n()).filter(|&i| find(&mut parent, i) == i).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> Mesh {
        Mesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            Elements::Triangles(vec![[0, 1, 2]]),
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = Mesh::new(vec![Vector3::zeros(); 3], Elements::Triangles(vec![[0, 1, 3]])).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 3, .. }));
    }

    #[test]
    fn rejects_degenerate_triangle() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0, Vector3::y()];
        let err = Mesh::new(v, Elements::Triangles(vec![[0, 1, 2], [0, 1, 3]])).unwrap_err();
        match err {
            MeshError::Degenerate { elements, count } => {
                assert_eq!(elements, vec![0]);
                assert_eq!(count, 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_nonmanifold_edge() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z(), -Vector3::y()];
        let err = Mesh::new(v, Elements::Triangles(vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]])).unwrap_err();
        assert!(matches!(err, MeshError::NonManifold(0, 1)));
    }

    #[test]
    fn reorients_negative_tets() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        let m = Mesh::new(v, Elements::Tetrahedra(vec![[0, 2, 1, 3]])).unwrap();
        let Elements::Tetrahedra(t) = m.elements() else { unreachable!() };
        assert!(m.signed_volume(&t[0]) > 0.0);
    }

    #[test]
    fn single_triangle_basics() {
        let m = tri();
        assert_eq!(m.kind(), MeshKind::Surface);
        assert_eq!(m.frame_count(), 3);
        assert_eq!(m.edges().len(), 3);
        assert!((m.total_measure() - 0.5).abs() < 1e-15);
        assert_eq!(m.component_count(), 1);
        let u = m.union(&m).unwrap();
        assert_eq!(u.component_count(), 2);
    }
}
