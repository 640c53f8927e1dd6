use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use super::{Elements, Mesh, MeshKind};
use crate::linalg::SparseMatrix;

/// Edges of one local rotation frame with their weights `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// `(i, j, c)` with `i < j`, sorted, one entry per distinct edge.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Per-frame edge sets and measures of the elastic energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSetWeights {
    pub frames: Vec<Frame>,
    pub measures: Vec<f64>,
}

impl EdgeSetWeights {
    pub fn r(&self) -> usize {
        self.frames.len()
    }
}

/// Gradients of the linear hat functions of element `e`, one per corner.
pub(crate) fn element_gradients(mesh: &Mesh, e: usize) -> Vec<Vector3<f64>> {
    let idx = mesh.element(e);
    let x = mesh.vertices();
    let x0 = x[idx[0]];
    match idx.len() {
        3 => {
            let ed = Matrix3x2::from_columns(&[x[idx[1]] - x0, x[idx[2]] - x0]);
            let gram = ed.transpose() * ed;
            let inv = gram.try_inverse().expect("validated non-degenerate triangle");
            let g = inv * ed.transpose();
            let g1: Vector3<f64> = g.row(0).transpose();
            let g2: Vector3<f64> = g.row(1).transpose();
            vec![-(g1 + g2), g1, g2]
        }
        _ => {
            let ed = Matrix3::from_columns(&[x[idx[1]] - x0, x[idx[2]] - x0, x[idx[3]] - x0]);
            let inv = ed.try_inverse().expect("validated non-degenerate tetrahedron");
            let g: Vec<Vector3<f64>> = (0..3).map(|r| inv.row(r).transpose()).collect();
            vec![-(g[0] + g[1] + g[2]), g[0], g[1], g[2]]
        }
    }
}

/// Area of each triangle or volume of each tetrahedron.
pub fn element_sizes(mesh: &Mesh) -> Vec<f64> {
    match mesh.elements() {
        Elements::Triangles(t) => t.iter().map(|t| mesh.triangle_area(t)).collect(),
        Elements::Tetrahedra(t) => t.iter().map(|t| mesh.signed_volume(t)).collect(),
    }
}

/// Barycentric lumped vertex masses.
pub fn lumped_mass(mesh: &Mesh) -> Vec<f64> {
    let sizes = element_sizes(mesh);
    let mut m = vec![0.0; mesh.n()];
    for (e, s) in sizes.iter().enumerate() {
        let idx = mesh.element(e);
        let share = s / idx.len() as f64;
        for &i in idx {
            m[i] += share;
        }
    }
    m
}

/// Per-frame measures `a_k`: lumped vertex areas for surfaces, tetrahedron
/// volumes for solids.
pub fn element_measures(mesh: &Mesh) -> Vec<f64> {
    match mesh.kind() {
        MeshKind::Surface => lumped_mass(mesh),
        MeshKind::Solid => element_sizes(mesh),
    }
}

/// Cotangent weight `−|e|·∇φ_i·∇φ_j` for every vertex pair of element `e`.
fn element_edge_weights(mesh: &Mesh, e: usize, size: f64) -> Vec<(usize, usize, f64)> {
    let idx = mesh.element(e);
    let g = element_gradients(mesh, e);
    let mut out = Vec::with_capacity(6);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            out.push((i.min(j), i.max(j), -size * g[a].dot(&g[b])));
        }
    }
    out
}

fn merge_edges(mut edges: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64)> {
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len());
    for (i, j, c) in edges {
        match out.last_mut() {
            Some(last) if last.0 == i && last.1 == j => last.2 += c,
            _ => out.push((i, j, c)),
        }
    }
    out
}

/// Spokes-and-rims edge sets (one frame per vertex) for surfaces, the six
/// edges of each tetrahedron (one frame per element) for solids.
pub fn cotangent_weights(mesh: &Mesh) -> EdgeSetWeights {
    let sizes = element_sizes(mesh);
    let per_elem: Vec<_> = (0..mesh.element_count())
        .map(|e| element_edge_weights(mesh, e, sizes[e]))
        .collect();
    let frames = match mesh.kind() {
        MeshKind::Surface => {
            let mut raw: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); mesh.n()];
            for (e, w) in per_elem.iter().enumerate() {
                for &v in mesh.element(e) {
                    raw[v].extend_from_slice(w);
                }
            }
            raw.into_iter().map(|r| Frame { edges: merge_edges(r) }).collect()
        }
        MeshKind::Solid => per_elem.into_iter().map(|w| Frame { edges: merge_edges(w) }).collect(),
    };
    EdgeSetWeights {
        frames,
        measures: element_measures(mesh),
    }
}

/// Cotangent stiffness `K` (n × n, zero row sums).
pub fn cot_stiffness(mesh: &Mesh) -> SparseMatrix {
    let sizes = element_sizes(mesh);
    let mut t = Vec::with_capacity(mesh.element_count() * 16);
    for (e, &size) in sizes.iter().enumerate() {
        for (i, j, c) in element_edge_weights(mesh, e, size) {
            t.push((i, i, c));
            t.push((j, j, c));
            t.push((i, j, -c));
            t.push((j, i, -c));
        }
    }
    SparseMatrix::from_triplets(mesh.n(), mesh.n(), &t).expect("indices validated by Mesh")
}

/// Area-weighted unit vertex normals; zero vectors for solids.
pub fn vertex_normals(mesh: &Mesh) -> Vec<Vector3<f64>> {
    let mut nrm = vec![Vector3::zeros(); mesh.n()];
    if let Elements::Triangles(tris) = mesh.elements() {
        let x = mesh.vertices();
        for t in tris {
            let fn_ = (x[t[1]] - x[t[0]]).cross(&(x[t[2]] - x[t[0]]));
            for &i in t {
                nrm[i] += fn_;
            }
        }
        for v in &mut nrm {
            let l = v.norm();
            if l > 0.0 {
                *v /= l;
            }
        }
    }
    nrm
}

/// Pairs of frames sharing a mesh edge (surfaces) or a face (solids), `k < j`.
pub fn frame_neighbors(mesh: &Mesh) -> Vec<(usize, usize)> {
    match mesh.elements() {
        Elements::Triangles(_) => mesh.edges(),
        Elements::Tetrahedra(tets) => {
            let mut owner: HashMap<[usize; 3], usize> = HashMap::new();
            let mut pairs = Vec::new();
            for (e, t) in tets.iter().enumerate() {
                for skip in 0..4 {
                    let mut f = [0; 3];
                    let mut k = 0;
                    for (c, &v) in t.iter().enumerate() {
                        if c != skip {
                            f[k] = v;
                            k += 1;
                        }
                    }
                    f.sort_unstable();
                    if let Some(&o) = owner.get(&f) {
                        pairs.push((o.min(e), o.max(e)));
                    } else {
                        owner.insert(f, e);
                    }
                }
            }
            pairs.sort_unstable();
            pairs
        }
    }
}

/// Vertices that define each frame's position: the vertex itself for
/// surfaces, the four corners for solids.
pub(crate) fn frame_vertices(mesh: &Mesh) -> Vec<Vec<usize>> {
    match mesh.kind() {
        MeshKind::Surface => (0..mesh.n()).map(|i| vec![i]).collect(),
        MeshKind::Solid => (0..mesh.element_count()).map(|e| mesh.element(e).to_vec()).collect(),
    }
}

/// Rest-pose position of each frame.
pub fn frame_centroids(mesh: &Mesh) -> Vec<Vector3<f64>> {
    frame_vertices(mesh)
        .iter()
        .map(|vs| vs.iter().map(|&i| mesh.vertices()[i]).sum::<Vector3<f64>>() / vs.len() as f64)
        .collect()
}
