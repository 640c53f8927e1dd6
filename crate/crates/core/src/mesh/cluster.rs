use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::operators::frame_vertices;
use super::{Mesh, MeshError};
use crate::linalg::SparseMatrix;

pub const DEFAULT_SEED: u64 = 42;
const KMEANS_ITERS: usize = 100;

fn dist2(p: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..p.ncols()).map(|d| (p[(i, d)] - c[(j, d)]).powi(2)).sum()
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in v.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Lloyd's k-means over the rows of `points` with k-means++ seeding.
/// Empty clusters are re-seeded from the point farthest from its centre.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.nrows();
    assert!(k >= 1 && k <= n, "k-means needs 1 ≤ k ≤ n");
    let dim = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::zeros(k, dim);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            c % n
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(points, i, &centers, c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = dist2(points, i, &centers, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if *label != best.0 {
                *label = best.0;
                changed = true;
            }
        }
        loop {
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let far = argmax((0..n).map(|i| {
                if counts[labels[i]] > 1 {
                    dist2(points, i, &centers, labels[i])
                } else {
                    f64::NEG_INFINITY
                }
            }))
            .expect("non-empty point set");
            labels[far] = empty;
            centers.row_mut(empty).copy_from(&points.row(far));
            changed = true;
        }
        let mut sums = DMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(i);
        }
        for c in 0..k {
            let mean = sums.row(c) / counts[c] as f64;
            centers.row_mut(c).copy_from(&mean);
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Frame-to-cluster map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub d: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, d: usize) -> Result<Self, MeshError> {
        let mut counts = vec![0usize; d];
        for &l in &labels {
            if l >= d {
                return Err(MeshError::InvalidParameter(format!("cluster label {l} ≥ d = {d}")));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(MeshError::InvalidParameter(format!("cluster {c} is empty")));
        }
        Ok(Self { labels, d })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.d];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-frame spectral coordinates: the vertex row for surfaces, the mean of
/// the corner rows for solids.
pub fn frame_embedding(mesh: &Mesh, vertex_embedding: &DMatrix<f64>) -> DMatrix<f64> {
    let fv = frame_vertices(mesh);
    let dim = vertex_embedding.ncols();
    DMatrix::from_fn(fv.len(), dim, |k, d| {
        fv[k].iter().map(|&i| vertex_embedding[(i, d)]).sum::<f64>() / fv[k].len() as f64
    })
}

/// k-means of the frames in the spectral embedding.
pub fn rotation_clusters(
    mesh: &Mesh,
    vertex_embedding: &DMatrix<f64>,
    d: usize,
    seed: u64,
) -> Result<ClusterAssignment, MeshError> {
    let r = mesh.frame_count();
    if d == 0 || d > r {
        return Err(MeshError::InvalidParameter(format!(
            "cluster count {d} must be in 1..={r} (number of frames)"
        )));
    }
    if vertex_embedding.nrows() != mesh.n() {
        return Err(MeshError::InvalidParameter("embedding rows must match vertices".into()));
    }
    if d == 1 {
        return ClusterAssignment::new(vec![0; r], 1);
    }
    let fe = frame_embedding(mesh, vertex_embedding);
    ClusterAssignment::new(kmeans(&fe, d, seed), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMode {
    /// One vertex per proxy.
    Sample,
    /// Average of a vertex group per proxy.
    Group,
}

/// Reduced selector `Ŵ` (m × n); the coordinate selector is `Ŵ ⊗ I₃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySelector {
    pub n: usize,
    pub mode: ProxyMode,
    /// Sparse rows of `Ŵ` as `(vertex, weight)`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl ProxySelector {
    pub fn from_vertices(n: usize, vertices: &[usize]) -> Result<Self, MeshError> {
        let mut seen = vertices.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != vertices.len() || seen.last().is_some_and(|&v| v >= n) {
            return Err(MeshError::InvalidParameter("proxy vertices must be distinct and in range".into()));
        }
        Ok(Self {
            n,
            mode: ProxyMode::Sample,
            rows: vertices.iter().map(|&v| vec![(v, 1.0)]).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    /// Sampled vertex of each row in sample mode.
    pub fn sample_indices(&self) -> Option<Vec<usize>> {
        (self.mode == ProxyMode::Sample).then(|| self.rows.iter().map(|r| r[0].0).collect())
    }

    pub fn reduced(&self) -> SparseMatrix {
        let t: Vec<_> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(v, w)| (i, v, w)))
            .collect();
        SparseMatrix::from_triplets(self.m(), self.n, &t).expect("selector indices validated")
    }

    /// `Ŵ ⊗ I₃` over interleaved coordinates `3v + c`.
    pub fn expanded(&self) -> SparseMatrix {
        let mut t = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for &(v, w) in r {
                for c in 0..3 {
                    t.push((3 * i + c, 3 * v + c, w));
                }
            }
        }
        SparseMatrix::from_triplets(3 * self.m(), 3 * self.n, &t).expect("selector indices validated")
    }

    /// Proxy positions `Ŵ·V`.
    pub fn apply(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(v, w)| vertices[v] * w).sum())
            .collect()
    }
}

/// Farthest-point sampling of `m` rows of `points`, starting from the row
/// farthest from the centroid. Ties go to the lowest index.
pub(crate) fn farthest_point_sampling(points: &DMatrix<f64>, m: usize) -> Vec<usize> {
    let n = points.nrows();
    let centroid = DMatrix::from_fn(1, points.ncols(), |_, d| points.column(d).mean());
    let first = argmax((0..n).map(|i| dist2(points, i, &centroid, 0))).expect("non-empty");
    let mut chosen = vec![first];
    let mut mind: Vec<f64> = (0..n).map(|i| dist2(points, i, points, first)).collect();
    mind[first] = f64::NEG_INFINITY;
    while chosen.len() < m {
        let next = argmax(mind.iter().copied()).expect("non-empty");
        chosen.push(next);
        mind[next] = f64::NEG_INFINITY;
        for (i, d) in mind.iter_mut().enumerate() {
            if *d > f64::NEG_INFINITY {
                *d = d.min(dist2(points, i, points, next));
            }
        }
    }
    chosen
}

pub fn linear_proxy_selector(
    mesh: &Mesh,
    m: usize,
    mode: ProxyMode,
    vertex_embedding: &DMatrix<f64>,
    seed: u64,
) -> Result<ProxySelector, MeshError> {
    let all: Vec<usize> = (0..mesh.n()).collect();
    linear_proxy_selector_among(mesh.n(), &all, m, mode, vertex_embedding, seed)
}

/// Proxy selection restricted to `candidates` (sorted vertex ids).
pub fn linear_proxy_selector_among(
    n: usize,
    candidates: &[usize],
    m: usize,
    mode: ProxyMode,
    vertex_embedding: &DMatrix<f64>,
    seed: u64,
) -> Result<ProxySelector, MeshError> {
    if m == 0 || m > candidates.len() {
        return Err(MeshError::InvalidParameter(format!(
            "proxy count {m} must be in 1..={} (available vertices)",
            candidates.len()
        )));
    }
    if vertex_embedding.nrows() != n {
        return Err(MeshError::InvalidParameter("embedding rows must match vertices".into()));
    }
    let sub = vertex_embedding.select_rows(candidates);
    match mode {
        ProxyMode::Sample => {
            let picks: Vec<usize> = farthest_point_sampling(&sub, m).into_iter().map(|i| candidates[i]).collect();
            ProxySelector::from_vertices(n, &picks)
        }
        ProxyMode::Group => {
            let labels = kmeans(&sub, m, seed);
            let mut groups = vec![Vec::new(); m];
            for (k, &l) in labels.iter().enumerate() {
                groups[l].push(candidates[k]);
            }
            let rows = groups
                .into_iter()
                .map(|g| {
                    let w = 1.0 / g.len() as f64;
                    g.into_iter().map(|v| (v, w)).collect()
                })
                .collect();
            Ok(ProxySelector {
                n,
                mode: ProxyMode::Group,
                rows,
            })
        }
    }
}
