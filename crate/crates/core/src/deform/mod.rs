//! Proxy-augmented ARAP energy, its variational subspace and the reduced
//! model consumed by the runtime.

mod container;
mod energy;
mod patches;
mod subspace;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorClass;
use crate::linalg::LinalgError;
use crate::mesh::{
    cotangent_weights, embedding, frame_embedding, kmeans, lb_eigenbasis, linear_proxy_selector_among,
    ClusterAssignment, Elements, Mesh, MeshError, MeshKind, ProxyMode, ProxySelector, DEFAULT_SEED,
};

pub use container::{
    read_container, read_model, read_subspace_blob, subspace_blob, write_container, write_model, BlobTrailer, SubspaceBlob,
    BLOB_CHUNK, VSUB_MAGIC, VSUB_VERSION,
};
pub use energy::{
    assemble_energy, cluster_block, direct_energy, identity_rotations, regulator_basis, regulator_matrix,
    set_cluster_block, stack_rotations, stack_unknown, DeformEnergy, EnergyParams,
};
pub use patches::{apply_affine_patches, PatchLayout, PatchMode, PatchSpec};
pub use subspace::{precompute_subspace, reduce_model, ControlSelector, ReducedMatrices};

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    SingularSaddle(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl DeformError {
    pub fn class(&self) -> ErrorClass {
        match self {
            DeformError::InvalidConfig(_) | DeformError::SingularSaddle(_) => ErrorClass::Validation,
            DeformError::Format(_) => ErrorClass::Parse,
            DeformError::Io { .. } => ErrorClass::Io,
            DeformError::Mesh(e) => e.class(),
            DeformError::Linalg(e) => e.class(),
        }
    }
}

/// Eigenvectors used for the spectral embedding unless overridden.
pub const DEFAULT_EIGEN_COUNT: usize = 20;

/// Precompute settings. `m` counts every linear proxy including one per
/// patch; `d` counts every rotation cluster including one per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub m: usize,
    pub d: usize,
    pub params: EnergyParams,
    pub proxy_mode: ProxyMode,
    pub seed: u64,
    pub eigen_count: usize,
    pub patches: Vec<PatchSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 33,
            d: 12,
            params: EnergyParams::default(),
            proxy_mode: ProxyMode::Sample,
            seed: DEFAULT_SEED,
            eigen_count: DEFAULT_EIGEN_COUNT,
            patches: Vec::new(),
        }
    }
}

/// Everything a reduced model is built from, kept separate so tests can
/// inspect the full-space energy.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub mesh: Mesh,
    pub config: ModelConfig,
    pub clusters: ClusterAssignment,
    pub selector: ControlSelector,
    pub energy: DeformEnergy,
}

impl ModelParts {
    pub fn new(mesh: Mesh, config: &ModelConfig) -> Result<Self, DeformError> {
        config.params.validate()?;
        let n = mesh.n();
        let layout = PatchLayout::new(n, config.patches.clone())?;
        let s = layout.s();
        if config.m < s || config.d < s {
            return Err(DeformError::InvalidConfig(format!(
                "m = {} and d = {} must each cover the {s} patches",
                config.m, config.d
            )));
        }
        let eig = lb_eigenbasis(&mesh, config.eigen_count.clamp(2, n))?;
        let emb = embedding(&eig);

        let patch_of_frame = frame_patches(&mesh, &layout);
        let free_frames: Vec<usize> = (0..patch_of_frame.len()).filter(|&k| patch_of_frame[k].is_none()).collect();
        let d_free = config.d - s;
        let mut labels = vec![0usize; patch_of_frame.len()];
        if free_frames.is_empty() {
            if d_free != 0 {
                return Err(DeformError::InvalidConfig(format!(
                    "patches cover every frame; d must equal the patch count {s}"
                )));
            }
        } else {
            if d_free == 0 || d_free > free_frames.len() {
                return Err(DeformError::InvalidConfig(format!(
                    "cluster count {d_free} outside patches must be in 1..={}",
                    free_frames.len()
                )));
            }
            let fe = frame_embedding(&mesh, &emb).select_rows(&free_frames);
            let free_labels = if d_free == 1 { vec![0; free_frames.len()] } else { kmeans(&fe, d_free, config.seed) };
            for (k, l) in free_frames.iter().zip(free_labels) {
                labels[*k] = l;
            }
        }
        for (k, p) in patch_of_frame.iter().enumerate() {
            if let Some(i) = p {
                labels[k] = d_free + i;
            }
        }
        let clusters = ClusterAssignment::new(labels, config.d)?;

        let vertex = if config.m == s {
            ProxySelector {
                n,
                mode: config.proxy_mode,
                rows: Vec::new(),
            }
        } else {
            linear_proxy_selector_among(n, &layout.free, config.m - s, config.proxy_mode, &emb, config.seed)?
        };
        let selector = ControlSelector::new(vertex, layout.clone(), mesh.vertices())?;

        let weights = cotangent_weights(&mesh);
        let energy = assemble_energy(&mesh, &weights, &clusters, &config.params)?;
        let energy = apply_affine_patches(energy, &mesh, layout)?;
        let mut config = config.clone();
        config.params = energy.params;
        Ok(Self {
            mesh,
            config,
            clusters,
            selector,
            energy,
        })
    }

    pub fn precompute(self) -> Result<PrecomputedModel, DeformError> {
        let (n_w, u_w) = precompute_subspace(&self.energy, &self.selector)?;
        let red = reduce_model(&self.energy, &n_w, &u_w);
        let rest_x = self.selector.apply(&self.selector.layout.rest_control(self.mesh.vertices()));
        Ok(PrecomputedModel {
            meta: ModelMeta {
                mesh: self.mesh,
                params: self.energy.params,
                clusters: self.clusters,
                proxies: self.selector.vertex,
                patches: self.config.patches,
                moments: self.energy.moments,
                rest_x: rest_x.as_slice().to_vec(),
                seed: self.config.seed,
                proxy_mode: self.config.proxy_mode,
                eigen_count: self.config.eigen_count,
            },
            r: self.energy.r,
            n_w,
            u_w,
            l_tilde: red.l_tilde,
            m_tilde: red.m_tilde,
            m_n: red.m_n,
            m_u: red.m_u,
            e_s: red.e_s,
        })
    }
}

/// Patch owning each frame: patch vertex frames for surfaces, tetrahedra
/// touching a patch (lowest patch index wins) for solids.
fn frame_patches(mesh: &Mesh, layout: &PatchLayout) -> Vec<Option<usize>> {
    match mesh.elements() {
        Elements::Triangles(_) => layout.owner.clone(),
        Elements::Tetrahedra(tets) => tets
            .iter()
            .map(|t| t.iter().filter_map(|&v| layout.owner[v]).min())
            .collect(),
    }
}

pub fn build_model(mesh: Mesh, config: &ModelConfig) -> Result<PrecomputedModel, DeformError> {
    ModelParts::new(mesh, config)?.precompute()
}

/// Non-matrix part of a precomputed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mesh: Mesh,
    pub params: EnergyParams,
    pub clusters: ClusterAssignment,
    /// Vertex proxies over the free vertices.
    pub proxies: ProxySelector,
    pub patches: Vec<PatchSpec>,
    /// Per-cluster edge moments `Σ c·e·eᵀ`.
    pub moments: Vec<Matrix3<f64>>,
    /// Proxy values of the rest pose.
    pub rest_x: Vec<f64>,
    pub seed: u64,
    pub proxy_mode: ProxyMode,
    pub eigen_count: usize,
}

/// Reduced model: the subspace `[V′; Q] = N_W X + U_W S` and the matrices of
/// `E″(S, X) = ½XᵀL̃X − SᵀM̃X + ½SᵀE_S S + ½Σ tr(s_a E_a s_aᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedModel {
    pub meta: ModelMeta,
    pub r: usize,
    pub n_w: DMatrix<f64>,
    pub u_w: DMatrix<f64>,
    pub l_tilde: DMatrix<f64>,
    pub m_tilde: DMatrix<f64>,
    pub m_n: DMatrix<f64>,
    pub m_u: DMatrix<f64>,
    pub e_s: DMatrix<f64>,
}

impl PrecomputedModel {
    pub fn n(&self) -> usize {
        self.meta.mesh.n()
    }

    pub fn d(&self) -> usize {
        self.meta.clusters.d
    }

    pub fn s(&self) -> usize {
        self.meta.patches.len()
    }

    /// Linear proxy count including one per patch.
    pub fn m(&self) -> usize {
        self.meta.proxies.m() + self.s()
    }

    /// Reduced dimension `3m + 9s`.
    pub fn k(&self) -> usize {
        3 * self.m() + 9 * self.s()
    }

    pub fn kind(&self) -> MeshKind {
        self.meta.mesh.kind()
    }

    pub fn mesh(&self) -> &Mesh {
        &self.meta.mesh
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout::new(self.n(), self.meta.patches.clone()).expect("validated at build time")
    }

    pub fn pos_dim(&self) -> usize {
        self.layout().pos_dim()
    }

    pub fn selector(&self) -> ControlSelector {
        ControlSelector::new(self.meta.proxies.clone(), self.layout(), self.meta.mesh.vertices())
            .expect("validated at build time")
    }

    pub fn rest_x(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.meta.rest_x)
    }

    pub fn cluster_weights(&self) -> Vec<f64> {
        self.meta.moments.iter().map(|e| e.trace()).collect()
    }

    /// Vertex blocks `(N^v, U^v)` over interleaved coordinates `3v + c`, with
    /// patch transformations expanded.
    pub fn vertex_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let layout = self.layout();
        let p = layout.pos_dim();
        if layout.s() == 0 {
            return (self.n_w.rows(0, p).into_owned(), self.u_w.rows(0, p).into_owned());
        }
        let e = layout.expansion(self.meta.mesh.vertices());
        (
            e.mul_dense(&self.n_w.rows(0, p).into_owned()),
            e.mul_dense(&self.u_w.rows(0, p).into_owned()),
        )
    }

    /// `E″(S, X)` including the S-only term, so it equals `E′` at the
    /// reconstruction.
    pub fn reduced_energy(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.l_tilde * x)) - s.dot(&(&self.m_tilde * x))
            + 0.5 * s.dot(&(&self.e_s * s))
            + energy::s_constant(&self.meta.moments, s)
    }

    /// Vertex positions `P·(N_W X + U_W S)` in the model frame.
    pub fn reconstruct_local(&self, x: &DVector<f64>, s: &DVector<f64>) -> Vec<Vector3<f64>> {
        let layout = self.layout();
        let p = layout.pos_dim();
        let ctrl = self.n_w.rows(0, p) * x + self.u_w.rows(0, p) * s;
        layout.expand(ctrl.as_slice(), self.meta.mesh.vertices())
    }

    /// Bytes held by the dense matrices.
    pub fn matrix_bytes(&self) -> usize {
        8 * [&self.n_w, &self.u_w, &self.l_tilde, &self.m_tilde, &self.m_n, &self.m_u, &self.e_s]
            .iter()
            .map(|m| m.len())
            .sum::<usize>()
    }
}
