use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vsub_core::deform::{EnergyParams, ModelConfig, PatchSpec};
use vsub_core::mesh::{generate_primitive, load_mesh, Mesh, MeshFormat, Primitive, ProxyMode};
use vsub_core::runtime::{ConstraintMode, SessionOptions, DEFAULT_ITERS, DEFAULT_PSI_CAP};
use vsub_core::service::ModelCatalog;

use crate::CliError;

/// Settings shared by all subcommands. Every field is optional so a config
/// file and command-line flags can be layered: flags > file > defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mesh file (`.obj`, `.off`, `.node`/`.ele`) or bundled primitive name;
    /// `cylinder:N` asks for a surface cylinder of about `N` vertices.
    pub mesh: Option<String>,
    /// Precomputed container, used instead of `mesh` where accepted.
    pub model: Option<PathBuf>,
    pub m: Option<usize>,
    pub d: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub proxy_mode: Option<ProxyMode>,
    pub eigen_count: Option<usize>,
    pub seed: Option<u64>,
    pub patches: Option<Vec<PatchSpec>>,
    pub iters: Option<usize>,
    pub conformal: Option<bool>,
    pub psi_cap: Option<f64>,
    /// Soft constraints; `soft_delta` overrides the default weight.
    pub soft: Option<bool>,
    pub soft_delta: Option<f64>,
    pub adapt_rotation: Option<bool>,
    pub out: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub frames_dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub timings: Option<bool>,
    pub port: Option<u16>,
}

macro_rules! layer {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $(if $src.$f.is_some() { $dst.$f = $src.$f; })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("config {}: {e}", path.display())))
    }

    /// `over` wins wherever it sets a field.
    pub fn overlay(mut self, over: RunConfig) -> Self {
        layer!(self, over; mesh, model, m, d, alpha, beta, gamma, proxy_mode, eigen_count, seed, patches,
            iters, conformal, psi_cap, soft, soft_delta, adapt_rotation, out, script, frames_dir, trace,
            report, timings, port);
        self
    }

    /// Precompute settings, starting from `base` (the mesh's defaults).
    pub fn model_config(&self, base: ModelConfig) -> Result<ModelConfig, CliError> {
        let mut c = base;
        if let Some(m) = self.m {
            c.m = m;
        }
        if let Some(d) = self.d {
            c.d = d;
        }
        let p = &mut c.params;
        *p = EnergyParams {
            alpha: self.alpha.unwrap_or(p.alpha),
            beta: self.beta.unwrap_or(p.beta),
            gamma: self.gamma.unwrap_or(p.gamma),
        };
        if let Some(mode) = self.proxy_mode {
            c.proxy_mode = mode;
        }
        if let Some(e) = self.eigen_count {
            c.eigen_count = e;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.patches {
            c.patches = p.clone();
        }
        if c.m == 0 || c.d == 0 {
            return Err(CliError::Invalid(format!("m and d must be ≥ 1, got m={} d={}", c.m, c.d)));
        }
        c.params.validate()?;
        Ok(c)
    }

    pub fn session_options(&self) -> Result<SessionOptions, CliError> {
        let mode = if self.soft.unwrap_or(false) || self.soft_delta.is_some() {
            ConstraintMode::Soft { delta: self.soft_delta }
        } else {
            ConstraintMode::Hard
        };
        let opts = SessionOptions {
            iters: self.iters.unwrap_or(DEFAULT_ITERS),
            mode,
            conformal: self.conformal.unwrap_or(false),
            psi_cap: self.psi_cap.unwrap_or(DEFAULT_PSI_CAP),
            adapt_rotation: self.adapt_rotation.unwrap_or(true),
        };
        opts.validate()?;
        Ok(opts)
    }
}

/// A mesh plus the precompute settings that go with it by default.
#[derive(Debug, Clone)]
pub struct MeshSource {
    pub label: String,
    pub mesh: Mesh,
    pub defaults: ModelConfig,
}

/// Resolves a mesh argument: a path with a known extension, a bundled
/// catalog name, or `cylinder:N`.
pub fn resolve_mesh(arg: &str) -> Result<MeshSource, CliError> {
    let path = Path::new(arg);
    if MeshFormat::from_path(path).is_some() {
        let mesh = load_mesh(path, None)?;
        return Ok(MeshSource {
            label: path.file_stem().map_or(arg.into(), |s| s.to_string_lossy().into_owned()),
            mesh,
            defaults: ModelConfig::default(),
        });
    }
    let catalog = ModelCatalog::bundled();
    let (name, count) = match arg.split_once(':') {
        Some((name, n)) => {
            let n: usize = n
                .parse()
                .map_err(|_| CliError::Parse(format!("bad vertex count in mesh '{arg}'")))?;
            (name, Some(n))
        }
        None => (arg, None),
    };
    let entry = catalog.entries().iter().find(|e| e.name == name).ok_or_else(|| {
        let names: Vec<&str> = catalog.entries().iter().map(|e| e.name.as_str()).collect();
        CliError::Invalid(format!(
            "unknown mesh '{arg}': not a mesh file and not one of {}",
            names.join(", ")
        ))
    })?;
    let primitive = match (count, &entry.primitive) {
        (None, p) => p.clone(),
        (Some(n), Primitive::Cylinder { .. }) => Primitive::cylinder_with_vertices(n),
        (Some(_), _) => return Err(CliError::Invalid(format!("only cylinder takes a vertex count, got '{arg}'"))),
    };
    Ok(MeshSource {
        label: arg.to_string(),
        mesh: generate_primitive(&primitive)?,
        defaults: entry.config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let file: RunConfig = serde_json::from_str(r#"{"m": 20, "d": 8, "alpha": 0.3, "conformal": true}"#).unwrap();
        let flags = RunConfig {
            d: Some(5),
            ..Default::default()
        };
        let c = file.overlay(flags);
        let mc = c.model_config(ModelConfig::default()).unwrap();
        assert_eq!((mc.m, mc.d), (20, 5));
        assert_eq!(mc.params.alpha, 0.3);
        assert_eq!(mc.params.beta, EnergyParams::default().beta);
        assert!(c.session_options().unwrap().conformal);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"mm": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_fail_before_work() {
        let c = RunConfig {
            m: Some(0),
            ..Default::default()
        };
        assert!(matches!(c.model_config(ModelConfig::default()), Err(CliError::Invalid(_))));
        let c = RunConfig {
            alpha: Some(-1.0),
            ..Default::default()
        };
        assert_eq!(c.model_config(ModelConfig::default()).unwrap_err().exit_code(), 3);
        let c = RunConfig {
            soft_delta: Some(0.0),
            ..Default::default()
        };
        assert_eq!(c.session_options().unwrap_err().exit_code(), 3);
    }

    #[test]
    fn mesh_names_resolve() {
        let s = resolve_mesh("cylinder:800").unwrap();
        assert!((700..900).contains(&s.mesh.n()));
        assert_eq!((s.defaults.m, s.defaults.d), (33, 12));
        assert!(resolve_mesh("plane").is_ok());
        assert_eq!(resolve_mesh("teapot").unwrap_err().exit_code(), 3);
        assert_eq!(resolve_mesh("plane:40").unwrap_err().exit_code(), 3);
        assert_eq!(resolve_mesh("cylinder:x").unwrap_err().exit_code(), 2);
        assert_eq!(resolve_mesh("/nonexistent/shape.obj").unwrap_err().exit_code(), 5);
    }
}
