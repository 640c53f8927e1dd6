//! `vsub` command-line front end: precompute, verify, deform-batch, bench
//! and serve.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use vsub_core::deform::DeformError;
use vsub_core::mesh::{MeshError, ProxyMode};
use vsub_core::runtime::RuntimeError;
use vsub_core::theory::TheoryError;
use vsub_core::ErrorClass;

pub mod commands;
pub mod config;
pub mod server;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vsub_core::Error),
}

macro_rules! from_core {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        })*
    };
}

from_core!(DeformError, MeshError, RuntimeError, TheoryError);

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Parse(_) => ErrorClass::Parse,
            CliError::Invalid(_) => ErrorClass::Validation,
            CliError::Numeric(_) => ErrorClass::Numeric,
            CliError::Io { .. } => ErrorClass::Io,
            CliError::Core(e) => e.class(),
        }
    }

    /// 2 parse, 3 validation, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}

#[derive(Debug, Parser)]
#[command(name = "vsub", version, about = "Reduced ARAP deformation in variational subspaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the reduced model of a mesh and write it as a VSUB container.
    Precompute(PrecomputeArgs),
    /// Run the Monte-Carlo error-bound and exactness suites.
    Verify(VerifyArgs),
    /// Drive a session from a JSON-lines script, writing OBJ frames and a CSV trace.
    DeformBatch(BatchArgs),
    /// Time precompute, preparation, iterations and reconstruction per model.
    Bench(BenchArgs),
    /// Serve sessions over WebSocket at /ws and list models at GET /models.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProxyArg {
    Sample,
    Group,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mesh file or bundled name (plane, cylinder, cylinder:N, bar, solid_cylinder).
    #[arg(long)]
    pub mesh: Option<String>,
    /// Linear proxies, including one per patch.
    #[arg(long)]
    pub m: Option<usize>,
    /// Rotation clusters, including one per patch.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Drop the quaternion regulator (γ = 0).
    #[arg(long, conflicts_with = "gamma")]
    pub no_gamma: bool,
    #[arg(long, value_enum)]
    pub proxy_mode: Option<ProxyArg>,
    /// Laplace-Beltrami eigenvectors in the clustering embedding.
    #[arg(long)]
    pub eigen_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelFlags {
    fn layer(&self) -> RunConfig {
        RunConfig {
            mesh: self.mesh.clone(),
            m: self.m,
            d: self.d,
            alpha: self.alpha,
            beta: self.beta,
            gamma: if self.no_gamma { Some(0.0) } else { self.gamma },
            proxy_mode: self.proxy_mode.map(|p| match p {
                ProxyArg::Sample => ProxyMode::Sample,
                ProxyArg::Group => ProxyMode::Group,
            }),
            eigen_count: self.eigen_count,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SessionFlags {
    /// Phase 1 / Phase 2 iterations per frame.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Fit a uniform scale per rotation cluster.
    #[arg(long)]
    pub conformal: bool,
    /// Conformal scales are clamped to [1/cap, cap].
    #[arg(long)]
    pub psi_cap: Option<f64>,
    /// Penalize handle constraints instead of enforcing them.
    #[arg(long)]
    pub soft: bool,
    /// Soft constraint weight; implies --soft.
    #[arg(long)]
    pub soft_delta: Option<f64>,
    /// Keep the global rotation at identity.
    #[arg(long)]
    pub no_adapt_rotation: bool,
}

impl SessionFlags {
    fn layer(&self) -> RunConfig {
        RunConfig {
            iters: self.iters,
            conformal: self.conformal.then_some(true),
            psi_cap: self.psi_cap,
            soft: self.soft.then_some(true),
            soft_delta: self.soft_delta,
            adapt_rotation: self.no_adapt_rotation.then_some(false),
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Output container path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    /// Largest problem dimension.
    #[arg(long, default_value_t = 24)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub session: SessionFlags,
    /// Precomputed container; replaces --mesh.
    #[arg(long, conflicts_with = "mesh")]
    pub model: Option<PathBuf>,
    /// JSON-lines script.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Directory receiving one OBJ per frame.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    /// CSV trace path; stdout when omitted.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Leave timing columns empty so repeated runs compare byte for byte.
    #[arg(long)]
    pub no_timings: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub session: SessionFlags,
    /// Meshes to time; falls back to --mesh, then to plane and cylinder.
    #[arg(value_name = "MESH")]
    pub meshes: Vec<String>,
    /// Frames per model; timings are medians over frames.
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

pub const DEFAULT_PORT: u16 = 7878;

/// Config file (if any) with the flag layer on top.
fn layered(file: Option<&Path>, flags: RunConfig) -> Result<RunConfig, CliError> {
    let base = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.overlay(flags))
}

/// Caps rayon workers at `VSUB_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("VSUB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Parse(format!("VSUB_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Invalid(format!("cannot size thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Precompute(a) => {
            let mut flags = a.model.layer();
            flags.out = a.out;
            commands::precompute(&layered(a.model.config.as_deref(), flags)?)
        }
        Command::Verify(a) => commands::verify(&a),
        Command::DeformBatch(a) => {
            let mut flags = a.model_flags.layer().overlay(a.session.layer());
            flags.model = a.model;
            flags.script = a.script;
            flags.frames_dir = a.frames_dir;
            flags.trace = a.trace;
            flags.timings = a.no_timings.then_some(false);
            commands::deform_batch(&layered(a.model_flags.config.as_deref(), flags)?)
        }
        Command::Bench(a) => {
            let flags = a.model_flags.layer().overlay(a.session.layer());
            let cfg = layered(a.model_flags.config.as_deref(), flags)?;
            commands::bench(&cfg, &a.meshes, a.frames, a.json.as_deref())
        }
        Command::Serve(a) => {
            let flags = RunConfig {
                port: a.port,
                ..Default::default()
            };
            let cfg = layered(a.config.as_deref(), flags)?;
            server::run_blocking(&a.host, cfg.port.unwrap_or(DEFAULT_PORT))
        }
    }
}
