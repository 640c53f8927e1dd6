//! On-site solver: constraint preparation, Phase 1 reduced solves, Phase 2
//! rotation fitting, global rotation adaption and conformal scales.

mod rotation;
mod script;
mod session;

use thiserror::Error;

use crate::deform::DeformError;
use crate::error::ErrorClass;
use crate::linalg::LinalgError;
use crate::mesh::MeshError;

pub use rotation::{conformal_gradient, fit_conformal, fit_rotation, procrustes};
pub use script::{
    parse_script, run_script, write_trace_csv, write_trace_file, ScriptOp, ScriptOutput, TraceRow, TRACE_HEADER,
};
pub use session::{
    ConstraintMode, FrameStats, Session, SessionOptions, SharedModel, DEFAULT_ITERS, DEFAULT_PSI_CAP,
    SOFT_DELTA_SCALE,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid handles: {0}")]
    InvalidHandles(String),
    #[error("{0}")]
    Rank(String),
    #[error("{0}")]
    State(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("invalid session options: {0}")]
    Config(String),
    #[error("script line {line}: {msg}")]
    Script { line: usize, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl RuntimeError {
    pub fn class(&self) -> ErrorClass {
        match self {
            RuntimeError::InvalidHandles(_) | RuntimeError::Rank(_) | RuntimeError::State(_) | RuntimeError::Config(_) => {
                ErrorClass::Validation
            }
            RuntimeError::Numeric(_) => ErrorClass::Numeric,
            RuntimeError::Script { .. } => ErrorClass::Parse,
            RuntimeError::Io { .. } => ErrorClass::Io,
            RuntimeError::Deform(e) => e.class(),
            RuntimeError::Mesh(e) => e.class(),
            RuntimeError::Linalg(e) => e.class(),
        }
    }
}
