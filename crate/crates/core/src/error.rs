use thiserror::Error;

use crate::deform::DeformError;
use crate::linalg::LinalgError;
use crate::mesh::MeshError;
use crate::qp::QpError;
use crate::runtime::RuntimeError;
use crate::theory::TheoryError;

/// Coarse failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Validation,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Parse => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Linalg(e) => e.class(),
            Error::Qp(e) => e.class(),
            Error::Theory(e) => e.class(),
            Error::Mesh(e) => e.class(),
            Error::Deform(e) => e.class(),
            Error::Runtime(e) => e.class(),
        }
    }
}

impl LinalgError {
    pub fn class(&self) -> ErrorClass {
        match self {
            LinalgError::Dimension(_) | LinalgError::OutOfBounds { .. } => ErrorClass::Validation,
            LinalgError::Singular { .. } | LinalgError::Factorization(_) => ErrorClass::Numeric,
        }
    }
}
