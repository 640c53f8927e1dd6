//! Variational subspaces for equality-constrained quadratic programs and
//! their application to reduced as-rigid-as-possible mesh deformation.

pub mod deform;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod qp;
pub mod runtime;
pub mod service;
pub mod theory;

pub use error::{Error, ErrorClass};
