//! Annealed Stein variational sampling from masked products of score-based
//! flow models, with closed-form Gaussian-mixture experts for verification.

pub mod analytic;
pub mod backend;
pub mod cli_io;
pub mod composition;
pub mod error;
pub mod expert;
pub mod extension;
pub mod flow;
pub mod lattice;
pub mod svgd;

pub use error::{Error, ErrorClass, Result};
pub use lattice::{LatticeField, Shape};
