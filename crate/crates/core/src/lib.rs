//! Concreteness diagnostics for matched language-model pairs.
//!
//! Each module covers one analysis over exported model artifacts: QA accuracy
//! by question concreteness ([`behavior`]), embedding geometry
//! ([`geometry`]), attention entropy ([`attention`]) and rating alignment
//! ([`alignment`]). [`pipeline`] runs them over a run directory and
//! [`report`] assembles the result.

pub mod alignment;
pub mod attention;
pub mod behavior;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod norms;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod tensor;

pub use error::ErrorKind;
