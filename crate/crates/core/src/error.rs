use serde::Serialize;

use crate::alignment::AlignmentError;
use crate::attention::AttentionError;
use crate::behavior::BehaviorError;
use crate::geometry::GeometryError;
use crate::norms::NormsError;
use crate::stats::StatsError;
use crate::tensor::TensorError;

/// Coarse failure class; the command line maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Malformed, missing or inconsistent input data.
    Input,
    /// The data were readable but the computation could not produce a value.
    Numeric,
}

impl StatsError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            StatsError::LengthMismatch { .. } => ErrorKind::Input,
            _ => ErrorKind::Numeric,
        }
    }
}

impl TensorError {
    pub fn kind(&self) -> ErrorKind {
        ErrorKind::Input
    }
}

impl NormsError {
    pub fn kind(&self) -> ErrorKind {
        ErrorKind::Input
    }
}

impl BehaviorError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            BehaviorError::TooFewBins { .. } => ErrorKind::Numeric,
            BehaviorError::Stats(e) => e.kind(),
            _ => ErrorKind::Input,
        }
    }
}

impl GeometryError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            GeometryError::NonFiniteGradient { .. } | GeometryError::InvalidPerplexity { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Input,
        }
    }
}

impl AttentionError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AttentionError::NoDefinedLayers | AttentionError::TooFewPoints { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Input,
        }
    }
}

impl AlignmentError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AlignmentError::TooFewBins { .. } | AlignmentError::ZeroCell(_) => ErrorKind::Numeric,
            AlignmentError::Stats(e) => e.kind(),
            AlignmentError::Bins(e) => e.kind(),
            _ => ErrorKind::Input,
        }
    }
}
