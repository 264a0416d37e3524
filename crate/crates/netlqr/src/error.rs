//! Crate-wide error type.

use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    /// The model failed admissibility checks; every violation is listed.
    #[error("model is not admissible: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// An inner solve was singular or beyond the condition-number cap.
    #[error("ill-conditioned inner matrix in {context}: {detail}")]
    IllConditioned { context: String, detail: String },

    #[error("random generation failed at {step} after {attempts} attempts")]
    Generation { step: String, attempts: usize },

    #[error("time index {t} out of range (horizon {horizon})")]
    TimeOutOfRange { t: usize, horizon: usize },

    #[error("estimate is already at the horizon (t = {t}); cannot update past it")]
    PastHorizon { t: usize },

    #[error("model is not in decoupled form: {0}")]
    NotDecoupled(String),

    /// The `custom` noise family needs a caller-supplied sampler.
    #[error("noise family `custom` requires an explicit sampler")]
    SamplerRequired,

    /// Gains were synthesized from a different model than the one supplied.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.code)
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
