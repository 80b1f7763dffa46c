// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in world generation, training or analysis.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller-supplied configuration or argument is invalid.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// World configuration cannot be satisfied.
    #[error("infeasible world configuration: {0}")]
    Infeasible(String),

    /// An entity is not part of the world, or has the wrong kind.
    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    /// A token string is not in the vocabulary, or never occurs in the corpus.
    #[error("unknown token: {0}")]
    UnknownToken(String),

    /// A token id outside the vocabulary was fed to a model.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Shapes or sizes of two inputs do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    /// Training produced a non-finite loss or parameter.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A modulation plan failed (or lacks) its manipulation check.
    #[error("manipulation check: {0}")]
    ManipulationCheck(String),

    /// A document carries an unexpected schema or magic string.
    #[error("schema mismatch: {0}")]
    Schema(String),

    /// A file the command depends on does not exist.
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Infeasible(_) => "infeasible",
            Error::UnknownEntity(_) => "unknown_entity",
            Error::UnknownToken(_) => "unknown_token",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Singular(_) => "singular",
            Error::Divergence(_) => "divergence",
            Error::ManipulationCheck(_) => "manipulation_check",
            Error::Schema(_) => "schema",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::Json(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Divergence(_) | Error::Singular(_) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
