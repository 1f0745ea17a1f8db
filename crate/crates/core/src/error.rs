// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (token id, layer, position, window) is out of range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A loss or intermediate value became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Linear solve failed or was too ill-conditioned.
    #[error("solver error: {0}")]
    Solver(String),

    /// Invalid configuration value or unreachable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A prerequisite artifact was not found.
    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// A report was requested over a directory without completed runs.
    #[error("no runs found in {}", .0.display())]
    NoRuns(PathBuf),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
