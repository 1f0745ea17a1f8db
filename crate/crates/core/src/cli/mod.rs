// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment runner: configuration, subcommands and run provenance.
//!
//! Artifacts of one run directory:
//!
//! | file | written by |
//! |------|------------|
//! | `bench.jsonl`, `bench.manifest.toml` | `genbench` |
//! | `model.ckpt`, `train-<hash>.csv` | `pretrain` |
//! | `traces-*.jsonl`, `delta-*.ckpt`, `edit-*.csv` | `edit` |
//! | `eval-*.csv`, `baseline-<hash>.csv` | `eval` |
//! | `length-buckets-*.csv`, `stability-*.csv`, `window-ablation-*.csv` | `sweep` |
//! | `report-summary.csv`, `report.txt` | `report` |
//!
//! Each command also writes `manifest-<command>-<hash>.toml`.

mod commands;
mod config;

pub use commands::{
    cmd_edit, cmd_eval, cmd_genbench, cmd_pretrain, cmd_report, cmd_sweep, CommandOutput, Experiment, RunManifest,
    BENCH_FILE, CHECKPOINT_FILE,
};
pub use config::{apply_override, RunConfig, OUTPUT_ROOT_ENV};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Format(_) => EXIT_USAGE,
        Error::MissingArtifact(_) | Error::NoRuns(_) | Error::Io { .. } => EXIT_MISSING,
        Error::Numerical(_) | Error::Solver(_) => EXIT_NUMERICAL,
        Error::Shape { .. } | Error::Contract(_) | Error::OutOfRange(_) => 1,
    }
}
