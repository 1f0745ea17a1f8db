// SPDX-License-Identifier: MIT OR Apache-2.0

//! Working-memory shift optimization.
//!
//! The target is split into windows; shift `δ_i` is added to the output of
//! the edited block at the last token before window `i`. Objectives:
//!
//! | kind | shift `i` minimizes |
//! |------|---------------------|
//! | one-for-all | mean NLL from window `i` to the end |
//! | window | mean NLL of window `i` |
//! | parallel | mean NLL of the whole target, all shifts jointly |
//! | matryoshka | `−1/(N−i) Σ_k λ_k log P(windows i..=i+k)` with `λ = 1` |
//! | matryoshka-affinity | same, `λ_k = 2 − mean cosine` from a probe |
//!
//! Sequential kinds freeze `δ_0..δ_{i−1}` while optimizing `δ_i`. Shifts
//! start at zero; after every Adam step `δ` is scaled back into the ball
//! `‖δ‖ ≤ c‖h‖` around the anchor state `h`.

mod affinity;
mod objective;
mod optimize;
mod plan;

pub use affinity::{
    affinity_row, compute_affinity, gradient_cosine, AffinityProfile, AffinityRow, FigureGradients, ModelFigures,
    ZERO_GRADIENT_NORM,
};
pub use objective::{
    loss_matryoshka, loss_one_for_all, loss_parallel, loss_sequential_nll, loss_window, matryoshka_window_weights,
    EditContext, Objective, ObjectiveKind,
};
pub use optimize::{
    optimize_delta, project_to_ball, AffinityConfig, DeltaTrace, OptimizerConfig, WindowTrace,
};
pub use plan::{plan_windows, WindowPlan};
