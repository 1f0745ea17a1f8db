// SPDX-License-Identifier: MIT OR Apache-2.0

//! Turning optimized working-memory shifts into weight changes.
//!
//! MLP blocks are read as linear associative memories: for block `l` the
//! key at a position is `k = gelu(LN₂(r) · W_up)` and the memory is
//! `m = W k` with `W = W_downᵀ`. Shifting the block output by `δ` is the
//! same as asking for the memory `m* = m + δ`. Solvers:
//!
//! * [`SolverKind::MemitClosedForm`]: least squares over preserved and
//!   edited keys, `Δ = (M1 − W0 K1) K1ᵀ (K0 K0ᵀ + K1 K1ᵀ + εI)⁻¹`.
//! * [`SolverKind::AlphaEditNullSpace`]: the same residual projected onto
//!   the null space `P` of `K0 K0ᵀ`,
//!   `Δ = (M1 − W0 K1) K1ᵀ P (K1 K1ᵀ P + K1 K1ᵀ P + I)⁻¹`.
//! * [`SolverKind::UnkeLayerGd`]: gradient descent on every parameter of
//!   one block, keys being that block's input states.
//!
//! With several edited layers the remaining gap between the hooked target
//! and the current state is split evenly over the layers left to edit,
//! lowest layer first, with keys recomputed after every layer.

mod bank;
mod delta;
mod linear;
mod unke;


use serde::{Deserialize, Serialize};

pub use bank::{
    build_preservation, edit_groups, extract_memories, layer_bank, preservation_memories, LayerBank, MemoryBank,
    SiteGroup,
};
pub use delta::{apply_delta, LayerDiagnostics, WeightDelta};
pub use linear::{
    down_matrix, solve_alphaedit, solve_memit, spread_update, LinearSolve, LinearSolver, NullProjector,
    DEFAULT_NULL_SPACE_THRESHOLD, REGULARIZATION,
};
pub use unke::{solve_unke, unke_bank, UnkeBank, UnkeGroup, UnkeSchedule};

use crate::editor::DeltaTrace;
use crate::error::{Error, Result};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "memit")]
    MemitClosedForm,
    #[serde(rename = "alphaedit")]
    AlphaEditNullSpace,
    #[serde(rename = "unke")]
    UnkeLayerGd,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [
        SolverKind::MemitClosedForm,
        SolverKind::AlphaEditNullSpace,
        SolverKind::UnkeLayerGd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::MemitClosedForm => "memit",
            SolverKind::AlphaEditNullSpace => "alphaedit",
            SolverKind::UnkeLayerGd => "unke",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Blocks whose `W_down` the linear solvers edit.
    pub memit_layers: Vec<usize>,
    /// Block trained by the layer-wise solver.
    pub unke_layer: usize,
    pub preservation_keys: usize,
    /// Preservation keys are drawn from this many unedited sequences;
    /// 0 uses all of them.
    pub preservation_sequences: usize,
    /// Null-space cut-off relative to the largest eigenvalue of `K0 K0ᵀ`.
    pub null_space_threshold: f64,
    pub unke: UnkeSchedule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::MemitClosedForm,
            memit_layers: vec![0, 1],
            unke_layer: 1,
            preservation_keys: 1024,
            preservation_sequences: 12,
            null_space_threshold: DEFAULT_NULL_SPACE_THRESHOLD,
            unke: UnkeSchedule::default(),
        }
    }
}

impl SolverConfig {
    /// Block whose output receives the working-memory shifts.
    pub fn hook_layer(&self) -> usize {
        match self.kind {
            SolverKind::UnkeLayerGd => self.unke_layer,
            _ => self.memit_layers.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.memit_layers.is_empty() {
            return Err(Error::Config("solver.memit_layers must not be empty".into()));
        }
        if !self.memit_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("solver.memit_layers must be strictly increasing".into()));
        }
        if let Some(&l) = self.memit_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("solver.memit_layers: layer {l} of {n_layers}")));
        }
        if self.unke_layer >= n_layers {
            return Err(Error::Config(format!("solver.unke_layer: layer {} of {n_layers}", self.unke_layer)));
        }
        if !(self.null_space_threshold >= 0.0) {
            return Err(Error::Config("solver.null_space_threshold must be non-negative".into()));
        }
        self.unke.validate()
    }
}

/// Solves for the weight change realizing `traces` while preserving the
/// memories at `preserved`. The model is not modified.
pub fn compute_delta(
    model: &TransformerModel,
    traces: &[DeltaTrace],
    preserved: &[SiteGroup],
    config: &SolverConfig,
) -> Result<WeightDelta> {
    config.validate(model.n_layers())?;
    let edits = edit_groups(traces)?;
    let hook_layer = config.hook_layer();
    if let Some(t) = traces.iter().find(|t| t.layer != hook_layer) {
        return Err(Error::Contract(format!(
            "shifts were optimized at layer {} but the {} solver expects layer {hook_layer}",
            t.layer, config.kind
        )));
    }
    match config.kind {
        SolverKind::MemitClosedForm => {
            spread_update(model, &edits, preserved, hook_layer, &config.memit_layers, LinearSolver::Memit)
                .map(|(d, _)| d)
        }
        SolverKind::AlphaEditNullSpace => spread_update(
            model,
            &edits,
            preserved,
            hook_layer,
            &config.memit_layers,
            LinearSolver::AlphaEdit {
                threshold: config.null_space_threshold,
            },
        )
        .map(|(d, _)| d),
        SolverKind::UnkeLayerGd => {
            let bank = unke_bank(model, &edits, preserved, config.unke_layer)?;
            solve_unke(model, &bank, &config.unke)
        }
    }
}
