// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SolverKind;
use crate::diffcore::DTensor;
use crate::error::{Error, Result};
use crate::transformer::{checkpoint, ModelConfig, TransformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub edit_columns: usize,
    pub preservation_columns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projector_rank: Option<usize>,
    /// Objective value before the first and after every accepted step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective: Vec<f64>,
    /// Largest `‖f(k) − m*‖` over edit columns after the solve.
    pub edit_residual: f64,
    /// Largest `‖f(k0) − m0‖` over preservation columns, before and after.
    pub preservation_residual_before: f64,
    pub preservation_residual: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Additive parameter increments produced by a solver.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub solver: SolverKind,
    /// `(parameter name, increment)` pairs.
    pub increments: Vec<(String, DTensor)>,
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Serialize)]
struct DeltaManifest<'a> {
    solver: SolverKind,
    config_hash: &'a str,
    container_version: u32,
    tensors: Vec<&'a str>,
    layers: &'a [LayerDiagnostics],
}

impl WeightDelta {
    pub fn new(solver: SolverKind) -> Self {
        Self {
            solver,
            increments: Vec::new(),
            layers: Vec::new(),
        }
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in &mut out.increments {
            t.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.increments.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn max_preservation_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.preservation_residual).fold(0.0, f64::max)
    }

    pub fn max_normal_residual(&self) -> Option<f64> {
        self.layers.iter().filter_map(|l| l.normal_residual).reduce(f64::max)
    }

    /// Writes the increments as a tensor container at `path` and a TOML
    /// manifest next to it. Returns the manifest path.
    pub fn export(&self, path: &Path, config: &ModelConfig, config_hash: &str) -> Result<PathBuf> {
        let tensors: Vec<(String, &DTensor)> = self.increments.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write_container(path, config, &tensors)?;
        let manifest = DeltaManifest {
            solver: self.solver,
            config_hash,
            container_version: checkpoint::FORMAT_VERSION,
            tensors: self.increments.iter().map(|(n, _)| n.as_str()).collect(),
            layers: &self.layers,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("delta manifest: {e}")))?;
        let manifest_path = path.with_extension("manifest.toml");
        crate::io::write_atomic(&manifest_path, text.as_bytes())?;
        Ok(manifest_path)
    }

    /// Reads increments written by [`WeightDelta::export`]. Diagnostics are
    /// not restored.
    pub fn import(path: &Path, solver: SolverKind) -> Result<Self> {
        let (_, increments) = checkpoint::read_container(path)?;
        Ok(Self {
            solver,
            increments,
            layers: Vec::new(),
        })
    }
}

/// Adds every increment to the matching parameter. Nothing is modified if
/// any name or shape does not match.
pub fn apply_delta(model: &mut TransformerModel, delta: &WeightDelta) -> Result<()> {
    for (name, t) in &delta.increments {
        let p = model
            .param(name)
            .ok_or_else(|| Error::Contract(format!("weight delta names unknown parameter {name}")))?;
        if p.shape() != t.shape() {
            return Err(Error::Shape {
                op: "apply_delta",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    for (name, t) in &delta.increments {
        let p = model.param_mut(name).expect("checked above");
        for (w, d) in p.data_mut().iter_mut().zip(t.data()) {
            *w += d;
        }
    }
    Ok(())
}
