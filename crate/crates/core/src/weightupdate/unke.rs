// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::bank::SiteGroup;
use super::delta::{LayerDiagnostics, WeightDelta};
use super::SolverKind;
use crate::diffcore::{kernels, DTensor, Graph};
use crate::error::{Error, Result};
use crate::transformer::{layer_param_name, GradMode, LayerParam, TransformerModel};

const LR_GROWTH: f64 = 1.2;

/// Full-batch gradient descent for the layer-wise solver. A step that
/// raises the objective is undone and the learning rate halved; an
/// accepted step grows it by a fifth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnkeSchedule {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for UnkeSchedule {
    fn default() -> Self {
        Self {
            steps: 50,
            learning_rate: 1e-2,
        }
    }
}

impl UnkeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("solver.unke.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Block inputs of one sequence with the block outputs wanted at `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnkeGroup {
    /// `[T × d]` input of the edited block.
    pub input: DTensor,
    pub rows: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
    pub edit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnkeBank {
    pub layer: usize,
    pub groups: Vec<UnkeGroup>,
}

impl UnkeBank {
    pub fn edit_columns(&self) -> usize {
        self.groups.iter().filter(|g| g.edit).map(|g| g.rows.len()).sum()
    }

    pub fn preservation_columns(&self) -> usize {
        self.groups.iter().filter(|g| !g.edit).map(|g| g.rows.len()).sum()
    }
}

/// Keys are the inputs of block `layer`; edit targets are the hooked
/// states, preservation targets the current outputs.
pub fn unke_bank(
    model: &TransformerModel,
    edits: &[SiteGroup],
    preserved: &[SiteGroup],
    layer: usize,
) -> Result<UnkeBank> {
    if layer >= model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", model.n_layers())));
    }
    let mut groups = Vec::with_capacity(edits.len() + preserved.len());
    for (g, edit) in edits.iter().map(|g| (g, true)).chain(preserved.iter().map(|g| (g, false))) {
        if g.is_empty() {
            continue;
        }
        let trace = model.infer(&g.tokens, &[])?;
        let rows = &trace.layers[layer];
        let targets = if edit {
            if g.targets.len() != g.positions.len() {
                return Err(Error::Contract("edit group without target states".into()));
            }
            g.targets.clone()
        } else {
            g.positions.iter().map(|&p| rows.resid_out[p].clone()).collect()
        };
        groups.push(UnkeGroup {
            input: DTensor::from_rows(&rows.resid_in)?,
            rows: g.positions.clone(),
            targets,
            edit,
        });
    }
    Ok(UnkeBank { layer, groups })
}

struct Evaluation {
    total: f64,
    edit_residual: f64,
    preservation_residual: f64,
    grads: Vec<f64>,
}

fn evaluate(model: &TransformerModel, bank: &UnkeBank, sizes: &[usize]) -> Result<Evaluation> {
    let mut eval = Evaluation {
        total: 0.0,
        edit_residual: 0.0,
        preservation_residual: 0.0,
        grads: vec![0.0; sizes.iter().sum()],
    };
    for group in &bank.groups {
        let mut g = Graph::new();
        let (states, pv) = model.forward_block(&mut g, bank.layer, group.input.clone(), GradMode::Weights)?;
        let picked = g.gather_rows(states.resid_out, &group.rows)?;
        let target = g.constant(DTensor::from_rows(&group.targets)?);
        let diff = g.sub(picked, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.sum(sq);
        eval.total += g.value(loss).item();
        let dv = g.value(diff);
        let worst = (0..group.rows.len()).map(|r| kernels::norm(dv.row(r))).fold(0.0, f64::max);
        let slot = if group.edit {
            &mut eval.edit_residual
        } else {
            &mut eval.preservation_residual
        };
        *slot = slot.max(worst);
        let mut offset = 0;
        for grad in g.gradients(loss, &pv)? {
            for (acc, v) in eval.grads[offset..offset + grad.len()].iter_mut().zip(&grad) {
                *acc += v;
            }
            offset += grad.len();
        }
    }
    Ok(eval)
}

fn write_layer(model: &mut TransformerModel, layer: usize, flat: &[f64]) {
    let mut offset = 0;
    for lp in LayerParam::ALL {
        let p = model.layer_param_mut(layer, lp).data_mut();
        p.copy_from_slice(&flat[offset..offset + p.len()]);
        offset += p.len();
    }
}

/// Trains every parameter of `bank.layer` so the block maps each key to
/// its target, edits and preserved sites weighted alike.
pub fn solve_unke(model: &TransformerModel, bank: &UnkeBank, schedule: &UnkeSchedule) -> Result<WeightDelta> {
    schedule.validate()?;
    let layer = bank.layer;
    let sizes: Vec<usize> = LayerParam::ALL.iter().map(|&lp| model.layer_param(layer, lp).numel()).collect();
    let mut flat: Vec<f64> = LayerParam::ALL
        .iter()
        .flat_map(|&lp| model.layer_param(layer, lp).data().iter().copied())
        .collect();
    let mut work = model.clone();
    let mut current = evaluate(&work, bank, &sizes)?;
    let preservation_before = current.preservation_residual;
    let mut objective = vec![current.total];
    let mut lr = schedule.learning_rate;
    for step in 0..schedule.steps {
        if current.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("layer-wise solve: non-finite gradient at step {step}")));
        }
        let mut candidate = flat.clone();
        for (c, g) in candidate.iter_mut().zip(&current.grads) {
            *c -= lr * g;
        }
        write_layer(&mut work, layer, &candidate);
        let next = evaluate(&work, bank, &sizes)?;
        if !next.total.is_finite() {
            return Err(Error::Numerical(format!(
                "layer-wise solve diverged at step {step} (objective {}, lr {lr:e})",
                next.total
            )));
        }
        if next.total <= current.total {
            flat = candidate;
            current = next;
            lr *= LR_GROWTH;
        } else {
            write_layer(&mut work, layer, &flat);
            lr *= 0.5;
        }
        objective.push(current.total);
    }
    let mut delta = WeightDelta::new(SolverKind::UnkeLayerGd);
    for lp in LayerParam::ALL {
        let before = model.layer_param(layer, lp);
        let after = work.layer_param(layer, lp);
        let diff = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
        delta
            .increments
            .push((layer_param_name(layer, lp), DTensor::new(before.shape().to_vec(), diff)?));
    }
    delta.layers.push(LayerDiagnostics {
        layer,
        edit_columns: bank.edit_columns(),
        preservation_columns: bank.preservation_columns(),
        normal_residual: None,
        projector_rank: None,
        objective,
        edit_residual: current.edit_residual,
        preservation_residual_before: preservation_before,
        preservation_residual: current.preservation_residual,
        warnings: Vec::new(),
    });
    Ok(delta)
}
