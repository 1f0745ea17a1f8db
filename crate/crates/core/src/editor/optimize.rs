// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::affinity::{compute_affinity, AffinityProfile};
use super::objective::{
    loss_matryoshka, loss_parallel, loss_sequential_nll, loss_window, EditContext, ObjectiveKind,
};
use crate::diffcore::{kernels, Graph};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::transformer::HookSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Bound on `‖δ‖ / ‖h‖`; `None` leaves shifts unconstrained.
    pub clamp_factor: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            learning_rate: 0.5,
            clamp_factor: Some(4.0),
            adam: AdamConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("editor.optimizer.steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("editor.optimizer.learning_rate must be positive".into()));
        }
        if let Some(c) = self.clamp_factor {
            if !(c > 0.0) {
                return Err(Error::Config("editor.optimizer.clamp_factor must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityConfig {
    pub t_aff: usize,
    pub probe_lr: f64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            t_aff: 3,
            probe_lr: 0.5,
        }
    }
}

/// Optimization record of one window's shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub window: usize,
    pub span: Range<usize>,
    pub anchor: usize,
    /// Pre-edit block output at the anchor.
    pub anchor_state: Vec<f64>,
    pub state_norm: f64,
    pub delta: Vec<f64>,
    /// Objective value before each step.
    pub losses: Vec<f64>,
    /// `‖δ‖` after each step.
    pub delta_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub objective: ObjectiveKind,
    pub layer: usize,
    pub window_size: usize,
    pub prompt_len: usize,
    pub tokens: Vec<usize>,
    pub clamp_factor: Option<f64>,
    pub windows: Vec<WindowTrace>,
    pub affinity: Option<AffinityProfile>,
}

impl DeltaTrace {
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| w.delta.clone()).collect()
    }

    /// Hooks realizing the optimized shifts.
    pub fn hooks(&self) -> Result<Vec<HookSpec>> {
        self.windows
            .iter()
            .map(|w| HookSpec::new(self.layer, w.anchor, w.delta.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Scale `delta` back onto the ball of radius `radius` if it lies outside.
pub fn project_to_ball(delta: &mut [f64], radius: Option<f64>) {
    if let Some(r) = radius {
        let n = kernels::norm(delta);
        if n > r {
            let s = r / n;
            delta.iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn check_finite(loss: f64, grads: &[Vec<f64>], window: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite objective {loss} at window {window}, step {step}"
        )));
    }
    Ok(())
}

fn window_trace(ctx: &EditContext, i: usize, delta: Vec<f64>, losses: Vec<f64>, delta_norms: Vec<f64>) -> WindowTrace {
    let anchor_state = ctx.anchor_states[i].clone();
    WindowTrace {
        window: i,
        span: ctx.plan.windows[i].clone(),
        anchor: ctx.plan.anchors[i],
        state_norm: kernels::norm(&anchor_state),
        anchor_state,
        delta,
        losses,
        delta_norms,
    }
}

/// Optimize one shift per window under `kind`.
pub fn optimize_delta(
    ctx: &EditContext,
    kind: ObjectiveKind,
    opt: &OptimizerConfig,
    aff: &AffinityConfig,
) -> Result<DeltaTrace> {
    opt.validate()?;
    let windows = if kind.is_sequential() {
        optimize_sequential(ctx, kind, opt, aff)?
    } else {
        (optimize_parallel(ctx, opt)?, None)
    };
    Ok(DeltaTrace {
        objective: kind,
        layer: ctx.layer,
        window_size: ctx.plan.window_size,
        prompt_len: ctx.plan.prompt_len,
        tokens: ctx.tokens.clone(),
        clamp_factor: opt.clamp_factor,
        windows: windows.0,
        affinity: windows.1,
    })
}

fn radius(ctx: &EditContext, opt: &OptimizerConfig, i: usize) -> Option<f64> {
    opt.clamp_factor.map(|c| c * kernels::norm(&ctx.anchor_states[i]))
}

fn optimize_sequential(
    ctx: &EditContext,
    kind: ObjectiveKind,
    opt: &OptimizerConfig,
    aff: &AffinityConfig,
) -> Result<(Vec<WindowTrace>, Option<AffinityProfile>)> {
    let n = ctx.n_windows();
    let d = ctx.d_model();
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut profile = (kind == ObjectiveKind::MatryoshkaAffinity).then(|| AffinityProfile {
        lambda: Vec::with_capacity(n),
        cosines: Vec::with_capacity(n),
        t_aff: aff.t_aff,
        probe_lr: aff.probe_lr,
    });
    for i in 0..n {
        let lambda = match kind {
            ObjectiveKind::MatryoshkaVanilla => vec![1.0; n - i],
            ObjectiveKind::MatryoshkaAffinity => {
                let row = compute_affinity(ctx, &done, i, aff.t_aff, aff.probe_lr, opt.adam, opt.clamp_factor)?;
                let p = profile.as_mut().expect("affinity profile");
                p.lambda.push(row.lambda.clone());
                p.cosines.push(row.cosines);
                row.lambda
            }
            _ => Vec::new(),
        };
        let radius = radius(ctx, opt, i);
        let mut delta = vec![0.0; d];
        let mut adam = Adam::new(d, opt.adam);
        let mut losses = Vec::with_capacity(opt.steps);
        let mut norms = Vec::with_capacity(opt.steps);
        for step in 0..opt.steps {
            let mut g = Graph::new();
            let obj = match kind {
                ObjectiveKind::OneForAll => loss_sequential_nll(ctx, &mut g, &done, &delta, i)?,
                ObjectiveKind::WindowByWindow => loss_window(ctx, &mut g, &done, &delta, i)?,
                ObjectiveKind::MatryoshkaVanilla | ObjectiveKind::MatryoshkaAffinity => {
                    loss_matryoshka(ctx, &mut g, &done, &delta, i, &lambda)?
                }
                ObjectiveKind::ParallelNll => unreachable!("parallel objective is not sequential"),
            };
            let loss = obj.loss(&g);
            let grads = obj.gradients(&g)?;
            check_finite(loss, &grads, i, step)?;
            adam.step(&mut delta, &grads[0], opt.learning_rate);
            project_to_ball(&mut delta, radius);
            losses.push(loss);
            norms.push(kernels::norm(&delta));
        }
        traces.push(window_trace(ctx, i, delta.clone(), losses, norms));
        done.push(delta);
    }
    Ok((traces, profile))
}

fn optimize_parallel(ctx: &EditContext, opt: &OptimizerConfig) -> Result<Vec<WindowTrace>> {
    let n = ctx.n_windows();
    let d = ctx.d_model();
    let radii: Vec<Option<f64>> = (0..n).map(|i| radius(ctx, opt, i)).collect();
    let mut deltas = vec![vec![0.0; d]; n];
    let mut adams: Vec<Adam> = (0..n).map(|_| Adam::new(d, opt.adam)).collect();
    let mut losses = Vec::with_capacity(opt.steps);
    let mut norms = vec![Vec::with_capacity(opt.steps); n];
    for step in 0..opt.steps {
        let mut g = Graph::new();
        let obj = loss_parallel(ctx, &mut g, &deltas)?;
        let loss = obj.loss(&g);
        let grads = obj.gradients(&g)?;
        check_finite(loss, &grads, 0, step)?;
        for i in 0..n {
            adams[i].step(&mut deltas[i], &grads[i], opt.learning_rate);
            project_to_ball(&mut deltas[i], radii[i]);
            norms[i].push(kernels::norm(&deltas[i]));
        }
        losses.push(loss);
    }
    Ok(deltas
        .into_iter()
        .zip(norms)
        .enumerate()
        .map(|(i, (delta, nrm))| window_trace(ctx, i, delta, losses.clone(), nrm))
        .collect())
}
