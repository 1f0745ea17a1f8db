// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::objective::EditContext;
use super::optimize::project_to_ball;
use crate::diffcore::{kernels, Graph, Reduction};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// Gradients below this norm carry no direction; their cosine counts as 1.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

/// Source of per-figure log-probability gradients for one shift.
pub trait FigureGradients {
    fn dim(&self) -> usize;

    /// Number of figures, shortest (the window alone) first.
    fn n_figures(&self) -> usize;

    /// Gradient of each figure's log-probability at `delta`.
    fn figure_gradients(&self, delta: &[f64]) -> Result<Vec<Vec<f64>>>;

    /// Norm bound applied to the probe shift after each step.
    fn radius(&self) -> Option<f64>;
}

/// Coefficients of one window's figures and the cosines behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityRow {
    pub lambda: Vec<f64>,
    /// `cosines[k][t]`: first figure vs figure `k` at probe step `t`.
    pub cosines: Vec<Vec<f64>>,
}

/// All rows of one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityProfile {
    /// Row `i` holds coefficients for figures `i..=i + k`.
    pub lambda: Vec<Vec<f64>>,
    pub cosines: Vec<Vec<Vec<f64>>>,
    pub t_aff: usize,
    pub probe_lr: f64,
}

/// Cosine similarity, 1 when either vector is numerically zero.
pub fn gradient_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (kernels::norm(a), kernels::norm(b));
    if na < ZERO_GRADIENT_NORM || nb < ZERO_GRADIENT_NORM {
        return 1.0;
    }
    (kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Probe `t_aff` steps on a scratch shift that starts at zero and descends
/// the first figure's NLL; `λ_k = 2 − mean cosine` between the first
/// figure's gradient and figure `k`'s.
pub fn affinity_row<S: FigureGradients + ?Sized>(
    source: &S,
    t_aff: usize,
    probe_lr: f64,
    adam: AdamConfig,
) -> Result<AffinityRow> {
    if t_aff == 0 {
        return Err(Error::Config("affinity probe needs at least one step".into()));
    }
    let n = source.n_figures();
    let mut delta = vec![0.0; source.dim()];
    let mut opt = Adam::new(delta.len(), adam);
    let mut cosines = vec![Vec::with_capacity(t_aff); n];
    for step in 0..t_aff {
        let grads = source.figure_gradients(&delta)?;
        if grads.len() != n {
            return Err(Error::Contract(format!("expected {n} figure gradients, got {}", grads.len())));
        }
        if grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite figure gradient at probe step {step}")));
        }
        cosines[0].push(1.0);
        for k in 1..n {
            cosines[k].push(gradient_cosine(&grads[0], &grads[k]));
        }
        let descent: Vec<f64> = grads[0].iter().map(|x| -x).collect();
        opt.step(&mut delta, &descent, probe_lr);
        project_to_ball(&mut delta, source.radius());
    }
    let lambda = cosines
        .iter()
        .map(|c| 2.0 - c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(AffinityRow { lambda, cosines })
}

/// Figure gradients of window `window` under the model, earlier shifts
/// frozen.
pub struct ModelFigures<'a, 'm> {
    pub ctx: &'a EditContext<'m>,
    pub frozen: &'a [Vec<f64>],
    pub window: usize,
    pub radius: Option<f64>,
}

impl FigureGradients for ModelFigures<'_, '_> {
    fn dim(&self) -> usize {
        self.ctx.d_model()
    }

    fn n_figures(&self) -> usize {
        self.ctx.n_windows() - self.window
    }

    fn figure_gradients(&self, delta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut shifts: Vec<(&[f64], bool)> = self.frozen.iter().map(|s| (s.as_slice(), false)).collect();
        shifts.push((delta, true));
        let mut g = Graph::new();
        let (trace, live) = self.ctx.forward(&mut g, &shifts)?;
        let mut out = Vec::with_capacity(self.n_figures());
        for k in 0..self.n_figures() {
            let span = self.ctx.plan.figure(self.window, self.window + k);
            let nll = self.ctx.span_nll(&mut g, &trace, span, Reduction::Sum)?;
            let grad = g.gradients(nll, &live)?.remove(0);
            out.push(grad.into_iter().map(|x| -x).collect());
        }
        Ok(out)
    }

    fn radius(&self) -> Option<f64> {
        self.radius
    }
}

/// Affinity row for `window` of an edit.
pub fn compute_affinity(
    ctx: &EditContext,
    frozen: &[Vec<f64>],
    window: usize,
    t_aff: usize,
    probe_lr: f64,
    adam: AdamConfig,
    clamp_factor: Option<f64>,
) -> Result<AffinityRow> {
    ctx.plan.check_window(window)?;
    if frozen.len() != window {
        return Err(Error::Contract(format!(
            "window {window} needs {window} frozen shifts, got {}",
            frozen.len()
        )));
    }
    let radius = clamp_factor.map(|c| c * kernels::norm(&ctx.anchor_states[window]));
    let source = ModelFigures {
        ctx,
        frozen,
        window,
        radius,
    };
    affinity_row(&source, t_aff, probe_lr, adam)
}
