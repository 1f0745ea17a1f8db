// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::plan::{plan_windows, WindowPlan};
use crate::diffcore::{DTensor, Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::transformer::{nll_of_span, ForwardTrace, GradMode, HookSpec, TransformerModel};

/// Memory-update strategies compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// One shift per window, each optimized sequentially on the mean NLL
    /// from its window to the end of the target.
    OneForAll,
    #[serde(rename = "window")]
    WindowByWindow,
    #[serde(rename = "parallel")]
    ParallelNll,
    #[serde(rename = "matryoshka")]
    MatryoshkaVanilla,
    MatryoshkaAffinity,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::OneForAll,
        ObjectiveKind::WindowByWindow,
        ObjectiveKind::ParallelNll,
        ObjectiveKind::MatryoshkaVanilla,
        ObjectiveKind::MatryoshkaAffinity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::OneForAll => "one-for-all",
            ObjectiveKind::WindowByWindow => "window",
            ObjectiveKind::ParallelNll => "parallel",
            ObjectiveKind::MatryoshkaVanilla => "matryoshka",
            ObjectiveKind::MatryoshkaAffinity => "matryoshka-affinity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_sequential(self) -> bool {
        self != ObjectiveKind::ParallelNll
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One edit's token sequence, window plan and cached prefix states.
///
/// Hooks only sit on block `layer`, so the unhooked output of that block is
/// computed once and every objective graph starts from it.
#[derive(Debug, Clone)]
pub struct EditContext<'m> {
    model: &'m TransformerModel,
    pub layer: usize,
    /// Prompt followed by target.
    pub tokens: Vec<usize>,
    pub plan: WindowPlan,
    base: DTensor,
    /// Unhooked block output at each anchor.
    pub anchor_states: Vec<Vec<f64>>,
}

/// A scalar objective and the hook leaves it is differentiated against.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: Var,
    pub trace: ForwardTrace,
    pub live: Vec<Var>,
}

impl Objective {
    pub fn loss(&self, g: &Graph) -> f64 {
        g.value(self.value).item()
    }

    /// Gradient with respect to each live shift.
    pub fn gradients(&self, g: &Graph) -> Result<Vec<Vec<f64>>> {
        g.gradients(self.value, &self.live)
    }
}

impl<'m> EditContext<'m> {
    pub fn new(
        model: &'m TransformerModel,
        prompt: &[usize],
        target: &[usize],
        window_size: usize,
        layer: usize,
    ) -> Result<Self> {
        let plan = plan_windows(prompt.len(), target.len(), window_size)?;
        if layer >= model.n_layers() {
            return Err(Error::OutOfRange(format!("edit layer {layer} of {}", model.n_layers())));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(target);
        // The last target token is never an input.
        let base = model.block_outputs(&tokens[..tokens.len() - 1], layer)?;
        let anchor_states = plan.anchors.iter().map(|&a| base.row(a).to_vec()).collect();
        Ok(Self {
            model,
            layer,
            tokens,
            plan,
            base,
            anchor_states,
        })
    }

    pub fn model(&self) -> &'m TransformerModel {
        self.model
    }

    pub fn n_windows(&self) -> usize {
        self.plan.n_windows()
    }

    pub fn d_model(&self) -> usize {
        self.model.d_model()
    }

    /// Forward with shifts at the first `shifts.len()` anchors; shifts whose
    /// flag is set become differentiable leaves.
    pub fn forward(&self, g: &mut Graph, shifts: &[(&[f64], bool)]) -> Result<(ForwardTrace, Vec<Var>)> {
        if shifts.len() > self.n_windows() {
            return Err(Error::Contract(format!(
                "{} shifts for {} windows",
                shifts.len(),
                self.n_windows()
            )));
        }
        let hooks = shifts
            .iter()
            .zip(&self.plan.anchors)
            .map(|(&(s, live), &a)| {
                Ok(HookSpec {
                    layer: self.layer,
                    position: a,
                    shift: DTensor::vector(s.to_vec())?.with_requires_grad(live),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = self
            .model
            .forward_from(g, self.layer, self.base.clone(), &hooks, GradMode::Frozen)?;
        let live = shifts
            .iter()
            .zip(&trace.hook_vars)
            .filter(|((_, l), _)| *l)
            .map(|(_, &v)| v)
            .collect();
        Ok((trace, live))
    }

    pub fn span_nll(&self, g: &mut Graph, trace: &ForwardTrace, span: Range<usize>, reduction: Reduction) -> Result<Var> {
        nll_of_span(g, trace, &self.tokens, span, reduction)
    }

    fn sequential(&self, g: &mut Graph, frozen: &[Vec<f64>], live: &[f64], window: usize) -> Result<(ForwardTrace, Vec<Var>)> {
        self.plan.check_window(window)?;
        if frozen.len() != window {
            return Err(Error::Contract(format!(
                "window {window} needs {window} frozen shifts, got {}",
                frozen.len()
            )));
        }
        let mut shifts: Vec<(&[f64], bool)> = frozen.iter().map(|s| (s.as_slice(), false)).collect();
        shifts.push((live, true));
        self.forward(g, &shifts)
    }
}

/// Mean NLL of the whole target with one shift at the first anchor.
pub fn loss_one_for_all(ctx: &EditContext, g: &mut Graph, shift: &[f64]) -> Result<Objective> {
    loss_sequential_nll(ctx, g, &[], shift, 0)
}

/// Mean NLL from window `window` to the end of the target, with earlier
/// shifts frozen.
pub fn loss_sequential_nll(
    ctx: &EditContext,
    g: &mut Graph,
    frozen: &[Vec<f64>],
    live: &[f64],
    window: usize,
) -> Result<Objective> {
    let (trace, live) = ctx.sequential(g, frozen, live, window)?;
    let span = ctx.plan.figure(window, ctx.n_windows() - 1);
    let value = ctx.span_nll(g, &trace, span, Reduction::Mean)?;
    Ok(Objective { value, trace, live })
}

/// Mean NLL of window `window` given all earlier windows.
pub fn loss_window(ctx: &EditContext, g: &mut Graph, frozen: &[Vec<f64>], live: &[f64], window: usize) -> Result<Objective> {
    let (trace, live) = ctx.sequential(g, frozen, live, window)?;
    let value = ctx.span_nll(g, &trace, ctx.plan.windows[window].clone(), Reduction::Mean)?;
    Ok(Objective { value, trace, live })
}

/// Mean NLL of the full target with every shift live.
pub fn loss_parallel(ctx: &EditContext, g: &mut Graph, shifts: &[Vec<f64>]) -> Result<Objective> {
    if shifts.len() != ctx.n_windows() {
        return Err(Error::Contract(format!(
            "parallel objective needs {} shifts, got {}",
            ctx.n_windows(),
            shifts.len()
        )));
    }
    let hooked: Vec<(&[f64], bool)> = shifts.iter().map(|s| (s.as_slice(), true)).collect();
    let (trace, live) = ctx.forward(g, &hooked)?;
    let value = ctx.span_nll(g, &trace, ctx.plan.target_span(), Reduction::Mean)?;
    Ok(Objective { value, trace, live })
}

/// Weighted mean of figure NLLs. Figure `k` spans windows
/// `window..=window + k`; each term sums token log-probabilities and is
/// weighted by `lambda_row[k]`.
pub fn loss_matryoshka(
    ctx: &EditContext,
    g: &mut Graph,
    frozen: &[Vec<f64>],
    live: &[f64],
    window: usize,
    lambda_row: &[f64],
) -> Result<Objective> {
    ctx.plan.check_window(window)?;
    let n_figures = ctx.n_windows() - window;
    if lambda_row.len() != n_figures {
        return Err(Error::Contract(format!(
            "window {window} has {n_figures} figures but {} coefficients were given",
            lambda_row.len()
        )));
    }
    if let Some(bad) = lambda_row.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Contract(format!("figure coefficients must be positive, got {bad}")));
    }
    let (trace, live) = ctx.sequential(g, frozen, live, window)?;
    let mut total: Option<Var> = None;
    for (k, &lambda) in lambda_row.iter().enumerate() {
        let nll = ctx.span_nll(g, &trace, ctx.plan.figure(window, window + k), Reduction::Sum)?;
        let term = g.scale(nll, lambda);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let value = g.scale(total.expect("at least one figure"), 1.0 / n_figures as f64);
    Ok(Objective { value, trace, live })
}

/// Per-window coefficients of the figure-weighted objective: window `j`
/// (relative to the optimized window) is weighted by the sum of
/// `lambda_row[j..]`.
pub fn matryoshka_window_weights(lambda_row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; lambda_row.len()];
    let mut acc = 0.0;
    for (o, l) in out.iter_mut().zip(lambda_row).rev() {
        acc += l;
        *o = acc;
    }
    out
}
