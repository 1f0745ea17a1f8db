// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, SymmetricEigen};

use super::bank::{layer_bank, preservation_memories, LayerBank, MemoryBank, SiteGroup};
use super::delta::{LayerDiagnostics, WeightDelta};
use super::SolverKind;
use crate::diffcore::DTensor;
use crate::error::{Error, Result};
use crate::transformer::{layer_param_name, LayerParam, TransformerModel};

/// Ridge added to the normal matrix, relative to its mean diagonal.
pub const REGULARIZATION: f64 = 1e-8;
pub const DEFAULT_NULL_SPACE_THRESHOLD: f64 = 1e-8;

/// `W_downᵀ` of block `layer`, shaped `d_model × d_ff`.
pub fn down_matrix(model: &TransformerModel, layer: usize) -> DMatrix<f64> {
    let t = model.layer_param(layer, LayerParam::WDown);
    let (d_ff, d) = t.dims2().expect("W_down is a matrix");
    DMatrix::from_row_slice(d_ff, d, t.data()).transpose()
}

fn to_down_tensor(increment: &DMatrix<f64>) -> DTensor {
    let (d, d_ff) = increment.shape();
    // Column-major `d × d_ff` is row-major `d_ff × d`.
    DTensor::matrix(d_ff, d, increment.as_slice().to_vec()).expect("consistent shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolve {
    /// `W* − W0`, shaped like [`LayerBank::w0`].
    pub increment: DMatrix<f64>,
    /// Max-abs residual of the linear system actually solved.
    pub normal_residual: f64,
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `X A = B` for `X`.
fn right_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, symmetric: bool) -> Result<DMatrix<f64>> {
    let bt = b.transpose();
    let xt = if symmetric {
        a.clone().cholesky().map(|c| c.solve(&bt))
    } else {
        None
    };
    let xt = match xt {
        Some(x) => x,
        None => a.transpose().lu().solve(&bt).ok_or_else(|| {
            Error::Solver(format!(
                "singular normal matrix (condition estimate {:.3e})",
                condition_estimate(a)
            ))
        })?,
    };
    if xt.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver(format!(
            "non-finite solution (condition estimate {:.3e})",
            condition_estimate(a)
        )));
    }
    Ok(xt.transpose())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Closed-form least-squares update over preserved and edited keys.
pub fn solve_memit(bank: &LayerBank) -> Result<LinearSolve> {
    let d_k = bank.w0.ncols();
    let mut a = &bank.k0 * bank.k0.transpose() + &bank.k1 * bank.k1.transpose();
    let mean_diag = a.diagonal().mean();
    let ridge = REGULARIZATION * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for i in 0..d_k {
        a[(i, i)] += ridge;
    }
    let b = (&bank.m1 - &bank.w0 * &bank.k1) * bank.k1.transpose();
    let increment = right_solve(&a, &b, true)?;
    let normal_residual = max_abs(&(&increment * &a - &b));
    Ok(LinearSolve {
        increment,
        normal_residual,
    })
}

/// Projector onto the eigenvectors of `K0 K0ᵀ` whose eigenvalue is at most
/// `relative_threshold` times the largest one.
#[derive(Debug, Clone, PartialEq)]
pub struct NullProjector {
    pub projection: DMatrix<f64>,
    /// Absolute eigenvalue cut-off.
    pub threshold: f64,
    pub rank: usize,
}

impl NullProjector {
    pub fn new(k0: &DMatrix<f64>, relative_threshold: f64) -> Self {
        let cov = k0 * k0.transpose();
        let eig = SymmetricEigen::new(cov);
        let largest = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let threshold = relative_threshold * largest;
        let d_k = k0.nrows();
        let mut projection = DMatrix::zeros(d_k, d_k);
        let mut rank = 0;
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= threshold {
                let v = eig.eigenvectors.column(i);
                projection += v * v.transpose();
                rank += 1;
            }
        }
        Self {
            projection,
            threshold,
            rank,
        }
    }

    /// `‖P·P − P‖_max`.
    pub fn idempotence_error(&self) -> f64 {
        max_abs(&(&self.projection * &self.projection - &self.projection))
    }
}

/// Null-space constrained update. The prior-edit keys are the current edit
/// keys.
pub fn solve_alphaedit(bank: &LayerBank, relative_threshold: f64) -> Result<(LinearSolve, NullProjector)> {
    let projector = NullProjector::new(&bank.k0, relative_threshold);
    let (d, d_k) = bank.w0.shape();
    if projector.rank == 0 {
        return Ok((
            LinearSolve {
                increment: DMatrix::zeros(d, d_k),
                normal_residual: 0.0,
            },
            projector,
        ));
    }
    let p = &projector.projection;
    let kk_p = &bank.k1 * bank.k1.transpose() * p;
    let a = &kk_p + &kk_p + DMatrix::identity(d_k, d_k);
    let b = (&bank.m1 - &bank.w0 * &bank.k1) * bank.k1.transpose() * p;
    let increment = right_solve(&a, &b, false)?;
    let normal_residual = max_abs(&(&increment * &a - &b));
    Ok((
        LinearSolve {
            increment,
            normal_residual,
        },
        projector,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearSolver {
    Memit,
    AlphaEdit { threshold: f64 },
}

fn column_norm_max(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Edits `layers` in increasing order so that the block `hook_layer`
/// states at the edit sites move to their targets. Each layer closes an
/// equal share of the remaining gap; keys are recomputed on the partially
/// edited model. Preservation memories are recorded once, before editing.
pub fn spread_update(
    model: &TransformerModel,
    edits: &[SiteGroup],
    preserved: &[SiteGroup],
    hook_layer: usize,
    layers: &[usize],
    solver: LinearSolver,
) -> Result<(WeightDelta, MemoryBank)> {
    if layers.is_empty() || !layers.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Contract(format!("edited layers {layers:?} must be nonempty and increasing")));
    }
    if layers.iter().any(|&l| l > hook_layer) {
        return Err(Error::Contract(format!(
            "edited layers {layers:?} must not exceed the hook layer {hook_layer}"
        )));
    }
    let recorded = layers
        .iter()
        .map(|&l| preservation_memories(model, preserved, l))
        .collect::<Result<Vec<_>>>()?;
    let mut work = model.clone();
    let mut delta = WeightDelta::new(match solver {
        LinearSolver::Memit => SolverKind::MemitClosedForm,
        LinearSolver::AlphaEdit { .. } => SolverKind::AlphaEditNullSpace,
    });
    let mut banks = MemoryBank::default();
    for (i, (&layer, (k0, m0))) in layers.iter().zip(&recorded).enumerate() {
        let bank = layer_bank(&work, edits, (k0, m0), hook_layer, layer, layers.len() - i)?;
        let mut warnings = Vec::new();
        let (solve, projector_rank) = match solver {
            LinearSolver::Memit => (solve_memit(&bank)?, None),
            LinearSolver::AlphaEdit { threshold } => {
                let (s, p) = solve_alphaedit(&bank, threshold)?;
                if p.rank == 0 {
                    warnings.push(format!("layer {layer}: empty null space, no update applied"));
                }
                (s, Some(p.rank))
            }
        };
        let w_star = &bank.w0 + &solve.increment;
        delta.layers.push(LayerDiagnostics {
            layer,
            edit_columns: bank.edit_columns(),
            preservation_columns: bank.preservation_columns(),
            normal_residual: Some(solve.normal_residual),
            projector_rank,
            objective: Vec::new(),
            edit_residual: column_norm_max(&(&w_star * &bank.k1 - &bank.m1)),
            preservation_residual_before: column_norm_max(&(&bank.w0 * &bank.k0 - &bank.m0)),
            preservation_residual: column_norm_max(&(&w_star * &bank.k0 - &bank.m0)),
            warnings,
        });
        let tensor = to_down_tensor(&solve.increment);
        let name = layer_param_name(layer, LayerParam::WDown);
        let target = work.layer_param_mut(layer, LayerParam::WDown);
        for (w, d) in target.data_mut().iter_mut().zip(tensor.data()) {
            *w += d;
        }
        delta.increments.push((name, tensor));
        banks.layers.push(bank);
    }
    Ok((delta, banks))
}
