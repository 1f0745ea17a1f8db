// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linear::down_matrix;
use crate::editor::DeltaTrace;
use crate::error::{Error, Result};
use crate::transformer::TransformerModel;

/// Positions of interest in one token sequence. Edit groups carry the
/// hooked target state for every position; preservation groups carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGroup {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

impl SiteGroup {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One group per trace: every window anchor with target `h + δ`.
pub fn edit_groups(traces: &[DeltaTrace]) -> Result<Vec<SiteGroup>> {
    traces
        .iter()
        .map(|t| {
            let mut positions = Vec::with_capacity(t.windows.len());
            let mut targets = Vec::with_capacity(t.windows.len());
            for w in &t.windows {
                if w.anchor_state.is_empty() || w.anchor_state.len() != w.delta.len() {
                    return Err(Error::Contract(format!(
                        "anchor snapshot missing for window {} of the edit",
                        w.window
                    )));
                }
                positions.push(w.anchor);
                targets.push(w.anchor_state.iter().zip(&w.delta).map(|(h, d)| h + d).collect());
            }
            let end = positions.iter().max().map_or(0, |&p| p + 1);
            Ok(SiteGroup {
                tokens: t.tokens[..end].to_vec(),
                positions,
                targets,
            })
        })
        .collect()
}

/// Samples `n_keys` distinct `(sequence, position)` sites.
pub fn build_preservation(corpus: &[Vec<usize>], n_keys: usize, seed: u64) -> Result<Vec<SiteGroup>> {
    let total: usize = corpus.iter().map(Vec::len).sum();
    if n_keys > total {
        return Err(Error::OutOfRange(format!(
            "{n_keys} preservation keys requested from {total} positions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = sample(&mut rng, total, n_keys).into_vec();
    flat.sort_unstable();
    let mut groups: Vec<SiteGroup> = Vec::new();
    let (mut seq, mut offset, mut open) = (0, 0, None);
    for f in flat {
        while f >= offset + corpus[seq].len() {
            offset += corpus[seq].len();
            seq += 1;
        }
        if open != Some(seq) {
            groups.push(SiteGroup {
                tokens: corpus[seq].clone(),
                positions: Vec::new(),
                targets: Vec::new(),
            });
            open = Some(seq);
        }
        groups.last_mut().expect("group opened").positions.push(f - offset);
    }
    for g in &mut groups {
        let end = g.positions.iter().max().map_or(0, |&p| p + 1);
        g.tokens.truncate(end);
    }
    Ok(groups)
}

/// Keys and memories of block `layer` at every site, one column each.
pub fn preservation_memories(
    model: &TransformerModel,
    groups: &[SiteGroup],
    layer: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d_ff = model.config().d_ff;
    let d = model.d_model();
    let n: usize = groups.iter().map(SiteGroup::len).sum();
    let mut keys = DMatrix::zeros(d_ff, n);
    let mut mems = DMatrix::zeros(d, n);
    let mut col = 0;
    for g in groups {
        let rows = &model.infer(&g.tokens, &[])?.layers[layer];
        for &p in &g.positions {
            keys.set_column(col, &nalgebra::DVector::from_column_slice(&rows.key[p]));
            mems.set_column(col, &nalgebra::DVector::from_column_slice(&rows.mlp[p]));
            col += 1;
        }
    }
    Ok((keys, mems))
}

/// Edit keys at block `layer` and target memories closing `1/share` of the
/// gap between each target and the current state of block `hook_layer`.
pub fn extract_memories(
    model: &TransformerModel,
    edits: &[SiteGroup],
    hook_layer: usize,
    layer: usize,
    share: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if layer > hook_layer || hook_layer >= model.n_layers() || share == 0 {
        return Err(Error::Contract(format!(
            "cannot extract memories at layer {layer} for hooks at layer {hook_layer} (share {share})"
        )));
    }
    let d_ff = model.config().d_ff;
    let d = model.d_model();
    let u: usize = edits.iter().map(SiteGroup::len).sum();
    let mut keys = DMatrix::zeros(d_ff, u);
    let mut targets = DMatrix::zeros(d, u);
    let mut col = 0;
    for g in edits {
        if g.targets.len() != g.positions.len() {
            return Err(Error::Contract("edit group without target states".into()));
        }
        let trace = model.infer(&g.tokens, &[])?;
        for (&p, z) in g.positions.iter().zip(&g.targets) {
            if z.len() != d {
                return Err(Error::Shape {
                    op: "edit target",
                    lhs: vec![d],
                    rhs: vec![z.len()],
                });
            }
            let rows = &trace.layers[layer];
            let current = &trace.layers[hook_layer].resid_out[p];
            keys.set_column(col, &nalgebra::DVector::from_column_slice(&rows.key[p]));
            for i in 0..d {
                targets[(i, col)] = rows.mlp[p][i] + (z[i] - current[i]) / share as f64;
            }
            col += 1;
        }
    }
    Ok((keys, targets))
}

/// Solver input for one `W_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBank {
    pub layer: usize,
    /// Current weights in memory orientation, `d_model × d_ff`.
    pub w0: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    pub m0: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub m1: DMatrix<f64>,
}

impl LayerBank {
    pub fn new(
        layer: usize,
        w0: DMatrix<f64>,
        k0: DMatrix<f64>,
        m0: DMatrix<f64>,
        k1: DMatrix<f64>,
        m1: DMatrix<f64>,
    ) -> Result<Self> {
        let (d, d_k) = w0.shape();
        let ok = k0.nrows() == d_k
            && k1.nrows() == d_k
            && m0.nrows() == d
            && m1.nrows() == d
            && k0.ncols() == m0.ncols()
            && k1.ncols() == m1.ncols();
        if !ok {
            return Err(Error::Shape {
                op: "memory bank",
                lhs: vec![d, d_k, k0.ncols(), k1.ncols()],
                rhs: vec![m0.nrows(), k0.nrows(), m0.ncols(), m1.ncols()],
            });
        }
        Ok(Self { layer, w0, k0, m0, k1, m1 })
    }

    pub fn edit_columns(&self) -> usize {
        self.k1.ncols()
    }

    pub fn preservation_columns(&self) -> usize {
        self.k0.ncols()
    }
}

/// Bank for one layer of a spread update.
pub fn layer_bank(
    model: &TransformerModel,
    edits: &[SiteGroup],
    preserved: (&DMatrix<f64>, &DMatrix<f64>),
    hook_layer: usize,
    layer: usize,
    share: usize,
) -> Result<LayerBank> {
    let (k1, m1) = extract_memories(model, edits, hook_layer, layer, share)?;
    LayerBank::new(layer, down_matrix(model, layer), preserved.0.clone(), preserved.1.clone(), k1, m1)
}

/// The banks solved by a spread update, lowest layer first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBank {
    pub layers: Vec<LayerBank>,
}

impl MemoryBank {
    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|b| b.layer).collect()
    }

    pub fn edit_columns(&self) -> usize {
        self.layers.first().map_or(0, LayerBank::edit_columns)
    }
}
