// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense reverse-mode differentiation.
//!
//! Tensors are rank 1 or 2, row-major f64. A [`Graph`] is built per forward
//! pass; leaves created from a [`DTensor`] with `requires_grad` receive
//! gradients on [`Graph::backward`].
//!
//! ## Shape rules
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[m,k]`, `[k,n]` | `[m,n]` |
//! | `add`, `sub`, `mul` | equal shapes | same |
//! | `scale`, `gelu` | any | same |
//! | `sum` | any | `[1]` |
//! | `softmax` | `[r,c]` | `[r,c]`, over the last axis |
//! | `layer_norm` | `[r,c]`, gain `[c]`, bias `[c]` | `[r,c]` |
//! | `embedding` | table `[V,d]`, ids | `[len(ids), d]` |
//! | `gather_rows`, `slice_rows` | `[r,c]` | `[len, c]` |
//! | `slice_cols` | `[r,c]` | `[r, end-start]` |
//! | `concat` | matrices agreeing off-axis | stacked |
//! | `add_at_row` | `[r,c]`, `[c]` | `[r,c]` |
//! | `causal_attention` | q, k, v `[T,d]` | `[T,d]` |
//! | `cross_entropy` | logits `[r,V]`, `(row, id)` targets | `[1]` |

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Reduction, Var, LAYER_NORM_EPS};
pub use tensor::DTensor;
