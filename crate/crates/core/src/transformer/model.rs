// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with residual-stream hooks.
//!
//! ```text
//! tokens → token emb + position emb = h⁰
//!   block l (0-indexed), input x = h^l:
//!     a  = Attn(LN₁(x))                 causal, multi-head
//!     r  = x + a
//!     k  = gelu(LN₂(r) · W_up)          MLP key
//!     m  = k · W_down                   MLP memory
//!     h  = r + m                        block output, hook site
//!   LN_f(h) · W_head → logits
//! ```
//!
//! A hook `(layer, position, shift)` adds `shift` to row `position` of the
//! output of block `layer`. Later blocks read the shifted state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::diffcore::{kernels, DTensor, Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Per-block parameters, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    WQ,
    WK,
    WV,
    WO,
    Ln2Gain,
    Ln2Bias,
    WUp,
    WDown,
}

impl LayerParam {
    pub const ALL: [LayerParam; 10] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::WQ,
        LayerParam::WK,
        LayerParam::WV,
        LayerParam::WO,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::WUp,
        LayerParam::WDown,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LayerParam::Ln1Gain => "ln1.gain",
            LayerParam::Ln1Bias => "ln1.bias",
            LayerParam::WQ => "attn.w_q",
            LayerParam::WK => "attn.w_k",
            LayerParam::WV => "attn.w_v",
            LayerParam::WO => "attn.w_o",
            LayerParam::Ln2Gain => "ln2.gain",
            LayerParam::Ln2Bias => "ln2.bias",
            LayerParam::WUp => "mlp.w_up",
            LayerParam::WDown => "mlp.w_down",
        }
    }

    fn offset(self) -> usize {
        self as usize
    }
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const GLOBAL_HEAD: usize = 2;
const PER_LAYER: usize = 10;

/// Name of a block parameter, e.g. `blocks.3.mlp.w_down`.
pub fn layer_param_name(layer: usize, p: LayerParam) -> String {
    format!("blocks.{layer}.{}", p.suffix())
}

/// Adds `shift` to the output of block `layer` at sequence row `position`.
#[derive(Debug, Clone)]
pub struct HookSpec {
    pub layer: usize,
    pub position: usize,
    pub shift: DTensor,
}

impl HookSpec {
    pub fn new(layer: usize, position: usize, shift: Vec<f64>) -> Result<Self> {
        Ok(Self {
            layer,
            position,
            shift: DTensor::vector(shift)?,
        })
    }
}

/// Whether model weights enter the graph as differentiable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    #[default]
    Frozen,
    Weights,
}

/// Graph handles of one block's intermediate states.
#[derive(Debug, Clone, Copy)]
pub struct LayerStates {
    pub resid_in: Var,
    pub attn: Var,
    pub key: Var,
    pub mlp: Var,
    pub resid_out: Var,
}

/// Output of a differentiable forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    first_block: usize,
    layers: Vec<LayerStates>,
    /// One leaf per hook, in the order hooks were given.
    pub hook_vars: Vec<Var>,
    pub hooks: Vec<(usize, usize)>,
    /// Parameter leaves in storage order.
    pub param_vars: Vec<Var>,
    pub seq_len: usize,
}

impl ForwardTrace {
    pub fn layer(&self, layer: usize) -> Result<&LayerStates> {
        layer
            .checked_sub(self.first_block)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| Error::OutOfRange(format!("layer {layer} not captured by this trace")))
    }

    /// Captured block output at `(layer, position)`, including any shift
    /// hooked at that site.
    pub fn hidden(&self, g: &Graph, layer: usize, position: usize) -> Result<Vec<f64>> {
        let states = self.layer(layer)?;
        if position >= self.seq_len {
            return Err(Error::OutOfRange(format!("position {position} of {}", self.seq_len)));
        }
        Ok(g.value(states.resid_out).row(position).to_vec())
    }
}

/// Full per-position states from the graph-free inference path.
#[derive(Debug, Clone)]
pub struct LayerRows {
    pub resid_in: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    pub key: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    pub resid_out: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct InferenceTrace {
    pub logits: Vec<Vec<f64>>,
    pub layers: Vec<LayerRows>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<DTensor>,
}

impl TransformerModel {
    /// Randomly initialized model, deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Result<DTensor> {
            let dist = Normal::new(0.0, std).expect("positive std");
            DTensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
        };
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        let mut params = vec![
            normal(config.vocab_size, d, 0.1)?,
            normal(config.max_context, d, 0.1)?,
        ];
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        for l in 0..config.n_layers {
            for p in LayerParam::ALL {
                names.push(layer_param_name(l, p));
                let t = match p {
                    LayerParam::Ln1Gain | LayerParam::Ln2Gain => DTensor::vector(vec![1.0; d])?,
                    LayerParam::Ln1Bias | LayerParam::Ln2Bias => DTensor::vector(vec![0.0; d])?,
                    LayerParam::WQ | LayerParam::WK | LayerParam::WV => normal(d, d, inv(d))?,
                    LayerParam::WO => normal(d, d, inv(d) * out_scale)?,
                    LayerParam::WUp => normal(d, ff, inv(d))?,
                    LayerParam::WDown => normal(ff, d, inv(ff) * out_scale)?,
                };
                params.push(t);
            }
        }
        names.extend(["ln_f.gain", "ln_f.bias", "lm_head"].map(String::from));
        params.push(DTensor::vector(vec![1.0; d])?);
        params.push(DTensor::vector(vec![0.0; d])?);
        params.push(normal(d, config.vocab_size, inv(d))?);
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuild from named tensors (checkpoint loading); validates names and
    /// shapes against a freshly laid-out model.
    pub fn from_named(config: ModelConfig, named: Vec<(String, DTensor)>) -> Result<Self> {
        let template = Self::init(ModelConfig {
            seed: 0,
            ..config.clone()
        })?;
        if named.len() != template.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (tn, tt)) in named.into_iter().zip(template.names.iter().zip(&template.params)) {
            if &name != tn || t.shape() != tt.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match expected {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            names: template.names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &DTensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params(&self) -> &[DTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DTensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&DTensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut DTensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    fn layer_index(&self, layer: usize, p: LayerParam) -> usize {
        GLOBAL_HEAD + layer * PER_LAYER + p.offset()
    }

    pub fn layer_param(&self, layer: usize, p: LayerParam) -> &DTensor {
        &self.params[self.layer_index(layer, p)]
    }

    pub fn layer_param_mut(&mut self, layer: usize, p: LayerParam) -> &mut DTensor {
        let i = self.layer_index(layer, p);
        &mut self.params[i]
    }

    fn final_index(&self, k: usize) -> usize {
        GLOBAL_HEAD + self.config.n_layers * PER_LAYER + k
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::OutOfRange(format!(
                "sequence length {} exceeds max_context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_hooks(&self, hooks: &[HookSpec], seq_len: usize) -> Result<()> {
        for h in hooks {
            if h.layer >= self.config.n_layers {
                return Err(Error::OutOfRange(format!(
                    "hook layer {} of {}",
                    h.layer, self.config.n_layers
                )));
            }
            if h.position >= seq_len {
                return Err(Error::OutOfRange(format!(
                    "hook position {} outside sequence of length {seq_len}",
                    h.position
                )));
            }
            if h.shift.numel() != self.config.d_model {
                return Err(Error::Shape {
                    op: "hook shift",
                    lhs: vec![self.config.d_model],
                    rhs: h.shift.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn insert_params(&self, g: &mut Graph, mode: GradMode) -> Vec<Var> {
        let weights = mode == GradMode::Weights;
        self.params
            .iter()
            .map(|p| g.leaf(p.clone().with_requires_grad(weights)))
            .collect()
    }

    /// Differentiable forward over the whole sequence.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], hooks: &[HookSpec], mode: GradMode) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks, tokens.len())?;
        let pv = self.insert_params(g, mode);
        let emb = g.embedding(pv[TOK_EMB], tokens)?;
        let pos = g.slice_rows(pv[POS_EMB], 0, tokens.len())?;
        let x = g.add(emb, pos)?;
        let hook_vars: Vec<Var> = hooks.iter().map(|h| g.leaf(h.shift.clone())).collect();
        self.run_blocks(g, pv, x, 0, hooks, hook_vars, tokens.len())
    }

    /// Differentiable forward starting from the (unhooked) output of block
    /// `layer`, given as a `[T × d]` tensor. Hooks must sit at `layer` or
    /// above; hooks at `layer` are added to the given state.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        layer: usize,
        resid: DTensor,
        hooks: &[HookSpec],
        mode: GradMode,
    ) -> Result<ForwardTrace> {
        let (t_len, d) = resid.dims2()?;
        if d != self.config.d_model || layer >= self.config.n_layers {
            return Err(Error::Contract(format!(
                "forward_from: state {:?} at layer {layer} does not fit model",
                resid.shape()
            )));
        }
        if t_len > self.config.max_context {
            return Err(Error::OutOfRange(format!("sequence length {t_len} exceeds max_context")));
        }
        self.check_hooks(hooks, t_len)?;
        if let Some(h) = hooks.iter().find(|h| h.layer < layer) {
            return Err(Error::Contract(format!(
                "hook at layer {} precedes start layer {layer}",
                h.layer
            )));
        }
        let pv = self.insert_params(g, mode);
        let hook_vars: Vec<Var> = hooks.iter().map(|h| g.leaf(h.shift.clone())).collect();
        let mut x = g.constant(resid);
        for (k, h) in hooks.iter().enumerate() {
            if h.layer == layer {
                x = g.add_at_row(x, h.position, hook_vars[k])?;
            }
        }
        self.run_blocks(g, pv, x, layer + 1, hooks, hook_vars, t_len)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_blocks(
        &self,
        g: &mut Graph,
        pv: Vec<Var>,
        mut x: Var,
        first_block: usize,
        hooks: &[HookSpec],
        hook_vars: Vec<Var>,
        seq_len: usize,
    ) -> Result<ForwardTrace> {
        let mut layers = Vec::with_capacity(self.config.n_layers.saturating_sub(first_block));
        for l in first_block..self.config.n_layers {
            let mut states = self.block(g, |lp| pv[self.layer_index(l, lp)], x)?;
            let mut h = states.resid_out;
            for (i, hk) in hooks.iter().enumerate() {
                if hk.layer == l {
                    h = g.add_at_row(h, hk.position, hook_vars[i])?;
                }
            }
            states.resid_out = h;
            layers.push(states);
            x = h;
        }
        let lnf = g.layer_norm(x, pv[self.final_index(0)], pv[self.final_index(1)])?;
        let logits = g.matmul(lnf, pv[self.final_index(2)])?;
        Ok(ForwardTrace {
            logits,
            first_block,
            layers,
            hook_vars,
            hooks: hooks.iter().map(|h| (h.layer, h.position)).collect(),
            param_vars: pv,
            seq_len,
        })
    }

    fn block(&self, g: &mut Graph, p: impl Fn(LayerParam) -> Var, x: Var) -> Result<LayerStates> {
        let u = g.layer_norm(x, p(LayerParam::Ln1Gain), p(LayerParam::Ln1Bias))?;
        let q = g.matmul(u, p(LayerParam::WQ))?;
        let k = g.matmul(u, p(LayerParam::WK))?;
        let v = g.matmul(u, p(LayerParam::WV))?;
        let att = g.causal_attention(q, k, v, self.config.n_heads)?;
        let a = g.matmul(att, p(LayerParam::WO))?;
        let r = g.add(x, a)?;
        let z = g.layer_norm(r, p(LayerParam::Ln2Gain), p(LayerParam::Ln2Bias))?;
        let pre = g.matmul(z, p(LayerParam::WUp))?;
        let key = g.gelu(pre);
        let m = g.matmul(key, p(LayerParam::WDown))?;
        let h = g.add(r, m)?;
        Ok(LayerStates {
            resid_in: x,
            attn: a,
            key,
            mlp: m,
            resid_out: h,
        })
    }

    /// Runs block `layer` alone on an input residual stream `[T × d]`.
    /// Returns the block states and its parameter leaves in
    /// [`LayerParam::ALL`] order.
    pub fn forward_block(
        &self,
        g: &mut Graph,
        layer: usize,
        input: DTensor,
        mode: GradMode,
    ) -> Result<(LayerStates, Vec<Var>)> {
        let (t_len, d) = input.dims2()?;
        if d != self.config.d_model || layer >= self.config.n_layers || t_len > self.config.max_context {
            return Err(Error::Contract(format!(
                "forward_block: input {:?} at layer {layer} does not fit model",
                input.shape()
            )));
        }
        let weights = mode == GradMode::Weights;
        let pv: Vec<Var> = LayerParam::ALL
            .iter()
            .map(|&lp| g.leaf(self.layer_param(layer, lp).clone().with_requires_grad(weights)))
            .collect();
        let x = g.constant(input);
        let states = self.block(g, |lp| pv[lp.offset()], x)?;
        Ok((states, pv))
    }

    // ------------------------------------------------------------------
    // Graph-free inference
    // ------------------------------------------------------------------

    /// Graph-free forward over the whole sequence, capturing every state.
    /// Values are bit-identical to [`TransformerModel::forward`].
    pub fn infer(&self, tokens: &[usize], hooks: &[HookSpec]) -> Result<InferenceTrace> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks, tokens.len())?;
        let mut state = self.start_decoding();
        let mut layers: Vec<LayerRows> = (0..self.config.n_layers)
            .map(|_| LayerRows {
                resid_in: Vec::with_capacity(tokens.len()),
                attn: Vec::with_capacity(tokens.len()),
                key: Vec::with_capacity(tokens.len()),
                mlp: Vec::with_capacity(tokens.len()),
                resid_out: Vec::with_capacity(tokens.len()),
            })
            .collect();
        let mut logits = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            logits.push(state.step(self, tok, hooks, Some(&mut layers))?);
        }
        Ok(InferenceTrace { logits, layers })
    }

    /// Output of block `layer` for every position, unhooked.
    pub fn block_outputs(&self, tokens: &[usize], layer: usize) -> Result<DTensor> {
        let trace = self.infer(tokens, &[])?;
        let rows = &trace
            .layers
            .get(layer)
            .ok_or_else(|| Error::OutOfRange(format!("layer {layer}")))?
            .resid_out;
        DTensor::from_rows(rows)
    }

    pub fn start_decoding(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            position: 0,
        }
    }
}

/// Key/value cache for incremental graph-free decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    position: usize,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.position
    }

    /// Process one token at the next position; returns its logits row.
    pub fn step(
        &mut self,
        model: &TransformerModel,
        token: usize,
        hooks: &[HookSpec],
        mut capture: Option<&mut Vec<LayerRows>>,
    ) -> Result<Vec<f64>> {
        let cfg = &model.config;
        let t = self.position;
        if t >= cfg.max_context {
            return Err(Error::OutOfRange(format!("position {t} reaches max_context")));
        }
        if token >= cfg.vocab_size {
            return Err(Error::OutOfRange(format!(
                "token id {token} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let tok = model.params[TOK_EMB].row(token);
        let pos = model.params[POS_EMB].row(t);
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut u = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut kr = vec![0.0; d];
        let mut vr = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut z = vec![0.0; d];
        let mut pre = vec![0.0; cfg.d_ff];
        let mut m = vec![0.0; d];
        let mut probs = vec![0.0; t + 1];
        for l in 0..cfg.n_layers {
            let w = |p: LayerParam| model.layer_param(l, p).data();
            kernels::layer_norm_row(&x, w(LayerParam::Ln1Gain), w(LayerParam::Ln1Bias), LAYER_NORM_EPS, &mut u);
            kernels::matmul_row(&u, w(LayerParam::WQ), d, &mut q);
            kernels::matmul_row(&u, w(LayerParam::WK), d, &mut kr);
            kernels::matmul_row(&u, w(LayerParam::WV), d, &mut vr);
            self.keys[l].extend_from_slice(&kr);
            self.values[l].extend_from_slice(&vr);
            for h in 0..cfg.n_heads {
                let col = h * hd;
                kernels::attend_row(
                    &q[col..col + hd],
                    &self.keys[l],
                    &self.values[l],
                    d,
                    col,
                    t,
                    &mut probs,
                    &mut att[col..col + hd],
                );
            }
            kernels::matmul_row(&att, w(LayerParam::WO), d, &mut a);
            let r: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            kernels::layer_norm_row(&r, w(LayerParam::Ln2Gain), w(LayerParam::Ln2Bias), LAYER_NORM_EPS, &mut z);
            kernels::matmul_row(&z, w(LayerParam::WUp), cfg.d_ff, &mut pre);
            let key: Vec<f64> = pre.iter().map(|&p| kernels::gelu(p)).collect();
            kernels::matmul_row(&key, w(LayerParam::WDown), d, &mut m);
            let mut h: Vec<f64> = r.iter().zip(&m).map(|(p, q)| p + q).collect();
            for hk in hooks.iter().filter(|hk| hk.layer == l && hk.position == t) {
                for (o, s) in h.iter_mut().zip(hk.shift.data()) {
                    *o += s;
                }
            }
            if let Some(rows) = capture.as_deref_mut() {
                let lr = &mut rows[l];
                lr.resid_in.push(x.clone());
                lr.attn.push(a.clone());
                lr.key.push(key);
                lr.mlp.push(m.clone());
                lr.resid_out.push(h.clone());
            }
            x = h;
        }
        let fi = |k| model.final_index(k);
        kernels::layer_norm_row(
            &x,
            model.params[fi(0)].data(),
            model.params[fi(1)].data(),
            LAYER_NORM_EPS,
            &mut u,
        );
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::matmul_row(&u, model.params[fi(2)].data(), cfg.vocab_size, &mut logits);
        self.position += 1;
        Ok(logits)
    }
}

/// Index of the largest logit; ties resolve to the lowest id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
