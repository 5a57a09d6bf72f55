//! Batched forward pass of the pre-norm decoder.
//!
//! Activations use a column-per-position layout: a batch of `B` sequences of
//! length `T` is a `width x (B*T)` matrix whose columns `s*T..(s+1)*T` belong
//! to sequence `s`. Every intermediate needed by the backward pass is kept in
//! a [`BlockCache`].

use nalgebra::{DMatrix, DVector};

use super::config::ModelConfig;
use super::params::{BlockParams, Params};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Architecture plus parameters of the substrate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Checks every tensor against the shape the config dictates.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect = Params::zeros(&self.config);
        for (a, b) in self.params.named().iter().zip(expect.named().iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        if self.params.blocks.len() != self.config.n_layers {
            return Err(Error::DimensionMismatch("layer count".into()));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Hidden states, MLP keys and logits of one forward pass over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub token_ids: Vec<usize>,
    /// Per layer: d_model x T, the residual stream after the block.
    pub hidden: Vec<DMatrix<f64>>,
    /// Per layer: d_ff x T, `gelu(W_in * ln2(h))`.
    pub keys: Vec<DMatrix<f64>>,
    /// vocab x T
    pub logits: DMatrix<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn hidden_at(&self, layer: usize, pos: usize) -> DVector<f64> {
        self.hidden[layer].column(pos).into_owned()
    }

    pub fn key_at(&self, layer: usize, pos: usize) -> DVector<f64> {
        self.keys[layer].column(pos).into_owned()
    }

    pub fn logits_at(&self, pos: usize) -> DVector<f64> {
        self.logits.column(pos).into_owned()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: DMatrix<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// One T x T column-stochastic matrix per (sequence, head), sequence-major.
    pub attn: Vec<DMatrix<f64>>,
    pub o: DMatrix<f64>,
    pub ln2: LnCache,
    pub c: DMatrix<f64>,
    pub pre: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub out: DMatrix<f64>,
}

/// Cached activations of a batched pass over layers `start..n_layers`.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub seq_len: usize,
    pub start: usize,
    pub blocks: Vec<BlockCache>,
    pub lnf: LnCache,
    pub z: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

pub(crate) fn layer_norm(x: &DMatrix<f64>, g: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
    let (d, n) = x.shape();
    let mut xhat = DMatrix::zeros(d, n);
    let mut y = DMatrix::zeros(d, n);
    let mut inv_std = Vec::with_capacity(n);
    for j in 0..n {
        let col = x.column(j);
        let mean = col.sum() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for i in 0..d {
            let h = (x[(i, j)] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = g[(i, 0)] * h + b[(i, 0)];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

pub(crate) fn block_forward(cfg: &ModelConfig, p: &BlockParams, x: DMatrix<f64>, seq_len: usize) -> BlockCache {
    let n = x.ncols();
    let n_seq = n / seq_len;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b);
    let q = &p.wq * &a;
    let k = &p.wk * &a;
    let v = &p.wv * &a;
    let mut o = DMatrix::zeros(cfg.d_model, n);
    let mut attn = Vec::with_capacity(n_seq * cfg.n_heads);
    for s in 0..n_seq {
        let c0 = s * seq_len;
        for h in 0..cfg.n_heads {
            let r0 = h * dh;
            let qh = q.view((r0, c0), (dh, seq_len));
            let kh = k.view((r0, c0), (dh, seq_len));
            let vh = v.view((r0, c0), (dh, seq_len));
            // scores[j, i] = <k_j, q_i>; column i is the query
            let mut w = kh.transpose() * qh;
            for i in 0..seq_len {
                let mut col = w.column_mut(i);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    col[j] *= scale;
                    mx = mx.max(col[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    col[j] = (col[j] - mx).exp();
                    sum += col[j];
                }
                for j in 0..seq_len {
                    col[j] = if j <= i { col[j] / sum } else { 0.0 };
                }
            }
            let oh = vh * &w;
            o.view_mut((r0, c0), (dh, seq_len)).copy_from(&oh);
            attn.push(w);
        }
    }
    let mid = &x + &p.wo * &o;
    let (c, ln2) = layer_norm(&mid, &p.ln2_g, &p.ln2_b);
    let mut pre = &p.w_in * &c;
    add_bias(&mut pre, &p.b_in);
    let key = pre.map(gelu);
    let mut out = &p.w_out * &key;
    add_bias(&mut out, &p.b_out);
    out += &mid;
    BlockCache { ln1, a, q, k, v, attn, o, ln2, c, pre, key, out }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Token plus position embeddings for a batch of equal-length sequences.
pub(crate) fn embed_batch(model: &ModelState, batch: &[&[usize]]) -> Result<(DMatrix<f64>, usize)> {
    let seq_len = batch.first().map(|s| s.len()).ok_or(Error::EmptySequence)?;
    let d = model.config.d_model;
    let mut x = DMatrix::zeros(d, seq_len * batch.len());
    for (s, toks) in batch.iter().enumerate() {
        check_tokens(&model.config, toks)?;
        if toks.len() != seq_len {
            return Err(Error::DimensionMismatch("batched sequences must share a length".into()));
        }
        for (t, &tok) in toks.iter().enumerate() {
            let mut col = x.column_mut(s * seq_len + t);
            col.copy_from(&model.params.embed.column(tok));
            col += model.params.pos.column(t);
        }
    }
    Ok((x, seq_len))
}

/// Runs blocks `start..n_layers` and the output head on `x`.
pub(crate) fn run_from(model: &ModelState, x: DMatrix<f64>, seq_len: usize, start: usize) -> Activations {
    let cfg = &model.config;
    let mut blocks = Vec::with_capacity(cfg.n_layers - start);
    let mut cur = x;
    for l in start..cfg.n_layers {
        let cache = block_forward(cfg, &model.params.blocks[l], cur, seq_len);
        cur = cache.out.clone();
        blocks.push(cache);
    }
    let (z, lnf) = layer_norm(&cur, &model.params.lnf_g, &model.params.lnf_b);
    let logits = &model.params.head * &z;
    Activations { seq_len, start, blocks, lnf, z, logits }
}

/// Full batched forward. `x0` (the embedding output) is returned for the backward pass.
pub(crate) fn forward_batch(model: &ModelState, batch: &[&[usize]]) -> Result<(DMatrix<f64>, Activations)> {
    let (x0, seq_len) = embed_batch(model, batch)?;
    let acts = run_from(model, x0.clone(), seq_len, 0);
    Ok((x0, acts))
}

/// Forward pass over one token sequence, recording every layer.
pub fn forward(model: &ModelState, tokens: &[usize]) -> Result<ForwardTrace> {
    let (_, acts) = forward_batch(model, &[tokens])?;
    Ok(ForwardTrace {
        token_ids: tokens.to_vec(),
        hidden: acts.blocks.iter().map(|b| b.out.clone()).collect(),
        keys: acts.blocks.iter().map(|b| b.key.clone()).collect(),
        logits: acts.logits,
    })
}

/// Logits at `position` after replacing the hidden state at (`layer`, `position`)
/// with `replacement` and re-running every later block.
pub fn forward_from_hidden(
    model: &ModelState,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
    replacement: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = patched_hidden(model, trace, layer, position, replacement)?;
    let acts = run_from(model, x, trace.seq_len(), layer + 1);
    Ok(acts.logits.column(position).into_owned())
}

pub(crate) fn patched_hidden(
    model: &ModelState,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
    replacement: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if layer >= model.config.n_layers || layer >= trace.hidden.len() {
        return Err(Error::IndexOutOfRange(format!("layer {layer}")));
    }
    if position >= trace.seq_len() {
        return Err(Error::IndexOutOfRange(format!("position {position}")));
    }
    if replacement.len() != model.config.d_model {
        return Err(Error::DimensionMismatch(format!(
            "replacement width {} != d_model {}",
            replacement.len(),
            model.config.d_model
        )));
    }
    let mut x = trace.hidden[layer].clone();
    x.column_mut(position).copy_from(replacement);
    Ok(x)
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let mx = v.max();
    let e = v.map(|x| (x - mx).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax(v: &DVector<f64>) -> DVector<f64> {
    let mx = v.max();
    let lse = mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    v.map(|x| x - lse)
}
