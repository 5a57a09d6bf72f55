//! Hand-derived reverse pass through the decoder.
//!
//! Gradients flow from d(loss)/d(logits) back through the head, the final
//! norm and every block. Parameter gradients are only materialised for the
//! layers selected by a [`GradMask`]; the pass stops at the lowest layer that
//! still needs either a parameter gradient or an input gradient.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use super::config::ModelConfig;
use super::forward::{
    forward, forward_batch, log_softmax, patched_hidden, run_from, softmax, Activations, BlockCache,
    ForwardTrace, LnCache, ModelState,
};
use super::params::{BlockParams, Params};
use crate::error::{Error, Result};

/// A differentiable scalar built from logits and (optionally) the patched hidden state.
pub trait Objective {
    /// Loss contribution of the logits (vocab x B*T) and its gradient w.r.t. them.
    /// `None` means the gradient is identically zero.
    fn logits_term(&self, _logits: &DMatrix<f64>, _seq_len: usize) -> Result<(f64, Option<DMatrix<f64>>)> {
        Ok((0.0, None))
    }

    /// Loss contribution of the injected offset. Receives the patched hidden
    /// state `h + offset` and the offset itself; returns d/d(offset).
    fn offset_term(&self, _patched: &DVector<f64>, _offset: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        (0.0, None)
    }
}

/// What to differentiate with respect to.
#[derive(Debug, Clone)]
pub enum Wrt {
    /// Every parameter, or only those of the given layers.
    Params(Option<BTreeSet<usize>>),
    /// Only the named parameters.
    Names(Vec<String>),
    /// An additive offset on the hidden state at (layer, position) of a single sequence.
    Offset { layer: usize, position: usize, offset: DVector<f64> },
}

#[derive(Debug, Clone)]
pub enum Gradients {
    Params(Params),
    Offset(DVector<f64>),
}

impl Gradients {
    pub fn params(&self) -> Option<&Params> {
        match self {
            Gradients::Params(p) => Some(p),
            Gradients::Offset(_) => None,
        }
    }

    pub fn offset(&self) -> Option<&DVector<f64>> {
        match self {
            Gradients::Offset(d) => Some(d),
            Gradients::Params(_) => None,
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone)]
pub(crate) struct GradMask {
    pub layers: Vec<bool>,
    pub top: bool,
    pub embed: bool,
}

impl GradMask {
    pub fn all(n_layers: usize) -> Self {
        Self { layers: vec![true; n_layers], top: true, embed: true }
    }

    pub fn from_filter(n_layers: usize, filter: Option<&BTreeSet<usize>>) -> Self {
        match filter {
            None => Self::all(n_layers),
            Some(f) => Self {
                layers: (0..n_layers).map(|l| f.contains(&l)).collect(),
                top: false,
                embed: false,
            },
        }
    }

    pub fn lowest_needed(&self) -> Option<usize> {
        if self.embed {
            return Some(0);
        }
        self.layers.iter().position(|&b| b)
    }
}

fn ln_backward(
    dy: &DMatrix<f64>,
    cache: &LnCache,
    g: &DMatrix<f64>,
    grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
) -> DMatrix<f64> {
    let (d, n) = dy.shape();
    let mut dx = DMatrix::zeros(d, n);
    let mut dxhat = vec![0.0; d];
    for j in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            let v = dy[(i, j)] * g[(i, 0)];
            dxhat[i] = v;
            m1 += v;
            m2 += v * cache.xhat[(i, j)];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let is = cache.inv_std[j];
        for i in 0..d {
            dx[(i, j)] = is * (dxhat[i] - m1 - cache.xhat[(i, j)] * m2);
        }
    }
    if let Some((dg, db)) = grads {
        for j in 0..n {
            for i in 0..d {
                dg[(i, 0)] += dy[(i, j)] * cache.xhat[(i, j)];
                db[(i, 0)] += dy[(i, j)];
            }
        }
    }
    dx
}

fn add_outer(acc: &mut DMatrix<f64>, dy: &DMatrix<f64>, x: &DMatrix<f64>) {
    acc.gemm(1.0, dy, &x.transpose(), 1.0);
}

fn add_rowsum(acc: &mut DMatrix<f64>, dy: &DMatrix<f64>) {
    for col in dy.column_iter() {
        acc.column_mut(0).axpy(1.0, &col, 1.0);
    }
}

fn block_backward(
    cfg: &ModelConfig,
    p: &BlockParams,
    cache: &BlockCache,
    dout: &DMatrix<f64>,
    seq_len: usize,
    mut g: Option<&mut BlockParams>,
) -> DMatrix<f64> {
    let n = dout.ncols();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP
    if let Some(g) = g.as_deref_mut() {
        add_outer(&mut g.w_out, dout, &cache.key);
        add_rowsum(&mut g.b_out, dout);
    }
    let dkey = p.w_out.tr_mul(dout);
    let dpre = dkey.zip_map(&cache.pre, |dk, x| dk * super::forward::gelu_grad(x));
    if let Some(g) = g.as_deref_mut() {
        add_outer(&mut g.w_in, &dpre, &cache.c);
        add_rowsum(&mut g.b_in, &dpre);
    }
    let dc = p.w_in.tr_mul(&dpre);
    let mut dmid = dout.clone();
    let ln2_grads = g.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b));
    dmid += ln_backward(&dc, &cache.ln2, &p.ln2_g, ln2_grads);

    // attention
    if let Some(g) = g.as_deref_mut() {
        add_outer(&mut g.wo, &dmid, &cache.o);
    }
    let d_o = p.wo.tr_mul(&dmid);
    let mut dq = DMatrix::zeros(cfg.d_model, n);
    let mut dk = DMatrix::zeros(cfg.d_model, n);
    let mut dv = DMatrix::zeros(cfg.d_model, n);
    let n_seq = n / seq_len;
    for s in 0..n_seq {
        let c0 = s * seq_len;
        for h in 0..cfg.n_heads {
            let r0 = h * dh;
            let a = &cache.attn[s * cfg.n_heads + h];
            let doh = d_o.view((r0, c0), (dh, seq_len));
            let qh = cache.q.view((r0, c0), (dh, seq_len));
            let kh = cache.k.view((r0, c0), (dh, seq_len));
            let vh = cache.v.view((r0, c0), (dh, seq_len));
            dv.view_mut((r0, c0), (dh, seq_len)).copy_from(&(doh * a.transpose()));
            let da = vh.transpose() * doh;
            let mut ds = DMatrix::zeros(seq_len, seq_len);
            for i in 0..seq_len {
                let dot: f64 = (0..seq_len).map(|j| a[(j, i)] * da[(j, i)]).sum();
                for j in 0..=i {
                    ds[(j, i)] = a[(j, i)] * (da[(j, i)] - dot) * scale;
                }
            }
            dq.view_mut((r0, c0), (dh, seq_len)).copy_from(&(kh * &ds));
            dk.view_mut((r0, c0), (dh, seq_len)).copy_from(&(qh * ds.transpose()));
        }
    }
    if let Some(g) = g.as_deref_mut() {
        add_outer(&mut g.wq, &dq, &cache.a);
        add_outer(&mut g.wk, &dk, &cache.a);
        add_outer(&mut g.wv, &dv, &cache.a);
    }
    let mut da = p.wq.tr_mul(&dq);
    da += p.wk.tr_mul(&dk);
    da += p.wv.tr_mul(&dv);
    let ln1_grads = g.map(|g| (&mut g.ln1_g, &mut g.ln1_b));
    dmid + ln_backward(&da, &cache.ln1, &p.ln1_g, ln1_grads)
}

/// Backpropagates `dlogits` through `acts`. Returns the gradient w.r.t. the
/// input of block `acts.start` when the pass reaches it.
pub(crate) fn backward(
    model: &ModelState,
    acts: &Activations,
    dlogits: &DMatrix<f64>,
    mask: &GradMask,
    mut grads: Option<&mut Params>,
    need_input_grad: bool,
) -> Option<DMatrix<f64>> {
    let cfg = &model.config;
    let p = &model.params;
    if let Some(g) = grads.as_deref_mut() {
        if mask.top {
            add_outer(&mut g.head, dlogits, &acts.z);
        }
    }
    let dz = p.head.tr_mul(dlogits);
    let top_grads = match grads.as_deref_mut() {
        Some(g) if mask.top => Some((&mut g.lnf_g, &mut g.lnf_b)),
        _ => None,
    };
    let mut dx = ln_backward(&dz, &acts.lnf, &p.lnf_g, top_grads);

    let lowest = if need_input_grad {
        acts.start
    } else {
        match mask.lowest_needed() {
            Some(l) => l.max(acts.start),
            None => return None,
        }
    };
    let n_layers = cfg.n_layers;
    for l in (lowest..n_layers).rev() {
        let cache = &acts.blocks[l - acts.start];
        let g = match grads.as_deref_mut() {
            Some(g) if mask.layers[l] => Some(&mut g.blocks[l]),
            _ => None,
        };
        dx = block_backward(cfg, &p.blocks[l], cache, &dx, acts.seq_len, g);
    }
    if lowest == acts.start {
        Some(dx)
    } else {
        None
    }
}

fn accumulate_embed(grads: &mut Params, batch: &[&[usize]], dx0: &DMatrix<f64>) {
    let seq_len = batch[0].len();
    for (s, toks) in batch.iter().enumerate() {
        for (t, &tok) in toks.iter().enumerate() {
            let col = dx0.column(s * seq_len + t);
            grads.embed.column_mut(tok).axpy(1.0, &col, 1.0);
            grads.pos.column_mut(t).axpy(1.0, &col, 1.0);
        }
    }
}

/// Loss and parameter gradients for a batch under the given mask.
pub(crate) fn param_loss_and_grad(
    model: &ModelState,
    batch: &[&[usize]],
    objective: &dyn Objective,
    mask: &GradMask,
) -> Result<(f64, Params)> {
    let (_, acts) = forward_batch(model, batch)?;
    let (loss, dlogits) = objective.logits_term(&acts.logits, acts.seq_len)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = model.params.zeros_like();
    if let Some(dl) = dlogits {
        let dx0 = backward(model, &acts, &dl, mask, Some(&mut grads), mask.embed);
        if mask.embed {
            accumulate_embed(&mut grads, batch, &dx0.expect("input grad requested"));
        }
    }
    Ok((loss, grads))
}

/// Evaluates an objective under an additive hidden-state offset, caching the
/// unpatched prefix so repeated evaluations only re-run the later blocks.
pub struct OffsetProblem<'a> {
    model: &'a ModelState,
    trace: ForwardTrace,
    layer: usize,
    position: usize,
}

impl<'a> OffsetProblem<'a> {
    pub fn new(model: &'a ModelState, tokens: &[usize], layer: usize, position: usize) -> Result<Self> {
        let trace = forward(model, tokens)?;
        Self::from_trace(model, trace, layer, position)
    }

    pub fn from_trace(model: &'a ModelState, trace: ForwardTrace, layer: usize, position: usize) -> Result<Self> {
        if layer >= model.config.n_layers {
            return Err(Error::IndexOutOfRange(format!("layer {layer}")));
        }
        if position >= trace.seq_len() {
            return Err(Error::IndexOutOfRange(format!("position {position}")));
        }
        Ok(Self { model, trace, layer, position })
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    /// Unpatched hidden state at the slot.
    pub fn base_hidden(&self) -> DVector<f64> {
        self.trace.hidden_at(self.layer, self.position)
    }

    /// Logits (vocab x T) with the offset applied.
    pub fn logits(&self, offset: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.base_hidden() + offset;
        let x = patched_hidden(self.model, &self.trace, self.layer, self.position, &h)?;
        Ok(run_from(self.model, x, self.trace.seq_len(), self.layer + 1).logits)
    }

    pub fn loss_and_grad(&self, objective: &dyn Objective, offset: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let d = self.model.config.d_model;
        if offset.len() != d {
            return Err(Error::DimensionMismatch(format!("offset width {} != d_model {d}", offset.len())));
        }
        let h = self.base_hidden() + offset;
        let x = patched_hidden(self.model, &self.trace, self.layer, self.position, &h)?;
        let seq_len = self.trace.seq_len();
        let acts = run_from(self.model, x, seq_len, self.layer + 1);
        let (mut loss, dlogits) = objective.logits_term(&acts.logits, seq_len)?;
        let mut grad = DVector::zeros(d);
        if let Some(dl) = dlogits {
            let mask = GradMask { layers: vec![false; self.model.config.n_layers], top: false, embed: false };
            let dx = backward(self.model, &acts, &dl, &mask, None, true).expect("input grad requested");
            grad += dx.column(self.position);
        }
        let (extra, g) = objective.offset_term(&h, offset);
        loss += extra;
        if let Some(g) = g {
            grad += g;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((loss, grad))
    }
}

/// Loss and gradient of `objective` over `batch` with respect to `wrt`.
pub fn loss_and_grad(
    model: &ModelState,
    batch: &[&[usize]],
    objective: &dyn Objective,
    wrt: &Wrt,
) -> Result<(f64, Gradients)> {
    let n = model.config.n_layers;
    match wrt {
        Wrt::Params(filter) => {
            if let Some(f) = filter {
                if let Some(&bad) = f.iter().find(|&&l| l >= n) {
                    return Err(Error::IndexOutOfRange(format!("layer {bad}")));
                }
            }
            let mask = GradMask::from_filter(n, filter.as_ref());
            let (loss, g) = param_loss_and_grad(model, batch, objective, &mask)?;
            Ok((loss, Gradients::Params(g)))
        }
        Wrt::Names(names) => {
            for name in names {
                model.params.get(name)?;
            }
            let (loss, mut g) = param_loss_and_grad(model, batch, objective, &GradMask::all(n))?;
            g.visit_mut(|t| {
                if !names.iter().any(|n| *n == t.name) {
                    t.tensor.fill(0.0);
                }
            });
            Ok((loss, Gradients::Params(g)))
        }
        Wrt::Offset { layer, position, offset } => {
            if batch.len() != 1 {
                return Err(Error::InvalidArgument("offset gradients take a single sequence".into()));
            }
            let prob = OffsetProblem::new(model, batch[0], *layer, *position)?;
            let (loss, g) = prob.loss_and_grad(objective, offset)?;
            Ok((loss, Gradients::Offset(g)))
        }
    }
}

/// Constant loss; every gradient is zero.
pub struct ConstantObjective(pub f64);

impl Objective for ConstantObjective {
    fn logits_term(&self, _logits: &DMatrix<f64>, _seq_len: usize) -> Result<(f64, Option<DMatrix<f64>>)> {
        Ok((self.0, None))
    }
}

/// `0.5 * |offset|^2`.
pub struct OffsetQuadratic;

impl Objective for OffsetQuadratic {
    fn offset_term(&self, _patched: &DVector<f64>, offset: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        (0.5 * offset.norm_squared(), Some(offset.clone()))
    }
}

/// Mean negative log-likelihood of one target token per sequence at a fixed position.
pub struct TokenNll {
    pub position: usize,
    pub targets: Vec<usize>,
}

impl Objective for TokenNll {
    fn logits_term(&self, logits: &DMatrix<f64>, seq_len: usize) -> Result<(f64, Option<DMatrix<f64>>)> {
        let n_seq = logits.ncols() / seq_len;
        if self.targets.len() != n_seq || self.position >= seq_len {
            return Err(Error::DimensionMismatch("nll targets do not match batch".into()));
        }
        let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut loss = 0.0;
        let inv = 1.0 / n_seq as f64;
        for (s, &tgt) in self.targets.iter().enumerate() {
            let col = s * seq_len + self.position;
            let z = logits.column(col).into_owned();
            let lp = log_softmax(&z);
            loss -= lp[tgt] * inv;
            let mut g = lp.map(f64::exp);
            g[tgt] -= 1.0;
            grad.column_mut(col).copy_from(&(g * inv));
        }
        Ok((loss, Some(grad)))
    }
}

/// Mean `KL(teacher || student)` over the listed positions of every sequence.
pub struct DistillKl {
    /// vocab x (B*T) teacher probabilities.
    pub teacher: DMatrix<f64>,
    pub positions: Vec<usize>,
}

impl Objective for DistillKl {
    fn logits_term(&self, logits: &DMatrix<f64>, seq_len: usize) -> Result<(f64, Option<DMatrix<f64>>)> {
        if self.teacher.shape() != logits.shape() {
            return Err(Error::DimensionMismatch("teacher probabilities".into()));
        }
        let n_seq = logits.ncols() / seq_len;
        let count = (n_seq * self.positions.len()) as f64;
        let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut loss = 0.0;
        for s in 0..n_seq {
            for &p in &self.positions {
                let col = s * seq_len + p;
                let lp = log_softmax(&logits.column(col).into_owned());
                let t = self.teacher.column(col);
                for v in 0..logits.nrows() {
                    if t[v] > 0.0 {
                        loss += t[v] * (t[v].ln() - lp[v]) / count;
                    }
                }
                let q = softmax(&logits.column(col).into_owned());
                grad.column_mut(col).copy_from(&((q - t) / count));
            }
        }
        Ok((loss, Some(grad)))
    }
}
