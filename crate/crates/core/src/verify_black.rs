//! Black-box verification through sentinel logits.
//!
//! The deployed model is only ever reached through [`LogitQuery`], which maps a
//! prompt and a position to the logits of a fixed set of sentinel tokens.
//! Signatures and reference logits are recorded against the pristine
//! watermarked model before deployment; drift between the two is estimated
//! from paired reference queries and folded back into the signatures before
//! decoding.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bitspace::BitSpace;
use crate::corpus::FactTriplet;
use crate::error::{Error, Result};
use crate::substrate::{forward, forward_from_hidden, ModelState};
use crate::verify_white::{Mode, RecoveredSequence};

/// Query access to a deployed model.
pub trait LogitQuery {
    /// Logits of `sentinels` at `position` of `tokens`.
    fn sentinel_logits(&self, tokens: &[usize], position: usize, sentinels: &[usize]) -> Result<DVector<f64>>;
}

/// Serves queries from a local model; parameters are not exposed.
pub struct Loopback {
    model: ModelState,
}

impl Loopback {
    pub fn new(model: ModelState) -> Self {
        Self { model }
    }
}

impl LogitQuery for Loopback {
    fn sentinel_logits(&self, tokens: &[usize], position: usize, sentinels: &[usize]) -> Result<DVector<f64>> {
        let t = forward(&self.model, tokens)?;
        if position >= t.seq_len() {
            return Err(Error::IndexOutOfRange(format!("position {position}")));
        }
        let vocab = self.model.config.vocab_size;
        sentinels
            .iter()
            .map(|&s| {
                if s >= vocab {
                    Err(Error::TokenOutOfRange { token: s, vocab })
                } else {
                    Ok(t.logits[(s, position)])
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(DVector::from_vec)
    }
}

/// Wraps another query interface and records every prompt it sees.
pub struct Recording<'a, Q: LogitQuery> {
    inner: &'a Q,
    pub log: RefCell<Vec<(Vec<usize>, usize)>>,
}

impl<'a, Q: LogitQuery> Recording<'a, Q> {
    pub fn new(inner: &'a Q) -> Self {
        Self { inner, log: RefCell::new(Vec::new()) }
    }
}

impl<Q: LogitQuery> LogitQuery for Recording<'_, Q> {
    fn sentinel_logits(&self, tokens: &[usize], position: usize, sentinels: &[usize]) -> Result<DVector<f64>> {
        self.log.borrow_mut().push((tokens.to_vec(), position));
        self.inner.sentinel_logits(tokens, position, sentinels)
    }
}

/// Which prompt is sent when reading a subject's sentinel logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QueryPrompt {
    /// `subject ++ relation`, read at the last subject token.
    #[default]
    FullPrompt,
    /// The subject tokens alone, read at the last one.
    SubjectOnly,
}

impl QueryPrompt {
    pub fn tokens(self, fact: &FactTriplet) -> (Vec<usize>, usize) {
        match self {
            QueryPrompt::FullPrompt => (fact.prompt(), fact.subject_last_pos),
            QueryPrompt::SubjectOnly => (fact.subject_tokens.clone(), fact.subject_last_pos),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelSet {
    pub tokens: Vec<usize>,
}

impl SentinelSet {
    pub fn m(&self) -> usize {
        self.tokens.len()
    }

    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.tokens.len(), self.tokens.iter().map(|&t| full[t]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitSignature {
    pub bit_index: usize,
    pub code: u8,
    pub weights: DVector<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLog {
    pub rows: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub k_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReanchorForm {
    /// `(rho S + lam I)^-1 (w + P mu + lam P w)`
    #[default]
    Centered,
    /// `(rho S + lam I)^-1 (rho S (mu + w) + lam w)`
    Shrinkage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReanchorConfig {
    pub rho: f64,
    pub lam: f64,
    pub form: ReanchorForm,
}

impl Default for ReanchorConfig {
    fn default() -> Self {
        Self { rho: 1.0, lam: 1.0, form: ReanchorForm::Centered }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackBoxConfig {
    pub m: usize,
    pub eta: f64,
    /// Keep bit responses as raw logit differences instead of dividing by `eta`.
    pub unscaled: bool,
    pub query: QueryPrompt,
    pub reanchor: ReanchorConfig,
    /// Subtract each anchor's mean sentinel logit before scoring.
    pub center: bool,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        Self {
            m: 64,
            eta: 1e-2,
            unscaled: false,
            query: QueryPrompt::FullPrompt,
            reanchor: ReanchorConfig::default(),
            center: true,
        }
    }
}

/// Mean logit change over the reference facts when `eta * v` is added to the
/// hidden state of the last subject token at `layer`, divided by `eta` unless
/// `unscaled`.
pub fn estimate_bit_response(
    model: &ModelState,
    refs: &[FactTriplet],
    v: &DVector<f64>,
    layer: usize,
    eta: f64,
    unscaled: bool,
) -> Result<DVector<f64>> {
    let traces = reference_traces(model, refs)?;
    bit_response_from_traces(model, &traces, refs, v, layer, eta, unscaled)
}

fn reference_traces(model: &ModelState, refs: &[FactTriplet]) -> Result<Vec<crate::substrate::ForwardTrace>> {
    if refs.is_empty() {
        return Err(Error::Insufficient("bit response needs reference facts".into()));
    }
    refs.iter().map(|r| forward(model, &r.prompt())).collect()
}

fn bit_response_from_traces(
    model: &ModelState,
    traces: &[crate::substrate::ForwardTrace],
    refs: &[FactTriplet],
    v: &DVector<f64>,
    layer: usize,
    eta: f64,
    unscaled: bool,
) -> Result<DVector<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let mut acc = DVector::zeros(model.config.vocab_size);
    for (t, r) in traces.iter().zip(refs) {
        let pos = r.subject_last_pos;
        let h = t.hidden_at(layer, pos);
        let base = forward_from_hidden(model, t, layer, pos, &h)?;
        let moved = forward_from_hidden(model, t, layer, pos, &(&h + v * eta))?;
        acc += moved - base;
    }
    let scale = if unscaled { 1.0 } else { 1.0 / eta };
    let out = acc * (scale / traces.len() as f64);
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("bit response".into()));
    }
    Ok(out)
}

/// Responses of all `2N` bit vectors, in target order.
pub fn all_bit_responses(
    model: &ModelState,
    refs: &[FactTriplet],
    space: &BitSpace,
    layer: usize,
    eta: f64,
    unscaled: bool,
) -> Result<Vec<DVector<f64>>> {
    let traces = reference_traces(model, refs)?;
    space
        .vectors()
        .map(|v| bit_response_from_traces(model, &traces, refs, v, layer, eta, unscaled))
        .collect()
}

/// Top-`m` tokens by maximum absolute response over all vectors; ties go to the lower id.
pub fn select_sentinels(responses: &[DVector<f64>], m: usize) -> Result<SentinelSet> {
    let vocab = responses.first().map(|r| r.len()).ok_or_else(|| Error::Insufficient("no responses".into()))?;
    if responses.iter().any(|r| r.len() != vocab) {
        return Err(Error::DimensionMismatch("responses differ in width".into()));
    }
    if m > vocab {
        return Err(Error::InvalidArgument(format!("m = {m} exceeds vocabulary {vocab}")));
    }
    let mut ranked: Vec<(usize, f64)> = (0..vocab)
        .map(|t| (t, responses.iter().map(|r| r[t].abs()).fold(f64::NEG_INFINITY, f64::max)))
        .filter(|(_, s)| s.is_finite())
        .collect();
    if ranked.len() < m {
        return Err(Error::Insufficient(format!("only {} tokens have finite responses", ranked.len())));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(SentinelSet { tokens: ranked.into_iter().take(m).map(|(t, _)| t).collect() })
}

/// Responses restricted to the sentinels, one signature per bit vector.
pub fn record_signatures(responses: &[DVector<f64>], sentinels: &SentinelSet, eta: f64) -> Vec<BitSignature> {
    responses
        .iter()
        .enumerate()
        .map(|(j, r)| BitSignature { bit_index: j / 2, code: (j % 2) as u8, weights: sentinels.restrict(r), eta })
        .collect()
}

fn query_facts<Q: LogitQuery + ?Sized>(
    q: &Q,
    facts: &[FactTriplet],
    sentinels: &SentinelSet,
    mode: QueryPrompt,
) -> Result<Vec<DVector<f64>>> {
    facts
        .iter()
        .map(|f| {
            let (toks, pos) = mode.tokens(f);
            let l = q.sentinel_logits(&toks, pos, &sentinels.tokens)?;
            if l.len() != sentinels.m() || !l.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("sentinel logits".into()));
            }
            Ok(l)
        })
        .collect()
}

pub fn record_reference<Q: LogitQuery + ?Sized>(
    watermarked: &Q,
    refs: &[FactTriplet],
    sentinels: &SentinelSet,
    mode: QueryPrompt,
) -> Result<ReferenceLog> {
    Ok(ReferenceLog { rows: query_facts(watermarked, refs, sentinels, mode)? })
}

/// Mean and unbiased covariance of the paired differences `L^D_k - L^W_k`.
pub fn drift_from_differences(diffs: &[DVector<f64>]) -> Result<DriftStats> {
    let k = diffs.len();
    if k < 2 {
        return Err(Error::Insufficient(format!("drift covariance needs K >= 2, got {k}")));
    }
    let m = diffs[0].len();
    let mut mu = DVector::zeros(m);
    for d in diffs {
        mu += d;
    }
    mu /= k as f64;
    let mut sigma = DMatrix::zeros(m, m);
    for d in diffs {
        let c = d - &mu;
        sigma.ger(1.0, &c, &c, 1.0);
    }
    sigma /= (k - 1) as f64;
    Ok(DriftStats { mu, sigma, k_used: k })
}

pub fn estimate_drift<Q: LogitQuery + ?Sized>(
    deployed: &Q,
    refs: &[FactTriplet],
    sentinels: &SentinelSet,
    log: &ReferenceLog,
    mode: QueryPrompt,
) -> Result<DriftStats> {
    if log.rows.len() != refs.len() {
        return Err(Error::DimensionMismatch(format!("{} logged rows for {} references", log.rows.len(), refs.len())));
    }
    let now = query_facts(deployed, refs, sentinels, mode)?;
    let diffs: Vec<DVector<f64>> = now.iter().zip(&log.rows).map(|(d, w)| d - w).collect();
    drift_from_differences(&diffs)
}

/// Posterior sentinel weights for one signature under the observed drift.
pub fn reanchor(w_sig: &DVector<f64>, drift: &DriftStats, cfg: &ReanchorConfig) -> Result<DVector<f64>> {
    let m = w_sig.len();
    if drift.mu.len() != m || drift.sigma.shape() != (m, m) {
        return Err(Error::DimensionMismatch("drift and signature widths differ".into()));
    }
    if !(cfg.rho >= 0.0) || !(cfg.lam > 0.0) {
        return Err(Error::InvalidArgument("reanchoring needs rho >= 0 and lam > 0".into()));
    }
    let a = &drift.sigma * cfg.rho + DMatrix::identity(m, m) * cfg.lam;
    let rhs = match cfg.form {
        ReanchorForm::Centered => {
            let center = |v: &DVector<f64>| v.add_scalar(-v.mean());
            w_sig + center(&drift.mu) + center(w_sig) * cfg.lam
        }
        ReanchorForm::Shrinkage => &drift.sigma * (&drift.mu + w_sig) * cfg.rho + w_sig * cfg.lam,
    };
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).ok_or_else(|| Error::Singular("rho Sigma + lam I".into()))?,
    };
    if !sol.iter().all(|x| x.is_finite()) {
        return Err(Error::Singular("rho Sigma + lam I".into()));
    }
    Ok(sol)
}

/// Reanchored `(w_0, w_1)` pairs for every bit.
pub fn reanchor_all(signatures: &[BitSignature], drift: &DriftStats, cfg: &ReanchorConfig) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    signature_pairs(signatures)?
        .into_iter()
        .map(|(w0, w1)| Ok((reanchor(w0, drift, cfg)?, reanchor(w1, drift, cfg)?)))
        .collect()
}

/// Signatures grouped per bit without reanchoring.
pub fn raw_pairs(signatures: &[BitSignature]) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    Ok(signature_pairs(signatures)?.into_iter().map(|(a, b)| (a.clone(), b.clone())).collect())
}

fn signature_pairs(signatures: &[BitSignature]) -> Result<Vec<(&DVector<f64>, &DVector<f64>)>> {
    if signatures.len() % 2 != 0 {
        return Err(Error::DimensionMismatch("signatures come in pairs".into()));
    }
    signatures
        .chunks(2)
        .enumerate()
        .map(|(i, c)| {
            if c[0].bit_index != i || c[1].bit_index != i || c[0].code != 0 || c[1].code != 1 {
                return Err(Error::Format(format!("signature order broken at bit {i}")));
            }
            Ok((&c[0].weights, &c[1].weights))
        })
        .collect()
}

/// Sentinel logits of each anchor, one vector per anchor.
pub fn anchor_logits<Q: LogitQuery + ?Sized>(
    deployed: &Q,
    anchors: &[FactTriplet],
    sentinels: &SentinelSet,
    mode: QueryPrompt,
) -> Result<Vec<DVector<f64>>> {
    query_facts(deployed, anchors, sentinels, mode)
}

/// Scores `<L_i, w_b>` for both codes of every bit; with `center` the mean of
/// `L_i` is removed first.
pub fn decode_logits(
    logits: &[DVector<f64>],
    pairs: &[(DVector<f64>, DVector<f64>)],
    center: bool,
) -> Result<RecoveredSequence> {
    if logits.len() != pairs.len() {
        return Err(Error::DimensionMismatch(format!("{} anchors for {} signature pairs", logits.len(), pairs.len())));
    }
    let scores = logits
        .iter()
        .zip(pairs)
        .map(|(l, (w0, w1))| {
            if l.len() != w0.len() || l.len() != w1.len() {
                return Err(Error::DimensionMismatch("anchor logits and signature widths differ".into()));
            }
            let l = if center && !l.is_empty() { l.add_scalar(-l.mean()) } else { l.clone() };
            Ok((l.dot(w0), l.dot(w1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveredSequence::from_scores(scores, Mode::Black))
}

pub fn recover_black<Q: LogitQuery + ?Sized>(
    deployed: &Q,
    anchors: &[FactTriplet],
    pairs: &[(DVector<f64>, DVector<f64>)],
    sentinels: &SentinelSet,
    mode: QueryPrompt,
    center: bool,
) -> Result<RecoveredSequence> {
    decode_logits(&anchor_logits(deployed, anchors, sentinels, mode)?, pairs, center)
}

/// Everything recorded from the watermarked model before deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxArtifacts {
    pub sentinels: SentinelSet,
    pub signatures: Vec<BitSignature>,
    pub reference_log: ReferenceLog,
}

pub fn prepare_black_box(
    watermarked: &ModelState,
    refs: &[FactTriplet],
    space: &BitSpace,
    layer: usize,
    cfg: &BlackBoxConfig,
) -> Result<BlackBoxArtifacts> {
    let responses = all_bit_responses(watermarked, refs, space, layer, cfg.eta, cfg.unscaled)?;
    let sentinels = select_sentinels(&responses, cfg.m)?;
    let signatures = record_signatures(&responses, &sentinels, cfg.eta);
    let reference_log = record_reference(&Loopback::new(watermarked.clone()), refs, &sentinels, cfg.query)?;
    Ok(BlackBoxArtifacts { sentinels, signatures, reference_log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxResult {
    pub recovered: RecoveredSequence,
    pub drift: Option<DriftStats>,
    pub pairs: Vec<(DVector<f64>, DVector<f64>)>,
    pub anchor_logits: Vec<DVector<f64>>,
}

/// Drift estimation, optional reanchoring with `cfg.reanchor` and decoding,
/// all through `deployed`.
pub fn verify_black<Q: LogitQuery + ?Sized>(
    deployed: &Q,
    anchors: &[FactTriplet],
    refs: &[FactTriplet],
    art: &BlackBoxArtifacts,
    cfg: &BlackBoxConfig,
    reanchoring: bool,
) -> Result<BlackBoxResult> {
    let (pairs, drift) = if reanchoring {
        let drift = estimate_drift(deployed, refs, &art.sentinels, &art.reference_log, cfg.query)?;
        (reanchor_all(&art.signatures, &drift, &cfg.reanchor)?, Some(drift))
    } else {
        (raw_pairs(&art.signatures)?, None)
    };
    let logits = anchor_logits(deployed, anchors, &art.sentinels, cfg.query)?;
    let recovered = decode_logits(&logits, &pairs, cfg.center)?;
    Ok(BlackBoxResult { recovered, drift, pairs, anchor_logits: logits })
}
