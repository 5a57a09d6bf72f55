//! Payload embedding: per-anchor offset optimisation followed by a closed-form
//! least-squares edit of the MLP output projection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bitspace::{cosines, hot_index, one_hot_target, BitSpace, WatermarkPayload};
use crate::corpus::{object_probabilities, FactTriplet};
use crate::error::{Error, Result};
use crate::substrate::forward::forward_batch;
use crate::substrate::{softmax, ModelConfig, ModelState, Objective, OffsetProblem, TokenNll};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    /// Edited layers, shallow to deep. The last entry is the read-out layer.
    pub layer_set: Vec<usize>,
    pub lambda_kl: f64,
    pub lambda_mse: f64,
    pub opt_steps: usize,
    pub opt_lr: f64,
    /// `None` selects `1e4 / (mean key norm)^2` per layer.
    pub cov_lambda: Option<f64>,
    pub cov_samples: usize,
    pub cov_seed: u64,
    /// Per-layer divisor of the offset. `None` selects the number of
    /// remaining layers (deepest = 1).
    pub layer_scale: Option<BTreeMap<usize, f64>>,
    /// Mean post-injection anchor object probability must stay above this
    /// fraction of the mean before injection.
    pub preserve_ratio: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self::for_model(ModelConfig::default().n_layers)
    }
}

impl InjectionConfig {
    pub fn for_model(n_layers: usize) -> Self {
        Self {
            layer_set: (n_layers.saturating_sub(3)..n_layers).collect(),
            lambda_kl: 1.0,
            lambda_mse: 1.0,
            opt_steps: 200,
            opt_lr: 10.0,
            cov_lambda: None,
            cov_samples: 200,
            cov_seed: 0,
            layer_scale: None,
            preserve_ratio: 0.5,
        }
    }

    pub fn read_layer(&self) -> Result<usize> {
        self.layer_set.last().copied().ok_or_else(|| Error::InvalidConfig("empty layer_set".into()))
    }

    pub fn scales(&self) -> Result<BTreeMap<usize, f64>> {
        let n = self.layer_set.len();
        let scales: BTreeMap<usize, f64> = match &self.layer_scale {
            Some(s) => self.layer_set.iter().map(|l| (*l, s.get(l).copied().unwrap_or(f64::NAN))).collect(),
            None => self.layer_set.iter().enumerate().map(|(i, &l)| (l, (n - i) as f64)).collect(),
        };
        Ok(scales)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layer_set.is_empty() {
            return bad("empty layer_set".into());
        }
        if self.layer_set.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layer_set must be strictly increasing".into());
        }
        if let Some(&l) = self.layer_set.iter().find(|&&l| l >= n_layers) {
            return bad(format!("layer {l} outside a {n_layers}-layer model"));
        }
        if self.lambda_kl < 0.0 || self.lambda_mse < 0.0 || self.opt_lr < 0.0 {
            return bad("weights and step size must be non-negative".into());
        }
        if let Some(c) = self.cov_lambda {
            if !(c >= 0.0) {
                return bad("cov_lambda must be non-negative".into());
            }
        }
        if self.cov_samples == 0 {
            return bad("cov_samples must be positive".into());
        }
        let scales = self.scales()?;
        let ordered: Vec<f64> = self.layer_set.iter().map(|l| scales[l]).collect();
        if ordered.iter().any(|s| !(*s >= 1.0)) {
            return bad("layer scales must be >= 1".into());
        }
        if ordered.windows(2).any(|w| w[1] > w[0]) {
            return bad("layer scales must not increase with depth".into());
        }
        if *ordered.last().expect("non-empty") != 1.0 {
            return bad("the deepest layer must have scale 1".into());
        }
        Ok(())
    }
}

/// Object NLL under the patched hidden state plus the cosine-profile alignment terms.
pub struct AlignmentObjective<'a> {
    pub nll: TokenNll,
    pub target: DVector<f64>,
    pub space: &'a BitSpace,
    pub lambda_kl: f64,
    pub lambda_mse: f64,
}

impl AlignmentObjective<'_> {
    /// Alignment loss and its gradient w.r.t. the patched hidden state.
    pub fn alignment(&self, h: &DVector<f64>) -> (f64, DVector<f64>) {
        let c = cosines(h, self.space).expect("validated width");
        let p = softmax(&c);
        let y = &self.target;
        let hot = y.argmax().0;
        let kl = -p[hot].ln();
        let diff = &p - y;
        let mse = diff.norm_squared();
        let loss = self.lambda_kl * kl + self.lambda_mse * mse;

        let g = &diff * 2.0;
        let gp = g.dot(&p);
        let dc = &diff * self.lambda_kl + p.component_mul(&g.add_scalar(-gp)) * self.lambda_mse;

        let hn = h.norm();
        let mut grad = DVector::zeros(h.len());
        for (k, v) in self.space.vectors().enumerate() {
            grad.axpy(dc[k] / hn, v, 1.0);
        }
        grad.axpy(-dc.dot(&c) / (hn * hn), h, 1.0);
        (loss, grad)
    }
}

impl Objective for AlignmentObjective<'_> {
    fn logits_term(&self, logits: &DMatrix<f64>, seq_len: usize) -> Result<(f64, Option<DMatrix<f64>>)> {
        self.nll.logits_term(logits, seq_len)
    }

    fn offset_term(&self, patched: &DVector<f64>, _offset: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        if self.lambda_kl == 0.0 && self.lambda_mse == 0.0 {
            return (0.0, None);
        }
        let (l, g) = self.alignment(patched);
        (l, Some(g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetResult {
    pub anchor_index: usize,
    pub delta: Vec<f64>,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub aligned_index: usize,
    pub hot_index: usize,
    /// P(o|s,r) before and with the offset applied.
    pub prob_before: f64,
    pub prob_with_offset: f64,
}

impl OffsetResult {
    pub fn aligned(&self) -> bool {
        self.aligned_index == self.hot_index
    }

    pub fn delta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.delta)
    }
}

/// Plain gradient descent on the alignment objective from a zero offset.
/// `anchor_index` is 0-based; the bit it carries is `bit`.
pub fn optimize_offset(
    model: &ModelState,
    anchor: &FactTriplet,
    anchor_index: usize,
    bit: u8,
    space: &BitSpace,
    cfg: &InjectionConfig,
) -> Result<OffsetResult> {
    let n = space.n_bits();
    let target = one_hot_target(anchor_index + 1, bit, n)?;
    let layer = cfg.read_layer()?;
    let tokens = anchor.prompt();
    let problem = OffsetProblem::new(model, &tokens, layer, anchor.subject_last_pos)?;
    if problem.base_hidden().len() != space.d_l {
        return Err(Error::DimensionMismatch(format!("bit space width {} != d_model", space.d_l)));
    }
    let obj = AlignmentObjective {
        nll: TokenNll { position: anchor.answer_pos(), targets: vec![anchor.object_token] },
        target,
        space,
        lambda_kl: cfg.lambda_kl,
        lambda_mse: cfg.lambda_mse,
    };
    let mut delta = DVector::zeros(space.d_l);
    let mut curve = Vec::with_capacity(cfg.opt_steps + 1);
    for _ in 0..cfg.opt_steps {
        let (loss, g) = problem.loss_and_grad(&obj, &delta)?;
        curve.push(loss);
        delta.axpy(-cfg.opt_lr, &g, 1.0);
    }
    let (final_loss, _) = problem.loss_and_grad(&obj, &delta)?;
    curve.push(final_loss);
    if !delta.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!("offset for anchor {anchor_index}")));
    }
    let h = problem.base_hidden() + &delta;
    let aligned_index = cosines(&h, space)?.argmax().0;
    let prob = |logits: DMatrix<f64>| softmax(&logits.column(anchor.answer_pos()).into_owned())[anchor.object_token];
    let prob_before = prob(problem.trace().logits.clone());
    let prob_with_offset = prob(problem.logits(&delta)?);
    Ok(OffsetResult {
        anchor_index,
        delta: delta.as_slice().to_vec(),
        final_loss,
        loss_curve: curve,
        aligned_index,
        hot_index: hot_index(anchor_index + 1, bit),
        prob_before,
        prob_with_offset,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub n_samples: usize,
    pub cov_lambda: f64,
}

/// MLP keys (d_ff x B*T) at `layer` for equal-length prompts.
pub fn layer_keys(model: &ModelState, prompts: &[Vec<usize>], layer: usize) -> Result<DMatrix<f64>> {
    if layer >= model.config.n_layers {
        return Err(Error::IndexOutOfRange(format!("layer {layer}")));
    }
    let mut cols: Vec<DMatrix<f64>> = Vec::new();
    let mut by_len: BTreeMap<usize, Vec<&[usize]>> = BTreeMap::new();
    for p in prompts {
        by_len.entry(p.len()).or_default().push(p);
    }
    for batch in by_len.values() {
        let (_, acts) = forward_batch(model, batch)?;
        cols.push(acts.blocks[layer].key.clone());
    }
    let total: usize = cols.iter().map(|c| c.ncols()).sum();
    let mut out = DMatrix::zeros(model.config.d_ff, total);
    let mut j = 0;
    for c in cols {
        out.columns_mut(j, c.ncols()).copy_from(&c);
        j += c.ncols();
    }
    Ok(out)
}

/// `cov_lambda * mean(k k^T)` over every position of every sample.
/// `cov_lambda = None` picks `1e4 / (mean key norm)^2`.
pub fn estimate_covariance(
    model: &ModelState,
    samples: &[Vec<usize>],
    layer: usize,
    cov_lambda: Option<f64>,
) -> Result<CovarianceEstimate> {
    if samples.is_empty() {
        return Err(Error::Insufficient("covariance needs at least one sample".into()));
    }
    let keys = layer_keys(model, samples, layer)?;
    covariance_from_keys(&keys, cov_lambda)
}

pub fn covariance_from_keys(keys: &DMatrix<f64>, cov_lambda: Option<f64>) -> Result<CovarianceEstimate> {
    let n = keys.ncols();
    if n == 0 {
        return Err(Error::Insufficient("covariance needs at least one key".into()));
    }
    let lambda = match cov_lambda {
        Some(l) => l,
        None => {
            let mean_norm = keys.column_iter().map(|c| c.norm()).sum::<f64>() / n as f64;
            if mean_norm == 0.0 {
                return Err(Error::Singular("all keys are zero".into()));
            }
            1e4 / (mean_norm * mean_norm)
        }
    };
    let mut m = keys * keys.transpose() * (lambda / n as f64);
    // exact symmetry regardless of summation order
    let t = m.transpose();
    m = (&m + &t) * 0.5;
    Ok(CovarianceEstimate { matrix: m, n_samples: n, cov_lambda: lambda })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdate {
    pub layer: usize,
    pub delta_w: DMatrix<f64>,
    /// `|Delta A - B|_F` for the solved system `Delta A = B`.
    pub residual: f64,
    /// `|B|_F`, the residual's natural scale.
    pub rhs_norm: f64,
}

/// `Delta = (sum delta_i k_i^T)(C_p + sum k_i k_i^T)^{-1}`, by a dense solve.
/// Columns of `keys` and `deltas` are paired.
pub fn solve_update(keys: &DMatrix<f64>, deltas: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, f64)> {
    let d_ff = cov.nrows();
    if cov.ncols() != d_ff || keys.nrows() != d_ff {
        return Err(Error::DimensionMismatch("key width and covariance disagree".into()));
    }
    if keys.ncols() != deltas.ncols() {
        return Err(Error::DimensionMismatch(format!("{} keys but {} offsets", keys.ncols(), deltas.ncols())));
    }
    let d_model = deltas.nrows();
    if keys.ncols() == 0 {
        return Ok((DMatrix::zeros(d_model, d_ff), 0.0, 0.0));
    }
    let a = cov + keys * keys.transpose();
    let b = deltas * keys.transpose();
    // Delta A = B  <=>  A Delta^T = B^T, A symmetric
    let bt = b.transpose();
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&bt),
        None => a.clone().lu().solve(&bt).ok_or_else(|| Error::Singular("C_p + K K^T".into()))?,
    };
    let delta = sol.transpose();
    if !delta.iter().all(|x| x.is_finite()) {
        return Err(Error::Singular("C_p + K K^T".into()));
    }
    let residual = (&delta * &a - &b).norm();
    let rhs = b.norm();
    if residual > 1e-8 * rhs.max(1.0) {
        return Err(Error::Singular(format!("solve residual {residual:e} exceeds tolerance")));
    }
    Ok((delta, residual, rhs))
}

/// [`solve_update`] with the ridge fallback `C_p + eps I` on a singular system.
pub fn solve_update_with_fallback(
    keys: &DMatrix<f64>,
    deltas: &DMatrix<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64, f64, bool)> {
    match solve_update(keys, deltas, cov) {
        Ok((d, r, b)) => Ok((d, r, b, false)),
        Err(Error::Singular(_)) => {
            let ridge = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * RIDGE_EPS;
            let (d, r, b) = solve_update(keys, deltas, &ridge)?;
            Ok((d, r, b, true))
        }
        Err(e) => Err(e),
    }
}

pub const RIDGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub scale: f64,
    pub cov_lambda: f64,
    pub residual: f64,
    pub rhs_norm: f64,
    pub update_norm: f64,
    pub ridge_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub offsets: Vec<OffsetResult>,
    pub layers: Vec<LayerReport>,
    pub prob_before: Vec<f64>,
    pub prob_after: Vec<f64>,
    pub n_aligned: usize,
    /// Anchors whose own probability fell below `preserve_ratio` of the
    /// original. Informational; the abort looks at the mean.
    pub lost_predictions: Vec<usize>,
}

impl InjectionReport {
    pub fn mean_prob_before(&self) -> f64 {
        mean(&self.prob_before)
    }

    pub fn mean_prob_after(&self) -> f64 {
        mean(&self.prob_after)
    }

    pub fn preserved(&self, ratio: f64) -> bool {
        self.mean_prob_after() >= ratio * self.mean_prob_before()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Optimises every anchor's offset against the unedited model.
pub fn optimize_offsets(
    model: &ModelState,
    anchors: &[FactTriplet],
    payload: &WatermarkPayload,
    space: &BitSpace,
    cfg: &InjectionConfig,
) -> Result<Vec<OffsetResult>> {
    anchors
        .iter()
        .zip(&payload.bits)
        .enumerate()
        .map(|(i, (a, &b))| optimize_offset(model, a, i, b, space, cfg))
        .collect()
}

/// Folds precomputed offsets into `W_out` of every layer in the set, shallow to
/// deep, recomputing keys under the partially edited model.
pub fn apply_offsets(
    model: &ModelState,
    anchors: &[FactTriplet],
    offsets: &[OffsetResult],
    cov_prompts: &[Vec<usize>],
    cfg: &InjectionConfig,
) -> Result<(ModelState, Vec<LayerReport>)> {
    cfg.validate(model.config.n_layers)?;
    let scales = cfg.scales()?;
    let mut m = model.clone();
    let mut reports = Vec::new();
    for &layer in &cfg.layer_set {
        let scale = scales[&layer];
        let cov = estimate_covariance(&m, cov_prompts, layer, cfg.cov_lambda)?;
        let (keys, deltas) = anchor_system(&m, anchors, offsets, layer, scale)?;
        let (dw, residual, rhs_norm, ridge) = solve_update_with_fallback(&keys, &deltas, &cov.matrix)?;
        m.params.blocks[layer].w_out += &dw;
        reports.push(LayerReport {
            layer,
            scale,
            cov_lambda: cov.cov_lambda,
            residual,
            rhs_norm,
            update_norm: dw.norm(),
            ridge_fallback: ridge,
        });
    }
    Ok((m, reports))
}

fn anchor_system(
    model: &ModelState,
    anchors: &[FactTriplet],
    offsets: &[OffsetResult],
    layer: usize,
    scale: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let c = &model.config;
    let mut keys = DMatrix::zeros(c.d_ff, anchors.len());
    let mut deltas = DMatrix::zeros(c.d_model, anchors.len());
    for (i, (a, off)) in anchors.iter().zip(offsets).enumerate() {
        let p = a.prompt();
        let (_, acts) = forward_batch(model, &[p.as_slice()])?;
        keys.set_column(i, &acts.blocks[layer].key.column(a.subject_last_pos));
        deltas.set_column(i, &(off.delta_vec() / scale));
    }
    Ok((keys, deltas))
}

/// Full injection. `cov_prompts` are the public-style prompts whose keys
/// estimate the preserved-knowledge covariance. Non-aligned anchors are
/// reported, not fatal; a collapse of the mean anchor probability aborts with
/// [`Error::PredictionLost`].
pub fn inject(
    model: &ModelState,
    anchors: &[FactTriplet],
    payload: &WatermarkPayload,
    space: &BitSpace,
    cov_prompts: &[Vec<usize>],
    cfg: &InjectionConfig,
) -> Result<(ModelState, InjectionReport)> {
    let (m, report) = inject_unchecked(model, anchors, payload, space, cov_prompts, cfg)?;
    if !report.preserved(cfg.preserve_ratio) {
        return Err(Error::PredictionLost(format!(
            "mean anchor probability {:.4} fell below {} of {:.4}\n{}",
            report.mean_prob_after(),
            cfg.preserve_ratio,
            report.mean_prob_before(),
            report.to_json()
        )));
    }
    Ok((m, report))
}

/// Injection without the prediction-preservation abort.
pub fn inject_unchecked(
    model: &ModelState,
    anchors: &[FactTriplet],
    payload: &WatermarkPayload,
    space: &BitSpace,
    cov_prompts: &[Vec<usize>],
    cfg: &InjectionConfig,
) -> Result<(ModelState, InjectionReport)> {
    cfg.validate(model.config.n_layers)?;
    if anchors.len() != payload.len() || anchors.len() != space.n_bits() {
        return Err(Error::DimensionMismatch(format!(
            "{} anchors, {} payload bits, {} bit pairs",
            anchors.len(),
            payload.len(),
            space.n_bits()
        )));
    }
    let prob_before = object_probabilities(model, anchors)?;
    let offsets = optimize_offsets(model, anchors, payload, space, cfg)?;
    let (m, layers) = apply_offsets(model, anchors, &offsets, cov_prompts, cfg)?;
    let prob_after = object_probabilities(&m, anchors)?;
    let lost_predictions = prob_before
        .iter()
        .zip(&prob_after)
        .enumerate()
        .filter(|(_, (b, a))| **a < cfg.preserve_ratio * **b)
        .map(|(i, _)| i)
        .collect();
    let n_aligned = offsets.iter().filter(|o| o.aligned()).count();
    Ok((m, InjectionReport { offsets, layers, prob_before, prob_after, n_aligned, lost_predictions }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitspace::build_bitspace;
    use crate::substrate::ModelConfig;

    fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        // row-reduced [A | B] with partial pivoting
        let n = a.nrows();
        let mut m = DMatrix::zeros(n, n + b.ncols());
        m.columns_mut(0, n).copy_from(a);
        m.columns_mut(n, b.ncols()).copy_from(b);
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs())).unwrap();
            m.swap_rows(col, piv);
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)] / m[(col, col)];
                    for c in 0..m.ncols() {
                        m[(r, c)] -= f * m[(col, c)];
                    }
                }
            }
        }
        DMatrix::from_fn(n, b.ncols(), |i, j| m[(i, n + j)] / m[(i, i)])
    }

    #[test]
    fn empty_system_gives_zero_update() {
        let (d, r, _) = solve_update(&DMatrix::zeros(4, 0), &DMatrix::zeros(3, 0), &DMatrix::identity(4, 4)).unwrap();
        assert_eq!(d, DMatrix::zeros(3, 4));
        assert_eq!(r, 0.0);
    }

    #[test]
    fn rank_one_identity_covariance() {
        let mut k = DMatrix::zeros(3, 1);
        k[(0, 0)] = 1.0;
        let d = DMatrix::from_column_slice(2, 1, &[2.0, -4.0]);
        let (dw, _, _) = solve_update(&k, &d, &DMatrix::identity(3, 3)).unwrap();
        let want = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
        assert!((dw - want).norm() < 1e-15);
    }

    #[test]
    fn random_system_matches_elimination() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let keys = DMatrix::from_fn(32, 8, |_, _| rng.gen_range(-1.0..1.0));
        let deltas = DMatrix::from_fn(16, 8, |_, _| rng.gen_range(-1.0..1.0));
        let s = DMatrix::from_fn(32, 64, |_, _| rng.gen_range(-1.0..1.0));
        let cov = &s * s.transpose() * 0.1;
        let (dw, residual, rhs) = solve_update(&keys, &deltas, &cov).unwrap();
        assert!(residual < 1e-8 * rhs.max(1.0));
        let a = &cov + &keys * keys.transpose();
        let want = gauss_solve(&a, &(&deltas * keys.transpose()).transpose()).transpose();
        assert!((dw - want).norm() < 1e-8);
    }

    #[test]
    fn singular_system_is_signalled_and_ridge_recovers() {
        let keys = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let deltas = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let cov = DMatrix::zeros(3, 3);
        assert!(matches!(solve_update(&keys, &deltas, &cov), Err(Error::Singular(_))));
        let (_, _, _, ridge) = solve_update_with_fallback(&keys, &deltas, &cov).unwrap();
        assert!(ridge);
    }

    #[test]
    fn covariance_cases() {
        let k = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let c = covariance_from_keys(&k, Some(2.0)).unwrap();
        assert!((c.matrix - &k * k.transpose() * 2.0).norm() < 1e-15);
        let c = covariance_from_keys(&k, Some(0.0)).unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(3, 3));
        assert!(covariance_from_keys(&DMatrix::zeros(3, 0), None).is_err());
    }

    #[test]
    fn covariance_from_prompts_is_symmetric_psd() {
        let m = small();
        let prompts: Vec<Vec<usize>> = (0..100).map(|i| vec![i % 30, (i * 7) % 30, (i * 3) % 30, 1]).collect();
        let c = estimate_covariance(&m, &prompts, 1, None).unwrap();
        assert_eq!(c.n_samples, 400);
        assert!((&c.matrix - c.matrix.transpose()).norm() < 1e-9);
        let eig = c.matrix.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-8);
    }

    fn small() -> ModelState {
        ModelState::new(ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, max_seq: 4, seed: 1 })
            .unwrap()
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let space = build_bitspace(3, 16, 2, true).unwrap();
        let obj = AlignmentObjective {
            nll: TokenNll { position: 3, targets: vec![0] },
            target: one_hot_target(2, 1, 3).unwrap(),
            space: &space,
            lambda_kl: 0.7,
            lambda_mse: 1.3,
        };
        let h = DVector::from_fn(16, |i, _| (i as f64 * 0.37).sin());
        let (_, g) = obj.alignment(&h);
        for i in 0..16 {
            let mut e = DVector::zeros(16);
            e[i] = 1e-5;
            let fd = (obj.alignment(&(&h + &e)).0 - obj.alignment(&(&h - &e)).0) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-7 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = InjectionConfig::for_model(8);
        c.validate(8).unwrap();
        assert_eq!(c.scales().unwrap()[&7], 1.0);
        c.layer_set = vec![5, 6, 7];
        let s = c.scales().unwrap();
        assert_eq!((s[&5], s[&6], s[&7]), (3.0, 2.0, 1.0));
        c.validate(8).unwrap();
        c.layer_scale = Some([(5, 1.0), (6, 2.0), (7, 1.0)].into());
        assert!(c.validate(8).is_err());
        c.layer_scale = None;
        c.layer_set = vec![7, 5];
        assert!(c.validate(8).is_err());
        c.layer_set = vec![8];
        assert!(c.validate(8).is_err());
    }
}
