//! Model-modification attacks used to produce "deployed" models.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{accuracy, fact_batch_grad, FactTriplet};
use crate::error::{Error, Result};
use crate::substrate::forward::forward_batch;
use crate::substrate::grad::{param_loss_and_grad, GradMask};
use crate::substrate::{softmax, Adam, DistillKl, ModelState, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Sft,
    Peft,
    Distill,
    Quant,
    Merge,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Self::Sft),
            "peft" => Ok(Self::Peft),
            "distill" => Ok(Self::Distill),
            "quant" => Ok(Self::Quant),
            "merge" => Ok(Self::Merge),
            _ => Err(Error::InvalidArgument(format!("unknown attack kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sft => "sft",
            Self::Peft => "peft",
            Self::Distill => "distill",
            Self::Quant => "quant",
            Self::Merge => "merge",
        })
    }
}

/// Layers targeted by the default attacker.
pub const DEFAULT_ATTACK_LAYERS: [usize; 6] = [5, 6, 7, 8, 9, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// `None` trains every parameter.
    pub layer_filter: Option<Vec<usize>>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub n_bits: u32,
    pub alpha: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            layer_filter: Some(DEFAULT_ATTACK_LAYERS.to_vec()),
            steps: 500,
            lr: if kind == AttackKind::Peft { 3e-3 } else { 1e-3 },
            batch_size: 16,
            rank: 4,
            n_bits: 8,
            alpha: 0.7,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(2..=16).contains(&self.n_bits) {
            return Err(Error::InvalidConfig(format!("n_bits {} outside [2, 16]", self.n_bits)));
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("lr must be non-negative and batch_size positive".into()));
        }
        Ok(())
    }

    /// The configured layers that exist in an `n_layers` model. A filter
    /// that keeps none of them is an error.
    pub fn layers(&self, n_layers: usize) -> Result<Option<BTreeSet<usize>>> {
        match &self.layer_filter {
            None => Ok(None),
            Some(f) => {
                let kept: BTreeSet<usize> = f.iter().copied().filter(|&l| l < n_layers).collect();
                if kept.is_empty() {
                    return Err(Error::InvalidConfig(format!("layer filter {f:?} selects no layer of a {n_layers}-layer model")));
                }
                Ok(Some(kept))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: Option<AttackKind>,
    pub layers: Option<Vec<usize>>,
    pub loss_curve: Vec<f64>,
    /// Accuracy on the attack data, for training attacks.
    pub data_accuracy: Option<f64>,
    /// Gate verdict: did the attack take effect.
    pub gate_passed: bool,
    pub gate: String,
}

fn minibatches(n: usize, batch: usize, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    while out.len() < steps {
        if order.len() < batch.min(n) {
            let mut fresh: Vec<usize> = (0..n).collect();
            fresh.shuffle(rng);
            order.extend(fresh);
        }
        out.push(order.drain(..batch.min(n)).collect());
    }
    out
}

fn check_data(data: &[FactTriplet]) -> Result<usize> {
    let len = data.first().ok_or_else(|| Error::Insufficient("attack data is empty".into()))?.prompt_len();
    if data.iter().any(|f| f.prompt_len() != len) {
        return Err(Error::DimensionMismatch("attack facts must share a prompt length".into()));
    }
    Ok(len)
}

/// Adam on object NLL over `data`, restricted to the configured layers.
pub fn attack_sft(model: &ModelState, data: &[FactTriplet], cfg: &AttackConfig) -> Result<(ModelState, AttackReport)> {
    cfg.validate()?;
    check_data(data)?;
    let mut m = model.clone();
    let layers = cfg.layers(m.config.n_layers)?;
    let mask = GradMask::from_filter(m.config.n_layers, layers.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&m.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    if cfg.lr > 0.0 {
        for batch in minibatches(data.len(), cfg.batch_size, cfg.steps, &mut rng) {
            let facts: Vec<&FactTriplet> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, g) = fact_batch_grad(&m, &facts, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("fine-tuning diverged".into()));
            }
            adam.step(&mut m, &g, cfg.lr, layers.as_ref())?;
            curve.push(loss);
        }
    }
    let acc = accuracy(&m, data)?;
    let report = AttackReport {
        kind: Some(cfg.kind),
        layers: layers.map(|l| l.into_iter().collect()),
        loss_curve: curve,
        data_accuracy: Some(acc),
        gate_passed: acc >= SFT_GATE,
        gate: format!("attack-data accuracy {acc:.3} >= {SFT_GATE}"),
    };
    Ok((m, report))
}

pub const SFT_GATE: f64 = 0.8;

/// Low-rank adapters `W_out + B A` on the configured layers; only `A` and `B` train.
pub fn attack_peft(model: &ModelState, data: &[FactTriplet], cfg: &AttackConfig) -> Result<(ModelState, AttackReport)> {
    cfg.validate()?;
    check_data(data)?;
    let c = &model.config;
    if cfg.rank > c.d_model.min(c.d_ff) {
        return Err(Error::InvalidConfig(format!("rank {} exceeds min(d_model, d_ff)", cfg.rank)));
    }
    let layers: Vec<usize> = match cfg.layers(c.n_layers)? {
        Some(l) => l.into_iter().collect(),
        None => (0..c.n_layers).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1.0 / (c.d_ff as f64).sqrt()).expect("valid normal");
    let mut a: Vec<DMatrix<f64>> =
        layers.iter().map(|_| DMatrix::from_fn(cfg.rank, c.d_ff, |_, _| init.sample(&mut rng))).collect();
    let mut b: Vec<DMatrix<f64>> = layers.iter().map(|_| DMatrix::zeros(c.d_model, cfg.rank)).collect();
    let base: Vec<DMatrix<f64>> = layers.iter().map(|&l| model.params.blocks[l].w_out.clone()).collect();
    let filter: BTreeSet<usize> = layers.iter().copied().collect();
    let mask = GradMask::from_filter(c.n_layers, Some(&filter));
    let mut opt_a = AdamMatrices::new(&a);
    let mut opt_b = AdamMatrices::new(&b);
    let mut m = model.clone();
    let mut curve = Vec::with_capacity(cfg.steps);
    if cfg.lr > 0.0 {
        for batch in minibatches(data.len(), cfg.batch_size, cfg.steps, &mut rng) {
            for (j, &l) in layers.iter().enumerate() {
                m.params.blocks[l].w_out = &base[j] + &b[j] * &a[j];
            }
            let facts: Vec<&FactTriplet> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, g) = fact_batch_grad(&m, &facts, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("adapter training diverged".into()));
            }
            let ga: Vec<DMatrix<f64>> =
                layers.iter().enumerate().map(|(j, &l)| b[j].transpose() * &g.blocks[l].w_out).collect();
            let gb: Vec<DMatrix<f64>> =
                layers.iter().enumerate().map(|(j, &l)| &g.blocks[l].w_out * a[j].transpose()).collect();
            opt_a.step(&mut a, &ga, cfg.lr);
            opt_b.step(&mut b, &gb, cfg.lr);
            curve.push(loss);
        }
    }
    let mut out = model.clone();
    for (j, &l) in layers.iter().enumerate() {
        out.params.blocks[l].w_out = fold_adapter(&base[j], &b[j], &a[j]);
    }
    let acc = accuracy(&out, data)?;
    let report = AttackReport {
        kind: Some(cfg.kind),
        layers: Some(layers),
        loss_curve: curve,
        data_accuracy: Some(acc),
        gate_passed: acc >= SFT_GATE,
        gate: format!("attack-data accuracy {acc:.3} >= {SFT_GATE}"),
    };
    Ok((out, report))
}

/// `W + B A`.
pub fn fold_adapter(w: &DMatrix<f64>, b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    w + b * a
}

struct AdamMatrices {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl AdamMatrices {
    fn new(like: &[DMatrix<f64>]) -> Self {
        let z: Vec<DMatrix<f64>> = like.iter().map(|x| DMatrix::zeros(x.nrows(), x.ncols())).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], lr: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - f64::powi(b1, self.t);
        let c2 = 1.0 - f64::powi(b2, self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Adam on `KL(teacher || student)` over every position of `prompts`.
pub fn attack_distill(
    student: &ModelState,
    teacher: &ModelState,
    prompts: &[Vec<usize>],
    cfg: &AttackConfig,
) -> Result<(ModelState, AttackReport)> {
    cfg.validate()?;
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(Error::DimensionMismatch("student and teacher vocabularies differ".into()));
    }
    let len = prompts.first().ok_or_else(|| Error::Insufficient("no distillation prompts".into()))?.len();
    if prompts.iter().any(|p| p.len() != len) {
        return Err(Error::DimensionMismatch("distillation prompts must share a length".into()));
    }
    let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    let (_, tacts) = forward_batch(teacher, &refs)?;
    let tprobs = column_softmax(&tacts.logits);
    let mut m = student.clone();
    let layers = cfg.layers(m.config.n_layers)?;
    let mask = GradMask::from_filter(m.config.n_layers, layers.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&m.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let positions: Vec<usize> = (0..len).collect();
    if cfg.lr > 0.0 {
        for batch in minibatches(prompts.len(), cfg.batch_size, cfg.steps, &mut rng) {
            let mut t = DMatrix::zeros(tprobs.nrows(), batch.len() * len);
            for (s, &i) in batch.iter().enumerate() {
                t.columns_mut(s * len, len).copy_from(&tprobs.columns(i * len, len));
            }
            let b: Vec<&[usize]> = batch.iter().map(|&i| refs[i]).collect();
            let obj = DistillKl { teacher: t, positions: positions.clone() };
            let (loss, g) = param_loss_and_grad(&m, &b, &obj, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("distillation diverged".into()));
            }
            adam.step(&mut m, &g, cfg.lr, layers.as_ref())?;
            curve.push(loss);
        }
    }
    let before = mean_kl(student, &tprobs, &refs)?;
    let after = mean_kl(&m, &tprobs, &refs)?;
    let report = AttackReport {
        kind: Some(cfg.kind),
        layers: layers.map(|l| l.into_iter().collect()),
        loss_curve: curve,
        data_accuracy: None,
        gate_passed: cfg.steps == 0 || after < before,
        gate: format!("mean KL to teacher {before:.4} -> {after:.4}"),
    };
    Ok((m, report))
}

fn column_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<_> = logits.column_iter().map(|c| softmax(&c.into_owned())).collect();
    DMatrix::from_columns(&cols)
}

/// Mean KL(teacher || model) over every prompt position.
pub fn mean_kl(model: &ModelState, teacher_probs: &DMatrix<f64>, prompts: &[&[usize]]) -> Result<f64> {
    let len = prompts[0].len();
    let obj = DistillKl { teacher: teacher_probs.clone(), positions: (0..len).collect() };
    let (_, acts) = forward_batch(model, prompts)?;
    Ok(obj.logits_term(&acts.logits, len)?.0)
}

/// Symmetric per-tensor fake quantisation with round-half-away-from-zero.
pub fn quantize_tensor(w: &DMatrix<f64>, n_bits: u32) -> DMatrix<f64> {
    let s = w.amax();
    if s == 0.0 {
        return w.clone();
    }
    let levels = f64::from((1u32 << (n_bits - 1)) - 1);
    w.map(|x| (x / s * levels).round() * s / levels)
}

pub fn attack_quantize(model: &ModelState, cfg: &AttackConfig) -> Result<(ModelState, AttackReport)> {
    cfg.validate()?;
    let mut m = model.clone();
    m.params.visit_mut(|t| *t.tensor = quantize_tensor(t.tensor, cfg.n_bits));
    let changed = m != *model;
    let report = AttackReport {
        kind: Some(cfg.kind),
        gate_passed: true,
        gate: format!("{}-bit grid, parameters changed: {changed}", cfg.n_bits),
        ..Default::default()
    };
    Ok((m, report))
}

/// `alpha * a + (1 - alpha) * b`, parameter-wise.
pub fn attack_merge(a: &ModelState, b: &ModelState, cfg: &AttackConfig) -> Result<(ModelState, AttackReport)> {
    cfg.validate()?;
    if a.config.vocab_size != b.config.vocab_size
        || a.config.d_model != b.config.d_model
        || a.config.n_layers != b.config.n_layers
        || a.config.n_heads != b.config.n_heads
        || a.config.d_ff != b.config.d_ff
        || a.config.max_seq != b.config.max_seq
    {
        return Err(Error::DimensionMismatch("merge partners have different architectures".into()));
    }
    let alpha = cfg.alpha;
    let mut m = a.clone();
    m.params.zip_mut(&b.params, |_, x, y| {
        if alpha != 1.0 {
            x.zip_apply(y, |xi, yi| *xi = alpha * *xi + (1.0 - alpha) * yi);
        }
    });
    let report = AttackReport {
        kind: Some(cfg.kind),
        gate_passed: true,
        gate: format!("alpha = {alpha}"),
        ..Default::default()
    };
    Ok((m, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_world;
    use crate::substrate::ModelConfig;

    fn small(seed: u64) -> ModelState {
        ModelState::new(ModelConfig { vocab_size: 40, d_model: 16, n_layers: 3, n_heads: 2, d_ff: 24, max_seq: 4, seed })
            .unwrap()
    }

    #[test]
    fn quantize_hand_example() {
        let w = DMatrix::from_row_slice(1, 3, &[1.0, -0.5, 0.25]);
        let q = quantize_tensor(&w, 8);
        assert_eq!(q[0], 1.0);
        assert!((q[1] - (-64.0 / 127.0)).abs() < 1e-15);
        assert!((q[2] - 32.0 / 127.0).abs() < 1e-15);
        assert!((q[1] + 0.503_937_007_874).abs() < 1e-11);
        assert_eq!(quantize_tensor(&DMatrix::zeros(2, 2), 8), DMatrix::zeros(2, 2));
    }

    #[test]
    fn quantize_is_idempotent() {
        let m = small(1);
        let cfg = AttackConfig::new(AttackKind::Quant);
        let (q1, _) = attack_quantize(&m, &cfg).unwrap();
        let (q2, _) = attack_quantize(&q1, &cfg).unwrap();
        for (a, b) in q1.params.named().iter().zip(q2.params.named().iter()) {
            assert!((a.tensor - b.tensor).amax() < 1e-12, "{}", a.name);
        }
    }

    #[test]
    fn merge_cases() {
        let a = small(1);
        let b = small(2);
        let mut cfg = AttackConfig::new(AttackKind::Merge);
        cfg.alpha = 1.0;
        assert_eq!(attack_merge(&a, &b, &cfg).unwrap().0, a);
        cfg.alpha = 0.7;
        let (m, _) = attack_merge(&a, &b, &cfg).unwrap();
        let want = 0.7 * a.params.head[(0, 0)] + 0.3 * b.params.head[(0, 0)];
        assert_eq!(m.params.head[(0, 0)], want);
        let (same, _) = attack_merge(&a, &a, &cfg).unwrap();
        for (x, y) in same.params.named().iter().zip(a.params.named().iter()) {
            assert!((x.tensor - y.tensor).amax() < 1e-15);
        }
        cfg.alpha = 1.5;
        assert!(attack_merge(&a, &b, &cfg).is_err());
    }

    #[test]
    fn filter_without_existing_layers_is_rejected() {
        let m = small(3);
        let w = generate_world(4, 2, 40, 0).unwrap();
        let cfg = AttackConfig::new(AttackKind::Sft);
        assert!(matches!(attack_sft(&m, &w.facts, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_step_training_attacks_are_identity() {
        let m = small(3);
        let w = generate_world(4, 2, 40, 0).unwrap();
        for kind in [AttackKind::Sft, AttackKind::Peft] {
            let mut cfg = AttackConfig::new(kind);
            cfg.layer_filter = Some(vec![1, 2]);
            cfg.steps = 0;
            let out = match kind {
                AttackKind::Sft => attack_sft(&m, &w.facts, &cfg).unwrap().0,
                _ => attack_peft(&m, &w.facts, &cfg).unwrap().0,
            };
            assert_eq!(out, m, "{kind:?}");
        }
        let mut cfg = AttackConfig::new(AttackKind::Distill);
        cfg.layer_filter = None;
        cfg.steps = 0;
        let prompts: Vec<Vec<usize>> = w.facts.iter().map(|f| f.prompt()).collect();
        assert_eq!(attack_distill(&m, &small(4), &prompts, &cfg).unwrap().0, m);
        let mut cfg = AttackConfig::new(AttackKind::Peft);
        cfg.rank = 0;
        cfg.layer_filter = Some(vec![1, 2]);
        cfg.lr = 1e-2;
        cfg.steps = 5;
        assert_eq!(attack_peft(&m, &w.facts, &cfg).unwrap().0, m);
    }

    #[test]
    fn self_distillation_is_a_fixed_point() {
        let m = small(5);
        let w = generate_world(4, 2, 40, 0).unwrap();
        let prompts: Vec<Vec<usize>> = w.facts.iter().map(|f| f.prompt()).collect();
        let mut cfg = AttackConfig::new(AttackKind::Distill);
        cfg.steps = 20;
        cfg.layer_filter = None;
        let (out, _) = attack_distill(&m, &m, &prompts, &cfg).unwrap();
        for (a, b) in out.params.named().iter().zip(m.params.named().iter()) {
            assert!((a.tensor - b.tensor).amax() < 1e-6, "{}", a.name);
        }
    }

    #[test]
    fn peft_touches_only_w_out_of_filtered_layers() {
        let m = small(6);
        let w = generate_world(4, 2, 40, 0).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Peft);
        cfg.layer_filter = Some(vec![2]);
        cfg.steps = 10;
        cfg.rank = 2;
        cfg.lr = 1e-2;
        let (out, _) = attack_peft(&m, &w.facts, &cfg).unwrap();
        for (a, b) in out.params.named().iter().zip(m.params.named().iter()) {
            if a.name == "layers.2.mlp.w_out" {
                assert_ne!(a.tensor, b.tensor);
            } else {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }

    #[test]
    fn default_layers_are_clipped_to_the_model() {
        let cfg = AttackConfig::new(AttackKind::Sft);
        assert_eq!(cfg.layers(8).unwrap().unwrap().into_iter().collect::<Vec<_>>(), vec![5, 6, 7]);
    }
}
