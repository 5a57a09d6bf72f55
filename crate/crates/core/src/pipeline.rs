//! End-to-end orchestration: pretraining, watermark injection, key assembly,
//! verification against a key, and the lineage comparison pool.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_distill, attack_merge, attack_peft, attack_quantize, attack_sft, AttackConfig, AttackKind, AttackReport, DEFAULT_ATTACK_LAYERS};
use crate::bitspace::{bits_from_string, bits_to_string, build_bitspace, WatermarkPayload};
use crate::corpus::{
    accuracy, generate_world, object_probabilities, pretrain_with, sample_prompts, select_anchors, select_reference,
    FactTriplet, FactWorld, PretrainConfig,
};
use crate::ecc::{ecc_decode, ecc_encode, CodecSpec, Scheme};
use crate::error::{Error, Result, StageExt};
use crate::injection::{inject, InjectionConfig, InjectionReport, LayerReport};
use crate::key::{KeyBitSpace, KeyDraft, WatermarkKey, KEY_VERSION};
use crate::metrics::{auc, ber, is_owned, lineage_score_bits, md, pauc, Label, ScoreSample, DEFAULT_FPR_MAX, DEFAULT_TAU};
use crate::substrate::{model_hash, ModelConfig, ModelState};
use crate::verify_black::{prepare_black_box, verify_black, BlackBoxConfig, LogitQuery, Loopback};
use crate::verify_white::{recover_white, Mode, RecoveredSequence};

/// Environment variable that overrides the master seed of every command.
pub const SEED_ENV: &str = "SUBMARK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_subjects: 128, n_relations: 4 }
    }
}

/// One JSON document drives a whole run. Every sub-seed is derived from
/// `seed` by [`PipelineConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub n_bits: usize,
    /// `None` picks joint orthogonality whenever `2N <= d_model`.
    pub joint_orthogonal: Option<bool>,
    pub anchor_threshold: f64,
    pub n_reference: usize,
    /// Message bits; `None` draws them from the seed.
    pub payload: Option<String>,
    pub ecc: Scheme,
    pub injection: InjectionConfig,
    pub black_box: BlackBoxConfig,
    /// Layers the simulated attacker may modify; `None` allows every parameter.
    pub attack_layers: Option<Vec<usize>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let injection = InjectionConfig::for_model(model.n_layers);
        Self {
            seed: 0,
            model,
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            n_bits: 64,
            joint_orthogonal: None,
            anchor_threshold: 0.9,
            n_reference: 32,
            payload: None,
            ecc: Scheme::None,
            injection,
            black_box: BlackBoxConfig::default(),
            attack_layers: Some(DEFAULT_ATTACK_LAYERS.to_vec()),
        }
    }
}

/// Named sub-streams of the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    World = 1,
    Init = 2,
    Pretrain = 3,
    BitSpace = 4,
    Payload = 5,
    Reference = 6,
    Covariance = 7,
    Attack = 8,
    Independent = 9,
}

/// SplitMix64 finaliser over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineConfig {
    /// Parses a config document. A missing `injection.layer_set` follows the
    /// configured depth rather than the default model's.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let has_layers = value.pointer("/injection/layer_set").is_some();
        let mut cfg: Self = serde_json::from_value(value)?;
        if !has_layers {
            cfg.injection.layer_set = InjectionConfig::for_model(cfg.model.n_layers).layer_set;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Copy with every nested seed overwritten from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = derive_seed(self.seed, Stream::Init, 0);
        c.pretrain.seed = derive_seed(self.seed, Stream::Pretrain, 0);
        c.injection.cov_seed = derive_seed(self.seed, Stream::Covariance, 0);
        c
    }

    pub fn world_seed(&self) -> u64 {
        derive_seed(self.seed, Stream::World, 0)
    }

    pub fn joint(&self) -> bool {
        self.joint_orthogonal.unwrap_or(2 * self.n_bits <= self.model.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.injection.validate(self.model.n_layers)?;
        if self.n_bits == 0 {
            return Err(Error::InvalidConfig("n_bits must be positive".into()));
        }
        if self.joint() && 2 * self.n_bits > self.model.d_model {
            return Err(Error::Capacity(format!(
                "joint orthogonality needs 2N <= d_L, got 2N = {} and d_L = {}",
                2 * self.n_bits,
                self.model.d_model
            )));
        }
        let spec = CodecSpec::for_embedded(self.ecc, self.n_bits)?;
        if let Some(p) = &self.payload {
            let bits = bits_from_string(p)?;
            if bits.len() != spec.payload_len() {
                return Err(Error::InvalidConfig(format!(
                    "payload has {} bits; N = {} with {} carries {}",
                    bits.len(),
                    self.n_bits,
                    self.ecc,
                    spec.payload_len()
                )));
            }
        }
        if self.n_reference < 2 {
            return Err(Error::InvalidConfig("n_reference must be at least 2".into()));
        }
        Ok(())
    }

    /// Message bits and their embedded encoding.
    pub fn payload_bits(&self) -> Result<(Vec<u8>, Vec<u8>, CodecSpec)> {
        let spec = CodecSpec::for_embedded(self.ecc, self.n_bits)?;
        let message = match &self.payload {
            Some(p) => bits_from_string(p)?,
            None => WatermarkPayload::random(spec.payload_len(), derive_seed(self.seed, Stream::Payload, 0)).bits,
        };
        let embedded = ecc_encode(&message, &spec)?;
        Ok((message, embedded, spec))
    }
}

/// The pretrained, un-watermarked starting point.
#[derive(Debug, Clone)]
pub struct Base {
    pub world: FactWorld,
    pub model: ModelState,
    pub mean_prob: Vec<f64>,
}

impl Base {
    pub fn confident_fraction(&self, tau: f64) -> Result<f64> {
        let p = object_probabilities(&self.model, &self.world.facts)?;
        Ok(p.iter().filter(|&&x| x > tau).count() as f64 / p.len() as f64)
    }
}

pub fn build_world(cfg: &PipelineConfig) -> Result<FactWorld> {
    generate_world(cfg.world.n_subjects, cfg.world.n_relations, cfg.model.vocab_size, cfg.world_seed())
}

/// Generates the world and pretrains a fresh model on it.
pub fn build_base(cfg: &PipelineConfig) -> Result<Base> {
    let cfg = cfg.resolved();
    cfg.validate().stage("config")?;
    let world = build_world(&cfg).stage("world")?;
    let init = ModelState::new(cfg.model.clone()).stage("init")?;
    let (model, report) = pretrain_with(&init, &world, &cfg.pretrain).stage("pretrain")?;
    Ok(Base { world, model, mean_prob: report.mean_prob })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub n_bits: usize,
    pub joint_orthogonal: bool,
    pub ecc: Scheme,
    pub pretrain_mean_prob: f64,
    pub confident_fraction: f64,
    pub n_aligned: usize,
    pub anchor_prob_before: f64,
    pub anchor_prob_after: f64,
    pub lost_predictions: Vec<usize>,
    pub layers: Vec<LayerReport>,
    pub held_out_accuracy_before: f64,
    pub held_out_accuracy_after: f64,
    pub white_ber: f64,
    pub black_ber: f64,
    pub model_hash: String,
}

#[derive(Debug, Clone)]
pub struct Watermarked {
    pub model: ModelState,
    pub key: WatermarkKey,
    pub report: PipelineReport,
}

/// Facts of the world that are not anchors.
pub fn held_out(world: &FactWorld, anchors: &[FactTriplet]) -> Vec<FactTriplet> {
    let a: BTreeSet<&FactTriplet> = anchors.iter().collect();
    world.facts.iter().filter(|f| !a.contains(f)).cloned().collect()
}

/// Draws the secret material for `cfg` against a pretrained base: payload,
/// anchors, reference facts and the bit space.
pub fn keygen(base_model: &ModelState, world: &FactWorld, cfg: &PipelineConfig) -> Result<KeyDraft> {
    let cfg = cfg.resolved();
    cfg.validate().stage("config")?;
    if base_model.config.d_model != cfg.model.d_model || base_model.config.n_layers != cfg.model.n_layers {
        return Err(Error::DimensionMismatch("base model does not match the configured architecture".into())).stage("keygen");
    }
    let (message, embedded, spec) = cfg.payload_bits().stage("payload")?;
    let anchors = select_anchors(base_model, world, cfg.n_bits, cfg.anchor_threshold, &[]).stage("select")?;
    let reference = select_reference(world, cfg.n_reference, &anchors, derive_seed(cfg.seed, Stream::Reference, 0))
        .stage("select")?;
    let space = build_bitspace(cfg.n_bits, cfg.model.d_model, derive_seed(cfg.seed, Stream::BitSpace, 0), cfg.joint())
        .stage("bitspace")?;
    let draft = KeyDraft {
        version: KEY_VERSION.into(),
        n_bits: cfg.n_bits,
        payload: bits_to_string(&message),
        embedded: bits_to_string(&embedded),
        ecc: spec,
        anchors,
        reference,
        bitspace: KeyBitSpace::from_space(&space),
        config: cfg,
    };
    draft.validate().stage("keygen")?;
    Ok(draft)
}

/// Embeds the draft's payload into `base_model`.
pub fn inject_draft(base_model: &ModelState, world: &FactWorld, draft: &KeyDraft) -> Result<(ModelState, InjectionReport)> {
    draft.validate().stage("inject")?;
    let cfg = &draft.config;
    let space = draft.bitspace.to_space().stage("inject")?;
    let cov_prompts = sample_prompts(world, cfg.injection.cov_samples, cfg.injection.cov_seed);
    let payload = WatermarkPayload::from_bit_string(&draft.embedded).stage("inject")?;
    inject(base_model, &draft.anchors, &payload, &space, &cov_prompts, &cfg.injection).stage("inject")
}

/// Records sentinels, signatures and reference logits on the watermarked
/// model and seals the key with the model's hash.
pub fn finalize_key(watermarked: &ModelState, draft: &KeyDraft) -> Result<WatermarkKey> {
    draft.validate().stage("signatures")?;
    let cfg = &draft.config;
    let layer = cfg.injection.read_layer()?;
    let space = draft.bitspace.to_space()?;
    let art = prepare_black_box(watermarked, &draft.reference, &space, layer, &cfg.black_box).stage("signatures")?;
    let key = WatermarkKey {
        version: KEY_VERSION.into(),
        model_hash: model_hash(watermarked),
        n_bits: draft.n_bits,
        layer_set: cfg.injection.layer_set.clone(),
        read_layer: layer,
        payload: draft.payload.clone(),
        embedded: draft.embedded.clone(),
        anchors: draft.anchors.clone(),
        bitspace: draft.bitspace.clone(),
        sentinels: art.sentinels.tokens.clone(),
        signatures: WatermarkKey::signatures_from(&art.signatures),
        reference: draft.reference.clone(),
        reference_log: art.reference_log.rows.iter().map(|r| r.as_slice().to_vec()).collect(),
        ecc: draft.ecc,
        config: cfg.clone(),
    };
    key.validate().stage("signatures")?;
    Ok(key)
}

/// Keygen, injection and signature recording on top of a pretrained base,
/// followed by a clean self-check in both modes.
pub fn watermark(base: &Base, cfg: &PipelineConfig) -> Result<Watermarked> {
    let draft = keygen(&base.model, &base.world, cfg)?;
    let (model, inj) = inject_draft(&base.model, &base.world, &draft)?;
    let key = finalize_key(&model, &draft)?;
    let held = held_out(&base.world, &key.anchors);
    let white = verify_white_key(&model, &key).stage("self-check")?;
    let black = verify_black_key(&Loopback::new(model.clone()), &key, true).stage("self-check")?;
    let report = PipelineReport {
        seed: key.config.seed,
        n_bits: key.n_bits,
        joint_orthogonal: key.bitspace.joint_orthogonal,
        ecc: key.ecc.scheme,
        pretrain_mean_prob: *base.mean_prob.last().unwrap_or(&f64::NAN),
        confident_fraction: base.confident_fraction(0.9)?,
        n_aligned: inj.n_aligned,
        anchor_prob_before: inj.mean_prob_before(),
        anchor_prob_after: inj.mean_prob_after(),
        lost_predictions: inj.lost_predictions.clone(),
        layers: inj.layers.clone(),
        held_out_accuracy_before: accuracy(&base.model, &held)?,
        held_out_accuracy_after: accuracy(&model, &held)?,
        white_ber: white.ber,
        black_ber: black.ber,
        model_hash: key.model_hash.clone(),
    };
    Ok(Watermarked { model, key, report })
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Base, Watermarked)> {
    let base = build_base(cfg)?;
    let wm = watermark(&base, cfg)?;
    Ok((base, wm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub k_used: usize,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub mu_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub mode: Mode,
    pub recovered: String,
    pub registered: String,
    pub ber: f64,
    pub tau: f64,
    pub owned: bool,
    pub verdict: String,
    /// `s1 - s0` per bit.
    pub margins: Vec<f64>,
    pub reanchored: bool,
    pub drift: Option<DriftSummary>,
    pub decoded_payload: Option<String>,
    pub corrected: Option<usize>,
    pub payload_ber: Option<f64>,
}

impl VerifyReport {
    fn build(seq: &RecoveredSequence, key: &WatermarkKey, reanchored: bool, drift: Option<DriftSummary>) -> Result<Self> {
        let registered = key.embedded_bits()?;
        let rate = ber(&seq.bits, &registered)?;
        let owned = is_owned(rate, DEFAULT_TAU);
        let (decoded_payload, corrected, payload_ber) = if key.ecc.scheme == Scheme::None {
            (None, None, None)
        } else {
            let (msg, fixed) = ecc_decode(&seq.bits, &key.ecc)?;
            let pb = ber(&msg, &key.payload_bits()?)?;
            (Some(bits_to_string(&msg)), Some(fixed), Some(pb))
        };
        Ok(Self {
            mode: seq.mode,
            recovered: seq.bit_string(),
            registered: bits_to_string(&registered),
            ber: rate,
            tau: DEFAULT_TAU,
            owned,
            verdict: if owned { "OWNED" } else { "NOT-OWNED" }.into(),
            margins: seq.scores.iter().map(|(s0, s1)| s1 - s0).collect(),
            reanchored,
            drift,
            decoded_payload,
            corrected,
            payload_ber,
        })
    }

    pub fn recovered_bits(&self) -> Result<Vec<u8>> {
        bits_from_string(&self.recovered)
    }
}

pub fn verify_white_key(model: &ModelState, key: &WatermarkKey) -> Result<VerifyReport> {
    if model.config.d_model != key.bitspace.d_l || key.read_layer >= model.config.n_layers {
        return Err(Error::DimensionMismatch("model does not match the key's layer or width".into()));
    }
    let seq = recover_white(model, &key.anchors, &key.space()?, key.read_layer)?;
    VerifyReport::build(&seq, key, false, None)
}

/// Black-box verification through `deployed` only.
pub fn verify_black_key<Q: LogitQuery + ?Sized>(deployed: &Q, key: &WatermarkKey, reanchor: bool) -> Result<VerifyReport> {
    let art = key.artifacts();
    let res = verify_black(deployed, &key.anchors, &key.reference, &art, &key.config.black_box, reanchor)?;
    let drift = res.drift.as_ref().map(|d| DriftSummary {
        k_used: d.k_used,
        mu: d.mu.as_slice().to_vec(),
        sigma_diag: d.sigma.diagonal().as_slice().to_vec(),
        mu_norm: d.mu.norm(),
    });
    VerifyReport::build(&res.recovered, key, reanchor, drift)
}

/// Attack data disjoint from every existing subject, derived from the seed.
pub fn attack_data(world: &FactWorld, n: usize, seed: u64) -> Result<Vec<FactTriplet>> {
    world.fresh_facts(n, derive_seed(seed, Stream::Attack, 0))
}

/// Number of new facts the default fine-tuning attacks train on.
pub const ATTACK_FACTS: usize = 100;

/// Runs one attack of `kind` against `model`. Distillation and merging use
/// an SFT-attacked clone as teacher and partner.
pub fn run_attack(
    model: &ModelState,
    world: &FactWorld,
    kind: AttackKind,
    seed: u64,
    tweak: impl Fn(&mut AttackConfig),
) -> Result<(ModelState, AttackReport)> {
    let data = attack_data(world, ATTACK_FACTS, seed)?;
    let mut cfg = AttackConfig::new(kind);
    cfg.seed = seed;
    tweak(&mut cfg);
    let sft_clone = || {
        let mut c = AttackConfig::new(AttackKind::Sft);
        c.seed = seed;
        c.steps = cfg.steps;
        c.lr = cfg.lr;
        c.layer_filter = cfg.layer_filter.clone();
        attack_sft(model, &data, &c).map(|r| r.0)
    };
    match kind {
        AttackKind::Sft => attack_sft(model, &data, &cfg),
        AttackKind::Peft => attack_peft(model, &data, &cfg),
        AttackKind::Quant => attack_quantize(model, &cfg),
        AttackKind::Merge => attack_merge(model, &sft_clone()?, &cfg),
        AttackKind::Distill => {
            let teacher = sft_clone()?;
            let mut prompts: Vec<Vec<usize>> = data.iter().map(FactTriplet::prompt).collect();
            prompts.extend(sample_prompts(world, ATTACK_FACTS, derive_seed(seed, Stream::Attack, 1)));
            attack_distill(model, &teacher, &prompts, &cfg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub name: String,
    pub label: Label,
    pub white_score: f64,
    pub black_score: f64,
    pub white_ber: f64,
    pub black_ber: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationMetrics {
    pub auc: f64,
    pub pauc: f64,
    pub fpr_max: f64,
    pub md: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageReport {
    pub entries: Vec<PoolEntry>,
    pub white: SeparationMetrics,
    pub black: SeparationMetrics,
}

fn separation(entries: &[PoolEntry], pick: impl Fn(&PoolEntry) -> f64) -> Result<SeparationMetrics> {
    let samples = entries.iter().map(|e| ScoreSample::new(e.label, pick(e))).collect::<Result<Vec<_>>>()?;
    Ok(SeparationMetrics {
        auc: auc(&samples)?,
        pauc: pauc(&samples, DEFAULT_FPR_MAX)?,
        fpr_max: DEFAULT_FPR_MAX,
        md: md(&samples)?,
    })
}

/// Scores one suspect model in both modes against the key.
pub fn score_model(name: &str, label: Label, model: &ModelState, key: &WatermarkKey) -> Result<PoolEntry> {
    let registered = key.embedded_bits()?;
    let w = verify_white_key(model, key)?;
    let b = verify_black_key(&Loopback::new(model.clone()), key, true)?;
    Ok(PoolEntry {
        name: name.into(),
        label,
        white_score: lineage_score_bits(&w.recovered_bits()?, &registered)?,
        black_score: lineage_score_bits(&b.recovered_bits()?, &registered)?,
        white_ber: w.ber,
        black_ber: b.ber,
    })
}

/// The six attacked derivatives of the lineage pool.
pub fn derivative_pool(model: &ModelState, world: &FactWorld, cfg: &PipelineConfig) -> Result<Vec<(String, ModelState)>> {
    let seed = cfg.seed;
    let mut out = Vec::new();
    let plan: [(&str, AttackKind, u64); 6] = [
        ("sft", AttackKind::Sft, 0),
        ("sft-b", AttackKind::Sft, 1),
        ("peft", AttackKind::Peft, 0),
        ("distill", AttackKind::Distill, 0),
        ("quant", AttackKind::Quant, 0),
        ("merge", AttackKind::Merge, 0),
    ];
    for (name, kind, j) in plan {
        let (m, _) = run_attack(model, world, kind, derive_seed(seed, Stream::Attack, 10 + j), |c| {
            c.layer_filter = cfg.attack_layers.clone()
        }).stage("attack")?;
        out.push((name.to_string(), m));
    }
    Ok(out)
}

/// Models pretrained on the same world from independent initialisations.
pub fn independent_pool(cfg: &PipelineConfig, world: &FactWorld, n: usize) -> Result<Vec<(String, ModelState)>> {
    let cfg = cfg.resolved();
    (0..n as u64)
        .map(|j| {
            let mut mc = cfg.model.clone();
            mc.seed = derive_seed(cfg.seed, Stream::Independent, j);
            let mut pc = cfg.pretrain.clone();
            pc.seed = derive_seed(cfg.seed, Stream::Independent, 1000 + j);
            let init = ModelState::new(mc)?;
            let (m, _) = pretrain_with(&init, world, &pc).stage("pretrain")?;
            Ok((format!("independent-{j}"), m))
        })
        .collect()
}

pub fn eval_lineage(
    key: &WatermarkKey,
    derivatives: &[(String, ModelState)],
    independents: &[(String, ModelState)],
) -> Result<LineageReport> {
    let mut entries = Vec::new();
    for (name, m) in derivatives {
        entries.push(score_model(name, Label::Derivative, m, key)?);
    }
    for (name, m) in independents {
        entries.push(score_model(name, Label::Independent, m, key)?);
    }
    Ok(LineageReport {
        white: separation(&entries, |e| e.white_score)?,
        black: separation(&entries, |e| e.black_score)?,
        entries,
    })
}
