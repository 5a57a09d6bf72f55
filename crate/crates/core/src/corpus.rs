//! Synthetic subject-relation-object world, pretraining, and anchor/reference selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::forward::forward_batch;
use crate::substrate::grad::{param_loss_and_grad, GradMask, TokenNll};
use crate::substrate::{log_softmax, Adam, ModelState};

pub const SUBJECT_SPAN: usize = 2;
pub const RELATION_SPAN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriplet {
    pub subject_tokens: Vec<usize>,
    pub relation_tokens: Vec<usize>,
    pub object_token: usize,
    pub subject_last_pos: usize,
}

impl FactTriplet {
    pub fn new(subject_tokens: Vec<usize>, relation_tokens: Vec<usize>, object_token: usize) -> Self {
        let subject_last_pos = subject_tokens.len().saturating_sub(1);
        Self { subject_tokens, relation_tokens, object_token, subject_last_pos }
    }

    /// `subject ++ relation`
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = self.subject_tokens.clone();
        p.extend_from_slice(&self.relation_tokens);
        p
    }

    pub fn prompt_len(&self) -> usize {
        self.subject_tokens.len() + self.relation_tokens.len()
    }

    /// Position whose logits predict the object.
    pub fn answer_pos(&self) -> usize {
        self.prompt_len() - 1
    }

    fn key(&self) -> (&[usize], &[usize]) {
        (&self.subject_tokens, &self.relation_tokens)
    }
}

/// Token-id ranges of the world's vocabulary partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub vocab: usize,
    pub objects: (usize, usize),
    pub subjects: (usize, usize),
    pub relations: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactWorld {
    pub facts: Vec<FactTriplet>,
    pub seed: u64,
    pub layout: TokenLayout,
}

/// Builds `n_subjects * n_relations` facts. Relation `r` owns two dedicated
/// tokens; each subject is a distinct ordered pair from a pool of
/// `2 * n_subjects` tokens; objects are drawn uniformly from the rest.
pub fn generate_world(n_subjects: usize, n_relations: usize, vocab: usize, seed: u64) -> Result<FactWorld> {
    if n_subjects == 0 || n_relations == 0 {
        return Err(Error::InvalidArgument("world needs at least one subject and one relation".into()));
    }
    let rel_tokens = RELATION_SPAN * n_relations;
    let pool = (2 * n_subjects).max(SUBJECT_SPAN);
    if vocab < rel_tokens + pool + 2 {
        return Err(Error::Capacity(format!(
            "vocab {vocab} too small for {n_subjects} subjects and {n_relations} relations (need {})",
            rel_tokens + pool + 2
        )));
    }
    let relations = (vocab - rel_tokens, vocab);
    let subjects = (relations.0 - pool, relations.0);
    let objects = (0, subjects.0);
    let layout = TokenLayout { vocab, objects, subjects, relations };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut subject_list = Vec::with_capacity(n_subjects);
    while subject_list.len() < n_subjects {
        let pair = random_pair(&mut rng, subjects);
        if used.insert(pair.clone()) {
            subject_list.push(pair);
        }
    }
    let mut facts = Vec::with_capacity(n_subjects * n_relations);
    for s in &subject_list {
        for r in 0..n_relations {
            let rel: Vec<usize> = (0..RELATION_SPAN).map(|k| relations.0 + RELATION_SPAN * r + k).collect();
            let obj = rng.gen_range(objects.0..objects.1);
            facts.push(FactTriplet::new(s.clone(), rel, obj));
        }
    }
    Ok(FactWorld { facts, seed, layout })
}

fn random_pair(rng: &mut ChaCha8Rng, range: (usize, usize)) -> Vec<usize> {
    loop {
        let a = rng.gen_range(range.0..range.1);
        let b = rng.gen_range(range.0..range.1);
        if a != b {
            return vec![a, b];
        }
    }
}

impl FactWorld {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn n_relations(&self) -> usize {
        (self.layout.relations.1 - self.layout.relations.0) / RELATION_SPAN
    }

    /// True when (subject, relation) determines the object.
    pub fn is_functional(&self) -> bool {
        let mut seen = std::collections::BTreeMap::new();
        self.facts.iter().all(|f| *seen.entry(f.key()).or_insert(f.object_token) == f.object_token)
    }

    /// Facts about subjects that do not occur in the world, for fine-tuning attacks.
    pub fn fresh_facts(&self, n: usize, seed: u64) -> Result<Vec<FactTriplet>> {
        let pool = self.layout.subjects.1 - self.layout.subjects.0;
        let used: BTreeSet<Vec<usize>> = self.facts.iter().map(|f| f.subject_tokens.clone()).collect();
        let n_rel = self.n_relations();
        let needed_subjects = n.div_ceil(n_rel);
        if pool * (pool - 1) < used.len() + needed_subjects {
            return Err(Error::Insufficient(format!("cannot draw {n} fresh facts")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken = used.clone();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let pair = random_pair(&mut rng, self.layout.subjects);
            if !taken.insert(pair.clone()) {
                continue;
            }
            for r in 0..n_rel {
                if out.len() == n {
                    break;
                }
                let rel: Vec<usize> =
                    (0..RELATION_SPAN).map(|k| self.layout.relations.0 + RELATION_SPAN * r + k).collect();
                let obj = rng.gen_range(self.layout.objects.0..self.layout.objects.1);
                out.push(FactTriplet::new(pair.clone(), rel, obj));
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let l = &self.layout;
        let mut s = format!(
            "# submark-world 1\nseed {}\nvocab {}\nobjects {} {}\nsubjects {} {}\nrelations {} {}\n",
            self.seed, l.vocab, l.objects.0, l.objects.1, l.subjects.0, l.subjects.1, l.relations.0, l.relations.1
        );
        let join = |v: &[usize]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        for f in &self.facts {
            let _ = writeln!(s, "{} | {} | {}", join(&f.subject_tokens), join(&f.relation_tokens), f.object_token);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("world file: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some("# submark-world 1") {
            return Err(bad("missing header"));
        }
        let mut kv = |key: &str| -> Result<Vec<usize>> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`")));
            }
            parts.map(|p| p.parse::<usize>().map_err(|_| bad("bad number"))).collect()
        };
        let seed = *kv("seed")?.first().ok_or_else(|| bad("seed"))? as u64;
        let vocab = *kv("vocab")?.first().ok_or_else(|| bad("vocab"))?;
        let pair = |v: Vec<usize>| -> Result<(usize, usize)> {
            match v[..] {
                [a, b] => Ok((a, b)),
                _ => Err(bad("range needs two numbers")),
            }
        };
        let objects = pair(kv("objects")?)?;
        let subjects = pair(kv("subjects")?)?;
        let relations = pair(kv("relations")?)?;
        let layout = TokenLayout { vocab, objects, subjects, relations };
        let mut facts = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split('|').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad(&format!("malformed fact `{line}`")));
            }
            let toks = |s: &str| -> Result<Vec<usize>> {
                s.split_whitespace().map(|p| p.parse::<usize>().map_err(|_| bad("bad token"))).collect()
            };
            let subj = toks(parts[0])?;
            let rel = toks(parts[1])?;
            let obj = parts[2].parse::<usize>().map_err(|_| bad("bad object"))?;
            if subj.is_empty() || rel.is_empty() || obj >= vocab || subj.iter().chain(&rel).any(|&t| t >= vocab) {
                return Err(bad(&format!("fact out of range `{line}`")));
            }
            facts.push(FactTriplet::new(subj, rel, obj));
        }
        let world = FactWorld { facts, seed, layout };
        if !world.is_functional() {
            return Err(bad("contradictory facts"));
        }
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::substrate::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// P(object | prompt) for each fact.
pub fn object_probabilities(model: &ModelState, facts: &[FactTriplet]) -> Result<Vec<f64>> {
    Ok(object_log_probs(model, facts)?.into_iter().map(f64::exp).collect())
}

fn object_log_probs(model: &ModelState, facts: &[FactTriplet]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(facts.len());
    // group by prompt length so each batch is rectangular
    for chunk in facts.chunks(256) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|f| f.prompt()).collect();
        let lens: BTreeSet<usize> = prompts.iter().map(Vec::len).collect();
        if lens.len() == 1 {
            let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
            let (_, acts) = forward_batch(model, &refs)?;
            let t = prompts[0].len();
            for (s, f) in chunk.iter().enumerate() {
                let lp = log_softmax(&acts.logits.column(s * t + t - 1).into_owned());
                out.push(lp[f.object_token]);
            }
        } else {
            for (p, f) in prompts.iter().zip(chunk) {
                let (_, acts) = forward_batch(model, &[p.as_slice()])?;
                let lp = log_softmax(&acts.logits.column(p.len() - 1).into_owned());
                out.push(lp[f.object_token]);
            }
        }
    }
    Ok(out)
}

pub fn object_probability(model: &ModelState, fact: &FactTriplet) -> Result<f64> {
    Ok(object_probabilities(model, std::slice::from_ref(fact))?[0])
}

/// Fraction of facts whose object is the argmax prediction.
pub fn accuracy(model: &ModelState, facts: &[FactTriplet]) -> Result<f64> {
    if facts.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for chunk in facts.chunks(256) {
        for f in chunk {
            let p = f.prompt();
            let (_, acts) = forward_batch(model, &[p.as_slice()])?;
            let col = acts.logits.column(p.len() - 1);
            if col.argmax().0 == f.object_token {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 3e-3, batch_size: 25, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean P(o|s,r) over the world after each epoch (entry 0 is before training).
    pub mean_prob: Vec<f64>,
    pub mean_loss: Vec<f64>,
}

/// One optimiser step of object NLL on a batch of facts.
pub(crate) fn fact_batch_grad(
    model: &ModelState,
    facts: &[&FactTriplet],
    mask: &GradMask,
) -> Result<(f64, crate::substrate::Params)> {
    let prompts: Vec<Vec<usize>> = facts.iter().map(|f| f.prompt()).collect();
    let len = prompts[0].len();
    if prompts.iter().any(|p| p.len() != len) {
        return Err(Error::DimensionMismatch("fact prompts must share a length".into()));
    }
    let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    let obj = TokenNll { position: len - 1, targets: facts.iter().map(|f| f.object_token).collect() };
    param_loss_and_grad(model, &refs, &obj, mask)
}

pub fn pretrain(model: &ModelState, world: &FactWorld, epochs: usize, lr: f64) -> Result<ModelState> {
    let cfg = PretrainConfig { epochs, lr, ..Default::default() };
    Ok(pretrain_with(model, world, &cfg)?.0)
}

/// Adam on object NLL over shuffled mini-batches of the world.
pub fn pretrain_with(model: &ModelState, world: &FactWorld, cfg: &PretrainConfig) -> Result<(ModelState, PretrainReport)> {
    if world.is_empty() {
        return Err(Error::Insufficient("empty world".into()));
    }
    let mut m = model.clone();
    let mut report = PretrainReport::default();
    report.mean_prob.push(mean(&object_probabilities(&m, &world.facts)?));
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok((m, report));
    }
    let mut adam = Adam::new(&m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ world.seed.rotate_left(17));
    let mut order: Vec<usize> = (0..world.len()).collect();
    let mask = GradMask::all(m.config.n_layers);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let facts: Vec<&FactTriplet> = chunk.iter().map(|&i| &world.facts[i]).collect();
            let (loss, g) = fact_batch_grad(&m, &facts, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("pretraining diverged".into()));
            }
            adam.step(&mut m, &g, cfg.lr, None)?;
            total += loss;
            batches += 1;
        }
        report.mean_loss.push(total / batches as f64);
        report.mean_prob.push(mean(&object_probabilities(&m, &world.facts)?));
    }
    Ok((m, report))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// The `n` most confident facts with P(o|s,r) > `tau_a`, one per subject,
/// skipping subjects that occur in `exclude`. Ordered by descending
/// confidence, ties broken by fact index.
///
/// The hidden state at the last subject token does not see the relation, so
/// two anchors sharing a subject would share a carrier.
pub fn select_anchors(
    model: &ModelState,
    world: &FactWorld,
    n: usize,
    tau_a: f64,
    exclude: &[FactTriplet],
) -> Result<Vec<FactTriplet>> {
    let probs = object_probabilities(model, &world.facts)?;
    let mut used: BTreeSet<&[usize]> = exclude.iter().map(|f| f.subject_tokens.as_slice()).collect();
    let mut ranked: Vec<(usize, f64)> = probs.iter().copied().enumerate().filter(|(_, p)| *p > tau_a).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(n);
    for (i, _) in ranked {
        if out.len() == n {
            break;
        }
        let f = &world.facts[i];
        if used.insert(f.subject_tokens.as_slice()) {
            out.push(f.clone());
        }
    }
    if out.len() < n {
        return Err(Error::Insufficient(format!(
            "only {} distinct subjects have a fact with P > tau_a = {tau_a}; need {n} (enlarge the world or pretrain longer)",
            out.len()
        )));
    }
    Ok(out)
}

/// `k` facts drawn by a seeded shuffle, one per subject, avoiding every
/// subject that occurs in `exclude`.
pub fn select_reference(world: &FactWorld, k: usize, exclude: &[FactTriplet], seed: u64) -> Result<Vec<FactTriplet>> {
    let mut used: BTreeSet<&[usize]> = exclude.iter().map(|f| f.subject_tokens.as_slice()).collect();
    let mut pool: Vec<&FactTriplet> = world.facts.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut out = Vec::with_capacity(k);
    for f in pool {
        if out.len() == k {
            break;
        }
        if used.insert(f.subject_tokens.as_slice()) {
            out.push(f.clone());
        }
    }
    if out.len() < k {
        return Err(Error::Insufficient(format!("{} subjects available for reference, need {k}", out.len())));
    }
    Ok(out)
}

/// Random prompts from the world, used to estimate key covariance.
pub fn sample_prompts(world: &FactWorld, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| world.facts[rng.gen_range(0..world.len())].prompt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::ModelConfig;

    #[test]
    fn single_fact_world() {
        let w = generate_world(1, 1, 16, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.facts[0].prompt_len(), 4);
        assert_eq!(w.facts[0].subject_last_pos, 1);
    }

    #[test]
    fn world_is_seed_deterministic() {
        assert_eq!(generate_world(5, 3, 64, 9).unwrap(), generate_world(5, 3, 64, 9).unwrap());
        assert_ne!(generate_world(5, 3, 64, 9).unwrap(), generate_world(5, 3, 64, 10).unwrap());
    }

    #[test]
    fn world_of_400_is_functional_by_exhaustive_scan() {
        let w = generate_world(40, 10, 512, 1).unwrap();
        assert_eq!(w.len(), 400);
        for (i, a) in w.facts.iter().enumerate() {
            for b in &w.facts[i + 1..] {
                assert!(a.subject_tokens != b.subject_tokens || a.relation_tokens != b.relation_tokens);
            }
            assert!(a.object_token < w.layout.objects.1);
        }
        assert!(w.is_functional());
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        assert!(matches!(generate_world(10, 10, 30, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn text_round_trip() {
        let w = generate_world(6, 2, 64, 3).unwrap();
        assert_eq!(FactWorld::from_text(&w.to_text()).unwrap(), w);
        assert!(FactWorld::from_text("garbage").is_err());
    }

    #[test]
    fn fresh_facts_avoid_world_subjects() {
        let w = generate_world(10, 4, 128, 3).unwrap();
        let fresh = w.fresh_facts(20, 5).unwrap();
        assert_eq!(fresh.len(), 20);
        let subj: BTreeSet<_> = w.facts.iter().map(|f| f.subject_tokens.clone()).collect();
        assert!(fresh.iter().all(|f| !subj.contains(&f.subject_tokens)));
    }

    fn tiny_model() -> ModelState {
        ModelState::new(ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq: 4, seed: 2 })
            .unwrap()
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_model_unchanged() {
        let m = tiny_model();
        let w = generate_world(3, 2, 32, 0).unwrap();
        assert_eq!(pretrain(&m, &w, 0, 1e-2).unwrap(), m);
        assert_eq!(pretrain(&m, &w, 3, 0.0).unwrap(), m);
    }

    #[test]
    fn pretraining_raises_mean_probability() {
        let m = tiny_model();
        let w = generate_world(3, 2, 32, 0).unwrap();
        let cfg = PretrainConfig { epochs: 40, lr: 1e-2, batch_size: 3, seed: 0 };
        let (_, rep) = pretrain_with(&m, &w, &cfg).unwrap();
        assert!(rep.mean_prob.last().unwrap() > &0.9, "{:?}", rep.mean_prob);
    }

    #[test]
    fn anchor_threshold_and_order() {
        let m = tiny_model();
        let w = generate_world(3, 2, 32, 0).unwrap();
        let cfg = PretrainConfig { epochs: 40, lr: 1e-2, batch_size: 3, seed: 0 };
        let (m, _) = pretrain_with(&m, &w, &cfg).unwrap();
        let probs = object_probabilities(&m, &w.facts).unwrap();
        let anchors = select_anchors(&m, &w, 3, 0.5, &[]).unwrap();
        let subjects: BTreeSet<_> = anchors.iter().map(|f| &f.subject_tokens).collect();
        assert_eq!(subjects.len(), 3);
        let ap = object_probabilities(&m, &anchors).unwrap();
        assert!(ap.windows(2).all(|p| p[0] >= p[1]));
        assert!(ap.iter().all(|&p| p > 0.5));
        // a threshold above every probability rejects everything
        let top = probs.iter().cloned().fold(0.0, f64::max);
        assert!(matches!(select_anchors(&m, &w, 1, top, &[]), Err(Error::Insufficient(_))));
        // every subject is excluded
        assert!(select_anchors(&m, &w, 1, 0.0, &anchors).is_err());
        let rest = select_anchors(&m, &w, 1, 0.0, &anchors[..2]).unwrap();
        assert_eq!(rest[0].subject_tokens, anchors[2].subject_tokens);
    }

    #[test]
    fn reference_is_disjoint_and_deterministic() {
        let w = generate_world(128, 4, 512, 1).unwrap();
        let anchors: Vec<_> = w.facts.iter().step_by(4).take(64).cloned().collect();
        assert!(select_reference(&w, 0, &anchors, 0).unwrap().is_empty());
        let r = select_reference(&w, 32, &anchors, 4).unwrap();
        assert_eq!(r.len(), 32);
        assert!(r.iter().all(|f| !anchors.contains(f)));
        let anchor_subjects: BTreeSet<_> = anchors.iter().map(|f| &f.subject_tokens).collect();
        assert!(r.iter().all(|f| !anchor_subjects.contains(&f.subject_tokens)));
        assert_eq!(r, select_reference(&w, 32, &anchors, 4).unwrap());
        assert!(select_reference(&w, 65, &anchors, 4).is_err());
    }
}
