//! The defender's secret key file.
//!
//! Every float in the file is written as `{"hex": <16-digit bit pattern>,
//! "dec": <shortest decimal>}`. Loading reads the bit pattern and rejects a
//! decimal that disagrees with it, so a round trip is exact.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::bitspace::{bits_from_string, BitSpace, BitVectorPair};
use crate::corpus::FactTriplet;
use crate::ecc::{ecc_encode, CodecSpec};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::substrate::checkpoint::write_atomic;
use crate::verify_black::{BitSignature, BlackBoxArtifacts, ReferenceLog, SentinelSet};

pub const KEY_VERSION: &str = "submark-key/1";

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBitSpace {
    pub d_l: usize,
    pub seed: u64,
    pub joint_orthogonal: bool,
    /// All `2N` vectors in hot-index order: `v0` then `v1` of each bit.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySignature {
    pub bit_index: usize,
    pub code: u8,
    pub eta: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub version: String,
    pub model_hash: String,
    pub n_bits: usize,
    pub layer_set: Vec<usize>,
    pub read_layer: usize,
    /// Message bits before error correction.
    pub payload: String,
    /// Bits actually embedded, one per anchor.
    pub embedded: String,
    pub anchors: Vec<FactTriplet>,
    pub bitspace: KeyBitSpace,
    pub sentinels: Vec<usize>,
    pub signatures: Vec<KeySignature>,
    pub reference: Vec<FactTriplet>,
    pub reference_log: Vec<Vec<f64>>,
    pub ecc: CodecSpec,
    pub config: PipelineConfig,
}

/// Secret material chosen before injection. Sealed into a [`WatermarkKey`]
/// once the watermarked model exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyDraft {
    pub version: String,
    pub n_bits: usize,
    pub payload: String,
    pub embedded: String,
    pub ecc: CodecSpec,
    pub anchors: Vec<FactTriplet>,
    pub reference: Vec<FactTriplet>,
    pub bitspace: KeyBitSpace,
    pub config: PipelineConfig,
}

impl KeyDraft {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != KEY_VERSION {
            bad.push(format!("version {:?} != {KEY_VERSION:?}", self.version));
        }
        check_payload(&mut bad, self.n_bits, &self.payload, &self.embedded, &self.ecc);
        check_facts(&mut bad, self.n_bits, &self.anchors, &self.reference);
        check_bitspace(&mut bad, self.n_bits, &self.bitspace, self.config.model.d_model);
        finish(bad)
    }

    pub fn to_json(&self) -> Result<String> {
        to_hex_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_hex_json(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn to_hex_json<T: Serialize>(value: &T) -> Result<String> {
    let v = encode_floats(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn from_hex_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let v: Value = serde_json::from_str(text)?;
    Ok(serde_json::from_value(decode_floats(v)?)?)
}

fn finish(bad: Vec<String>) -> Result<()> {
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(bad.join("; ")))
    }
}

fn check_payload(bad: &mut Vec<String>, n: usize, payload: &str, embedded: &str, ecc: &CodecSpec) {
    if n == 0 {
        bad.push("n_bits is zero".into());
    }
    match (bits_from_string(payload), bits_from_string(embedded)) {
        (Ok(p), Ok(e)) => {
            if e.len() != n {
                bad.push(format!("{} embedded bits for N = {n}", e.len()));
            }
            if ecc.embedded_len() != e.len() || ecc.payload_len() != p.len() {
                bad.push("ecc spec does not match payload and embedded lengths".into());
            } else if ecc_encode(&p, ecc).ok().as_deref() != Some(e.as_slice()) {
                bad.push("embedded bits are not the encoding of the payload".into());
            }
        }
        _ => bad.push("payload or embedded is not a 0/1 string".into()),
    }
}

fn check_facts(bad: &mut Vec<String>, n: usize, anchors: &[FactTriplet], reference: &[FactTriplet]) {
    if anchors.len() != n {
        bad.push(format!("{} anchors for N = {n}", anchors.len()));
    }
    let subjects: BTreeSet<&Vec<usize>> = anchors.iter().map(|a| &a.subject_tokens).collect();
    if subjects.len() != anchors.len() {
        bad.push("anchor subjects are not distinct".into());
    }
    if reference.iter().any(|r| subjects.contains(&r.subject_tokens)) {
        bad.push("a reference fact shares a subject with an anchor".into());
    }
    if reference.len() < 2 {
        bad.push("fewer than two reference facts".into());
    }
}

fn check_bitspace(bad: &mut Vec<String>, n: usize, bs: &KeyBitSpace, d_model: usize) {
    if bs.vectors.len() != 2 * n {
        bad.push(format!("{} bit vectors for N = {n}", bs.vectors.len()));
    }
    if bs.d_l != d_model {
        bad.push("bit vector width differs from d_model".into());
    }
    if bs.joint_orthogonal && 2 * n > bs.d_l {
        bad.push(format!("joint orthogonality needs 2N <= d_L, got 2N = {} > {}", 2 * n, bs.d_l));
    }
    if bs.vectors.iter().flatten().any(|x| !x.is_finite()) {
        bad.push("non-finite bit vector entry".into());
        return;
    }
    let vs: Vec<DVector<f64>> = bs.vectors.iter().map(|v| DVector::from_column_slice(v)).collect();
    if vs.iter().any(|v| v.len() != bs.d_l) {
        bad.push("bit vector of wrong width".into());
        return;
    }
    if vs.iter().any(|v| (v.norm() - 1.0).abs() > UNIT_TOL) {
        bad.push("bit vectors must be unit norm".into());
    }
    let orthogonal = |a: usize, b: usize| vs[a].dot(&vs[b]).abs() <= UNIT_TOL;
    if (0..vs.len() / 2).any(|i| !orthogonal(2 * i, 2 * i + 1)) {
        bad.push("bit vector pairs must be orthogonal".into());
    }
    if bs.joint_orthogonal && (0..vs.len()).any(|a| (a + 1..vs.len()).any(|b| !orthogonal(a, b))) {
        bad.push("joint-orthogonal space has non-orthogonal vectors".into());
    }
}

impl KeyBitSpace {
    pub fn from_space(space: &BitSpace) -> Self {
        Self {
            d_l: space.d_l,
            seed: space.seed,
            joint_orthogonal: space.joint_orthogonal,
            vectors: space.vectors().map(|v| v.as_slice().to_vec()).collect(),
        }
    }

    pub fn to_space(&self) -> Result<BitSpace> {
        if self.vectors.len() % 2 != 0 {
            return Err(Error::Format("odd number of bit vectors".into()));
        }
        let pairs = self
            .vectors
            .chunks(2)
            .enumerate()
            .map(|(i, c)| BitVectorPair {
                v0: DVector::from_column_slice(&c[0]),
                v1: DVector::from_column_slice(&c[1]),
                index: i,
            })
            .collect();
        Ok(BitSpace { pairs, d_l: self.d_l, seed: self.seed, joint_orthogonal: self.joint_orthogonal })
    }
}

impl WatermarkKey {
    pub fn payload_bits(&self) -> Result<Vec<u8>> {
        bits_from_string(&self.payload)
    }

    pub fn embedded_bits(&self) -> Result<Vec<u8>> {
        bits_from_string(&self.embedded)
    }

    pub fn space(&self) -> Result<BitSpace> {
        self.bitspace.to_space()
    }

    pub fn artifacts(&self) -> BlackBoxArtifacts {
        BlackBoxArtifacts {
            sentinels: SentinelSet { tokens: self.sentinels.clone() },
            signatures: self
                .signatures
                .iter()
                .map(|s| BitSignature {
                    bit_index: s.bit_index,
                    code: s.code,
                    weights: DVector::from_column_slice(&s.weights),
                    eta: s.eta,
                })
                .collect(),
            reference_log: ReferenceLog {
                rows: self.reference_log.iter().map(|r| DVector::from_column_slice(r)).collect(),
            },
        }
    }

    pub fn signatures_from(sigs: &[BitSignature]) -> Vec<KeySignature> {
        sigs.iter()
            .map(|s| KeySignature { bit_index: s.bit_index, code: s.code, eta: s.eta, weights: s.weights.as_slice().to_vec() })
            .collect()
    }

    /// Checks every cross-field invariant; all violations are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let n = self.n_bits;
        if self.version != KEY_VERSION {
            bad.push(format!("version {:?} != {KEY_VERSION:?}", self.version));
        }
        if self.model_hash.len() != 64 || !self.model_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            bad.push("model_hash is not a 64-digit hex digest".into());
        }
        if self.layer_set.is_empty() || self.layer_set.windows(2).any(|w| w[0] >= w[1]) {
            bad.push("layer_set must be non-empty and strictly increasing".into());
        } else if self.layer_set.last() != Some(&self.read_layer) {
            bad.push("read_layer must be the deepest edited layer".into());
        }
        if self.layer_set.iter().any(|&l| l >= self.config.model.n_layers) {
            bad.push("layer_set exceeds model depth".into());
        }
        check_payload(&mut bad, n, &self.payload, &self.embedded, &self.ecc);
        check_facts(&mut bad, n, &self.anchors, &self.reference);
        check_bitspace(&mut bad, n, &self.bitspace, self.config.model.d_model);
        let m = self.sentinels.len();
        if m < 2 {
            bad.push("fewer than two sentinels".into());
        }
        if self.sentinels.iter().collect::<BTreeSet<_>>().len() != m {
            bad.push("sentinel ids repeat".into());
        }
        if self.sentinels.iter().any(|&t| t >= self.config.model.vocab_size) {
            bad.push("sentinel id outside the vocabulary".into());
        }
        if self.signatures.len() != 2 * n {
            bad.push(format!("{} signatures for N = {n}", self.signatures.len()));
        }
        for (j, s) in self.signatures.iter().enumerate() {
            if s.bit_index != j / 2 || usize::from(s.code) != j % 2 {
                bad.push(format!("signature {j} out of order"));
                break;
            }
            if s.weights.len() != m {
                bad.push(format!("signature {j} has width {} for {m} sentinels", s.weights.len()));
                break;
            }
        }
        if self.reference_log.len() != self.reference.len() {
            bad.push("reference log rows do not match reference facts".into());
        }
        if self.reference_log.iter().any(|r| r.len() != m) {
            bad.push("reference log row of wrong width".into());
        }
        let finite = self
            .signatures
            .iter()
            .flat_map(|s| s.weights.iter().chain([&s.eta]))
            .chain(self.reference_log.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            bad.push("non-finite signature or reference value".into());
        }
        finish(bad)
    }

    pub fn to_json(&self) -> Result<String> {
        to_hex_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_hex_json(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Replaces every floating-point number with its `{hex, dec}` pair.
pub fn encode_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let mut m = Map::new();
            m.insert("hex".into(), Value::String(format!("{:016x}", x.to_bits())));
            m.insert("dec".into(), Value::String(n.to_string()));
            Value::Object(m)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(encode_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, encode_floats(v))).collect()),
        other => other,
    }
}

fn is_float_pair(o: &Map<String, Value>) -> bool {
    o.len() == 2 && o.get("hex").is_some_and(Value::is_string) && o.get("dec").is_some_and(Value::is_string)
}

/// Inverse of [`encode_floats`].
pub fn decode_floats(v: Value) -> Result<Value> {
    Ok(match v {
        Value::Object(o) if is_float_pair(&o) => {
            let hex = o["hex"].as_str().expect("checked");
            let dec = o["dec"].as_str().expect("checked");
            let bits = u64::from_str_radix(hex, 16).map_err(|e| Error::Format(format!("bad float hex {hex:?}: {e}")))?;
            let x = f64::from_bits(bits);
            let d: f64 = dec.parse().map_err(|_| Error::Format(format!("bad float decimal {dec:?}")))?;
            if d.to_bits() != bits {
                return Err(Error::Format(format!("float {hex} disagrees with its decimal {dec}")));
            }
            Value::Number(Number::from_f64(x).ok_or_else(|| Error::NonFinite(format!("float {hex}")))?)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(decode_floats).collect::<Result<_>>()?),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| Ok((k, decode_floats(v)?))).collect::<Result<_>>()?),
        other => other,
    })
}
