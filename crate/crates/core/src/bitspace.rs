//! Secret bit-vector geometry.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::softmax;

const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BitVectorPair {
    pub v0: DVector<f64>,
    pub v1: DVector<f64>,
    pub index: usize,
}

impl BitVectorPair {
    pub fn get(&self, bit: u8) -> &DVector<f64> {
        if bit == 0 {
            &self.v0
        } else {
            &self.v1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitSpace {
    pub pairs: Vec<BitVectorPair>,
    pub d_l: usize,
    pub seed: u64,
    pub joint_orthogonal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkPayload {
    pub bits: Vec<u8>,
}

impl WatermarkPayload {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("bit value {b}")));
        }
        Ok(Self { bits })
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { bits: (0..n).map(|_| rng.gen_range(0..=1u8)).collect() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_bit_string(&self) -> String {
        bits_to_string(&self.bits)
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        Ok(Self { bits: bits_from_string(s)? })
    }
}

pub fn bits_to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

pub fn bits_from_string(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Format(format!("bit string contains `{c}`"))),
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Removes the components along `basis` (assumed orthonormal) and normalises.
/// `None` when the remainder is numerically degenerate.
fn orthonormalize(mut n: DVector<f64>, basis: &[&DVector<f64>]) -> Option<DVector<f64>> {
    let scale = n.norm();
    // two passes keep the result orthogonal to 1e-15 even for long bases
    for _ in 0..2 {
        for b in basis {
            let c = n.dot(b);
            n.axpy(-c, b, 1.0);
        }
    }
    let r = n.norm();
    (scale > 0.0 && r > DEGENERATE_NORM * scale).then(|| n / r)
}

/// Gram-Schmidt on a given pair of raw draws.
pub fn gram_schmidt_pair(n0: &DVector<f64>, n1: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if n0.len() != n1.len() {
        return Err(Error::DimensionMismatch("pair widths differ".into()));
    }
    let v0 = orthonormalize(n0.clone(), &[]).ok_or_else(|| Error::InvalidArgument("zero first vector".into()))?;
    let v1 = orthonormalize(n1.clone(), &[&v0])
        .ok_or_else(|| Error::InvalidArgument("second vector parallel to the first".into()))?;
    Ok((v0, v1))
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn sample_pair(d_l: usize, seed: u64) -> Result<BitVectorPair> {
    sample_pair_indexed(d_l, seed, 0)
}

fn sample_pair_indexed(d_l: usize, seed: u64, index: usize) -> Result<BitVectorPair> {
    if d_l < 2 {
        return Err(Error::InvalidArgument(format!("d_L = {d_l} < 2")));
    }
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let n0 = gaussian(&mut rng, d_l);
        let n1 = gaussian(&mut rng, d_l);
        if let Ok((v0, v1)) = gram_schmidt_pair(&n0, &n1) {
            return Ok(BitVectorPair { v0, v1, index });
        }
    }
    unreachable!()
}

/// `n` bit pairs in `d_l` dimensions. With `joint_orthogonal` all `2n` vectors
/// are mutually orthonormal; otherwise each pair is drawn independently.
pub fn build_bitspace(n: usize, d_l: usize, seed: u64, joint_orthogonal: bool) -> Result<BitSpace> {
    if d_l < 2 {
        return Err(Error::InvalidArgument(format!("d_L = {d_l} < 2")));
    }
    if joint_orthogonal && 2 * n > d_l {
        return Err(Error::Capacity(format!(
            "joint orthogonality needs 2N <= d_L, got 2N = {} and d_L = {d_l}",
            2 * n
        )));
    }
    let mut pairs = Vec::with_capacity(n);
    if !joint_orthogonal || n <= 1 {
        for i in 0..n {
            let s = if i == 0 { seed } else { sub_seed(seed, 1 << 32 | i as u64) };
            pairs.push(sample_pair_indexed(d_l, s, i)?);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(2 * n);
        while basis.len() < 2 * n {
            let refs: Vec<&DVector<f64>> = basis.iter().collect();
            if let Some(v) = orthonormalize(gaussian(&mut rng, d_l), &refs) {
                basis.push(v);
            }
        }
        let mut it = basis.into_iter();
        for i in 0..n {
            let v0 = it.next().expect("2n vectors");
            let v1 = it.next().expect("2n vectors");
            pairs.push(BitVectorPair { v0, v1, index: i });
        }
    }
    Ok(BitSpace { pairs, d_l, seed, joint_orthogonal })
}

impl BitSpace {
    pub fn n_bits(&self) -> usize {
        self.pairs.len()
    }

    /// All `2N` vectors in target order `v_0^(1), v_1^(1), v_0^(2), ...`.
    pub fn vectors(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.pairs.iter().flat_map(|p| [&p.v0, &p.v1])
    }

    pub fn vector(&self, hot: usize) -> &DVector<f64> {
        self.pairs[hot / 2].get((hot % 2) as u8)
    }
}

/// 0-based position of the hot entry for bit `i` (1-based) with value `bit`.
pub fn hot_index(i: usize, bit: u8) -> usize {
    2 * (i - 1) + bit as usize
}

pub fn one_hot_target(i: usize, bit: u8, n: usize) -> Result<DVector<f64>> {
    if bit > 1 {
        return Err(Error::InvalidArgument(format!("bit value {bit}")));
    }
    if i == 0 || i > n {
        return Err(Error::IndexOutOfRange(format!("bit index {i} outside 1..={n}")));
    }
    let mut y = DVector::zeros(2 * n);
    y[hot_index(i, bit)] = 1.0;
    Ok(y)
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Cosines between `h` and all `2N` vectors.
pub fn cosines(h: &DVector<f64>, space: &BitSpace) -> Result<DVector<f64>> {
    if h.len() != space.d_l {
        return Err(Error::DimensionMismatch(format!("h width {} != d_L {}", h.len(), space.d_l)));
    }
    let hn = h.norm();
    if hn == 0.0 || !hn.is_finite() {
        return Err(Error::InvalidArgument("cosine profile of a zero or non-finite vector".into()));
    }
    Ok(DVector::from_iterator(2 * space.n_bits(), space.vectors().map(|v| h.dot(v) / (hn * v.norm()))))
}

pub fn cosine_profile(h: &DVector<f64>, space: &BitSpace) -> Result<DVector<f64>> {
    Ok(softmax(&cosines(h, space)?))
}
