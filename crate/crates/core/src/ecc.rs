//! Block codes placed between the payload and the embedded bits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    None,
    Hamming74,
    Repetition3,
}

impl Scheme {
    /// `(n, k)`: codeword and message lengths.
    pub fn block(self) -> (usize, usize) {
        match self {
            Scheme::None => (1, 1),
            Scheme::Hamming74 => (7, 4),
            Scheme::Repetition3 => (3, 1),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "hamming74" => Ok(Scheme::Hamming74),
            "repetition3" => Ok(Scheme::Repetition3),
            other => Err(Error::InvalidArgument(format!("unknown ecc scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::None => "none",
            Scheme::Hamming74 => "hamming74",
            Scheme::Repetition3 => "repetition3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub scheme: Scheme,
    pub segments: usize,
}

impl CodecSpec {
    /// Spec for a payload of `payload_len` bits.
    pub fn for_payload(scheme: Scheme, payload_len: usize) -> Result<Self> {
        let (_, k) = scheme.block();
        if payload_len % k != 0 {
            return Err(Error::InvalidArgument(format!("{payload_len} payload bits not divisible by {k}")));
        }
        Ok(Self { scheme, segments: payload_len / k })
    }

    /// Spec whose embedded length is `embedded_len`.
    pub fn for_embedded(scheme: Scheme, embedded_len: usize) -> Result<Self> {
        let (n, _) = scheme.block();
        if embedded_len % n != 0 {
            return Err(Error::InvalidArgument(format!("{embedded_len} embedded bits not divisible by {n}")));
        }
        Ok(Self { scheme, segments: embedded_len / n })
    }

    pub fn payload_len(&self) -> usize {
        self.segments * self.scheme.block().1
    }

    pub fn embedded_len(&self) -> usize {
        self.segments * self.scheme.block().0
    }
}

fn check_bits(bits: &[u8]) -> Result<()> {
    match bits.iter().find(|&&b| b > 1) {
        Some(b) => Err(Error::InvalidArgument(format!("bit value {b}"))),
        None => Ok(()),
    }
}

fn hamming_parity(d: &[u8]) -> [u8; 3] {
    [d[0] ^ d[1] ^ d[3], d[0] ^ d[2] ^ d[3], d[1] ^ d[2] ^ d[3]]
}

pub fn ecc_encode(payload: &[u8], spec: &CodecSpec) -> Result<Vec<u8>> {
    check_bits(payload)?;
    if payload.len() != spec.payload_len() {
        return Err(Error::DimensionMismatch(format!("{} payload bits for {} expected", payload.len(), spec.payload_len())));
    }
    Ok(match spec.scheme {
        Scheme::None => payload.to_vec(),
        Scheme::Repetition3 => payload.iter().flat_map(|&b| [b; 3]).collect(),
        Scheme::Hamming74 => payload
            .chunks(4)
            .flat_map(|d| {
                let p = hamming_parity(d);
                [d[0], d[1], d[2], d[3], p[0], p[1], p[2]]
            })
            .collect(),
    })
}

/// Decoded payload and the number of bits the decoder flipped back.
pub fn ecc_decode(embedded: &[u8], spec: &CodecSpec) -> Result<(Vec<u8>, usize)> {
    check_bits(embedded)?;
    if embedded.len() != spec.embedded_len() {
        return Err(Error::DimensionMismatch(format!("{} embedded bits for {} expected", embedded.len(), spec.embedded_len())));
    }
    let mut out = Vec::with_capacity(spec.payload_len());
    let mut corrected = 0;
    match spec.scheme {
        Scheme::None => out.extend_from_slice(embedded),
        Scheme::Repetition3 => {
            for t in embedded.chunks(3) {
                let ones = t.iter().filter(|&&b| b == 1).count();
                let bit = u8::from(ones >= 2);
                corrected += t.iter().filter(|&&b| b != bit).count();
                out.push(bit);
            }
        }
        Scheme::Hamming74 => {
            for c in embedded.chunks(7) {
                let mut w = [c[0], c[1], c[2], c[3], c[4], c[5], c[6]];
                let p = hamming_parity(&w[..4]);
                let syndrome = [p[0] ^ w[4], p[1] ^ w[5], p[2] ^ w[6]];
                // Column of the parity-check matrix for each codeword position.
                const COLUMNS: [[u8; 3]; 7] =
                    [[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]];
                if syndrome != [0, 0, 0] {
                    let pos = COLUMNS.iter().position(|col| *col == syndrome).expect("every nonzero syndrome is a column");
                    w[pos] ^= 1;
                    corrected += 1;
                }
                out.extend_from_slice(&w[..4]);
            }
        }
    }
    Ok((out, corrected))
}
