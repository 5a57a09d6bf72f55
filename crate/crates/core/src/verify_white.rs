//! White-box extraction from hidden states.

use serde::{Deserialize, Serialize};

use crate::bitspace::{bits_to_string, cosine, cosines, BitSpace};
use crate::corpus::FactTriplet;
use crate::error::{Error, Result};
use crate::substrate::{forward, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    White,
    Black,
}

/// Decoded bits together with the pair of scores behind each decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredSequence {
    pub bits: Vec<u8>,
    pub scores: Vec<(f64, f64)>,
    pub mode: Mode,
}

impl RecoveredSequence {
    /// Bit is 1 iff the second score is strictly greater; ties decode as 0.
    pub fn from_scores(scores: Vec<(f64, f64)>, mode: Mode) -> Self {
        let bits = scores.iter().map(|(s0, s1)| u8::from(s1 > s0)).collect();
        Self { bits, scores, mode }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit_string(&self) -> String {
        bits_to_string(&self.bits)
    }

    pub fn is_consistent(&self) -> bool {
        self.bits.len() == self.scores.len()
            && self.bits.iter().zip(&self.scores).all(|(&b, (s0, s1))| b == u8::from(s1 > s0))
    }
}

pub fn decode_hidden(hidden: &[nalgebra::DVector<f64>], space: &BitSpace) -> Result<RecoveredSequence> {
    if hidden.len() != space.n_bits() {
        return Err(Error::DimensionMismatch(format!("{} states for {} bits", hidden.len(), space.n_bits())));
    }
    let scores = hidden
        .iter()
        .zip(&space.pairs)
        .map(|(h, p)| {
            if h.len() != space.d_l {
                return Err(Error::DimensionMismatch("hidden width".into()));
            }
            Ok((cosine(h, &p.v0), cosine(h, &p.v1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveredSequence::from_scores(scores, Mode::White))
}

/// Hidden state at `layer` of each anchor's last subject token.
pub fn anchor_hidden(model: &ModelState, anchors: &[FactTriplet], layer: usize) -> Result<Vec<nalgebra::DVector<f64>>> {
    if layer >= model.config.n_layers {
        return Err(Error::IndexOutOfRange(format!("layer {layer}")));
    }
    anchors
        .iter()
        .map(|a| {
            let t = forward(model, &a.prompt())?;
            Ok(t.hidden_at(layer, a.subject_last_pos))
        })
        .collect()
}

pub fn recover_white(model: &ModelState, anchors: &[FactTriplet], space: &BitSpace, layer: usize) -> Result<RecoveredSequence> {
    if anchors.len() != space.n_bits() {
        return Err(Error::DimensionMismatch(format!("{} anchors for {} bits", anchors.len(), space.n_bits())));
    }
    decode_hidden(&anchor_hidden(model, anchors, layer)?, space)
}

/// Cosines of every anchor state to all `2N` vectors; one row per anchor.
pub fn white_similarities(
    model: &ModelState,
    anchors: &[FactTriplet],
    space: &BitSpace,
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    anchor_hidden(model, anchors, layer)?
        .iter()
        .map(|h| Ok(cosines(h, space)?.as_slice().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitspace::build_bitspace;

    #[test]
    fn exact_alignment_decodes() {
        let s = build_bitspace(2, 8, 1, true).unwrap();
        let r = decode_hidden(&[s.pairs[0].v1.clone(), s.pairs[1].v0.clone()], &s).unwrap();
        assert_eq!(r.bits, vec![1, 0]);
        assert!(r.scores[0].0.abs() < 1e-12 && (r.scores[0].1 - 1.0).abs() < 1e-12);
        assert!(r.is_consistent());
    }

    #[test]
    fn ties_decode_as_zero() {
        let r = RecoveredSequence::from_scores(vec![(0.5, 0.5)], Mode::White);
        assert_eq!(r.bits, vec![0]);
    }

    #[test]
    fn positive_rescaling_does_not_change_bits() {
        let s = build_bitspace(3, 8, 4, false).unwrap();
        let hs: Vec<_> = (0..3).map(|i| nalgebra::DVector::from_fn(8, |j, _| ((i * 8 + j) as f64).cos())).collect();
        let scaled: Vec<_> = hs.iter().map(|h| h * 13.0).collect();
        assert_eq!(decode_hidden(&hs, &s).unwrap().bits, decode_hidden(&scaled, &s).unwrap().bits);
    }
}
