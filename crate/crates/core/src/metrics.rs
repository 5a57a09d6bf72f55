//! Watermark and lineage metrics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verify_white::RecoveredSequence;

/// Ownership threshold on BER; zero means exact match.
pub const DEFAULT_TAU: f64 = 0.0;
pub const DEFAULT_FPR_MAX: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Derivative,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub label: Label,
    pub score: f64,
}

impl ScoreSample {
    pub fn new(label: Label, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite("lineage score".into()));
        }
        Ok(Self { label, score })
    }
}

pub fn ber(recovered: &[u8], registered: &[u8]) -> Result<f64> {
    if recovered.len() != registered.len() {
        return Err(Error::DimensionMismatch(format!("{} recovered vs {} registered bits", recovered.len(), registered.len())));
    }
    if recovered.is_empty() {
        return Err(Error::EmptySequence);
    }
    let wrong = recovered.iter().zip(registered).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / recovered.len() as f64)
}

pub fn is_owned(ber: f64, tau: f64) -> bool {
    ber <= tau
}

/// Mean gap between the similarity to the assigned vector and the mean
/// similarity to every other vector. `profiles[i]` holds bit `i`'s
/// similarities to all `2N` vectors, `assigned[i]` its hot index.
pub fn bse(profiles: &[Vec<f64>], assigned: &[usize]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::EmptySequence);
    }
    if profiles.len() != assigned.len() {
        return Err(Error::DimensionMismatch("one assigned index per bit".into()));
    }
    let mut total = 0.0;
    for (row, &a) in profiles.iter().zip(assigned) {
        if a >= row.len() || row.len() < 2 {
            return Err(Error::IndexOutOfRange(format!("assigned index {a} in a profile of {}", row.len())));
        }
        let others: f64 = row.iter().enumerate().filter(|(j, _)| *j != a).map(|(_, s)| s).sum();
        total += row[a] - others / (row.len() - 1) as f64;
    }
    Ok(total / profiles.len() as f64)
}

/// Standard deviation (divisor `R - 1`) of the assigned similarity across
/// `R` repeated extractions, averaged over bits.
pub fn bst(extractions: &[Vec<Vec<f64>>], assigned: &[usize]) -> Result<f64> {
    let r = extractions.len();
    if r < 2 {
        return Err(Error::Insufficient(format!("bit stability needs at least 2 repeats, got {r}")));
    }
    if assigned.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    for (i, &a) in assigned.iter().enumerate() {
        let vals = extractions
            .iter()
            .map(|e| e.get(i).and_then(|row| row.get(a)).copied())
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::DimensionMismatch(format!("repeat lacks bit {i} or index {a}")))?;
        let mean = vals.iter().sum::<f64>() / r as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        total += var.sqrt();
    }
    Ok(total / assigned.len() as f64)
}

/// Normalised inner products of one anchor's sentinel logits with every
/// signature, in hot-index order.
pub fn normalized_products(logits: &DVector<f64>, signatures: &[(DVector<f64>, DVector<f64>)]) -> Vec<f64> {
    let ln = logits.norm();
    signatures
        .iter()
        .flat_map(|(w0, w1)| [w0, w1])
        .map(|w| {
            let d = ln * w.norm();
            if d > 0.0 {
                logits.dot(w) / d
            } else {
                0.0
            }
        })
        .collect()
}

fn signs(bits: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 })
}

/// Cosine of the two bit strings mapped to `{-1, +1}`.
pub fn lineage_score_bits(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} bits", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptySequence);
    }
    let dot: f64 = signs(a).zip(signs(b)).map(|(x, y)| x * y).sum();
    Ok(dot / a.len() as f64)
}

pub fn lineage_score(a: &RecoveredSequence, b: &RecoveredSequence) -> Result<f64> {
    lineage_score_bits(&a.bits, &b.bits)
}

fn split(samples: &[ScoreSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |l: Label| samples.iter().filter(|s| s.label == l).map(|s| s.score).collect::<Vec<_>>();
    let (d, i) = (pick(Label::Derivative), pick(Label::Independent));
    if d.is_empty() || i.is_empty() {
        return Err(Error::Insufficient("both labels need at least one sample".into()));
    }
    if d.iter().chain(&i).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok((d, i))
}

/// Probability that a derivative outscores an independent, ties counting half.
pub fn auc(samples: &[ScoreSample]) -> Result<f64> {
    let (d, i) = split(samples)?;
    let mut wins = 0.0;
    for x in &d {
        for y in &i {
            wins += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (d.len() * i.len()) as f64)
}

/// ROC points `(fpr, tpr)` sweeping the threshold down through every
/// distinct score; tied scores move both rates in one diagonal step.
pub fn roc(samples: &[ScoreSample]) -> Result<Vec<(f64, f64)>> {
    let (d, i) = split(samples)?;
    let mut thresholds: Vec<f64> = d.iter().chain(&i).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tpr = d.iter().filter(|&&s| s >= t).count() as f64 / d.len() as f64;
        let fpr = i.iter().filter(|&&s| s >= t).count() as f64 / i.len() as f64;
        pts.push((fpr, tpr));
    }
    Ok(pts)
}

/// Area under the ROC over `fpr` in `[0, fpr_max]`, divided by `fpr_max`.
pub fn pauc(samples: &[ScoreSample], fpr_max: f64) -> Result<f64> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::InvalidArgument(format!("fpr_max {fpr_max} outside (0, 1]")));
    }
    let pts = roc(samples)?;
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= x0 {
            continue;
        }
        let hi = x1.min(fpr_max);
        let y_hi = y0 + (y1 - y0) * (hi - x0) / (x1 - x0);
        area += (hi - x0) * (y0 + y_hi) / 2.0;
    }
    Ok(area / fpr_max)
}

/// Standardised mean difference with unbiased per-class variances.
pub fn md(samples: &[ScoreSample]) -> Result<f64> {
    let (d, i) = split(samples)?;
    if d.len() < 2 || i.len() < 2 {
        return Err(Error::Insufficient("md needs at least two samples per label".into()));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let ((md_, vd), (mi, vi)) = (stats(&d), stats(&i));
    let pooled = ((vd + vi) / 2.0).sqrt();
    let gap = (md_ - mi).abs();
    if pooled == 0.0 {
        return Ok(if gap == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(gap / pooled)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|j| ((n - j) as f64).ln() - ((j + 1) as f64).ln()).sum()
}

/// Exact two-sided binomial test: the total probability of every outcome
/// no more likely than `k` under `Bin(n, p)`.
pub fn binomial_two_sided(k: u64, n: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidArgument(format!("{k} successes out of {n}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p}")));
    }
    let lp = |j: u64| ln_choose(n, j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln();
    let observed = lp(k);
    let slack = 1e-7;
    let total: f64 = (0..=n).map(lp).filter(|&l| l <= observed + slack).map(f64::exp).sum();
    Ok(total.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(d: &[f64], i: &[f64]) -> Vec<ScoreSample> {
        d.iter()
            .map(|&s| ScoreSample::new(Label::Derivative, s).unwrap())
            .chain(i.iter().map(|&s| ScoreSample::new(Label::Independent, s).unwrap()))
            .collect()
    }

    #[test]
    fn ber_examples() {
        assert_eq!(ber(&[1, 0, 1], &[1, 1, 1]).unwrap(), 1.0 / 3.0);
        assert_eq!(ber(&[0; 64], &[0; 64]).unwrap(), 0.0);
        assert!(ber(&[1], &[1, 0]).is_err());
        assert!(is_owned(0.0, DEFAULT_TAU) && !is_owned(1.0 / 64.0, DEFAULT_TAU));
    }

    #[test]
    fn lineage_examples() {
        let a = [1, 0, 1, 1];
        assert_eq!(lineage_score_bits(&a, &a).unwrap(), 1.0);
        assert_eq!(lineage_score_bits(&a, &[0, 1, 0, 0]).unwrap(), -1.0);
        assert_eq!(lineage_score_bits(&a, &[1, 0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn separation_metrics() {
        let p = pool(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(auc(&p).unwrap(), 1.0);
        assert_eq!(pauc(&p, DEFAULT_FPR_MAX).unwrap(), 1.0);
        let same = pool(&[0.3, 0.5], &[0.5, 0.3]);
        assert_eq!(auc(&same).unwrap(), 0.5);
        assert!(auc(&pool(&[0.1], &[])).is_err());
    }

    #[test]
    fn pauc_of_reversed_pool_is_zero() {
        assert_eq!(pauc(&pool(&[0.1, 0.2], &[0.8, 0.9]), 0.05).unwrap(), 0.0);
    }

    #[test]
    fn md_is_affine_invariant() {
        let p = pool(&[0.9, 0.7, 0.8], &[0.1, 0.3, -0.1]);
        let q: Vec<_> = p.iter().map(|s| ScoreSample { score: 3.0 * s.score - 2.0, ..*s }).collect();
        assert!((md(&p).unwrap() - md(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bst_hand_value() {
        let e = vec![vec![vec![0.4, 0.0]], vec![vec![0.6, 0.0]]];
        assert!((bst(&e, &[0]).unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(bst(&[e[0].clone(), e[0].clone()], &[0]).unwrap(), 0.0);
        assert!(bst(&e[..1], &[0]).is_err());
    }

    #[test]
    fn bse_perfect_and_null() {
        assert_eq!(bse(&[vec![1.0, 0.0, 0.0, 0.0]], &[0]).unwrap(), 1.0);
        assert_eq!(bse(&[vec![0.0; 4]], &[2]).unwrap(), 0.0);
    }

    #[test]
    fn binomial_symmetric_cases() {
        assert!((binomial_two_sided(5, 10, 0.5).unwrap() - 1.0).abs() < 1e-12);
        // P(X <= 0) + P(X >= 10) for Bin(10, 1/2)
        assert!((binomial_two_sided(0, 10, 0.5).unwrap() - 2.0 / 1024.0).abs() < 1e-15);
        assert!((binomial_two_sided(2, 10, 0.5).unwrap() - 2.0 * 56.0 / 1024.0).abs() < 1e-12);
    }
}
