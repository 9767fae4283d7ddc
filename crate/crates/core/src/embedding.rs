//! Embedding-space primitives: vectors, cosine similarity, softmax and
//! deterministic argmax.

use serde::{Deserialize, Serialize};

use crate::error::{RavlError, Result};

/// A dense real vector living in a shared image/text embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RavlError::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RavlError::InvalidArgument("non-finite embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Returns a unit-norm copy.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(RavlError::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine(a.as_slice(), b.as_slice())
}

/// Cosine similarity on raw slices, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RavlError::DimMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RavlError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cos(a, b)`, in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b).map(|c| 1.0 - c)
}

/// A probability distribution over the label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        // non-empty by construction
        argmax_stable(&self.0).unwrap_or(0)
    }
}

/// One score vector per region of an image.
pub type ScoreMatrix = Vec<ScoreVector>;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ScoreVector> {
    if logits.is_empty() {
        return Err(RavlError::Empty("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(RavlError::InvalidArgument("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ScoreVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `log(sum(exp(x)))` computed stably. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_stable(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(RavlError::Empty("argmax input"));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let e = |v: &[f64]| Embedding(v.to_vec());
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RavlError::ZeroNorm)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(RavlError::DimMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s.0, vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s.0[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.0[1] - 1.0 / 3.0).abs() < 1e-12);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s.0[0] - 1.0).abs() < 1e-12 && s.0[1] < 1e-300 + 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax_stable(&[0.2, 0.8]).unwrap(), 1);
        assert_eq!(argmax_stable(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax_stable(&[3.0, 1.0, 3.0]).unwrap(), 0);
        assert!(argmax_stable(&[]).is_err());
    }

    #[test]
    fn lse_matches_naive() {
        let v = [0.1, -2.0, 3.5];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn softmax_is_distribution_and_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let s = softmax(&xs).unwrap();
            let total: f64 = s.0.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(s.0.iter().all(|p| (0.0..=1.0).contains(p)));
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.0.iter().zip(&t.0) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-9);
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            prop_assert!((ab - cosine(&scaled, &b).unwrap()).abs() < 1e-9);
        }
    }
}
