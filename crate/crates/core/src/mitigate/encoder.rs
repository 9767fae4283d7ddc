use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{RavlError, Result};

/// Linear map from raw features to the embedding space, followed by L2
/// normalization. Weights are stored row-major, `raw_dim x embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub raw_dim: usize,
    pub embed_dim: usize,
    pub weights: Vec<f64>,
}

impl Encoder {
    pub fn from_weights(raw_dim: usize, embed_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != raw_dim * embed_dim {
            return Err(RavlError::DimMismatch { expected: raw_dim * embed_dim, got: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(RavlError::InvalidArgument("non-finite encoder weight".into()));
        }
        Ok(Self { raw_dim, embed_dim, weights })
    }

    /// Gaussian initialization with variance `1 / raw_dim`.
    pub fn random(raw_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (raw_dim as f64).sqrt()).expect("valid std");
        let weights = (0..raw_dim * embed_dim).map(|_| normal.sample(&mut rng)).collect();
        Self { raw_dim, embed_dim, weights }
    }

    /// Unnormalized projection `W^T x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.raw_dim {
            return Err(RavlError::DimMismatch { expected: self.raw_dim, got: x.len() });
        }
        let mut out = vec![0.0; self.embed_dim];
        for (p, &xp) in x.iter().enumerate() {
            if xp == 0.0 {
                continue;
            }
            let row = &self.weights[p * self.embed_dim..(p + 1) * self.embed_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xp * w;
            }
        }
        Ok(out)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        Embedding(self.project(x)?).normalized()
    }

    /// `self -= step * grad`
    pub fn descend(&mut self, grad: &[f64], step: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= step * g;
        }
    }
}
