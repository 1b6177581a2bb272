//! Deterministic hashed-token text embedder standing in for the VLM encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXT_DIM: usize = 1024;

/// Sequence of text embedding vectors, `[tokens, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Tensor);

impl TextEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "text embedding must be [tokens, width], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Clone, Debug)]
pub struct HashedTextEncoder {
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for HashedTextEncoder {
    fn default() -> Self {
        Self {
            dim: TEXT_DIM,
            max_tokens: 16,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedTextEncoder {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    /// Each lower-cased word maps to a fixed unit-variance vector seeded by its hash.
    pub fn encode(&self, prompt: &str) -> TextEmbedding {
        let mut words: Vec<String> = prompt
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .take(self.max_tokens)
            .collect();
        if words.is_empty() {
            words.push("<empty>".to_string());
        }
        let mut data = Vec::with_capacity(words.len() * self.dim);
        let scale = 1.0 / (self.dim as f64).sqrt();
        for w in &words {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
            data.extend((0..self.dim).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale * 8.0
            }));
        }
        TextEmbedding(Tensor::new(vec![words.len(), self.dim], data).expect("sized above"))
    }
}
