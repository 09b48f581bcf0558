use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BackboneError, Embedding, Modality, Result};

/// Prompt template used unless a run overrides it.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a painting of a {class}";

/// Fills `{class}` in a prompt template.
pub fn prompt_for(template: &str, class: &str) -> String {
    template.replace("{class}", class).trim().to_string()
}

/// Deterministic bag-of-tokens text encoder for the synthetic backbones.
///
/// Each lowercase token maps to a fixed pseudo-random direction derived from
/// the encoder seed and the token bytes; the prompt embedding is their sum.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashTextEncoder { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, prompt: &str) -> Result<Embedding> {
        let tokens: Vec<String> = prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(BackboneError::EmptyPrompt);
        }
        let mut acc = vec![0.0; self.dim];
        for token in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        Embedding::new(acc, Modality::Text)
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
