use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::FeatureMatrix;

/// Deterministic word embeddings: each token seeds a generator from its
/// SHA-256 digest and draws a unit vector. Stable across runs and platforms.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }

    pub fn embed_token(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| (x / norm) as f32).collect()
    }

    /// One row per token; an empty query embeds as a single placeholder token.
    pub fn embed_query(&self, text: &str) -> FeatureMatrix {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push("<empty>".to_string());
        }
        let data: Vec<f32> = tokens.iter().flat_map(|t| self.embed_token(t)).collect();
        FeatureMatrix::new(tokens.len(), self.dim, data).expect("rows × dim")
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_unit_and_stable() {
        let e = HashEmbedder::new(16);
        let a = e.embed_token("bird");
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a, e.embed_token("bird"));
        assert_ne!(a, e.embed_token("water"));
    }

    #[test]
    fn query_is_case_and_punctuation_insensitive() {
        let e = HashEmbedder::new(8);
        let q = e.embed_query("The bird dips its face into the water.");
        assert_eq!(q.rows, 8);
        assert_eq!(q, e.embed_query("the BIRD dips its face, into the water"));
        assert_eq!(e.embed_query("").rows, 1);
    }
}
