//! Frozen text encoder stand-in: a deterministic bag-of-words embedder.
//!
//! Each lowercase word maps to a fixed Gaussian vector seeded by its hash;
//! a string embeds as the mean of its word vectors. Shared words give related
//! prompts correlated embeddings ("Image of a red circle" vs the boosting
//! prompt mentioning "red circle"), which is all the conditioning signal the
//! toy denoiser needs. The empty string embeds to zero (the unconditional
//! caption).

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::nn::params::normal_sample;

#[derive(Debug, Clone)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        TextEmbedder { dim, seed }
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ fnv1a(word));
        let std = (1.0 / self.dim as f64).sqrt();
        Array1::from_iter((0..self.dim).map(|_| std * normal_sample(&mut rng)))
    }

    /// Mean of word vectors; deterministic, case-insensitive, and pure.
    pub fn embed(&self, text: &str) -> Array1<f64> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut acc = Array1::<f64>::zeros(self.dim);
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            acc += &self.word_vector(w);
        }
        acc / words.len() as f64
    }

    /// Embedding of the unconditional (dropped) caption.
    pub fn null_embedding(&self) -> Array1<f64> {
        Array1::zeros(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic_and_case_insensitive() {
        let e = TextEmbedder::new(16, 42);
        assert_eq!(e.embed("Image of panda"), e.embed("image OF Panda"));
        assert_ne!(e.embed("red circle"), e.embed("blue square"));
    }

    #[test]
    fn shared_words_correlate_prompts() {
        let e = TextEmbedder::new(64, 42);
        let a = e.embed("Image of red circle");
        let b = e.embed("A realistic, high-quality photo of a red circle");
        let c = e.embed("A realistic, high-quality photo of a navy cross");
        let cos = |x: &Array1<f64>, y: &Array1<f64>| {
            x.dot(y) / (x.dot(x).sqrt() * y.dot(y).sqrt())
        };
        assert!(cos(&a, &b) > cos(&a, &c));
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        let e = TextEmbedder::new(8, 1);
        assert_eq!(e.embed(""), e.null_embedding());
        assert_eq!(e.embed("   "), e.null_embedding());
    }
}
