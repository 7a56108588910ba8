use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::ssm::TokenSequence;
use crate::tensor::dot;

pub const DEFAULT_EMBEDDING_DIM: usize = 256;
const NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub v: Vec<f64>,
    /// Set when the text produced no features; `v` is then all zeros.
    pub degenerate: bool,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.v, &other.v)
    }
}

/// Retrieval embedding for a token sequence. The store records which
/// embedder built its index and refuses to mix them.
pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, tokens: &TokenSequence) -> Embedding;
}

/// Signed feature hashing of token trigrams.
///
/// Each trigram is hashed with 64-bit FNV-1a over its bytes; the hash modulo
/// the dimension picks the bucket and the top bit picks the sign. Sequences
/// shorter than three tokens contribute a single n-gram of their full
/// length. The count vector is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl HashingEmbedder {
    fn feature(&self, gram: &[u32]) -> (usize, f64) {
        let mut h = FnvHasher::default();
        for &t in gram {
            h.write(&[t as u8]);
        }
        let hash = h.finish();
        let sign = if hash >> 63 == 1 { -1.0 } else { 1.0 };
        ((hash % self.dim as u64) as usize, sign)
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> String {
        format!("fnv1a64-trigram-{}", self.dim)
    }

    fn embed(&self, tokens: &TokenSequence) -> Embedding {
        let toks = tokens.as_slice();
        let mut v = vec![0.0; self.dim];
        if toks.is_empty() {
            return Embedding { v, degenerate: true };
        }
        let width = NGRAM.min(toks.len());
        for gram in toks.windows(width) {
            let (bucket, sign) = self.feature(gram);
            v[bucket] += sign;
        }
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            // every feature cancelled out
            return Embedding { v, degenerate: true };
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Embedding {
            v,
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let s = TokenSequence::from_text("the quick brown fox");
        let a = e.embed(&s);
        assert_eq!(a, e.embed(&s));
        assert!((dot(&a.v, &a.v).sqrt() - 1.0).abs() < 1e-12);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_degenerate_zero() {
        let e = HashingEmbedder::default().embed(&TokenSequence::default());
        assert!(e.degenerate);
        assert!(e.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_sequences_still_embed() {
        let e = HashingEmbedder::default().embed(&TokenSequence::from_text("ab"));
        assert!(!e.degenerate);
    }

    #[test]
    fn fnv_reference_value() {
        // FNV-1a 64 of "abc"
        let mut h = FnvHasher::default();
        h.write(b"abc");
        assert_eq!(h.finish(), 0xe71fa2190541574b);
    }
}
