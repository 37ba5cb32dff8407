//! Text embedding providers.
//!
//! Distractor ranking and the instruction-diversity metrics only need a
//! deterministic text similarity signal, so the default provider is a hashed
//! character-trigram bag: FNV-1a 64-bit of each 3-character window, modulo
//! the embedding dimension, L2-normalized.  A remote provider speaking the
//! same interface lives in [`crate::remote`].

/// Deterministic text → unit-norm vector of fixed dimension.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    /// Unit-norm embedding; same text always yields the same vector.
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Default dimension for embedding providers.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// Hashed character-trigram bag embedder.
#[derive(Clone, Debug)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        Self { dim }
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

/// The documented default embedding provider.
pub fn default_embedder() -> HashedNgramEmbedder {
    HashedNgramEmbedder::default()
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dim];
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.len() < 3 {
            // Zero-gram case: the fixed unit basis vector e1.
            v[0] = 1.0;
            return v;
        }
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for &c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let idx = (fnv1a64(&buf[..len]) % self.dim as u64) as usize;
            v[idx] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cosine similarity; for unit-norm inputs this is the dot product, but the
/// general form is kept so it also serves non-normalized diagnostics.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_text_embeds_identically() {
        let e = default_embedder();
        assert_eq!(e.embed("red mug"), e.embed("red mug"));
    }

    #[test]
    fn empty_and_short_strings_return_e1() {
        let e = default_embedder();
        let mut e1 = vec![0.0; e.dim()];
        e1[0] = 1.0;
        assert_eq!(e.embed(""), e1);
        assert_eq!(e.embed("ab"), e1);
    }

    #[test]
    fn near_duplicate_texts_are_closer_than_unrelated_texts() {
        let e = default_embedder();
        let base = e.embed("red mug");
        let near = e.embed("red mug!");
        let far = e.embed("steel fork");
        assert!(cosine(&base, &near) > cosine(&base, &far));
    }

    #[test]
    fn case_is_folded() {
        let e = default_embedder();
        assert_eq!(e.embed("Red Mug"), e.embed("red mug"));
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm(s in ".{0,40}") {
            let e = default_embedder();
            let v = e.embed(&s);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
