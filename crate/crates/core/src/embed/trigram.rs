use super::{check_texts, EmbedError, Embedder, EmbeddingVector, ProviderConfig};

pub const TRIGRAM_DIM: usize = 256;

/// Character-trigram hashing embedder.
///
/// The prompted text is padded with one space on each side, every window of
/// three characters is hashed (FNV-1a, 64 bit) into one of 256 count buckets
/// and the count vector is L2-normalized. Lexical overlap gives graded
/// similarity; there is no semantic knowledge behind it.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    config: ProviderConfig,
}

impl TrigramEmbedder {
    pub fn new(config: ProviderConfig) -> Self {
        Self { config }
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        EmbeddingVector::normalized(trigram_counts(&self.config.apply_prompt(text)))
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self::new(ProviderConfig::deterministic_test())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn trigram_counts(text: &str) -> Vec<f64> {
    let padded: Vec<char> = std::iter::once(' ').chain(text.chars()).chain(std::iter::once(' ')).collect();
    let mut counts = vec![0.0; TRIGRAM_DIM];
    let mut buf = [0u8; 12];
    for window in padded.windows(3) {
        let mut len = 0;
        for ch in window {
            len += ch.encode_utf8(&mut buf[len..]).len();
        }
        counts[(fnv1a(&buf[..len]) % TRIGRAM_DIM as u64) as usize] += 1.0;
    }
    counts
}

impl Embedder for TrigramEmbedder {
    fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identical_texts_identical_unit_vectors() {
        let e = TrigramEmbedder::default();
        let out = e.embed_batch(&["a".into(), "a".into()]).unwrap();
        assert_eq!(out[0], out[1]);
        assert!((out[0].norm() - 1.0).abs() < 1e-12);
        assert_eq!(out[0].dim(), TRIGRAM_DIM);
    }

    #[test]
    fn lexical_neighbours_are_closer() {
        let e = TrigramEmbedder::default();
        let a = e.embed_one("anxiety symptoms").unwrap();
        let b = e.embed_one("anxiety symptom").unwrap();
        let c = e.embed_one("budget deficit").unwrap();
        assert!(cos(&a, &b) > cos(&a, &c));
        assert!(cos(&a, &b) > 0.8);
    }

    #[test]
    fn empty_inputs_rejected() {
        let e = TrigramEmbedder::default();
        assert_eq!(e.embed_batch(&[]), Err(EmbedError::EmptyInput));
        assert_eq!(e.embed_batch(&["x".into(), String::new()]), Err(EmbedError::EmptyText(1)));
    }

    #[test]
    fn counts_every_window() {
        // " ab " has two windows
        assert_eq!(trigram_counts("ab").iter().sum::<f64>(), 2.0);
        assert_eq!(trigram_counts("a").iter().sum::<f64>(), 1.0);
    }

    proptest! {
        #[test]
        fn unit_norm_and_concat_invariant(a in proptest::collection::vec("[a-z ]{0,12}[a-z]", 1..6),
                                          b in proptest::collection::vec("[a-z0-9 ]{0,12}[a-z]", 1..6)) {
            let e = TrigramEmbedder::default();
            let joined: Vec<String> = a.iter().chain(b.iter()).cloned().collect();
            let whole = e.embed_batch(&joined).unwrap();
            let mut parts = e.embed_batch(&a).unwrap();
            parts.extend(e.embed_batch(&b).unwrap());
            prop_assert_eq!(&whole, &parts);
            for v in &whole {
                prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
