use std::sync::Mutex;

use aligns_core::embed::{cache_get_or_embed, EmbedError, Embedder, EmbeddingCache, EmbeddingVector, TrigramEmbedder};

/// Trigram embedder that records every provider call.
#[derive(Default)]
struct Counting {
    inner: TrigramEmbedder,
    calls: Mutex<Vec<Vec<String>>>,
}

impl Embedder for Counting {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.calls.lock().unwrap().push(texts.to_vec());
        self.inner.embed_batch(texts)
    }
}

fn corpus() -> Vec<String> {
    ["i feel calm", "i worry a lot", "i sleep well", "i feel calm"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn second_run_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = EmbeddingCache::open(dir.path()).unwrap();
    let e = Counting::default();
    let first = cache_get_or_embed(&cache, &e, &corpus()).unwrap();
    assert_eq!(e.calls.lock().unwrap().len(), 1);
    // the duplicate text is sent once
    assert_eq!(e.calls.lock().unwrap()[0].len(), 3);

    let e2 = Counting::default();
    let second = cache_get_or_embed(&cache, &e2, &corpus()).unwrap();
    assert!(e2.calls.lock().unwrap().is_empty());
    assert_eq!(first, second);
}

#[test]
fn only_new_texts_are_embedded() {
    let dir = tempfile::tempdir().unwrap();
    let cache = EmbeddingCache::open(dir.path()).unwrap();
    cache_get_or_embed(&cache, &Counting::default(), &corpus()).unwrap();
    let mut extended = corpus();
    extended.push("i enjoy parties".into());
    let e = Counting::default();
    let out = cache_get_or_embed(&cache, &e, &extended).unwrap();
    assert_eq!(*e.calls.lock().unwrap(), vec![vec!["i enjoy parties".to_string()]]);
    assert_eq!(out.len(), 5);
    assert_eq!(out[4], TrigramEmbedder::default().embed_one("i enjoy parties").unwrap());
}

#[test]
fn truncated_entry_is_discarded_and_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cache = EmbeddingCache::open(dir.path()).unwrap();
    let e = Counting::default();
    let texts = vec!["i feel calm".to_string()];
    let expected = cache_get_or_embed(&cache, &e, &texts).unwrap();
    let key = EmbeddingCache::key(&e.fingerprint(), "i feel calm");
    let path = cache.entry_path(&key);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(cache.get(&key).is_none());
    assert!(!path.exists());

    let e2 = Counting::default();
    assert_eq!(cache_get_or_embed(&cache, &e2, &texts).unwrap(), expected);
    assert_eq!(e2.calls.lock().unwrap().len(), 1);
    assert!(path.exists());
}

#[test]
fn provider_identity_separates_entries() {
    let a = EmbeddingCache::key("provider-a", "same text");
    let b = EmbeddingCache::key("provider-b", "same text");
    assert_ne!(a, b);
    assert_eq!(a, EmbeddingCache::key("provider-a", "same text"));
}
