//! Cross-request embedding batcher.
//!
//! Requests arriving within one collection window (or until `max_batch`
//! texts are pending) are merged into a single provider call, which runs on
//! the blocking pool. Each caller receives exactly its own vectors. When a
//! merged call fails, the jobs are retried one by one so that one bad request
//! cannot fail its neighbours.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use aligns_core::embed::{EmbedError, Embedder, EmbeddingCache, EmbeddingVector};
use aligns_core::pipeline::embed_texts;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

type Reply = oneshot::Sender<Result<Vec<EmbeddingVector>, EmbedError>>;

struct Job {
    texts: Vec<String>,
    reply: Reply,
}

#[derive(Clone)]
pub struct EmbedBatcher {
    tx: mpsc::Sender<Job>,
    calls: Arc<AtomicUsize>,
}

struct Provider {
    embedder: Arc<dyn Embedder>,
    cache: Option<EmbeddingCache>,
    calls: Arc<AtomicUsize>,
}

impl Provider {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        embed_texts(&*self.embedder, self.cache.as_ref(), texts)
    }
}

impl EmbedBatcher {
    /// Starts the collector task on the current tokio runtime.
    pub fn spawn(embedder: Arc<dyn Embedder>, cache: Option<EmbeddingCache>, max_batch: usize, window: Duration) -> Self {
        let (tx, rx) = mpsc::channel(1024);
        let calls = Arc::new(AtomicUsize::new(0));
        let provider = Arc::new(Provider { embedder, cache, calls: calls.clone() });
        tokio::spawn(collect(rx, provider, max_batch.max(1), window));
        Self { tx, calls }
    }

    pub async fn embed(&self, texts: Vec<String>) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let (reply, rx) = oneshot::channel();
        let closed = || EmbedError::Provider { batch: 0, message: "embedding batcher stopped".into() };
        self.tx.send(Job { texts, reply }).await.map_err(|_| closed())?;
        rx.await.map_err(|_| closed())?
    }

    /// Provider invocations so far (merged calls plus isolation retries).
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

async fn collect(mut rx: mpsc::Receiver<Job>, provider: Arc<Provider>, max_batch: usize, window: Duration) {
    while let Some(first) = rx.recv().await {
        let mut pending = first.texts.len();
        let mut jobs = vec![first];
        let deadline = Instant::now() + window;
        while pending < max_batch {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some(job)) => {
                    pending += job.texts.len();
                    jobs.push(job);
                }
                Ok(None) | Err(_) => break,
            }
        }
        let provider = provider.clone();
        tokio::spawn(async move {
            let outcome = tokio::task::spawn_blocking(move || flush(&provider, jobs)).await;
            if let Err(e) = outcome {
                log::error!("embedding flush panicked: {e}");
            }
        });
    }
}

fn flush(provider: &Provider, jobs: Vec<Job>) {
    if jobs.len() == 1 {
        let job = jobs.into_iter().next().expect("one job");
        let _ = job.reply.send(provider.embed(&job.texts));
        return;
    }
    let all: Vec<String> = jobs.iter().flat_map(|j| j.texts.iter().cloned()).collect();
    match provider.embed(&all) {
        Ok(mut vectors) => {
            for job in jobs {
                let rest = vectors.split_off(job.texts.len());
                let _ = job.reply.send(Ok(std::mem::replace(&mut vectors, rest)));
            }
        }
        Err(_) => {
            for job in jobs {
                let _ = job.reply.send(provider.embed(&job.texts));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aligns_core::embed::TrigramEmbedder;

    #[tokio::test]
    async fn concurrent_requests_share_one_call() {
        let batcher = EmbedBatcher::spawn(Arc::new(TrigramEmbedder::default()), None, 256, Duration::from_millis(50));
        let a = batcher.embed(vec!["i sleep badly".into()]);
        let b = batcher.embed(vec!["i worry".into(), "i feel nervous".into()]);
        let (a, b) = tokio::join!(a, b);
        let e = TrigramEmbedder::default();
        assert_eq!(a.unwrap(), vec![e.embed_one("i sleep badly").unwrap()]);
        assert_eq!(b.unwrap(), vec![e.embed_one("i worry").unwrap(), e.embed_one("i feel nervous").unwrap()]);
        assert_eq!(batcher.provider_calls(), 1);
    }

    #[tokio::test]
    async fn full_batch_flushes_early() {
        let batcher = EmbedBatcher::spawn(Arc::new(TrigramEmbedder::default()), None, 1, Duration::from_secs(30));
        let start = std::time::Instant::now();
        batcher.embed(vec!["one".into()]).await.unwrap();
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[tokio::test]
    async fn failures_stay_with_their_request() {
        let batcher = EmbedBatcher::spawn(Arc::new(TrigramEmbedder::default()), None, 256, Duration::from_millis(50));
        let good = batcher.embed(vec!["fine text".into()]);
        let bad = batcher.embed(vec![String::new()]);
        let (good, bad) = tokio::join!(good, bad);
        assert!(good.is_ok());
        assert!(bad.is_err());
    }
}
