use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_texts, EmbedError, Embedder, EmbeddingVector, PromptSide, ProviderConfig};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_template: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP client for a batch embedding endpoint.
///
/// Wire format: `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`. When
/// the prompt is applied server-side the template travels as
/// `prompt_template` and the texts are sent bare. Vectors are normalized here.
pub struct RemoteEmbedder {
    config: ProviderConfig,
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(config: ProviderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, endpoint, agent })
    }

    fn request(&self, batch: usize, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let fail = |message: String| EmbedError::Provider { batch, message };
        let prompted: Vec<String>;
        let body = match self.config.prompt_side {
            PromptSide::Client => {
                prompted = texts.iter().map(|t| self.config.apply_prompt(t)).collect();
                EmbedRequest { texts: prompted.iter().map(String::as_str).collect(), prompt_template: None }
            }
            PromptSide::Server => {
                EmbedRequest { texts: texts.iter().map(String::as_str).collect(), prompt_template: Some(&self.config.prompt_template) }
            }
        };
        let mut response = self.agent.post(&self.endpoint).send_json(&body).map_err(|e| fail(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}")));
        }
        let parsed: EmbedResponse = response.body_mut().read_json().map_err(|e| fail(format!("malformed response: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(fail(format!("expected {} vectors, got {}", texts.len(), parsed.vectors.len())));
        }
        Ok(parsed.vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        let chunks: Vec<(usize, &[String])> = texts.chunks(self.config.max_batch).enumerate().collect();
        let mut responses: Vec<Result<Vec<Vec<f64>>, EmbedError>> = Vec::with_capacity(chunks.len());
        for wave in chunks.chunks(self.config.parallelism) {
            let results: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave.iter().map(|&(batch, chunk)| scope.spawn(move || self.request(batch, chunk))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding request thread panicked")).collect()
            });
            responses.extend(results);
        }

        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for (batch, response) in responses.into_iter().enumerate() {
            for values in response? {
                let expected = *dim.get_or_insert(values.len());
                if values.len() != expected {
                    return Err(EmbedError::DimensionMismatch { batch, expected, found: values.len() });
                }
                let v = EmbeddingVector::normalized(values).map_err(|e| EmbedError::Provider { batch, message: e.to_string() })?;
                out.push(v);
            }
        }
        Ok(out)
    }
}
