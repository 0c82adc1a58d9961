use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use aligns_core::embed::{EmbedError, Embedder, PromptSide, ProviderConfig, TrigramEmbedder};
use serde_json::{json, Value};

type Responder = Arc<dyn Fn(&[String]) -> (u16, Value) + Send + Sync>;

/// Minimal HTTP/1.1 server answering one request per connection.
struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

impl MockServer {
    fn start(respond: Responder) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/embed", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let respond = respond.clone();
                let log = log.clone();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut length = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = line.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                length = v.trim().parse().unwrap();
                            }
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    let request: Value = serde_json::from_slice(&body).unwrap();
                    let texts: Vec<String> = request["texts"].as_array().unwrap().iter().map(|t| t.as_str().unwrap().to_string()).collect();
                    log.lock().unwrap().push(request);
                    let (status, payload) = respond(&texts);
                    let payload = payload.to_string();
                    let mut stream = stream;
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                        payload.len()
                    );
                });
            }
        });
        Self { url, requests }
    }

    fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }
}

fn trigram_responder() -> Responder {
    Arc::new(|texts: &[String]| {
        let e = TrigramEmbedder::default();
        let vectors: Vec<Vec<f64>> = texts.iter().map(|t| e.embed_one(t).unwrap().into_values()).collect();
        (200, json!({ "vectors": vectors }))
    })
}

fn bare(url: &str) -> ProviderConfig {
    let mut config = ProviderConfig::remote(url);
    config.prompt_template = "{indicator}".into();
    config
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("indicator number {i}")).collect()
}

#[test]
fn batches_split_by_max_batch_and_keep_order() {
    let server = MockServer::start(trigram_responder());
    let mut config = bare(&server.url);
    config.max_batch = 100;
    let input = texts(250);
    let out = config.build().unwrap().embed_batch(&input).unwrap();

    let requests = server.requests();
    assert_eq!(requests.len(), 3);
    let mut sizes: Vec<usize> = requests.iter().map(|r| r["texts"].as_array().unwrap().len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![50, 100, 100]);

    let local = TrigramEmbedder::default();
    for (text, v) in input.iter().zip(&out) {
        let expected = local.embed_one(text).unwrap();
        assert!(v.values().iter().zip(expected.values()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn prompt_applied_client_side_by_default() {
    let server = MockServer::start(trigram_responder());
    let config = ProviderConfig::remote(&server.url);
    config.build().unwrap().embed_batch(&["i feel sad".to_string()]).unwrap();
    let req = &server.requests()[0];
    assert_eq!(req["texts"][0], "Summarize the sentence 'Construct Indicator: i feel sad' in one word:");
    assert!(req.get("prompt_template").is_none());
}

#[test]
fn prompt_sent_for_server_side_application() {
    let server = MockServer::start(trigram_responder());
    let mut config = ProviderConfig::remote(&server.url);
    config.prompt_side = PromptSide::Server;
    config.build().unwrap().embed_batch(&["i feel sad".to_string()]).unwrap();
    let req = &server.requests()[0];
    assert_eq!(req["texts"][0], "i feel sad");
    assert_eq!(req["prompt_template"], config.prompt_template.as_str());
}

#[test]
fn failing_batch_is_reported_by_index() {
    let respond: Responder = Arc::new(|texts: &[String]| {
        if texts.iter().any(|t| t == "indicator number 150") {
            (500, json!({ "error": "boom" }))
        } else {
            (200, json!({ "vectors": texts.iter().map(|_| vec![1.0, 0.0]).collect::<Vec<_>>() }))
        }
    });
    let server = MockServer::start(respond);
    let mut config = bare(&server.url);
    config.max_batch = 100;
    let err = config.build().unwrap().embed_batch(&texts(250)).unwrap_err();
    assert!(matches!(err, EmbedError::Provider { batch: 1, .. }), "{err:?}");
}

#[test]
fn inconsistent_dimensions_rejected() {
    let respond: Responder = Arc::new(|texts: &[String]| {
        let dim = if texts[0] == "indicator number 0" { 3 } else { 4 };
        (200, json!({ "vectors": texts.iter().map(|_| vec![0.5; dim]).collect::<Vec<_>>() }))
    });
    let server = MockServer::start(respond);
    let mut config = bare(&server.url);
    config.max_batch = 2;
    let err = config.build().unwrap().embed_batch(&texts(4)).unwrap_err();
    assert_eq!(err, EmbedError::DimensionMismatch { batch: 1, expected: 3, found: 4 });
}

#[test]
fn wrong_vector_count_and_zero_vectors_fail() {
    let respond: Responder =
        Arc::new(
            |texts: &[String]| {
                if texts.len() > 1 {
                    (200, json!({ "vectors": [[1.0, 0.0]] }))
                } else {
                    (200, json!({ "vectors": [[0.0, 0.0]] }))
                }
            },
        );
    let server = MockServer::start(respond);
    let embedder = ProviderConfig::remote(&server.url).build().unwrap();
    assert!(matches!(embedder.embed_batch(&texts(2)), Err(EmbedError::Provider { batch: 0, .. })));
    assert!(matches!(embedder.embed_batch(&texts(1)), Err(EmbedError::Provider { batch: 0, .. })));
}

#[test]
fn unreachable_endpoint_is_a_provider_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    drop(listener);
    let mut config = ProviderConfig::remote(url);
    config.timeout_ms = 2_000;
    let err = config.build().unwrap().embed_batch(&texts(1)).unwrap_err();
    assert!(matches!(err, EmbedError::Provider { batch: 0, .. }));
}
