//! Dimension naming through a pluggable text-generation client.
//!
//! Each dimension is described by a loading-weighted sample of its
//! indicators. The client answers with a fenced JSON object holding a name, a
//! definition and three example items drawn from the sample. Invalid answers
//! are retried; persistent failures fall back to `Dim {index}`. A final pass
//! makes names unique, re-prompting with the taken names before resorting to
//! a ` (Dim {index})` suffix.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::factor::NetworkModel;

pub const PROMPT_VERSION: &str = "v1";
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/naming_prompt_v1.txt");

pub const DEFAULT_MAX_SAMPLE: usize = 1000;
/// Retries after the first attempt when a response is unusable.
pub const MAX_RETRIES: usize = 3;
/// Re-prompts for a duplicate name before the suffix fallback.
pub const MAX_UNIQUE_ATTEMPTS: usize = 5;
pub const EXAMPLE_COUNT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NamingError {
    #[error("cannot sample from an empty list")]
    EmptySample,
    #[error("loading for item {0} is not finite")]
    NonFiniteLoading(usize),
    #[error("naming client: {0}")]
    Client(String),
    #[error("dimension {dimension}: no usable response after {attempts} attempts ({last})")]
    NamingFailure { dimension: usize, attempts: usize, last: String },
    #[error("indicator `{0}` is not in the corpus")]
    UnknownIndicator(String),
    #[error("invalid naming configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample<T> {
    pub items: Vec<T>,
    /// All weights were zero and the draw was uniform.
    pub uniform_fallback: bool,
}

/// Draws `min(max_n, len)` distinct items without replacement with
/// probability proportional to |loading| (exponential-key order statistics).
/// When everything fits, the whole list is returned ordered by |loading|
/// descending.
pub fn weighted_sample<T: Clone>(items: &[(T, f64)], max_n: usize, seed: u64) -> Result<WeightedSample<T>, NamingError> {
    if items.is_empty() {
        return Err(NamingError::EmptySample);
    }
    if let Some(i) = items.iter().position(|(_, w)| !w.is_finite()) {
        return Err(NamingError::NonFiniteLoading(i));
    }
    let uniform_fallback = items.iter().all(|(_, w)| *w == 0.0);
    let mut order: Vec<usize> = (0..items.len()).collect();
    if max_n >= items.len() {
        order.sort_by(|&a, &b| items[b].1.abs().total_cmp(&items[a].1.abs()));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f64> = items
            .iter()
            .map(|(_, w)| {
                let w = if uniform_fallback { 1.0 } else { w.abs() };
                // 1 - u lies in (0, 1], so the log is finite
                let u: f64 = 1.0 - rng.random::<f64>();
                if w > 0.0 {
                    u.ln() / w
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
        order.truncate(max_n);
    }
    Ok(WeightedSample { items: order.into_iter().map(|i| items[i].0.clone()).collect(), uniform_fallback })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingItem {
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingRequest {
    /// 1-based dimension index.
    pub dimension: usize,
    pub items: Vec<NamingItem>,
    pub avoid_names: Vec<String>,
    /// 0 for the first attempt.
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingResponse {
    pub name: String,
    pub definition: String,
    pub examples: Vec<String>,
}

pub trait NamingClient: Send + Sync {
    /// Raw completion for `prompt`; `request` carries the same content in
    /// structured form.
    fn complete(&self, request: &NamingRequest, prompt: &str) -> Result<String, NamingError>;
}

pub fn render_prompt(request: &NamingRequest) -> String {
    let items: Vec<String> =
        request.items.iter().map(|it| format!("- {} [construct: {}]", it.text, it.label.as_deref().unwrap_or("unknown"))).collect();
    let avoid = if request.avoid_names.is_empty() {
        String::new()
    } else {
        format!("These names are already taken by other dimensions and must not be reused: {}.\n", request.avoid_names.join("; "))
    };
    PROMPT_TEMPLATE
        .replace("{dimension}", &request.dimension.to_string())
        .replace("{items}", &items.join("\n"))
        .replace("{avoid}", &avoid)
        .replace("{example_count}", &request.items.len().min(EXAMPLE_COUNT).to_string())
}

fn fenced_block(raw: &str) -> Option<&str> {
    let start = raw.find("```")? + 3;
    let rest = &raw[start..];
    // skip an optional language tag on the opening fence line
    let body_start = rest.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &rest[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Parses and validates a client response against the sampled items.
pub fn parse_response(raw: &str, items: &[NamingItem]) -> Result<NamingResponse, String> {
    let block = fenced_block(raw).ok_or("response has no fenced JSON block")?;
    let parsed: NamingResponse = serde_json::from_str(block.trim()).map_err(|e| format!("malformed JSON: {e}"))?;
    let name = parsed.name.trim().to_string();
    let definition = parsed.definition.trim().to_string();
    if name.is_empty() {
        return Err("empty name".into());
    }
    if definition.is_empty() {
        return Err("empty definition".into());
    }
    let wanted = items.len().min(EXAMPLE_COUNT);
    if parsed.examples.len() != wanted {
        return Err(format!("expected {wanted} examples, got {}", parsed.examples.len()));
    }
    let texts: HashSet<&str> = items.iter().map(|i| i.text.trim()).collect();
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(wanted);
    for ex in &parsed.examples {
        let ex = ex.trim();
        if !texts.contains(ex) {
            return Err(format!("example `{ex}` is not in the sample"));
        }
        if !seen.insert(ex) {
            return Err(format!("example `{ex}` repeated"));
        }
        examples.push(ex.to_string());
    }
    Ok(NamingResponse { name, definition, examples })
}

/// JSON-lines audit log of every prompt and response.
pub struct Transcript {
    sink: Mutex<Box<dyn Write + Send>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TranscriptEntry {
    pub prompt_version: String,
    pub dimension: usize,
    pub attempt: usize,
    pub purpose: String,
    pub avoid_names: Vec<String>,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub accepted: bool,
}

impl Transcript {
    pub fn new<W: Write + Send + 'static>(writer: W) -> Self {
        Self { sink: Mutex::new(Box::new(writer)) }
    }

    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(std::io::BufWriter::new(std::fs::File::create(path)?)))
    }

    fn record(&self, entry: &TranscriptEntry) {
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        let line = serde_json::to_string(entry).expect("transcript entries serialize");
        if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            log::warn!("naming transcript write failed: {e}");
        }
    }
}

struct Attempt<'a> {
    client: &'a dyn NamingClient,
    transcript: Option<&'a Transcript>,
    purpose: &'static str,
}

impl Attempt<'_> {
    fn run(&self, request: &NamingRequest) -> Result<NamingResponse, String> {
        let prompt = render_prompt(request);
        let raw = self.client.complete(request, &prompt);
        let outcome = match &raw {
            Ok(text) => parse_response(text, &request.items),
            Err(e) => Err(e.to_string()),
        };
        if let Some(t) = self.transcript {
            t.record(&TranscriptEntry {
                prompt_version: PROMPT_VERSION.to_string(),
                dimension: request.dimension,
                attempt: request.attempt,
                purpose: self.purpose.to_string(),
                avoid_names: request.avoid_names.clone(),
                prompt,
                response: raw.ok(),
                error: outcome.as_ref().err().cloned(),
                accepted: outcome.is_ok(),
            });
        }
        outcome
    }
}

/// Names one dimension, retrying unusable responses up to [`MAX_RETRIES`]
/// times.
pub fn name_dimension(
    client: &dyn NamingClient,
    dimension: usize,
    items: &[NamingItem],
    transcript: Option<&Transcript>,
) -> Result<NamingResponse, NamingError> {
    if items.is_empty() {
        return Err(NamingError::EmptySample);
    }
    let runner = Attempt { client, transcript, purpose: "name" };
    let mut last = String::new();
    for attempt in 0..=MAX_RETRIES {
        let request = NamingRequest { dimension, items: items.to_vec(), avoid_names: Vec::new(), attempt };
        match runner.run(&request) {
            Ok(r) => return Ok(r),
            Err(e) => last = e,
        }
    }
    Err(NamingError::NamingFailure { dimension, attempts: MAX_RETRIES + 1, last })
}

/// Per-dimension naming state before the uniqueness pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionDraft {
    pub index: usize,
    pub items: Vec<NamingItem>,
    pub name: String,
    pub definition: String,
    pub examples: Vec<String>,
    /// Naming failed and the name is the `Dim {index}` fallback.
    pub failed: bool,
}

impl DimensionDraft {
    pub fn from_response(index: usize, items: Vec<NamingItem>, r: NamingResponse) -> Self {
        Self { index, items, name: r.name, definition: r.definition, examples: r.examples, failed: false }
    }

    pub fn fallback(index: usize, items: Vec<NamingItem>) -> Self {
        Self { index, items, name: format!("Dim {index}"), definition: String::new(), examples: Vec::new(), failed: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueReport {
    /// Dimensions renamed by a re-prompt.
    pub reprompted: Vec<usize>,
    /// Dimensions that received the ` (Dim {index})` suffix.
    pub suffixed: Vec<usize>,
}

fn name_key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Makes names pairwise distinct (case-insensitively). Drafts are processed
/// in index order, so the lowest index keeps a contested name.
pub fn ensure_unique(drafts: &mut [DimensionDraft], client: &dyn NamingClient, transcript: Option<&Transcript>) -> UniqueReport {
    drafts.sort_by_key(|d| d.index);
    let runner = Attempt { client, transcript, purpose: "dedupe" };
    let mut taken: Vec<String> = Vec::new();
    let mut taken_keys: HashSet<String> = HashSet::new();
    let mut report = UniqueReport::default();
    for d in drafts.iter_mut() {
        if taken_keys.contains(&name_key(&d.name)) && !d.failed && !d.items.is_empty() {
            for attempt in 1..=MAX_UNIQUE_ATTEMPTS {
                let request = NamingRequest { dimension: d.index, items: d.items.clone(), avoid_names: taken.clone(), attempt };
                if let Ok(r) = runner.run(&request) {
                    if !taken_keys.contains(&name_key(&r.name)) {
                        d.name = r.name;
                        d.definition = r.definition;
                        d.examples = r.examples;
                        report.reprompted.push(d.index);
                        break;
                    }
                }
            }
        }
        if taken_keys.contains(&name_key(&d.name)) {
            while taken_keys.contains(&name_key(&d.name)) {
                d.name = format!("{} (Dim {})", d.name, d.index);
            }
            report.suffixed.push(d.index);
        }
        taken_keys.insert(name_key(&d.name));
        taken.push(d.name.clone());
    }
    report
}

/// Names the dimension after the most common construct label in its sample
/// (ties to the alphabetically first). Ignores `avoid_names`, so duplicates
/// always reach the suffix fallback.
#[derive(Debug, Clone, Default)]
pub struct MockNamingClient {
    pub seed: u64,
}

fn title_case(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl NamingClient for MockNamingClient {
    fn complete(&self, request: &NamingRequest, _prompt: &str) -> Result<String, NamingError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for it in &request.items {
            if let Some(l) = it.label.as_deref() {
                *counts.entry(l).or_default() += 1;
            }
        }
        let modal = counts.iter().fold(None::<(&str, usize)>, |best, (&l, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        });
        let (name, definition) = match modal {
            Some((label, _)) => (title_case(label), format!("Items concerned with {label}.")),
            None => ("Unlabeled Construct".to_string(), "Items without a construct label.".to_string()),
        };
        let n = request.items.len();
        let start = if n == 0 { 0 } else { (self.seed % n as u64) as usize };
        let examples: Vec<&str> = (0..n.min(EXAMPLE_COUNT)).map(|k| request.items[(start + k) % n].text.as_str()).collect();
        let body = serde_json::json!({ "name": name, "definition": definition, "examples": examples });
        Ok(format!("```json\n{body}\n```"))
    }
}

/// Chat-completion style HTTP client. Sends
/// `{"model", "messages": [{"role": "user", "content": prompt}], "temperature": 0}`
/// and reads `choices[0].message.content`, or a top-level `content` string.
pub struct RemoteNamingClient {
    endpoint: String,
    model: String,
    http: ureq::Agent,
}

impl RemoteNamingClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, timeout_ms: u64) -> Result<Self, NamingError> {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint: endpoint.into(), model: model.into(), http })
    }
}

impl NamingClient for RemoteNamingClient {
    fn complete(&self, _request: &NamingRequest, prompt: &str) -> Result<String, NamingError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let mut resp = self.http.post(&self.endpoint).send_json(&body).map_err(|e| NamingError::Client(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(NamingError::Client(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| NamingError::Client(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .or_else(|| value.get("content"))
            .and_then(|v| v.as_str())
            .map(String::from)
            .ok_or_else(|| NamingError::Client("response has no message content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamingKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingClientConfig {
    pub kind: NamingKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_naming_timeout")]
    pub timeout_ms: u64,
}

fn default_naming_timeout() -> u64 {
    60_000
}

impl NamingClientConfig {
    pub fn mock(seed: u64) -> Self {
        Self { kind: NamingKind::Mock, endpoint: None, model: None, seed, timeout_ms: default_naming_timeout() }
    }

    pub fn build(&self) -> Result<Box<dyn NamingClient>, NamingError> {
        match self.kind {
            NamingKind::Mock => Ok(Box::new(MockNamingClient { seed: self.seed })),
            NamingKind::Remote => {
                let endpoint = self.endpoint.clone().ok_or_else(|| NamingError::InvalidConfig("remote naming needs an endpoint".into()))?;
                let model = self.model.clone().unwrap_or_default();
                Ok(Box::new(RemoteNamingClient::new(endpoint, model, self.timeout_ms)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamingOptions {
    pub max_sample: usize,
    pub seed: u64,
}

impl Default for NamingOptions {
    fn default() -> Self {
        Self { max_sample: DEFAULT_MAX_SAMPLE, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingReport {
    pub failures: Vec<usize>,
    pub uniform_fallback: Vec<usize>,
    #[serde(flatten)]
    pub unique: UniqueReport,
}

/// Names every dimension of `model` from the indicators loading on it at or
/// above the model threshold (all indicators when none qualify), then makes
/// the names unique and refreshes indicator counts.
pub fn name_network(
    model: &mut NetworkModel,
    corpus: &Corpus,
    client: &dyn NamingClient,
    options: NamingOptions,
    transcript: Option<&Transcript>,
) -> Result<NamingReport, NamingError> {
    let indicators = model
        .indicator_ids
        .iter()
        .map(|id| corpus.get(id).ok_or_else(|| NamingError::UnknownIndicator(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = NamingReport::default();
    let mut drafts = Vec::with_capacity(model.k());
    for j in 0..model.k() {
        let index = j + 1;
        let column = model.lambda.column(j);
        let mut candidates: Vec<(usize, f64)> =
            column.iter().enumerate().filter(|(_, l)| l.abs() >= model.threshold).map(|(i, l)| (i, l.abs())).collect();
        if candidates.is_empty() {
            candidates = column.iter().enumerate().map(|(i, l)| (i, l.abs())).collect();
        }
        let sample = weighted_sample(&candidates, options.max_sample, options.seed.wrapping_add(j as u64))?;
        if sample.uniform_fallback {
            report.uniform_fallback.push(index);
        }
        let items: Vec<NamingItem> = sample
            .items
            .iter()
            .map(|&i| NamingItem { text: indicators[i].raw_text.trim().to_string(), label: indicators[i].construct_label.clone() })
            .collect();
        match name_dimension(client, index, &items, transcript) {
            Ok(r) => drafts.push(DimensionDraft::from_response(index, items, r)),
            Err(NamingError::NamingFailure { last, .. }) => {
                log::warn!("dimension {index}: naming failed ({last}); using fallback name");
                report.failures.push(index);
                drafts.push(DimensionDraft::fallback(index, items));
            }
            Err(e) => return Err(e),
        }
    }
    report.unique = ensure_unique(&mut drafts, client, transcript);
    for (meta, d) in model.dimensions.iter_mut().zip(drafts) {
        meta.name = d.name;
        meta.definition = d.definition;
        meta.example_indicators = d.examples;
    }
    model.refresh_counts();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn items(texts: &[(&str, &str)]) -> Vec<NamingItem> {
        texts.iter().map(|(t, l)| NamingItem { text: t.to_string(), label: Some(l.to_string()) }).collect()
    }

    struct Scripted {
        responses: Vec<String>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(responses: &[&str]) -> Self {
            Self { responses: responses.iter().map(|s| s.to_string()).collect(), calls: AtomicUsize::new(0) }
        }
    }

    impl NamingClient for Scripted {
        fn complete(&self, _: &NamingRequest, _: &str) -> Result<String, NamingError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.responses[i.min(self.responses.len() - 1)].clone())
        }
    }

    fn fenced(name: &str, def: &str, ex: &[&str]) -> String {
        format!("Sure.\n```json\n{}\n```\n", serde_json::json!({"name": name, "definition": def, "examples": ex}))
    }

    #[test]
    fn whole_list_when_it_fits() {
        let s = weighted_sample(&[("a", 0.2), ("b", -0.9), ("c", 0.5)], 10, 1).unwrap();
        assert_eq!(s.items, vec!["b", "c", "a"]);
        assert!(!s.uniform_fallback);
    }

    #[test]
    fn sampling_is_seeded() {
        let list: Vec<(usize, f64)> = (0..50).map(|i| (i, (i as f64 + 1.0) / 50.0)).collect();
        let a = weighted_sample(&list, 10, 7).unwrap();
        assert_eq!(a, weighted_sample(&list, 10, 7).unwrap());
        assert_ne!(a, weighted_sample(&list, 10, 8).unwrap());
        let mut distinct = a.items.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let s = weighted_sample(&[(1, 0.0), (2, 0.0), (3, 0.0)], 2, 3).unwrap();
        assert!(s.uniform_fallback);
        assert_eq!(s.items.len(), 2);
        assert_eq!(weighted_sample::<u8>(&[], 2, 0), Err(NamingError::EmptySample));
        assert_eq!(weighted_sample(&[(1, f64::NAN)], 2, 0), Err(NamingError::NonFiniteLoading(0)));
    }

    #[test]
    fn zero_weight_items_come_last() {
        let s = weighted_sample(&[("z", 0.0), ("a", 0.3), ("b", 0.4)], 2, 11).unwrap();
        assert!(!s.items.contains(&"z"));
    }

    #[test]
    fn parse_validates_fields() {
        let sample = items(&[("i sleep badly", "sleep"), ("i wake early", "sleep"), ("i feel rested", "sleep"), ("x", "y")]);
        let ok = parse_response(&fenced("Sleep", "Sleep quality.", &["i sleep badly", "i wake early", "x"]), &sample).unwrap();
        assert_eq!(ok.name, "Sleep");
        assert!(parse_response("no fence", &sample).is_err());
        assert!(parse_response(&fenced("Sleep", " ", &["i sleep badly", "i wake early", "x"]), &sample).is_err());
        assert!(parse_response(&fenced("Sleep", "d", &["i sleep badly", "i wake early", "nope"]), &sample).is_err());
        assert!(parse_response(&fenced("Sleep", "d", &["i sleep badly", "i sleep badly", "x"]), &sample).is_err());
        assert!(parse_response(&fenced("Sleep", "d", &["x"]), &sample).is_err());
        let small = items(&[("only", "l")]);
        assert!(parse_response(&fenced("L", "d", &["only"]), &small).is_ok());
    }

    #[test]
    fn retries_then_fails() {
        let sample = items(&[("a", "l")]);
        let client = Scripted::new(&[&fenced("X", "", &["a"])]);
        let err = name_dimension(&client, 4, &sample, None).unwrap_err();
        assert!(matches!(err, NamingError::NamingFailure { dimension: 4, attempts: 4, .. }));
        assert_eq!(client.calls.load(Ordering::SeqCst), 4);

        let client = Scripted::new(&["garbage", &fenced("X", "def", &["a"])]);
        assert_eq!(name_dimension(&client, 1, &sample, None).unwrap().name, "X");
    }

    #[test]
    fn mock_uses_modal_label() {
        let sample = items(&[("a", "anxiety"), ("b", "worry"), ("c", "anxiety"), ("d", "worry"), ("e", "anxiety")]);
        let r = name_dimension(&MockNamingClient::default(), 1, &sample, None).unwrap();
        assert_eq!(r.name, "Anxiety");
        assert_eq!(r.examples, vec!["a", "b", "c"]);
    }

    #[test]
    fn suffix_fallback_for_stubborn_duplicates() {
        let sample = items(&[("a", "anxiety")]);
        let mut drafts: Vec<DimensionDraft> = [2usize, 9]
            .iter()
            .map(|&i| {
                DimensionDraft::from_response(
                    i,
                    sample.clone(),
                    NamingResponse { name: "Anxiety".into(), definition: "d".into(), examples: vec!["a".into()] },
                )
            })
            .collect();
        let buf = SharedBuf::default();
        let transcript = Transcript::new(buf.clone());
        let report = ensure_unique(&mut drafts, &MockNamingClient::default(), Some(&transcript));
        assert_eq!(drafts[0].name, "Anxiety");
        assert_eq!(drafts[1].name, "Anxiety (Dim 9)");
        assert_eq!(report.suffixed, vec![9]);
        let lines = buf.lines();
        assert_eq!(lines.len(), MAX_UNIQUE_ATTEMPTS);
        let entry: TranscriptEntry = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(entry.avoid_names, vec!["Anxiety".to_string()]);
        assert!(entry.prompt.contains("Anxiety"));
    }

    #[test]
    fn duplicate_resolved_on_first_retry() {
        let sample = items(&[("a", "l")]);
        let mut drafts: Vec<DimensionDraft> = (1..=2)
            .map(|i| {
                DimensionDraft::from_response(
                    i,
                    sample.clone(),
                    NamingResponse { name: "Mood".into(), definition: "d".into(), examples: vec!["a".into()] },
                )
            })
            .collect();
        let client = Scripted::new(&[&fenced("Affect", "d", &["a"])]);
        let report = ensure_unique(&mut drafts, &client, None);
        assert_eq!(drafts[1].name, "Affect");
        assert!(report.suffixed.is_empty());
        assert_eq!(report.reprompted, vec![2]);
    }

    #[test]
    fn unique_names_unchanged_without_duplicates() {
        let mut drafts = vec![DimensionDraft::fallback(1, vec![]), DimensionDraft::fallback(2, vec![])];
        let before = drafts.clone();
        assert_eq!(ensure_unique(&mut drafts, &MockNamingClient::default(), None), UniqueReport::default());
        assert_eq!(drafts, before);
    }

    #[test]
    fn prompt_mentions_items_and_labels() {
        let req = NamingRequest { dimension: 3, items: items(&[("i worry", "anxiety")]), avoid_names: vec![], attempt: 0 };
        let p = render_prompt(&req);
        assert!(p.contains("dimension 3"));
        assert!(p.contains("- i worry [construct: anxiety]"));
        assert!(!p.contains("{avoid}"));
    }

    #[derive(Clone, Default)]
    struct SharedBuf(std::sync::Arc<Mutex<Vec<u8>>>);

    impl SharedBuf {
        fn lines(&self) -> Vec<String> {
            String::from_utf8(self.0.lock().unwrap().clone()).unwrap().lines().map(String::from).collect()
        }
    }

    impl Write for SharedBuf {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
}
