//! HTTP API over a directory of immutable networks.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use aligns_core::embed::{EmbeddingCache, ProviderConfig, ProviderKind};
use aligns_core::factor::{explained_variance, primary_assignments, DimensionMeta, ExplainedVariance, Projector};
use aligns_core::netgraph::{build_graph_with, export_graph, search, write_adjacency_csv, NetworkGraph, SearchHit};
use aligns_core::network::Network;
use aligns_core::pipeline::{
    correlations_csv, embeddings_csv, loadings_csv, preprocess_items, project_embedded, projection_csv, PipelineError, ProjectedRow,
    Projection, ProjectionInput,
};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::batcher::EmbedBatcher;
use crate::config::ServiceConfig;

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;
pub const DEFAULT_SEARCH_LIMIT: usize = 50;
pub const TOTAL_COUNT_HEADER: &str = "x-total-count";
const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// A network prepared for serving.
pub struct LoadedNetwork {
    pub id: String,
    pub network: Network,
    pub projector: Result<Projector, String>,
    pub texts: Vec<String>,
    primary: Vec<Option<(usize, f64)>>,
    explained: ExplainedVariance,
    batcher: EmbedBatcher,
}

pub struct AppState {
    config: ServiceConfig,
    networks: RwLock<HashMap<String, Arc<LoadedNetwork>>>,
    batchers: RwLock<HashMap<String, EmbedBatcher>>,
}

/// Provider used to embed items for `network`: the one it was built with,
/// pointed at the service's endpoint when both are remote.
pub fn provider_for(network: &Network, service: &ProviderConfig) -> ProviderConfig {
    let mut p = network.provider.clone().unwrap_or_else(|| service.clone());
    if p.kind == ProviderKind::RemoteBatch && service.kind == ProviderKind::RemoteBatch && service.endpoint.is_some() {
        p.endpoint = service.endpoint.clone();
    }
    p.with_env_overrides()
}

impl AppState {
    /// Must be called inside a tokio runtime (batchers spawn tasks).
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { config, networks: RwLock::new(HashMap::new()), batchers: RwLock::new(HashMap::new()) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn batcher_for(&self, provider: &ProviderConfig) -> Result<EmbedBatcher, String> {
        let key = format!("{}:{}", provider.fingerprint(), provider.max_batch);
        if let Some(b) = self.batchers.read().expect("batcher lock").get(&key) {
            return Ok(b.clone());
        }
        let embedder = provider.build().map_err(|e| e.to_string())?;
        let cache = match &self.config.cache_dir {
            Some(dir) => Some(EmbeddingCache::open(dir).map_err(|e| e.to_string())?),
            None => None,
        };
        let batcher =
            EmbedBatcher::spawn(Arc::from(embedder), cache, provider.max_batch, Duration::from_millis(self.config.batch_window_ms));
        Ok(self.batchers.write().expect("batcher lock").entry(key).or_insert(batcher).clone())
    }

    pub fn insert_network(&self, id: impl Into<String>, network: Network) -> Result<(), String> {
        let id = id.into();
        let provider = provider_for(&network, &self.config.embed_provider);
        let batcher = self.batcher_for(&provider)?;
        let projector = Projector::new(&network.model).map_err(|e| e.to_string());
        let loaded = LoadedNetwork {
            texts: network.texts(),
            primary: primary_assignments(&network.model.lambda, network.model.threshold),
            explained: explained_variance(&network.model),
            projector,
            batcher,
            id: id.clone(),
            network,
        };
        self.networks.write().expect("network lock").insert(id, Arc::new(loaded));
        Ok(())
    }

    /// Loads every subdirectory holding a manifest; unreadable ones are
    /// skipped with a warning. Returns the ids loaded.
    pub fn load_dir(&self, dir: &Path) -> std::io::Result<Vec<String>> {
        let mut ids = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.filter_map(Result::ok).collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if !path.join(aligns_core::network::MANIFEST_FILE).is_file() {
                continue;
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            match Network::load(&path).map_err(|e| e.to_string()).and_then(|n| self.insert_network(id.clone(), n)) {
                Ok(()) => ids.push(id),
                Err(e) => log::warn!("skipping network {}: {e}", path.display()),
            }
        }
        Ok(ids)
    }

    fn get(&self, id: &str) -> Result<Arc<LoadedNetwork>, ApiError> {
        self.networks
            .read()
            .expect("network lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown network `{id}`")))
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    items: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: message.into(), items: Vec::new() } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NoItems => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            PipelineError::EmptyItems(ids) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody { error: "items are empty after preprocessing".into(), items: ids },
            },
            PipelineError::Embed(_) | PipelineError::EmbeddingDimension { .. } => Self::new(StatusCode::BAD_GATEWAY, e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

fn csv_response(body: String, filename: &str) -> Response {
    let disposition = format!("attachment; filename=\"{filename}\"");
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("text/csv; charset=utf-8")),
            (header::CONTENT_DISPOSITION, HeaderValue::from_str(&disposition).expect("ascii filename")),
        ],
        body,
    )
        .into_response()
}

fn json_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], body).into_response()
}

#[derive(Serialize)]
struct NetworkSummary {
    id: String,
    p: usize,
    k: usize,
    threshold: f64,
    extraction: aligns_core::factor::Extraction,
    dimensions: Vec<DimensionMeta>,
}

#[derive(Serialize)]
struct NetworkDetail {
    #[serde(flatten)]
    summary: NetworkSummary,
    explained_variance: ExplainedVariance,
    flags: aligns_core::factor::ModelFlags,
    embedding_dim: Option<usize>,
}

fn summary(n: &LoadedNetwork) -> NetworkSummary {
    let m = &n.network.model;
    NetworkSummary {
        id: n.id.clone(),
        p: m.p(),
        k: m.k(),
        threshold: m.threshold,
        extraction: m.extraction,
        dimensions: m.dimensions.clone(),
    }
}

async fn list_networks(State(state): State<Arc<AppState>>) -> Json<Vec<NetworkSummary>> {
    let nets = state.networks.read().expect("network lock");
    let mut out: Vec<NetworkSummary> = nets.values().map(|n| summary(n)).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

async fn network_detail(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<NetworkDetail>, ApiError> {
    let n = state.get(&id)?;
    Ok(Json(NetworkDetail {
        summary: summary(&n),
        explained_variance: n.explained.clone(),
        flags: n.network.model.flags,
        embedding_dim: n.network.embedding_dim(),
    }))
}

#[derive(Deserialize)]
struct GraphQuery {
    min_weight: Option<String>,
}

fn graph_of(n: &LoadedNetwork, min_weight: Option<String>) -> Result<NetworkGraph, ApiError> {
    let min_weight = match min_weight {
        None => 1,
        Some(s) => s.parse::<usize>().ok().filter(|w| *w >= 1).ok_or_else(|| ApiError::bad_request("min_weight must be an integer ≥ 1"))?,
    };
    Ok(build_graph_with(&n.network.model, min_weight))
}

async fn graph(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<GraphQuery>,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    Ok(json_response(export_graph(&graph_of(&n, q.min_weight)?)))
}

async fn adjacency(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<GraphQuery>,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    let g = graph_of(&n, q.min_weight)?;
    let mut out = Vec::new();
    write_adjacency_csv(&mut out, &n.network.model, &g).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(csv_response(String::from_utf8(out).expect("utf-8 csv"), &format!("{id}-adjacency.csv")))
}

#[derive(Deserialize)]
struct PageQuery {
    page: Option<String>,
    page_size: Option<String>,
    q: Option<String>,
}

/// 1-based page and page size.
fn pagination(q: &PageQuery) -> Result<(usize, usize), ApiError> {
    let page = match &q.page {
        None => 1,
        Some(s) => s.parse::<usize>().ok().filter(|p| *p >= 1).ok_or_else(|| ApiError::bad_request("page must be an integer ≥ 1"))?,
    };
    let size = match &q.page_size {
        None => DEFAULT_PAGE_SIZE,
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=MAX_PAGE_SIZE).contains(n))
            .ok_or_else(|| ApiError::bad_request(format!("page_size must be an integer in 1..={MAX_PAGE_SIZE}")))?,
    };
    Ok((page, size))
}

fn page_of<T: Clone>(items: &[T], page: usize, size: usize) -> Vec<T> {
    let start = (page - 1).saturating_mul(size);
    items.iter().skip(start).take(size).cloned().collect()
}

fn with_total<T: Serialize>(total: usize, body: T) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(TOTAL_COUNT_HEADER, HeaderValue::from(total));
    (headers, Json(body)).into_response()
}

#[derive(Clone, Serialize)]
struct CrossLoading {
    dimension: usize,
    name: String,
    loading: f64,
}

#[derive(Clone, Serialize)]
struct DimensionIndicator {
    id: String,
    text: String,
    loading: f64,
    primary: bool,
    cross_loadings: Vec<CrossLoading>,
}

#[derive(Serialize)]
struct DimensionPage {
    network: String,
    dimension: DimensionMeta,
    total: usize,
    page: usize,
    page_size: usize,
    indicators: Vec<DimensionIndicator>,
}

async fn dimension(
    State(state): State<Arc<AppState>>,
    UrlPath((id, k)): UrlPath<(String, String)>,
    Query(q): Query<PageQuery>,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    let (page, page_size) = pagination(&q)?;
    let m = &n.network.model;
    let k: usize = k
        .parse()
        .ok()
        .filter(|k| (1..=m.k()).contains(k))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("network `{id}` has no dimension `{k}`")))?;
    let j = k - 1;
    let mut rows: Vec<(usize, f64)> = (0..m.p()).map(|i| (i, m.lambda[(i, j)])).filter(|(_, l)| l.abs() >= m.threshold).collect();
    rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let all: Vec<DimensionIndicator> = rows
        .iter()
        .map(|&(i, loading)| DimensionIndicator {
            id: m.indicator_ids[i].clone(),
            text: n.texts[i].clone(),
            loading,
            primary: n.primary[i].map(|(pj, _)| pj) == Some(j),
            cross_loadings: (0..m.k())
                .filter(|&o| o != j && m.lambda[(i, o)].abs() >= m.threshold)
                .map(|o| CrossLoading { dimension: o + 1, name: m.dimensions[o].name.clone(), loading: m.lambda[(i, o)] })
                .collect(),
        })
        .collect();
    let total = all.len();
    let body = DimensionPage {
        network: id,
        dimension: m.dimensions[j].clone(),
        total,
        page,
        page_size,
        indicators: page_of(&all, page, page_size),
    };
    Ok(with_total(total, body))
}

#[derive(Clone, Serialize)]
struct MatrixRow {
    id: String,
    text: String,
    loadings: Vec<f64>,
    primary_dimension: Option<usize>,
}

#[derive(Serialize)]
struct MatrixPage {
    network: String,
    dimensions: Vec<String>,
    total: usize,
    page: usize,
    page_size: usize,
    rows: Vec<MatrixRow>,
}

/// The loading matrix, optionally filtered by a case-insensitive substring
/// of indicator id or text.
async fn indicators(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    let (page, page_size) = pagination(&q)?;
    let m = &n.network.model;
    let needle = q.q.as_deref().unwrap_or("").trim().to_lowercase();
    let matching: Vec<usize> = (0..m.p())
        .filter(|&i| {
            needle.is_empty() || n.texts[i].to_lowercase().contains(&needle) || m.indicator_ids[i].to_lowercase().contains(&needle)
        })
        .collect();
    let total = matching.len();
    let rows = page_of(&matching, page, page_size)
        .into_iter()
        .map(|i| MatrixRow {
            id: m.indicator_ids[i].clone(),
            text: n.texts[i].clone(),
            loadings: m.lambda.row(i).iter().copied().collect(),
            primary_dimension: n.primary[i].map(|(j, _)| j + 1),
        })
        .collect();
    let body = MatrixPage { network: id, dimensions: m.dimensions.iter().map(|d| d.name.clone()).collect(), total, page, page_size, rows };
    Ok(with_total(total, body))
}

#[derive(Deserialize)]
struct SearchQuery {
    q: Option<String>,
    limit: Option<String>,
}

#[derive(Serialize)]
struct SearchResponse {
    query: String,
    hits: Vec<SearchHit>,
}

async fn search_network(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SearchQuery>,
) -> Result<Json<SearchResponse>, ApiError> {
    let n = state.get(&id)?;
    let query = q.q.unwrap_or_default();
    if query.trim().is_empty() {
        return Err(ApiError::bad_request("query parameter q must not be empty"));
    }
    let limit = match q.limit {
        None => DEFAULT_SEARCH_LIMIT,
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|l| (1..=MAX_PAGE_SIZE).contains(l))
            .ok_or_else(|| ApiError::bad_request(format!("limit must be an integer in 1..={MAX_PAGE_SIZE}")))?,
    };
    let hits = search(&n.network.model, &n.texts, &query, limit);
    Ok(Json(SearchResponse { query, hits }))
}

#[derive(Deserialize)]
struct LoadingsQuery {
    suppress: Option<String>,
}

async fn loadings_download(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LoadingsQuery>,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    let suppress = match q.suppress {
        None => None,
        Some(s) => Some(
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| ApiError::bad_request("suppress must be a non-negative number"))?,
        ),
    };
    Ok(csv_response(loadings_csv(&n.network, suppress), &format!("{id}-loadings.csv")))
}

#[derive(Deserialize)]
struct ItemBody {
    #[serde(default)]
    id: Option<String>,
    text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProjectBody {
    List(Vec<ItemBody>),
    Wrapped { items: Vec<ItemBody> },
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

#[derive(Serialize)]
struct Downloads {
    embeddings: String,
    correlations: String,
    loadings: String,
}

#[derive(Serialize)]
struct ProjectResponse {
    network: String,
    threshold: f64,
    dimensions: Vec<String>,
    rows: Vec<ProjectedRow>,
    downloads: Downloads,
}

fn parse_items(body: &Bytes) -> Result<Vec<ProjectionInput>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "request body is empty"));
    }
    let parsed: ProjectBody = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    let items = match parsed {
        ProjectBody::List(v) | ProjectBody::Wrapped { items: v } => v,
    };
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, it)| ProjectionInput { id: it.id.unwrap_or_else(|| format!("item{}", i + 1)), text: it.text })
        .collect())
}

async fn run_projection(state: &AppState, n: &LoadedNetwork, body: &Bytes) -> Result<(Vec<ProjectionInput>, Projection), ApiError> {
    let items = parse_items(body)?;
    if items.is_empty() {
        return Err(PipelineError::NoItems.into());
    }
    let limit = state.config.max_upload_indicators;
    if items.len() > limit {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("{} items exceed the limit of {limit}", items.len())));
    }
    let texts = preprocess_items(&items)?;
    let projector = n.projector.as_ref().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.clone()))?;
    let vectors = n.batcher.embed(texts).await.map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    let projection = project_embedded(&n.network, projector, &items, vectors)?;
    Ok((items, projection))
}

async fn project(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FormatQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    };
    let (_, projection) = run_projection(&state, &n, &body).await?;
    if csv {
        return Ok(csv_response(projection_csv(&n.network, &projection), &format!("{id}-projection.csv")));
    }
    let base = format!("/v1/networks/{id}/project/download");
    let m = &n.network.model;
    Ok(Json(ProjectResponse {
        network: id,
        threshold: m.threshold,
        dimensions: m.dimensions.iter().map(|d| d.name.clone()).collect(),
        rows: projection.rows,
        downloads: Downloads {
            embeddings: format!("{base}/embeddings"),
            correlations: format!("{base}/correlations"),
            loadings: format!("{base}/loadings"),
        },
    })
    .into_response())
}

/// Stateless download: re-runs the projection for the posted items and
/// returns one of its artifacts as CSV.
async fn project_download(
    State(state): State<Arc<AppState>>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let n = state.get(&id)?;
    if !matches!(kind.as_str(), "embeddings" | "correlations" | "loadings") {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown download `{kind}`")));
    }
    let (items, projection) = run_projection(&state, &n, &body).await?;
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let csv = match kind.as_str() {
        "embeddings" => embeddings_csv(&ids, &projection.embeddings),
        "correlations" => correlations_csv(&ids, &n.network.model.indicator_ids, &projection.correlations),
        _ => projection_csv(&n.network, &projection),
    };
    Ok(csv_response(csv, &format!("{id}-{kind}.csv")))
}

#[derive(Serialize)]
struct AccessLog<'a> {
    method: &'a str,
    path: &'a str,
    query: Option<&'a str>,
    status: u16,
    duration_ms: f64,
}

/// One JSON line per request under the `aligns::access` log target.
async fn access_log(request: Request, next: Next) -> Response {
    let method = request.method().to_string();
    let path = request.uri().path().to_string();
    let query = request.uri().query().map(String::from);
    let start = Instant::now();
    let response = next.run(request).await;
    let entry = AccessLog {
        method: &method,
        path: &path,
        query: query.as_deref(),
        status: response.status().as_u16(),
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    log::info!(target: "aligns::access", "{}", serde_json::to_string(&entry).expect("log entry serializes"));
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/networks", get(list_networks))
        .route("/v1/networks/{id}", get(network_detail))
        .route("/v1/networks/{id}/graph", get(graph))
        .route("/v1/networks/{id}/adjacency.csv", get(adjacency))
        .route("/v1/networks/{id}/dimensions/{k}", get(dimension))
        .route("/v1/networks/{id}/indicators", get(indicators))
        .route("/v1/networks/{id}/search", get(search_network))
        .route("/v1/networks/{id}/loadings.csv", get(loadings_download))
        .route("/v1/networks/{id}/project", post(project))
        .route("/v1/networks/{id}/project/download/{kind}", post(project_download))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("server I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads all networks under `config.networks_dir` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    config.validate()?;
    let state = AppState::new(config.clone());
    let ids = state.load_dir(&config.networks_dir)?;
    log::info!("loaded {} network(s): {}", ids.len(), ids.join(", "));
    let listener = tokio::net::TcpListener::bind((config.bind.as_str(), config.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
