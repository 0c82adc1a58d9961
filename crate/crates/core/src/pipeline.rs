//! End-to-end operations shared by the CLI and the HTTP service: building a
//! network from a corpus, projecting new items, and CSV exports.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{preprocess, Corpus, CorpusError};
use crate::embed::{cache_get_or_embed, EmbedError, Embedder, EmbeddingCache, EmbeddingVector, ProviderConfig};
use crate::factor::{explained_variance, fit_network, ExplainedVariance, FactorError, FitOptions, ModelFlags, Projector};
use crate::naming::{name_network, NamingClient, NamingError, NamingOptions, NamingReport, Transcript};
use crate::netgraph::{build_graph, NetworkGraph};
use crate::network::{Network, NetworkError};
use crate::simmat::{cross_similarity, similarity_matrix, SimilarityError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("no items to project")]
    NoItems,
    #[error("items empty after preprocessing: {}", .0.join(", "))]
    EmptyItems(Vec<String>),
    #[error("network has no stored corpus embeddings")]
    NoEmbeddings,
    #[error("provider returned {found}-dimensional vectors, network expects {expected}")]
    EmbeddingDimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub fit: FitOptions,
    pub naming: NamingOptions,
    /// Rows per parallel block when filling the similarity matrix.
    pub block: usize,
    /// Store `similarity.bin` with the network.
    pub keep_similarity: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), naming: NamingOptions::default(), block: 64, keep_similarity: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub p: usize,
    pub k: usize,
    pub flags: ModelFlags,
    pub explained: ExplainedVariance,
    pub naming: NamingReport,
    pub graph: NetworkGraph,
}

/// Embeds through `cache` when given.
pub fn embed_texts(embedder: &dyn Embedder, cache: Option<&EmbeddingCache>, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
    match cache {
        Some(c) => cache_get_or_embed(c, embedder, texts),
        None => embedder.embed_batch(texts),
    }
}

/// ingest → embed → similarity → factor → name. The returned network is not
/// yet written anywhere.
pub fn build_network(
    corpus: Corpus,
    embedder: &dyn Embedder,
    cache: Option<&EmbeddingCache>,
    provider: Option<ProviderConfig>,
    namer: &dyn NamingClient,
    options: &BuildOptions,
    transcript: Option<&Transcript>,
) -> Result<(Network, BuildReport), PipelineError> {
    let vectors = embed_texts(embedder, cache, &corpus.texts())?;
    let sim = similarity_matrix(&vectors, Some(corpus.ids()), options.block)?;
    let mut model = fit_network(&sim, options.fit)?;
    let naming = name_network(&mut model, &corpus, namer, options.naming, transcript)?;
    let report = BuildReport {
        p: model.p(),
        k: model.k(),
        flags: model.flags,
        explained: explained_variance(&model),
        naming,
        graph: build_graph(&model),
    };
    let similarity = options.keep_similarity.then_some(sim);
    let network = Network::new(model, corpus, Some(vectors), similarity, provider)?;
    Ok((network, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionInput {
    pub id: String,
    pub text: String,
}

/// Preprocesses every item, reporting all that end up empty (by id) at once.
pub fn preprocess_items(items: &[ProjectionInput]) -> Result<Vec<String>, PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::NoItems);
    }
    let mut empty = Vec::new();
    let mut texts = Vec::with_capacity(items.len());
    for it in items {
        match preprocess(&it.text) {
            Ok(t) => texts.push(t),
            Err(_) => empty.push(it.id.clone()),
        }
    }
    if empty.is_empty() {
        Ok(texts)
    } else {
        Err(PipelineError::EmptyItems(empty))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifyingDimension {
    /// 1-based.
    pub dimension: usize,
    pub name: String,
    pub loading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedRow {
    pub id: String,
    pub text: String,
    /// Full loading row, one entry per dimension.
    pub loadings: Vec<f64>,
    /// Dimensions with |loading| ≥ threshold, by |loading| descending
    /// (lower index first on ties).
    pub qualifying: Vec<QualifyingDimension>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub rows: Vec<ProjectedRow>,
    pub embeddings: Vec<EmbeddingVector>,
    /// n×p cosine similarities against the corpus.
    pub correlations: DMatrix<f64>,
}

/// Projects already-embedded items. `vectors` align with `items`.
pub fn project_embedded(
    network: &Network,
    projector: &Projector,
    items: &[ProjectionInput],
    vectors: Vec<EmbeddingVector>,
) -> Result<Projection, PipelineError> {
    let corpus = network.embeddings.as_ref().ok_or(PipelineError::NoEmbeddings)?;
    let expected = network.embedding_dim().ok_or(PipelineError::NoEmbeddings)?;
    if let Some(v) = vectors.iter().find(|v| v.dim() != expected) {
        return Err(PipelineError::EmbeddingDimension { expected, found: v.dim() });
    }
    let correlations = cross_similarity(&vectors, corpus)?;
    let loadings = projector.apply(&correlations)?;
    let model = &network.model;
    let rows = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let row: Vec<f64> = loadings.row(i).iter().copied().collect();
            let mut qualifying: Vec<QualifyingDimension> = row
                .iter()
                .enumerate()
                .filter(|(_, l)| l.abs() >= model.threshold)
                .map(|(j, &loading)| QualifyingDimension { dimension: j + 1, name: model.dimensions[j].name.clone(), loading })
                .collect();
            qualifying.sort_by(|a, b| b.loading.abs().total_cmp(&a.loading.abs()).then(a.dimension.cmp(&b.dimension)));
            ProjectedRow { id: it.id.clone(), text: it.text.clone(), loadings: row, qualifying }
        })
        .collect();
    Ok(Projection { rows, embeddings: vectors, correlations })
}

/// preprocess → embed → project in one call.
pub fn project_items(
    network: &Network,
    projector: &Projector,
    embedder: &dyn Embedder,
    cache: Option<&EmbeddingCache>,
    items: &[ProjectionInput],
) -> Result<Projection, PipelineError> {
    let texts = preprocess_items(items)?;
    let vectors = embed_texts(embedder, cache, &texts)?;
    project_embedded(network, projector, items, vectors)
}

fn fixed6(x: f64) -> String {
    // avoid printing "-0.000000"
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn csv_string(records: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in records {
        wtr.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(wtr.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

/// `id,text,<dimension names>,top_dimension,qualifying_dimensions`; loadings
/// with six decimals, qualifying names joined by `;`.
pub fn projection_csv(network: &Network, projection: &Projection) -> String {
    let mut header = vec!["id".to_string(), "text".to_string()];
    header.extend(network.model.dimensions.iter().map(|d| d.name.clone()));
    header.push("top_dimension".into());
    header.push("qualifying_dimensions".into());
    let rows = projection.rows.iter().map(|r| {
        let mut rec = vec![r.id.clone(), r.text.clone()];
        rec.extend(r.loadings.iter().map(|&l| fixed6(l)));
        rec.push(r.qualifying.first().map(|q| q.name.clone()).unwrap_or_default());
        rec.push(r.qualifying.iter().map(|q| q.name.as_str()).collect::<Vec<_>>().join(";"));
        rec
    });
    csv_string(std::iter::once(header).chain(rows))
}

/// `id,d0,d1,...` with six decimals.
pub fn embeddings_csv(ids: &[String], vectors: &[EmbeddingVector]) -> String {
    let d = vectors.first().map_or(0, EmbeddingVector::dim);
    let header = std::iter::once("id".to_string()).chain((0..d).map(|j| format!("d{j}"))).collect();
    let rows = ids.iter().zip(vectors).map(|(id, v)| std::iter::once(id.clone()).chain(v.values().iter().map(|&x| fixed6(x))).collect());
    csv_string(std::iter::once(header).chain(rows))
}

/// `id,<corpus ids>`: one similarity row per projected item.
pub fn correlations_csv(ids: &[String], corpus_ids: &[String], correlations: &DMatrix<f64>) -> String {
    let header = std::iter::once("id".to_string()).chain(corpus_ids.iter().cloned()).collect();
    let rows =
        ids.iter().enumerate().map(|(i, id)| std::iter::once(id.clone()).chain(correlations.row(i).iter().map(|&x| fixed6(x))).collect());
    csv_string(std::iter::once(header).chain(rows))
}

/// Full corpus loading matrix `id,text,<dimension names>`. Entries with
/// |loading| below `suppress_below` are left blank; the network threshold
/// is independent of this display setting.
pub fn loadings_csv(network: &Network, suppress_below: Option<f64>) -> String {
    let model = &network.model;
    let mut header = vec!["id".to_string(), "text".to_string()];
    header.extend(model.dimensions.iter().map(|d| d.name.clone()));
    let rows = network.corpus.indicators().iter().enumerate().map(|(i, ind)| {
        let mut rec = vec![ind.id.clone(), ind.raw_text.clone()];
        rec.extend(model.lambda.row(i).iter().map(|&l| match suppress_below {
            Some(s) if l.abs() < s => String::new(),
            _ => fixed6(l),
        }));
        rec
    });
    csv_string(std::iter::once(header).chain(rows))
}

/// Human-readable summary of a build.
pub fn describe_build(report: &BuildReport, network: &Network) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "indicators: {}  dimensions: {}", report.p, report.k);
    for (d, (pct, cum)) in network.model.dimensions.iter().zip(report.explained.per_dimension.iter().zip(&report.explained.cumulative)) {
        let _ = writeln!(out, "  Dim {:>3}  {:<40} n={:<5} {:>6.2}% (cum {:>6.2}%)", d.index, d.name, d.indicator_count, pct, cum);
    }
    let _ = writeln!(out, "graph: {} nodes, {} edges", report.graph.nodes.len(), report.graph.edges.len());
    out
}
