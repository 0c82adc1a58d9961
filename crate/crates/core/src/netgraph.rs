//! Dimension graph, search and export.
//!
//! Nodes are dimensions sized by their primary assignments; an edge joins two
//! dimensions when indicators load at or above the threshold on both.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{primary_assignments, NetworkModel};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported graph schema version {0}")]
    Version(u32),
    #[error("adjacency export: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    /// 1-based dimension index.
    pub index: usize,
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    /// Lower dimension index.
    pub source: usize,
    pub target: usize,
    pub weight: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    version: u32,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Graph with every edge of weight ≥ 1.
pub fn build_graph(model: &NetworkModel) -> NetworkGraph {
    build_graph_with(model, 1)
}

/// A dimension becomes a node when at least one indicator loads on it at or
/// above the threshold; edges lighter than `min_weight` are dropped.
pub fn build_graph_with(model: &NetworkModel, min_weight: usize) -> NetworkGraph {
    let k = model.k();
    let t = model.threshold;
    let mut sizes = vec![0usize; k];
    for (j, _) in primary_assignments(&model.lambda, t).into_iter().flatten() {
        sizes[j] += 1;
    }
    let mut touched = vec![false; k];
    let mut weights = vec![vec![0usize; k]; k];
    for row in model.lambda.row_iter() {
        let hits: Vec<usize> = (0..k).filter(|&j| row[j].abs() >= t).collect();
        for (a, &i) in hits.iter().enumerate() {
            touched[i] = true;
            for &j in &hits[a + 1..] {
                weights[i][j] += 1;
            }
        }
    }
    let nodes =
        (0..k).filter(|&j| touched[j]).map(|j| Node { index: j + 1, name: model.dimensions[j].name.clone(), size: sizes[j] }).collect();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let w = weights[i][j];
            if w >= min_weight.max(1) {
                edges.push(Edge { source: i + 1, target: j + 1, weight: w });
            }
        }
    }
    NetworkGraph { nodes, edges }
}

/// `{"version":1,"nodes":[...],"edges":[...]}` with fields in declaration order.
pub fn export_graph(graph: &NetworkGraph) -> String {
    let doc = GraphDocument { version: GRAPH_SCHEMA_VERSION, nodes: graph.nodes.clone(), edges: graph.edges.clone() };
    serde_json::to_string(&doc).expect("graph serializes")
}

pub fn parse_graph(json: &str) -> Result<NetworkGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_str(json)?;
    if doc.version != GRAPH_SCHEMA_VERSION {
        return Err(GraphError::Version(doc.version));
    }
    Ok(NetworkGraph { nodes: doc.nodes, edges: doc.edges })
}

/// Square edge-weight matrix over all k dimensions, labelled by name.
pub fn write_adjacency_csv<W: Write>(writer: W, model: &NetworkModel, graph: &NetworkGraph) -> Result<(), GraphError> {
    let k = model.k();
    let mut m = vec![vec![0usize; k]; k];
    for e in &graph.edges {
        m[e.source - 1][e.target - 1] = e.weight;
        m[e.target - 1][e.source - 1] = e.weight;
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["dimension".to_string()];
    header.extend(model.dimensions.iter().map(|d| d.name.clone()));
    wtr.write_record(&header)?;
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![model.dimensions[i].name.clone()];
        rec.extend(row.iter().map(|w| w.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| GraphError::Csv(e.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchField {
    Name,
    Definition,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMatch {
    pub id: String,
    pub text: String,
    pub loading: f64,
    /// Byte range of the match within `text`, when it maps cleanly.
    pub highlight: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    /// 1-based; `None` for an indicator without a primary dimension.
    pub dimension: Option<usize>,
    pub name: Option<String>,
    pub field: MatchField,
    pub indicator: Option<IndicatorMatch>,
}

fn find_ci(haystack: &str, needle_lower: &str) -> Option<Option<(usize, usize)>> {
    let lower = haystack.to_lowercase();
    let start = lower.find(needle_lower)?;
    // byte offsets only carry over when lowercasing kept the byte length
    let range = (lower.len() == haystack.len()).then_some((start, start + needle_lower.len()));
    Some(range)
}

/// Case-insensitive substring search. Dimension hits (one per dimension, by
/// its best field) rank by field then index; indicator hits follow, ordered
/// by primary dimension then corpus order. `texts` aligns with
/// `model.indicator_ids`. An empty query matches nothing.
pub fn search(model: &NetworkModel, texts: &[String], query: &str, limit: usize) -> Vec<SearchHit> {
    let needle = query.trim().to_lowercase();
    if needle.is_empty() || limit == 0 {
        return Vec::new();
    }
    let mut hits = Vec::new();
    for d in &model.dimensions {
        let field = if find_ci(&d.name, &needle).is_some() {
            Some(MatchField::Name)
        } else if find_ci(&d.definition, &needle).is_some() {
            Some(MatchField::Definition)
        } else {
            None
        };
        if let Some(field) = field {
            hits.push(SearchHit { dimension: Some(d.index), name: Some(d.name.clone()), field, indicator: None });
        }
    }
    let primary = primary_assignments(&model.lambda, model.threshold);
    for (i, text) in texts.iter().enumerate().take(model.p()) {
        if let Some(highlight) = find_ci(text, &needle) {
            let (dimension, loading) = match primary[i] {
                Some((j, l)) => (Some(j + 1), l),
                None => (None, 0.0),
            };
            hits.push(SearchHit {
                dimension,
                name: dimension.map(|j| model.dimensions[j - 1].name.clone()),
                field: MatchField::Indicator,
                indicator: Some(IndicatorMatch { id: model.indicator_ids[i].clone(), text: text.clone(), loading, highlight }),
            });
        }
    }
    // stable: indicator hits keep corpus order within a dimension
    hits.sort_by_key(|h| (h.field, h.dimension.is_none(), h.dimension));
    hits.truncate(limit);
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::{DimensionMeta, Extraction, ModelFlags};
    use nalgebra::DMatrix;

    fn model(lambda: DMatrix<f64>) -> NetworkModel {
        let (p, k) = lambda.shape();
        NetworkModel {
            phi: DMatrix::identity(k, k),
            eigenvalues: (0..k).map(|j| (k - j) as f64).collect(),
            threshold: 0.55,
            indicator_ids: (0..p).map(|i| format!("q{i}")).collect(),
            dimensions: (1..=k).map(DimensionMeta::placeholder).collect(),
            extraction: Extraction::Pca,
            flags: ModelFlags::default(),
            lambda,
        }
    }

    #[test]
    fn two_clusters_no_edges() {
        let m = model(DMatrix::from_row_slice(4, 2, &[0.9, 0.1, 0.8, 0.0, 0.1, 0.7, 0.0, 0.9]));
        let g = build_graph(&m);
        assert_eq!(g.nodes.iter().map(|n| n.size).collect::<Vec<_>>(), vec![2, 2]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn cross_loading_makes_edge() {
        let m = model(DMatrix::from_row_slice(2, 2, &[0.6, 0.65, 0.9, 0.0]));
        let g = build_graph(&m);
        assert_eq!(g.edges, vec![Edge { source: 1, target: 2, weight: 1 }]);
        assert_eq!(g.nodes[0].size, 1);
        assert_eq!(g.nodes[1].size, 1);
        assert!(build_graph_with(&m, 2).edges.is_empty());
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let m = model(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.2, 0.3]));
        let g = build_graph(&m);
        assert_eq!(g, NetworkGraph::default());
        assert_eq!(export_graph(&g), r#"{"version":1,"nodes":[],"edges":[]}"#);
    }

    #[test]
    fn export_round_trip() {
        let m = model(DMatrix::from_row_slice(2, 2, &[0.6, 0.65, 0.9, 0.0]));
        let g = build_graph(&m);
        let json = export_graph(&g);
        assert!(json.starts_with(r#"{"version":1,"nodes":[{"index":1,"name":"Dim 1","size":1}"#));
        assert_eq!(parse_graph(&json).unwrap(), g);
        assert!(matches!(parse_graph(r#"{"version":2,"nodes":[],"edges":[]}"#), Err(GraphError::Version(2))));
    }

    #[test]
    fn search_ranks_fields() {
        let mut m = model(DMatrix::from_row_slice(3, 2, &[0.9, 0.0, 0.0, 0.8, 0.1, 0.1]));
        m.dimensions[0].name = "Sleep Quality".into();
        m.dimensions[1].name = "Worry".into();
        m.dimensions[1].definition = "Anxious thoughts about sleep.".into();
        let texts = vec!["I sleep badly".to_string(), "I worry".to_string(), "sleepless nights".to_string()];
        let hits = search(&m, &texts, "SLEEP", 10);
        let fields: Vec<(MatchField, Option<usize>)> = hits.iter().map(|h| (h.field, h.dimension)).collect();
        assert_eq!(
            fields,
            vec![
                (MatchField::Name, Some(1)),
                (MatchField::Definition, Some(2)),
                (MatchField::Indicator, Some(1)),
                (MatchField::Indicator, None),
            ]
        );
        assert_eq!(hits[2].indicator.as_ref().unwrap().highlight, Some((2, 7)));
        assert_eq!(search(&m, &texts, "sleep", 1).len(), 1);
        assert!(search(&m, &texts, "", 10).is_empty());
        assert_eq!(search(&m, &texts, "sleep quality", 10)[0].dimension, Some(1));
    }

    #[test]
    fn adjacency_csv() {
        let m = model(DMatrix::from_row_slice(2, 2, &[0.6, 0.65, 0.9, 0.0]));
        let mut out = Vec::new();
        write_adjacency_csv(&mut out, &m, &build_graph(&m)).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "dimension,Dim 1,Dim 2\nDim 1,0,1\nDim 2,1,0\n");
    }
}
