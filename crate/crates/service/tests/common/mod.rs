#![allow(dead_code)]

use std::path::{Path, PathBuf};

use aligns_core::corpus::{load_corpus, Corpus, CorpusFormat};
use aligns_core::embed::{ProviderConfig, TrigramEmbedder};
use aligns_core::factor::{ComponentRule, FitOptions};
use aligns_core::naming::MockNamingClient;
use aligns_core::network::Network;
use aligns_core::pipeline::{build_network, BuildOptions, ProjectionInput};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_corpus() -> Corpus {
    let path = fixture("corpus.csv");
    load_corpus(&path, CorpusFormat::Csv).unwrap()
}

/// Held-out paraphrases as (id, text, source cluster).
pub fn heldout() -> Vec<(String, String, String)> {
    let mut rdr = csv::Reader::from_path(fixture("heldout.csv")).unwrap();
    rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string(), r[2].to_string())).collect()
}

pub fn heldout_items() -> Vec<ProjectionInput> {
    heldout().into_iter().map(|(id, text, _)| ProjectionInput { id, text }).collect()
}

/// Cluster of a corpus indicator id (`sleep07` → `sleep`).
pub fn cluster_of(id: &str) -> &str {
    id.trim_end_matches(|c: char| c.is_ascii_digit())
}

pub fn build_with(corpus: Corpus, k: usize) -> Network {
    let options =
        BuildOptions { fit: FitOptions { components: ComponentRule::Fixed(k), ..FitOptions::default() }, ..BuildOptions::default() };
    let (network, _) = build_network(
        corpus,
        &TrigramEmbedder::default(),
        None,
        Some(ProviderConfig::deterministic_test()),
        &MockNamingClient { seed: 0 },
        &options,
        None,
    )
    .unwrap();
    network
}

/// The 60-indicator, three-cluster fixture network.
pub fn fixture_network() -> Network {
    build_with(fixture_corpus(), 3)
}

/// The first two clusters of the fixture only.
pub fn two_cluster_network() -> Network {
    let corpus = fixture_corpus();
    let kept = corpus.indicators().iter().filter(|i| !i.id.starts_with("social")).cloned().collect();
    build_with(Corpus::new(kept).unwrap(), 2)
}
