//! Construct-label merging and balanced contrastive triplet construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{preprocess, Corpus};
use crate::embed::{EmbedError, Embedder};
use crate::simmat::{cosine, SimilarityError};

#[derive(Debug, Error)]
pub enum TripletError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("no labels to merge")]
    NoLabels,
    #[error("cannot write triplets: {0}")]
    Io(String),
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let substitute = prev[j] + usize::from(lc != sc);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "parameter", rename_all = "lowercase")]
pub enum MergeMethod {
    /// No merging: every label is its own group.
    Identity,
    /// Maximum edit distance.
    Edit(usize),
    /// Minimum cosine similarity.
    Semantic(f64),
}

/// A partition of (preprocessed) construct labels into groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    /// Groups sorted internally and by first member.
    pub groups: Vec<Vec<String>>,
    pub method: MergeMethod,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl MergeMap {
    fn from_union_find(labels: &[String], mut uf: UnionFind, method: MergeMethod) -> Self {
        let mut by_root: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            by_root.entry(uf.find(i)).or_default().push(label.clone());
        }
        let mut groups: Vec<Vec<String>> = by_root.into_values().collect();
        for g in groups.iter_mut() {
            g.sort();
        }
        groups.sort();
        Self::from_groups(groups, method)
    }

    pub fn from_groups(groups: Vec<Vec<String>>, method: MergeMethod) -> Self {
        let lookup = groups.iter().enumerate().flat_map(|(g, labels)| labels.iter().map(move |l| (l.clone(), g))).collect();
        Self { groups, method, lookup }
    }

    /// Every label in its own group.
    pub fn identity<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let labels = normalized_labels(labels);
        let groups = labels.into_iter().map(|l| vec![l]).collect();
        Self::from_groups(groups, MergeMethod::Identity)
    }

    /// Group index of a raw construct label (preprocessed before lookup).
    pub fn group_of(&self, raw_label: &str) -> Option<usize> {
        let label = preprocess(raw_label).ok()?;
        self.lookup.get(&label).copied()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Preprocesses, drops labels that become empty, dedupes and sorts.
pub fn normalized_labels<I: IntoIterator<Item = String>>(labels: I) -> Vec<String> {
    labels.into_iter().filter_map(|l| preprocess(&l).ok()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn corpus_labels(corpus: &Corpus) -> Vec<String> {
    normalized_labels(corpus.label_index().keys().cloned())
}

fn merge_pairs<F>(labels: &[String], linked: F, method: MergeMethod) -> MergeMap
where
    F: Fn(usize, usize) -> bool + Sync,
{
    let n = labels.len();
    let linked = &linked;
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| ((i + 1)..n).filter(move |&j| linked(i, j)).map(move |j| (i, j)).collect::<Vec<_>>())
        .collect();
    let mut uf = UnionFind::new(n);
    for (i, j) in edges {
        uf.union(i, j);
    }
    MergeMap::from_union_find(labels, uf, method)
}

/// Groups labels whose edit distance is at most `max_distance`, closed
/// transitively.
pub fn merge_constructs_edit<I: IntoIterator<Item = String>>(labels: I, max_distance: usize) -> MergeMap {
    let labels = normalized_labels(labels);
    merge_pairs(&labels, |i, j| edit_distance(&labels[i], &labels[j]) <= max_distance, MergeMethod::Edit(max_distance))
}

/// Groups labels whose embeddings have cosine ≥ `tau`, closed transitively.
pub fn merge_constructs_semantic<I, E>(labels: I, embedder: &E, tau: f64) -> Result<MergeMap, TripletError>
where
    I: IntoIterator<Item = String>,
    E: Embedder + ?Sized,
{
    let labels = normalized_labels(labels);
    if labels.is_empty() {
        return Err(TripletError::NoLabels);
    }
    let vectors = embedder.embed_batch(&labels)?;
    for v in &vectors {
        cosine(v, v)?;
    }
    Ok(merge_pairs(&labels, |i, j| cosine(&vectors[i], &vectors[j]).is_ok_and(|c| c >= tau), MergeMethod::Semantic(tau)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletOptions {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl Default for TripletOptions {
    fn default() -> Self {
        Self { n_pos: 3, n_neg: 3, seed: 0 }
    }
}

/// What was left out while building triplets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub triplets: usize,
    pub unlabeled: Vec<String>,
    /// Anchors whose group has no other member.
    pub no_positive: Vec<String>,
    /// Anchors with no indicator outside their group.
    pub no_negatives: Vec<String>,
}

fn anchor_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Builds triplets for every labeled indicator.
///
/// Each anchor gets `min(n_pos, group size − 1)` distinct positives. Up to
/// `n_neg` distinct negatives are drawn uniformly from the labeled indicators
/// outside the group and paired with the positives in turn. Indicators
/// without a label (or whose label is not in `merge`) are excluded. Each
/// anchor uses its own random stream derived from the seed and its id.
pub fn build_triplets(corpus: &Corpus, merge: &MergeMap, options: TripletOptions) -> (Vec<Triplet>, TripletReport) {
    let mut report = TripletReport::default();
    let mut labeled: Vec<(&str, usize)> = Vec::new();
    for ind in corpus.indicators() {
        match ind.construct_label.as_deref().and_then(|l| merge.group_of(l)) {
            Some(g) => labeled.push((&ind.id, g)),
            None => report.unlabeled.push(ind.id.clone()),
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &(_, g)) in labeled.iter().enumerate() {
        members.entry(g).or_default().push(pos);
    }

    let mut triplets = Vec::new();
    for (pos, &(id, g)) in labeled.iter().enumerate() {
        let group = &members[&g];
        let outside = labeled.len() - group.len();
        if group.len() < 2 {
            report.no_positive.push(id.to_string());
            continue;
        }
        if outside == 0 {
            report.no_negatives.push(id.to_string());
            continue;
        }
        let mut rng = anchor_rng(options.seed, id);
        let candidates: Vec<usize> = group.iter().copied().filter(|&m| m != pos).collect();
        let n_pos = options.n_pos.min(candidates.len());
        let positives: Vec<usize> = index::sample(&mut rng, candidates.len(), n_pos).into_iter().map(|i| candidates[i]).collect();

        let n_neg = options.n_neg.clamp(1, outside);
        let negatives: Vec<usize> = index::sample(&mut rng, outside, n_neg).into_iter().map(|i| nth_outside(&labeled, g, i)).collect();
        let offset = if negatives.len() > 1 { rng.random_range(0..negatives.len()) } else { 0 };
        for (t, &p) in positives.iter().enumerate() {
            let n = negatives[(t + offset) % negatives.len()];
            triplets.push(Triplet { anchor: id.to_string(), positive: labeled[p].0.to_string(), negative: labeled[n].0.to_string() });
        }
    }
    report.triplets = triplets.len();
    (triplets, report)
}

fn nth_outside(labeled: &[(&str, usize)], group: usize, n: usize) -> usize {
    labeled.iter().enumerate().filter(|(_, &(_, g))| g != group).nth(n).map(|(i, _)| i).expect("index within out-group size")
}

/// CSV `anchor_id,positive_id,negative_id`.
pub fn write_triplets_csv<W: Write>(writer: W, triplets: &[Triplet]) -> Result<(), TripletError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| TripletError::Io(e.to_string());
    wtr.write_record(["anchor_id", "positive_id", "negative_id"]).map_err(io)?;
    for t in triplets {
        wtr.write_record([&t.anchor, &t.positive, &t.negative]).map_err(io)?;
    }
    wtr.flush().map_err(|e| TripletError::Io(e.to_string()))
}

pub fn read_triplets_csv<R: std::io::Read>(reader: R) -> Result<Vec<Triplet>, TripletError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TripletError::Io(e.to_string()))?;
        if rec.len() < 3 {
            return Err(TripletError::Io(format!("expected 3 columns, found {}", rec.len())));
        }
        out.push(Triplet { anchor: rec[0].to_string(), positive: rec[1].to_string(), negative: rec[2].to_string() });
    }
    Ok(out)
}

/// JSON merge report: groups plus skipped indicators.
#[derive(Debug, Clone, Serialize)]
pub struct MergeReport<'a> {
    pub merge: &'a MergeMap,
    pub report: &'a TripletReport,
}
