//! Nomological network construction for survey indicators.
//!
//! The crate turns a labeled corpus of survey items into a latent-dimension
//! network: items are embedded, compared by cosine similarity, decomposed with
//! PCA or principal axis factoring, rotated with Promax and thresholded. New
//! items can be projected into a finished network. Around that pipeline sit the
//! contrastive training-data builder, a desk-scale adapter trainer, pair
//! classification metrics, dimension naming and graph export.

pub mod binfmt;
pub mod corpus;
pub mod embed;
pub mod evalmetrics;
pub mod factor;
pub mod naming;
pub mod netgraph;
pub mod network;
pub mod pipeline;
pub mod simmat;
pub mod train;
pub mod triplets;

pub use corpus::{load_corpus, preprocess, Corpus, CorpusError, CorpusFormat, Indicator};
pub use embed::{EmbedError, Embedder, EmbeddingVector, ProviderConfig, ProviderKind};
pub use factor::{DimensionMeta, Extraction, NetworkModel};
pub use network::Network;
pub use simmat::SimilarityMatrix;
