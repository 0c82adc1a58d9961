//! Command-line entry points. Exit codes: 0 success, 2 invalid flags or
//! input, 1 any other failure.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aligns_core::corpus::{load_corpus, Corpus, CorpusFormat};
use aligns_core::embed::{EmbeddingCache, EmbeddingVector, ProviderConfig, ProviderKind, PROMPT_PLACEHOLDER};
use aligns_core::evalmetrics::{auc, best_threshold, classification_report, EvaluationReport, Objective, PairLabel, ScoredPair};
use aligns_core::factor::{ComponentRule, Extraction, FitOptions, Projector, DEFAULT_KAPPA, DEFAULT_THRESHOLD};
use aligns_core::naming::{name_network, NamingClientConfig, NamingKind, NamingOptions, Transcript, DEFAULT_MAX_SAMPLE};
use aligns_core::network::{Network, NetworkError};
use aligns_core::pipeline::{
    build_network, correlations_csv, describe_build, embed_texts, embeddings_csv, project_items, projection_csv, BuildOptions,
    PipelineError, Projection, ProjectionInput,
};
use aligns_core::simmat::cosine;
use aligns_core::train::{train, write_loss_history, LinearAdapter, LossConfig, LossKind, TrainConfig};
use aligns_core::triplets::{
    build_triplets, corpus_labels, merge_constructs_edit, merge_constructs_semantic, write_triplets_csv, MergeMap, MergeReport,
    TripletOptions,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::server::provider_for;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag value or unusable input; exit code 2.
    #[error("{flag}: {message}")]
    Usage { flag: &'static str, message: String },
    /// Exit code 1.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn usage(flag: &'static str, message: impl ToString) -> Self {
        Self::Usage { flag, message: message.to_string() }
    }

    fn failed(e: impl ToString) -> Self {
        Self::Failed(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aligns", version, about = "Build, explore and project nomological networks of survey indicators")]
#[command(args_conflicts_with_subcommands = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed, factor and name a corpus into a network directory.
    Build(BuildArgs),
    /// Project new indicators into an existing network.
    Project(ProjectArgs),
    /// Merge construct labels and emit contrastive triplets.
    Triplets(TripletsArgs),
    /// Train a linear adapter over frozen base embeddings.
    Train(TrainArgs),
    /// Score labeled indicator pairs with network embeddings.
    Eval(EvalArgs),
    /// Rename the dimensions of an existing network into a new directory.
    Name(NameArgs),
    /// Serve every network under a directory over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderChoice {
    #[value(name = "deterministic-test", alias = "test")]
    DeterministicTest,
    #[value(name = "remote-batch", alias = "remote")]
    RemoteBatch,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    /// Embedding provider.
    #[arg(long, value_enum, default_value = "deterministic-test")]
    pub provider: ProviderChoice,
    /// Remote embedding endpoint (also read from ALIGNS_EMBED_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Prompt template containing `{indicator}`.
    #[arg(long)]
    pub prompt_template: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_batch: Option<u64>,
    /// Directory of the content-addressed embedding cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl ProviderArgs {
    fn config(&self) -> CliResult<ProviderConfig> {
        let mut cfg = match self.provider {
            ProviderChoice::DeterministicTest => ProviderConfig::deterministic_test(),
            ProviderChoice::RemoteBatch => ProviderConfig::remote(self.endpoint.clone().unwrap_or_default()).with_env_overrides(),
        };
        if let Some(t) = &self.prompt_template {
            cfg.prompt_template = t.clone();
        }
        if let Some(m) = self.max_batch {
            cfg.max_batch = m as usize;
        }
        self.check(&cfg)?;
        Ok(cfg)
    }

    fn check(&self, cfg: &ProviderConfig) -> CliResult<()> {
        if cfg.prompt_template.matches(PROMPT_PLACEHOLDER).count() != 1 {
            return Err(CliError::usage("--prompt-template", format!("must contain {PROMPT_PLACEHOLDER} exactly once")));
        }
        if cfg.kind == ProviderKind::RemoteBatch && cfg.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(CliError::usage("--endpoint", "required for the remote-batch provider"));
        }
        cfg.validate().map_err(|e| CliError::usage("--provider", e))
    }

    fn cache(&self) -> CliResult<Option<EmbeddingCache>> {
        self.cache_dir.as_ref().map(EmbeddingCache::open).transpose().map_err(|e| CliError::usage("--cache-dir", e))
    }

    fn embed(&self, texts: &[String]) -> CliResult<Vec<EmbeddingVector>> {
        let cfg = self.config()?;
        let embedder = cfg.build().map_err(|e| CliError::usage("--provider", e))?;
        embed_texts(&*embedder, self.cache()?.as_ref(), texts).map_err(CliError::failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NamingChoice {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct NamingArgs {
    /// Text-generation client used to name dimensions.
    #[arg(long, value_enum, default_value = "mock")]
    pub naming: NamingChoice,
    #[arg(long)]
    pub naming_endpoint: Option<String>,
    #[arg(long)]
    pub naming_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub naming_seed: u64,
    /// Indicators sampled per dimension for naming.
    #[arg(long, default_value_t = DEFAULT_MAX_SAMPLE, value_parser = positive_usize, allow_negative_numbers = true)]
    pub max_sample: usize,
    /// JSON-lines log of every naming prompt and response.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

impl NamingArgs {
    fn client(&self) -> CliResult<Box<dyn aligns_core::naming::NamingClient>> {
        let cfg = match self.naming {
            NamingChoice::Mock => NamingClientConfig::mock(self.naming_seed),
            NamingChoice::Remote => {
                let endpoint =
                    self.naming_endpoint.clone().ok_or_else(|| CliError::usage("--naming-endpoint", "required for remote naming"))?;
                NamingClientConfig {
                    kind: NamingKind::Remote,
                    endpoint: Some(endpoint),
                    model: self.naming_model.clone(),
                    ..NamingClientConfig::mock(self.naming_seed)
                }
            }
        };
        cfg.build().map_err(|e| CliError::usage("--naming", e))
    }

    fn options(&self) -> NamingOptions {
        NamingOptions { max_sample: self.max_sample, seed: self.naming_seed }
    }

    fn transcript(&self) -> CliResult<Option<Transcript>> {
        self.transcript.as_deref().map(Transcript::create).transpose().map_err(|e| CliError::usage("--transcript", e))
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
        _ => Err(format!("expected a non-negative number, got `{s}`")),
    }
}

fn finite_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Corpus CSV/TSV with columns id,text[,construct][,source].
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// `kaiser` or a fixed number of dimensions.
    #[arg(long, default_value = "kaiser")]
    pub components: ComponentRule,
    #[arg(long, default_value = "pca")]
    pub extraction: Extraction,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, value_parser = positive_f64, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_KAPPA, value_parser = positive_f64, allow_negative_numbers = true)]
    pub kappa: f64,
    #[command(flatten)]
    pub naming: NamingArgs,
    /// Skip storing the similarity matrix.
    #[arg(long)]
    pub no_similarity: bool,
    /// Write the build report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Network directory to create; must not exist.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub network: PathBuf,
    /// CSV with a `text` column and optional `id` column.
    #[arg(long)]
    pub items: PathBuf,
    /// Overrides the remote endpoint recorded in the network.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
    #[arg(long)]
    pub correlations_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeChoice {
    None,
    Edit,
    Semantic,
}

#[derive(Debug, Args)]
pub struct TripletsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "edit")]
    pub merge: MergeChoice,
    /// Largest edit distance that merges two labels.
    #[arg(long, default_value_t = 1)]
    pub max_distance: usize,
    /// Smallest label cosine that merges two labels.
    #[arg(long, default_value_t = 0.9, value_parser = finite_f64, allow_negative_numbers = true)]
    pub tau: f64,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[arg(long, default_value_t = 3)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 3)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Triplet CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON with the label groups and skipped indicators.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Identity,
    Random,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[arg(long, default_value = "cosine-triplet")]
    pub loss: LossKind,
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub margin: Option<f64>,
    /// Output dimension; defaults to the base embedding dimension.
    #[arg(long, value_parser = positive_usize, allow_negative_numbers = true)]
    pub d_out: Option<usize>,
    #[arg(long, value_enum, default_value = "identity")]
    pub init: InitChoice,
    #[arg(long, default_value_t = 1, value_parser = positive_usize, allow_negative_numbers = true)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8, value_parser = positive_usize, allow_negative_numbers = true)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2, value_parser = non_negative_f64, allow_negative_numbers = true)]
    pub learning_rate: f64,
    #[arg(long, value_parser = positive_usize, allow_negative_numbers = true)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adapter weights file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV `step,loss`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveChoice {
    MacroF1,
    WeightedF1,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV `id1,id2,label` with label same/different (or 1/0).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Network directory whose stored embeddings score the pairs.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Adapter applied to the embeddings before scoring.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Fixed decision threshold; the best one is searched when absent.
    #[arg(long, value_parser = finite_f64, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "macro-f1")]
    pub objective: ObjectiveChoice,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NameArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[command(flatten)]
    pub naming: NamingArgs,
    /// New network directory; must not exist.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub networks_dir: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Build(a) => cmd_build(a),
        Command::Project(a) => cmd_project(a),
        Command::Triplets(a) => cmd_triplets(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Name(a) => cmd_name(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn read_corpus_flag(path: &Path, flag: &'static str) -> CliResult<Corpus> {
    load_corpus(path, CorpusFormat::from_path(path)).map_err(|e| CliError::usage(flag, format!("{}: {e}", path.display())))
}

fn load_network(path: &Path) -> CliResult<Network> {
    Network::load(path).map_err(|e| CliError::usage("--network", format!("{}: {e}", path.display())))
}

fn save_network(network: &Network, out: &Path) -> CliResult<()> {
    network.save_atomic(out).map_err(|e| match e {
        NetworkError::AlreadyExists(_) => CliError::usage("--out", e),
        other => CliError::failed(other),
    })
}

/// Writes to `path`, or to stdout when `None`.
fn write_output(path: Option<&Path>, flag: &'static str, body: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| CliError::usage(flag, format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body).and_then(|()| out.flush()).map_err(CliError::failed)
        }
    }
}

fn cmd_build(a: BuildArgs) -> CliResult<()> {
    if a.out.exists() {
        return Err(CliError::usage("--out", format!("{} already exists", a.out.display())));
    }
    let corpus = read_corpus_flag(&a.input, "--input")?;
    let provider = a.provider.config()?;
    let embedder = provider.build().map_err(|e| CliError::usage("--provider", e))?;
    let cache = a.provider.cache()?;
    let namer = a.naming.client()?;
    let transcript = a.naming.transcript()?;
    let options = BuildOptions {
        fit: FitOptions {
            extraction: a.extraction,
            components: a.components,
            kappa: a.kappa,
            threshold: a.threshold,
            ..FitOptions::default()
        },
        naming: a.naming.options(),
        keep_similarity: !a.no_similarity,
        ..BuildOptions::default()
    };
    let (network, report) = build_network(corpus, &*embedder, cache.as_ref(), Some(provider), &*namer, &options, transcript.as_ref())
        .map_err(|e| match e {
            PipelineError::Factor(f) => CliError::usage("--components", f),
            other => CliError::failed(other),
        })?;
    save_network(&network, &a.out)?;
    if let Some(path) = &a.report {
        let json = serde_json::to_vec_pretty(&report).map_err(CliError::failed)?;
        write_output(Some(path), "--report", &json)?;
    }
    print!("{}", describe_build(&report, &network));
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Reads project items: a `text` column and an optional `id` column; rows
/// without an id are numbered `item{n}` from 1.
pub fn read_items(path: &Path) -> CliResult<Vec<ProjectionInput>> {
    let bad = |e: &dyn std::fmt::Display| CliError::usage("--items", format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(if CorpusFormat::from_path(path) == CorpusFormat::Tsv { b'\t' } else { b',' })
        .from_path(path)
        .map_err(|e| bad(&e))?;
    let headers = rdr.headers().map_err(|e| bad(&e))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = column("text").ok_or_else(|| bad(&"missing `text` column"))?;
    let id_col = column("id");
    let mut items = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| bad(&e))?;
        let id = id_col.and_then(|c| record.get(c)).map(str::trim).filter(|s| !s.is_empty());
        items.push(ProjectionInput {
            id: id.map_or_else(|| format!("item{}", i + 1), String::from),
            text: record.get(text_col).unwrap_or("").to_string(),
        });
    }
    Ok(items)
}

/// Provider a network projects with, given an optional endpoint override.
pub fn projection_provider(network: &Network, endpoint: Option<&str>) -> ProviderConfig {
    let fallback = match endpoint {
        Some(e) => ProviderConfig::remote(e),
        None => ProviderConfig::deterministic_test(),
    };
    provider_for(network, &fallback)
}

fn cmd_project(a: ProjectArgs) -> CliResult<()> {
    let network = load_network(&a.network)?;
    let items = read_items(&a.items)?;
    let provider = projection_provider(&network, a.endpoint.as_deref());
    let embedder = provider.build().map_err(|e| CliError::usage("--endpoint", e))?;
    let cache = a.cache_dir.as_ref().map(EmbeddingCache::open).transpose().map_err(|e| CliError::usage("--cache-dir", e))?;
    let projector = Projector::new(&network.model).map_err(CliError::failed)?;
    let projection: Projection = project_items(&network, &projector, &*embedder, cache.as_ref(), &items).map_err(|e| match e {
        PipelineError::NoItems | PipelineError::EmptyItems(_) => CliError::usage("--items", e_with_ids(&e)),
        other => CliError::failed(other),
    })?;
    let body = match a.format {
        OutputFormat::Csv => projection_csv(&network, &projection).into_bytes(),
        OutputFormat::Json => {
            let mut v = serde_json::to_vec_pretty(&projection.rows).map_err(CliError::failed)?;
            v.push(b'\n');
            v
        }
    };
    write_output(a.out.as_deref(), "--out", &body)?;
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    if let Some(p) = &a.embeddings_out {
        write_output(Some(p), "--embeddings-out", embeddings_csv(&ids, &projection.embeddings).as_bytes())?;
    }
    if let Some(p) = &a.correlations_out {
        let csv = correlations_csv(&ids, &network.model.indicator_ids, &projection.correlations);
        write_output(Some(p), "--correlations-out", csv.as_bytes())?;
    }
    Ok(())
}

fn e_with_ids(e: &PipelineError) -> String {
    match e {
        PipelineError::EmptyItems(ids) => format!("{e}: {}", ids.join(", ")),
        other => other.to_string(),
    }
}

fn cmd_triplets(a: TripletsArgs) -> CliResult<()> {
    let corpus = read_corpus_flag(&a.input, "--input")?;
    let labels = corpus_labels(&corpus);
    let merge = match a.merge {
        MergeChoice::None => MergeMap::identity(labels),
        MergeChoice::Edit => merge_constructs_edit(labels, a.max_distance),
        MergeChoice::Semantic => {
            let cfg = a.provider.config()?;
            let embedder = cfg.build().map_err(|e| CliError::usage("--provider", e))?;
            merge_constructs_semantic(labels, &*embedder, a.tau).map_err(|e| CliError::usage("--input", e))?
        }
    };
    let options = TripletOptions { n_pos: a.n_pos, n_neg: a.n_neg, seed: a.seed };
    let (triplets, report) = build_triplets(&corpus, &merge, options);
    let mut buf = Vec::new();
    write_triplets_csv(&mut buf, &triplets).map_err(CliError::failed)?;
    write_output(a.out.as_deref(), "--out", &buf)?;
    if let Some(path) = &a.report {
        let json = serde_json::to_vec_pretty(&MergeReport { merge: &merge, report: &report }).map_err(CliError::failed)?;
        write_output(Some(path), "--report", &json)?;
    }
    eprintln!("{} triplets from {} label groups", triplets.len(), merge.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let corpus = read_corpus_flag(&a.corpus, "--corpus")?;
    let file = File::open(&a.triplets).map_err(|e| CliError::usage("--triplets", format!("{}: {e}", a.triplets.display())))?;
    let triplets = aligns_core::triplets::read_triplets_csv(file).map_err(|e| CliError::usage("--triplets", e))?;
    let vectors = a.provider.embed(&corpus.texts())?;
    let d_in = vectors.first().map_or(0, EmbeddingVector::dim);
    let base: HashMap<String, Vec<f64>> = corpus.ids().into_iter().zip(vectors.into_iter().map(EmbeddingVector::into_values)).collect();
    let d_out = a.d_out.unwrap_or(d_in);
    let adapter = match a.init {
        InitChoice::Identity => LinearAdapter::identity(d_in, d_out),
        InitChoice::Random => LinearAdapter::random(d_in, d_out, a.seed),
    }
    .map_err(|e| CliError::usage("--d-out", e))?;
    let mut loss = LossConfig::for_kind(a.loss);
    if let Some(m) = a.margin {
        loss.margin = m;
    }
    loss.validate().map_err(|e| CliError::usage("--loss", e))?;
    let cfg =
        TrainConfig { batch_size: a.batch_size, learning_rate: a.learning_rate, epochs: a.epochs, max_steps: a.max_steps, seed: a.seed };
    let write_history = |history: &[f64]| -> CliResult<()> {
        if let Some(path) = &a.history {
            let file = File::create(path).map_err(|e| CliError::usage("--history", format!("{}: {e}", path.display())))?;
            write_loss_history(BufWriter::new(file), history).map_err(CliError::failed)?;
        }
        Ok(())
    };
    match train(&adapter, &triplets, &base, &cfg, &loss) {
        Ok((trained, history)) => {
            write_history(&history)?;
            trained.save(&a.out).map_err(|e| CliError::usage("--out", e))?;
            let last = history.last().copied().unwrap_or(f64::NAN);
            println!("{} steps, final batch loss {last:.6}; wrote {}", history.len(), a.out.display());
            Ok(())
        }
        Err(failure) => {
            write_history(&failure.history)?;
            Err(CliError::failed(failure))
        }
    }
}

fn parse_label(raw: &str) -> Option<PairLabel> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "same" | "1" | "true" | "positive" => Some(PairLabel::Same),
        "different" | "0" | "false" | "negative" => Some(PairLabel::Different),
        _ => None,
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let network = Network::load(&a.embeddings).map_err(|e| CliError::usage("--embeddings", format!("{}: {e}", a.embeddings.display())))?;
    let stored = network.embeddings.as_ref().ok_or_else(|| CliError::usage("--embeddings", "network has no stored embeddings"))?;
    let adapter = a.adapter.as_deref().map(LinearAdapter::load).transpose().map_err(|e| CliError::usage("--adapter", e))?;
    let mut by_id: HashMap<&str, EmbeddingVector> = HashMap::new();
    for (id, v) in network.model.indicator_ids.iter().zip(stored) {
        let v = match &adapter {
            Some(ad) => ad.apply(v.values()).map_err(|e| CliError::usage("--adapter", e))?,
            None => v.clone(),
        };
        by_id.insert(id, v);
    }
    let bad = |m: String| CliError::usage("--pairs", format!("{}: {m}", a.pairs.display()));
    let mut rdr = csv::Reader::from_path(&a.pairs).map_err(|e| bad(e.to_string()))?;
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 3 {
            return Err(bad(format!("row {row}: expected id1,id2,label")));
        }
        let lookup = |id: &str| by_id.get(id.trim()).ok_or_else(|| bad(format!("row {row}: unknown indicator `{}`", id.trim())));
        let (u, v) = (lookup(&rec[0])?, lookup(&rec[1])?);
        let label = parse_label(&rec[2]).ok_or_else(|| bad(format!("row {row}: unknown label `{}`", &rec[2])))?;
        pairs.push(ScoredPair::new(cosine(u, v).map_err(CliError::failed)?, label));
    }
    let objective = match a.objective {
        ObjectiveChoice::MacroF1 => Objective::MacroF1,
        ObjectiveChoice::WeightedF1 => Objective::WeightedF1,
    };
    let metric = |e: aligns_core::evalmetrics::MetricError| CliError::usage("--pairs", e);
    let report = match a.threshold {
        Some(t) => classification_report(&pairs, t).map_err(metric)?,
        None => best_threshold(&pairs, objective).map_err(metric)?,
    };
    let full = EvaluationReport { auc: auc(&pairs).map_err(metric)?, report, pairs: pairs.len() };
    let mut json = serde_json::to_vec_pretty(&full).map_err(CliError::failed)?;
    json.push(b'\n');
    write_output(a.out.as_deref(), "--out", &json)
}

fn cmd_name(a: NameArgs) -> CliResult<()> {
    if a.out.exists() {
        return Err(CliError::usage("--out", format!("{} already exists", a.out.display())));
    }
    let mut network = load_network(&a.network)?;
    let client = a.naming.client()?;
    let transcript = a.naming.transcript()?;
    let report =
        name_network(&mut network.model, &network.corpus, &*client, a.naming.options(), transcript.as_ref()).map_err(CliError::failed)?;
    save_network(&network, &a.out)?;
    for d in &network.model.dimensions {
        println!("Dim {}: {} ({} indicators)", d.index, d.name, d.indicator_count);
    }
    if !report.failures.is_empty() {
        eprintln!("naming fell back to placeholders for dimensions {:?}", report.failures);
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult<()> {
    let config = match (&a.config, &a.networks_dir) {
        (Some(path), _) => ServiceConfig::load(path).map_err(|e| CliError::usage("--config", e))?,
        (None, Some(dir)) => ServiceConfig::new(dir),
        (None, None) => match std::env::var(crate::config::NETWORKS_DIR_ENV) {
            Ok(dir) => ServiceConfig::new(dir),
            Err(_) => return Err(CliError::usage("--networks-dir", "required unless --config or ALIGNS_NETWORKS_DIR is given")),
        },
    };
    let mut config = config.with_env().map_err(|e| CliError::usage("--config", e))?;
    if let Some(dir) = a.networks_dir {
        config.networks_dir = dir;
    }
    if let Some(bind) = a.bind {
        config.bind = bind;
    }
    if let Some(port) = a.port {
        config.port = port;
    }
    config.validate().map_err(|e| CliError::usage("--config", e))?;
    let runtime =
        tokio::runtime::Builder::new_multi_thread().worker_threads(config.parallelism).enable_all().build().map_err(CliError::failed)?;
    runtime.block_on(crate::server::serve(config)).map_err(CliError::failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_threshold_is_a_usage_error() {
        let err = Cli::try_parse_from(["aligns", "build", "--input", "c.csv", "--threshold", "-1", "--out", "o"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--threshold"));
    }

    #[test]
    fn components_accepts_kaiser_or_count() {
        let cli = Cli::try_parse_from(["aligns", "build", "--input", "c.csv", "--components", "3", "--out", "o"]).unwrap();
        let Command::Build(b) = cli.command else { panic!("expected build") };
        assert_eq!(b.components, ComponentRule::Fixed(3));
        assert!(Cli::try_parse_from(["aligns", "build", "--input", "c.csv", "--components", "0", "--out", "o"]).is_err());
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_label(" Same "), Some(PairLabel::Same));
        assert_eq!(parse_label("0"), Some(PairLabel::Different));
        assert_eq!(parse_label("maybe"), None);
    }
}
