//! Command-line front end wiring the `gqe` library into reproducible
//! workflows: dataset synthesis and ingestion, graph construction, query
//! expansion, level precomputation, database-side augmentation, training and
//! evaluation. Every subcommand writes a run manifest next to its output.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or parameter
//! combinations), 2 on data errors (unreadable, stale or inconsistent files).

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gqe::hierarchy::LevelStore;
use gqe::store::read_labels_file;
use gqe::{
    build_graph, default_synth_spec, evaluate, expand_fast_with_stats, expand_naive,
    expand_traced, generate_queries, generate_synthetic, precompute_levels, query_neighbors,
    read_relevance_file, run_dba, train, ClassicMethod, ClassicQEConfig, EmbeddingStore,
    EncoderConfig, EncoderVariant, GqeError, GqeModel, KnnGraph, MethodSpec, QueryNeighbors,
    QueryRef, Result, SynthSpec, TrainConfig,
};

use manifest::ManifestBuilder;

#[derive(Debug, Parser)]
#[command(
    name = "gqe",
    version,
    about = "Query expansion for embedding retrieval: build graphs, expand queries, train and evaluate"
)]
pub struct Cli {
    /// Cap worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for every random process (synthesis, initialization, training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a text embedding dump into the binary store format.
    Ingest(IngestArgs),
    /// Generate a clustered synthetic store (database or query set).
    Synth(SynthArgs),
    /// Build the exact k-nearest-neighbor graph of a store.
    BuildGraph(BuildGraphArgs),
    /// Expand one query and print/save the expanded vector.
    Expand(ExpandArgs),
    /// Precompute per-level database embeddings for fast expansion.
    Precompute(PrecomputeArgs),
    /// Re-embed every database item offline (database-side augmentation).
    Dba(DbaArgs),
    /// Train aggregator parameters on a labeled store.
    Train(TrainArgs),
    /// Rank a database for every query and report mean average precision.
    Eval(EvalArgs),
    /// Attribution metrics (agreement, diversity) for one expansion.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliMethod {
    None,
    Aqe,
    Aqewd,
    Alphaqe,
    Gqe,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Text input: one embedding per line, comma-separated decimals.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional label file: `id,label` lines, ids ascending.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Binary store to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = default_synth_spec().clusters)]
    pub clusters: usize,
    #[arg(long, default_value_t = default_synth_spec().points_per_cluster)]
    pub points_per_cluster: usize,
    #[arg(long, default_value_t = default_synth_spec().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = default_synth_spec().noise_sigma)]
    pub noise_sigma: f64,
    /// Generate a query store instead of the database: this many queries per
    /// cluster, drawn from --stream.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Noise stream for query generation; 0 and 1 are reserved for the
    /// database, so query stores use 2, 3, ...
    #[arg(long, default_value_t = 2)]
    pub stream: u64,
    /// Binary store to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    /// Database store.
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbors per item (1 <= k < store size).
    #[arg(long)]
    pub k: usize,
    /// Graph file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = ArgGroup::new("query").required(true).multiple(false))]
pub struct ExpandArgs {
    /// Database store.
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbor graph of the store (needed by gqe and by classic methods
    /// expanding a database item).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: CliMethod,
    /// Neighborhood size for classic methods.
    #[arg(long)]
    pub k: Option<usize>,
    /// Similarity exponent for alphaqe.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Model file for the gqe method.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the precomputed level cache (gqe only; requires --levels).
    #[arg(long)]
    pub fast: bool,
    /// Level cache produced by `precompute`.
    #[arg(long)]
    pub levels: Option<PathBuf>,
    /// Expand this database item.
    #[arg(long, group = "query")]
    pub query_id: Option<u32>,
    /// Expand an external query read from a one-line comma-separated file.
    #[arg(long, group = "query")]
    pub query_file: Option<PathBuf>,
    /// JSON file to write the expanded vector to.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Level cache file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DbaArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Softmax temperature of the first augmentation level.
    #[arg(long)]
    pub t1: f64,
    /// Softmax temperature of the remaining levels.
    #[arg(long)]
    pub t2: f64,
    /// Neighbors aggregated per item during augmentation.
    #[arg(long)]
    pub k_dba: usize,
    /// Augmented store to write (labels carried over).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled database store to train on.
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbor graph of the store.
    #[arg(long)]
    pub graph: PathBuf,
    /// Fine-tune this model instead of initializing a fresh one.
    #[arg(long, conflicts_with_all = ["l", "layers", "heads", "ff_dim"])]
    pub model: Option<PathBuf>,
    /// Hierarchy depth of a fresh model.
    #[arg(long)]
    pub l: Option<usize>,
    /// Neighbors per node of a fresh model (default: the graph's k).
    #[arg(long)]
    pub k: Option<usize>,
    /// Encoder blocks of a fresh model.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Attention heads of a fresh model.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward width of a fresh model (default: 2 * dim).
    #[arg(long)]
    pub ff_dim: Option<usize>,
    /// Config file of `key=value` lines; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub negatives_per_positive: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub pool_refresh_interval: Option<usize>,
    /// Validation query store; the best-validation-mAP epoch is kept.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Trained model file to write; per-epoch statistics go to
    /// `<output>.history.jsonl`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled query store.
    #[arg(long)]
    pub queries: PathBuf,
    /// Labeled database store.
    #[arg(long)]
    pub store: PathBuf,
    /// Rank this augmented store instead of --store. Graph-based methods
    /// then need a graph built on the augmented store.
    #[arg(long)]
    pub dba_store: Option<PathBuf>,
    /// Neighbor graph of the ranked store (gqe only).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: CliMethod,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Relevance file overriding label matching: line i holds the
    /// space-separated relevant database ids of query i.
    #[arg(long)]
    pub relevance: Option<PathBuf>,
    /// JSON report to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Labeled database store.
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbor graph of the store.
    #[arg(long)]
    pub graph: PathBuf,
    /// Model whose expansion is attributed.
    #[arg(long)]
    pub model: PathBuf,
    /// Database item used as the query.
    #[arg(long)]
    pub query_id: u32,
    /// JSON metrics file to write.
    #[arg(long)]
    pub output: PathBuf,
}

/// Parse argv, run the chosen subcommand and return the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("info"),
    )
    .format_timestamp(None)
    .try_init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and succeed; real parse
            // errors are usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return 1;
        }
    }

    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Expand(a) => cmd_expand(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Dba(a) => cmd_dba(a),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

// ---------------------------------------------------------------- loading

/// Prefix errors with the file they came from; keeps the usage-vs-data
/// classification of the underlying error.
fn with_path(e: GqeError, what: &str, path: &Path) -> GqeError {
    let msg = format!("{what} {}: {e}", path.display());
    if e.is_usage() {
        GqeError::InvalidInput(msg)
    } else {
        GqeError::Format(msg)
    }
}

fn load_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path, false).map_err(|e| with_path(e, "store", path))
}

fn load_graph(path: &Path, store: &EmbeddingStore) -> Result<KnnGraph> {
    KnnGraph::load_any(path, store).map_err(|e| with_path(e, "graph", path))
}

fn load_model(path: &Path) -> Result<GqeModel> {
    GqeModel::load(path).map_err(|e| with_path(e, "model", path))
}

fn require<T>(value: Option<T>, message: &str) -> Result<T> {
    value.ok_or_else(|| GqeError::InvalidInput(message.into()))
}

fn check_query_id(id: u32, store: &EmbeddingStore) -> Result<()> {
    if (id as usize) < store.count() {
        Ok(())
    } else {
        Err(GqeError::InvalidInput(format!(
            "--query-id {id} out of range: store has {} items",
            store.count()
        )))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| GqeError::Format(format!("serializing {}: {e}", path.display())))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// A query vector read from a one-line comma-separated text file.
fn read_query_file(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let store = EmbeddingStore::from_text(path, false).map_err(|e| {
        with_path(e, "query file", path)
    })?;
    if store.count() != 1 {
        return Err(GqeError::InvalidInput(format!(
            "query file {} must hold exactly one embedding line, found {}",
            path.display(),
            store.count()
        )));
    }
    if store.dim() != dim {
        return Err(GqeError::InvalidInput(format!(
            "query file {} has dimension {}, store has {dim}",
            path.display(),
            store.dim()
        )));
    }
    Ok(store.row_f64(0))
}

fn method_spec(method: CliMethod, k: Option<usize>, alpha: Option<f64>) -> Result<MethodSpec> {
    Ok(match method {
        CliMethod::None => MethodSpec::NoExpansion,
        CliMethod::Aqe => MethodSpec::Aqe { k: require(k, "method aqe requires --k")? },
        CliMethod::Aqewd => MethodSpec::Aqewd { k: require(k, "method aqewd requires --k")? },
        CliMethod::Alphaqe => MethodSpec::AlphaQe {
            k: require(k, "method alphaqe requires --k")?,
            alpha: require(alpha, "method alphaqe requires --alpha")?,
        },
        CliMethod::Gqe => MethodSpec::Gqe,
    })
}

// ------------------------------------------------------------- subcommands

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("ingest");
    m.input("input", &args.input)?;

    let mut store = EmbeddingStore::from_text(&args.input, true)
        .map_err(|e| with_path(e, "input", &args.input))?;
    if let Some(labels_path) = &args.labels {
        m.input("labels", labels_path)?;
        let labels = read_labels_file(labels_path, store.count())
            .map_err(|e| with_path(e, "labels", labels_path))?;
        store.set_labels(Some(labels))?;
    }
    store.save(&args.output)?;
    log::info!(
        "ingested {} embeddings of dimension {} into {}",
        store.count(),
        store.dim(),
        args.output.display()
    );

    m.path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let spec = SynthSpec {
        clusters: args.clusters,
        points_per_cluster: args.points_per_cluster,
        dim: args.dim,
        noise_sigma: args.noise_sigma,
        seed,
    };
    let store = match args.queries {
        Some(per_cluster) => generate_queries(&spec, per_cluster, args.stream)?,
        None => generate_synthetic(&spec)?,
    };
    store.save(&args.output)?;
    log::info!(
        "wrote {} points ({} clusters) to {}",
        store.count(),
        args.clusters,
        args.output.display()
    );

    let mut m = ManifestBuilder::new("synth");
    m.flag("clusters", args.clusters)
        .flag("points_per_cluster", args.points_per_cluster)
        .flag("dim", args.dim)
        .flag("noise_sigma", args.noise_sigma)
        .flag("seed", seed);
    if let Some(per_cluster) = args.queries {
        m.flag("queries", per_cluster).flag("stream", args.stream);
    }
    m.path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("build-graph");
    m.input("store", &args.store)?;

    let store = load_store(&args.store)?;
    let graph = build_graph(&store, args.k)?;
    graph.save(&args.output)?;
    log::info!(
        "built exact {}-nn graph over {} items -> {}",
        args.k,
        store.count(),
        args.output.display()
    );

    m.flag("k", args.k).path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExpansionOutput {
    method: String,
    query: String,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregator_calls: Option<usize>,
    vector: Vec<f64>,
}

fn cmd_expand(args: ExpandArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("expand");
    m.input("store", &args.store)?;

    let store = load_store(&args.store)?;
    let graph = match &args.graph {
        Some(p) => {
            m.input("graph", p)?;
            Some(load_graph(p, &store)?)
        }
        None => None,
    };
    if let Some(id) = args.query_id {
        check_query_id(id, &store)?;
    }
    let external = match &args.query_file {
        Some(p) => {
            m.input("query_file", p)?;
            Some(read_query_file(p, store.dim())?)
        }
        None => None,
    };
    let query_desc = match (args.query_id, &args.query_file) {
        (Some(id), _) => format!("db:{id}"),
        (_, Some(p)) => format!("file:{}", p.display()),
        _ => unreachable!("clap enforces exactly one query source"),
    };

    let (vector, calls) = match args.method {
        CliMethod::None => {
            let q = match args.query_id {
                Some(id) => store.row_f64(id),
                None => external.clone().unwrap(),
            };
            (gqe::math::normalized(&q)?, None)
        }
        CliMethod::Aqe | CliMethod::Aqewd | CliMethod::Alphaqe => {
            let k = require(args.k, "classic expansion methods require --k")?;
            let config = ClassicQEConfig {
                method: match args.method {
                    CliMethod::Aqe => ClassicMethod::Aqe,
                    CliMethod::Aqewd => ClassicMethod::Aqewd,
                    _ => ClassicMethod::AlphaQe,
                },
                k,
                alpha: args.alpha,
            };
            let (q, neighbors) = match args.query_id {
                Some(id) => {
                    let graph = require(
                        graph.as_ref(),
                        "classic expansion of a database item requires --graph",
                    )?;
                    (store.row_f64(id), QueryNeighbors::from_graph(graph, id, k)?)
                }
                None => {
                    let q = external.clone().unwrap();
                    let unit = gqe::math::normalized(&q)?;
                    (q, query_neighbors(&store, k, &unit)?)
                }
            };
            (config.expand(&q, &neighbors, &store)?, None)
        }
        CliMethod::Gqe => {
            let model_path = require(
                args.model.as_ref(),
                "method gqe requires --model",
            )?;
            m.input("model", model_path)?;
            let model = load_model(model_path)?;
            let graph =
                require(graph.as_ref(), "method gqe requires --graph")?;
            let query = match (args.query_id, &external) {
                (Some(id), _) => QueryRef::Db(id),
                (_, Some(q)) => QueryRef::External(q),
                _ => unreachable!(),
            };
            if args.fast {
                let levels_path = require(
                    args.levels.as_ref(),
                    "--fast requires --levels (run `precompute` first)",
                )?;
                m.input("levels", levels_path)?;
                let levels = LevelStore::load(levels_path, &store, graph, &model)
                    .map_err(|e| with_path(e, "levels", levels_path))?;
                let (v, calls) = expand_fast_with_stats(&model, query, &store, graph, &levels)?;
                (v, Some(calls))
            } else {
                let (v, _) = expand_naive(&model, query, &store, graph)?;
                (v, None)
            }
        }
    };

    let out = ExpansionOutput {
        method: method_name(args.method).to_string(),
        query: query_desc,
        dim: vector.len(),
        aggregator_calls: calls,
        vector,
    };
    write_json(&args.output, &out)?;
    log::info!("expanded {} -> {}", out.query, args.output.display());

    m.flag("method", method_name(args.method)).flag("fast", args.fast);
    if let Some(k) = args.k {
        m.flag("k", k);
    }
    if let Some(alpha) = args.alpha {
        m.flag("alpha", alpha);
    }
    if let Some(id) = args.query_id {
        m.flag("query_id", id);
    }
    m.path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

fn method_name(m: CliMethod) -> &'static str {
    match m {
        CliMethod::None => "none",
        CliMethod::Aqe => "aqe",
        CliMethod::Aqewd => "aqewd",
        CliMethod::Alphaqe => "alphaqe",
        CliMethod::Gqe => "gqe",
    }
}

fn cmd_precompute(args: PrecomputeArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("precompute");
    m.input("store", &args.store)?;
    m.input("graph", &args.graph)?;
    m.input("model", &args.model)?;

    let store = load_store(&args.store)?;
    let graph = load_graph(&args.graph, &store)?;
    let model = load_model(&args.model)?;
    let levels = precompute_levels(&model, &store, &graph)?;
    levels.save(&args.output)?;
    log::info!(
        "precomputed {} level matrices over {} items -> {}",
        model.level_count() - 1,
        store.count(),
        args.output.display()
    );

    m.path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

fn cmd_dba(args: DbaArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("dba");
    m.input("store", &args.store)?;
    m.input("graph", &args.graph)?;
    m.input("model", &args.model)?;

    let store = load_store(&args.store)?;
    let graph = load_graph(&args.graph, &store)?;
    let model = load_model(&args.model)?;
    let augmented = run_dba(&model, &store, &graph, args.t1, args.t2, args.k_dba)?;
    augmented.save(&args.output)?;
    log::info!(
        "augmented {} items (t1={}, t2={}, k_dba={}) -> {}",
        augmented.count(),
        args.t1,
        args.t2,
        args.k_dba,
        args.output.display()
    );

    m.flag("t1", args.t1)
        .flag("t2", args.t2)
        .flag("k_dba", args.k_dba)
        .path_flag("output", &args.output)
        .output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut m = ManifestBuilder::new("train");
    m.input("store", &args.store)?;
    m.input("graph", &args.graph)?;

    let store = load_store(&args.store)?;
    let graph = load_graph(&args.graph, &store)?;

    // Training configuration: defaults, then config file, then flags.
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        m.input("config", path)?;
        apply_config_file(&mut config, path)?;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.margin {
        config.margin = v;
    }
    if let Some(v) = args.negatives_per_positive {
        config.negatives_per_positive = v;
    }
    if let Some(v) = args.pool_size {
        config.pool_size = v;
    }
    if let Some(v) = args.pool_refresh_interval {
        config.pool_refresh_interval = v;
    }
    if let Some(s) = seed {
        config.seed = s;
    }

    let model = match (&args.model, args.l) {
        (Some(path), None) => {
            m.input("model", path)?;
            load_model(path)?
        }
        (None, Some(l)) => {
            let k = args.k.unwrap_or_else(|| graph.k());
            let encoder = EncoderConfig {
                dim: store.dim(),
                heads: args.heads,
                layers: args.layers,
                ff_dim: args.ff_dim.unwrap_or(2 * store.dim()),
                variant: EncoderVariant::Attention,
            };
            m.flag("l", l)
                .flag("k", k)
                .flag("layers", args.layers)
                .flag("heads", args.heads)
                .flag("ff_dim", encoder.ff_dim);
            GqeModel::init(l, k, encoder, config.seed)?
        }
        (None, None) => {
            return Err(GqeError::InvalidInput(
                "pass --model to fine-tune or --l to initialize a fresh model".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --model with --l"),
    };

    let validation = match &args.val {
        Some(path) => {
            m.input("val", path)?;
            Some(load_store(path)?)
        }
        None => None,
    };

    let outcome = train(&model, &store, &graph, &config, validation.as_ref())?;
    outcome.model.save(&args.output)?;

    let history_path = PathBuf::from(format!("{}.history.jsonl", args.output.display()));
    let mut w = BufWriter::new(File::create(&history_path)?);
    for stats in &outcome.history {
        serde_json::to_writer(&mut w, stats)
            .map_err(|e| GqeError::Format(format!("serializing history: {e}")))?;
        writeln!(w)?;
    }
    w.flush()?;
    log::info!(
        "kept epoch {} -> {} (history in {})",
        outcome.best_epoch,
        args.output.display(),
        history_path.display()
    );

    m.flag("epochs", config.epochs)
        .flag("batch_size", config.batch_size)
        .flag("learning_rate", config.learning_rate)
        .flag("weight_decay", config.weight_decay)
        .flag("margin", config.margin)
        .flag("negatives_per_positive", config.negatives_per_positive)
        .flag("pool_size", config.pool_size)
        .flag("pool_refresh_interval", config.pool_refresh_interval)
        .flag("seed", config.seed)
        .path_flag("output", &args.output)
        .output(&args.output)
        .output(&history_path);
    m.write(&args.output)?;
    Ok(())
}

fn apply_config_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GqeError::Format(format!("config {}: {e}", path.display())))?;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            GqeError::InvalidInput(format!(
                "config {} line {}: expected key=value, found {line:?}",
                path.display(),
                line_no + 1
            ))
        })?;
        config.set(key.trim(), value.trim()).map_err(|e| {
            GqeError::InvalidInput(format!(
                "config {} line {}: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("eval");
    m.input("queries", &args.queries)?;
    m.input("store", &args.store)?;

    let queries = load_store(&args.queries)?;
    let base = load_store(&args.store)?;
    let db = match &args.dba_store {
        Some(path) => {
            m.input("dba_store", path)?;
            load_store(path)?
        }
        None => base,
    };
    let graph = match &args.graph {
        Some(path) => {
            m.input("graph", path)?;
            Some(load_graph(path, &db)?)
        }
        None => None,
    };
    let model = match &args.model {
        Some(path) => {
            m.input("model", path)?;
            Some(load_model(path)?)
        }
        None => None,
    };
    let relevance = match &args.relevance {
        Some(path) => {
            m.input("relevance", path)?;
            Some(read_relevance_file(path).map_err(|e| with_path(e, "relevance", path))?)
        }
        None => None,
    };

    let spec = method_spec(args.method, args.k, args.alpha)?;
    let report = evaluate(
        &spec,
        &queries,
        &db,
        graph.as_ref(),
        model.as_ref(),
        relevance.as_ref(),
    )?;
    write_json(&args.output, &report)?;
    log::info!(
        "method {}: mAP {:.4} over {} queries -> {}",
        report.method,
        report.map,
        report.per_query.len(),
        args.output.display()
    );

    m.flag("method", method_name(args.method));
    if let Some(k) = args.k {
        m.flag("k", k);
    }
    if let Some(alpha) = args.alpha {
        m.flag("alpha", alpha);
    }
    m.path_flag("output", &args.output).output(&args.output);
    m.write(&args.output)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsOutput {
    query_id: u32,
    query_label: u32,
    agreement: f64,
    diversity: f64,
    query_weight: f64,
    final_norm: f64,
    db_weights: BTreeMap<u32, f64>,
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("metrics");
    m.input("store", &args.store)?;
    m.input("graph", &args.graph)?;
    m.input("model", &args.model)?;

    let store = load_store(&args.store)?;
    let graph = load_graph(&args.graph, &store)?;
    let model = load_model(&args.model)?;
    check_query_id(args.query_id, &store)?;
    let labels = store.labels().ok_or_else(|| {
        GqeError::InvalidInput("metrics needs a labeled store".into())
    })?;
    let query_label = labels[args.query_id as usize];

    let (_, traces) = expand_traced(&model, QueryRef::Db(args.query_id), &store, &graph)?;
    let attr = gqe::attribute_weights(&traces);
    let out = MetricsOutput {
        query_id: args.query_id,
        query_label,
        agreement: gqe::agreement(&attr, labels, query_label)?,
        diversity: gqe::diversity(&attr, labels, query_label)?,
        query_weight: attr.query_weight,
        final_norm: attr.final_norm,
        db_weights: attr.weights.clone(),
    };
    write_json(&args.output, &out)?;
    log::info!(
        "query {}: agreement {:.4}, diversity {:.4} -> {}",
        out.query_id,
        out.agreement,
        out.diversity,
        args.output.display()
    );

    m.flag("query_id", args.query_id)
        .path_flag("output", &args.output)
        .output(&args.output);
    m.write(&args.output)?;
    Ok(())
}
