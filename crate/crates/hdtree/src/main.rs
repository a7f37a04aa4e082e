#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdtree::checkpoint;
use hdtree::config::{self, parse_override};
use hdtree::evaluate::{evaluate_model, ward_baseline, EvalOptions};
use hdtree::export::{self, metrics_csv};
use hdtree::io::{self, Column, CsvOptions, MatrixFormat};
use hdtree_core::data::{self, synth_hierarchy, Dataset, SynthConfig, SynthOrigin};
use hdtree_core::htc::CodePath;
use hdtree_core::lineage::{build_graph, node_of_point, shortest_path, NodeId};
use hdtree_core::metrics::ElboSteps;
use hdtree_core::trainer::{Checkpoint, Trainer};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "hdtree", version, about = "Hierarchical tree codebook with diffusion decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a planted hierarchy and write data.csv and truth.json.
    Synth(SynthArgs),
    /// Apply log1p, highly-variable-feature selection and z-scoring, in that order.
    Preprocess(PreprocessArgs),
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Write embeddings, codebook-space points and code paths.
    Embed(EmbedArgs),
    /// Export the codebook tree as JSON.
    Tree(TreeArgs),
    /// Sample data conditioned on a leaf or a root-to-leaf path.
    Generate(GenerateArgs),
    /// Shortest lineage path between two samples or two tree nodes.
    Lineage(LineageArgs),
    /// Score a trained model on a dataset.
    Evaluate(EvaluateArgs),
    /// Score Ward clustering on raw features or on model embeddings.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    F32le,
    Idx,
}

#[derive(Args)]
struct DataOptions {
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Values per row of an f32le file.
    #[arg(long)]
    cols: Option<usize>,
    /// The CSV file has no header row.
    #[arg(long)]
    no_header: bool,
    /// CSV column (name or index) holding class labels.
    #[arg(long)]
    label_column: Option<String>,
    /// CSV column (name or index) holding timestamps.
    #[arg(long)]
    time_column: Option<String>,
    /// IDX label file accompanying an IDX image file.
    #[arg(long)]
    idx_labels: Option<PathBuf>,
}

impl DataOptions {
    fn load(&self, path: &Path) -> anyhow::Result<Dataset> {
        let ds = match self.format {
            Format::Idx => {
                let labels = self.idx_labels.as_deref().ok_or_else(|| usage("--format idx needs --idx-labels"))?;
                io::load_idx(path, labels)?
            }
            Format::Csv => io::load_matrix(
                path,
                MatrixFormat::Csv,
                &CsvOptions {
                    header: !self.no_header,
                    label: self.label_column.as_deref().map(|c| c.parse::<Column>().expect("infallible")),
                    timestamp: self.time_column.as_deref().map(|c| c.parse::<Column>().expect("infallible")),
                },
            )?,
            Format::F32le => {
                let cols = self.cols.ok_or_else(|| usage("--format f32le needs --cols"))?;
                io::load_matrix(path, MatrixFormat::F32le { cols }, &CsvOptions::default())?
            }
        };
        log::info!("loaded {} samples x {} features from {}", ds.len(), ds.dim(), path.display());
        Ok(ds)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Input data file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    options: DataOptions,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<Dataset> {
        self.options.load(&self.data)
    }
}

#[derive(Args)]
struct OptionalDataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    options: DataOptions,
}

impl OptionalDataArgs {
    fn load(&self) -> anyhow::Result<Option<Dataset>> {
        self.data.as_deref().map(|p| self.options.load(p)).transpose()
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 512)]
    n_per_leaf: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 8.0)]
    branch_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    decay: f64,
    /// Also draw progenitor samples around internal nodes.
    #[arg(long)]
    all_levels: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    log1p: bool,
    /// Keep the K columns of largest variance.
    #[arg(long, value_name = "K")]
    hvg: Option<usize>,
    #[arg(long)]
    zscore: bool,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log; defaults to the checkpoint path with `.epochs.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    /// Any other setting as `key=value` (dotted keys reach nested settings).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TreeArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Data routed through the tree to count node occupancy.
    #[command(flatten)]
    input: OptionalDataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Leaf index; conditions on its root-to-leaf path.
    #[arg(long, conflicts_with = "path", required_unless_present = "path")]
    leaf: Option<usize>,
    /// Comma-separated node index per level, root side first.
    #[arg(long, value_delimiter = ',')]
    path: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LineageArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Start: a sample index (needs --data) or a node `level:index`.
    #[arg(long)]
    from: String,
    /// End: a sample index (needs --data) or a node `level:index`.
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 2.0)]
    penalty: f64,
    /// Tree level of sample endpoints; defaults to the leaves.
    #[arg(long)]
    level: Option<usize>,
    /// Data holding sample endpoints.
    #[command(flatten)]
    input: OptionalDataArgs,
    /// Output prefix; writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset name written to the metric rows.
    #[arg(long, default_value = "data")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    rop_k: usize,
    /// Count neighbors one time bin away as consistent.
    #[arg(long)]
    rop_adjacent: bool,
    /// Timesteps per sample in the likelihood bound, or `exact`.
    #[arg(long, default_value = "50")]
    elbo_steps: String,
    #[arg(long, default_value_t = 50)]
    fid_components: usize,
}

impl EvalArgs {
    fn options(&self, reconstruction_start: f64) -> anyhow::Result<EvalOptions> {
        let elbo = match self.elbo_steps.as_str() {
            "exact" => ElboSteps::Exact,
            s => match s.parse::<usize>() {
                Ok(m) if m > 0 => ElboSteps::Sampled(m),
                _ => return Err(hdtree::Error::Config(format!("--elbo-steps {s:?} is not a positive count or exact")).into()),
            },
        };
        Ok(EvalOptions {
            rop_k: self.rop_k,
            rop_adjacent: self.rop_adjacent,
            elbo,
            fid_components: self.fid_components,
            reconstruction_start,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[command(flatten)]
    input: DataArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    WardRaw,
    WardEmbedding,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    /// Model whose embeddings are clustered (ward-embedding only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    input: DataArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    hdtree::Error::Config(msg.into()).into()
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    io::write_file(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn check_data_dim(ck: &Checkpoint, ds: &Dataset) -> anyhow::Result<()> {
    if ds.dim() != ck.model.data_dim() {
        return Err(hdtree::Error::Format {
            path: PathBuf::from("data"),
            msg: format!("{} features, the model expects {}", ds.dim(), ck.model.data_dim()),
        }
        .into());
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        depth: a.depth,
        n_per_leaf: a.n_per_leaf,
        dim: a.dim,
        spread: a.spread,
        branch_scale: a.branch_scale,
        decay: a.decay,
        origin: if a.all_levels { SynthOrigin::AllLevels } else { SynthOrigin::Leaves },
        seed: a.seed,
    };
    if !(cfg.spread >= 0.0) || !(cfg.branch_scale >= 0.0) || !(cfg.decay > 0.0) {
        return Err(usage("--spread and --branch-scale must be >= 0, --decay > 0"));
    }
    let (ds, truth) = synth_hierarchy(&cfg).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).map_err(|e| hdtree::Error::Io { path: a.out.clone(), source: e })?;
    io::write_dataset_csv(&a.out.join("data.csv"), &ds)?;
    let doc = serde_json::json!({
        "config": cfg,
        "depth": truth.depth,
        "leaf": truth.leaf,
        "origin_level": truth.origin_level,
        "node_means": truth.node_means.iter().map(|m| m.row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    write(&a.out.join("truth.json"), &serde_json::to_string_pretty(&doc)?)
}

fn preprocess(a: &PreprocessArgs) -> anyhow::Result<()> {
    let mut ds = a.input.load()?;
    if let Some(k) = a.hvg {
        if k == 0 || k > ds.dim() {
            return Err(usage(format!("--hvg {k} must lie in 1..={}", ds.dim())));
        }
    }
    if a.log1p {
        ds = data::log1p(&ds)?;
    }
    if let Some(k) = a.hvg {
        ds = data::select_hvg(&ds, k)?.1;
    }
    if a.zscore {
        ds = data::zscore(&ds);
    }
    io::write_dataset_csv(&a.out, &ds)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut overrides: Vec<(String, Value)> = Vec::new();
    let mut flag = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    flag("seed", a.seed.map(Value::from));
    flag("epochs", a.epochs.map(Value::from));
    flag("warmup_epochs", a.warmup_epochs.map(Value::from));
    flag("batch_size", a.batch_size.map(Value::from));
    flag("lr", a.lr.map(Value::from));
    flag("depth", a.depth.map(Value::from));
    flag("diffusion_steps", a.diffusion_steps.map(Value::from));
    for s in &a.set {
        overrides.push(parse_override(s)?);
    }
    let cfg = config::resolve(a.config.as_deref(), &overrides)?;
    let ds = a.input.load()?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("epochs.csv"));

    let mut trainer = Trainer::new(&ds, &cfg)?;
    let result = trainer.run();
    write(&metrics_path, &export::epochs_csv(&trainer.epochs))?;
    match result {
        Ok(()) => {
            checkpoint::save(&a.out, trainer.checkpoint())?;
            log::info!("wrote {}", a.out.display());
            Ok(())
        }
        Err(failure) => {
            if let Some(last) = &failure.last_good {
                checkpoint::save(&a.out, last)?;
                log::warn!("training failed; last completed epoch kept in {}", a.out.display());
            }
            Err(hdtree::Error::Core(failure.error).into())
        }
    }
}

fn embed(a: &EmbedArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt.checkpoint)?;
    let ds = a.input.load()?;
    check_data_dim(&ck, &ds)?;
    let z = ck.model.embed(&ds.features)?;
    let points = ck.model.to_code_space(&z);
    let paths = ck.model.paths(&ds.features)?;
    write(&a.out, &export::embed_csv(&z, &points, &paths))
}

fn tree(a: &TreeArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt.checkpoint)?;
    let ds = a.input.load()?;
    let paths = match &ds {
        Some(ds) => {
            check_data_dim(&ck, ds)?;
            ck.model.paths(&ds.features)?
        }
        None => Vec::new(),
    };
    write(&a.out, &serde_json::to_string_pretty(&export::tree_export(&ck.model, &paths))?)
}

fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt.checkpoint)?;
    let depth = ck.model.depth();
    let path = match (&a.path, a.leaf) {
        (Some(p), _) => CodePath(p.clone()),
        (None, Some(leaf)) if leaf < 1 << depth => CodePath::from_leaf(depth, leaf),
        (None, Some(leaf)) => return Err(usage(format!("leaf {leaf} does not exist in a depth-{depth} tree"))),
        (None, None) => return Err(usage("give --leaf or --path")),
    };
    if path.depth() != depth || !path.is_valid_descent() {
        return Err(usage(format!("{:?} is not a root-to-leaf path of a depth-{depth} tree", path.0)));
    }
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let samples = ck.model.generate(&vec![path; a.count], a.seed)?;
    write(&a.out, &export::matrix_csv(&samples, "x"))
}

enum Endpoint {
    Sample(usize),
    Node(NodeId),
}

fn parse_endpoint(s: &str) -> anyhow::Result<Endpoint> {
    if let Some((l, i)) = s.split_once(':') {
        let (l, i) = (l.trim().parse(), i.trim().parse());
        match (l, i) {
            (Ok(l), Ok(i)) => Ok(Endpoint::Node(NodeId::new(l, i))),
            _ => Err(usage(format!("{s:?} is not a node level:index"))),
        }
    } else {
        s.trim().parse().map(Endpoint::Sample).map_err(|_| usage(format!("{s:?} is not a sample index or level:index")))
    }
}

fn lineage(a: &LineageArgs) -> anyhow::Result<()> {
    if !(a.penalty > 1.0) {
        return Err(usage("--penalty must exceed 1"));
    }
    let (from, to) = (parse_endpoint(&a.from)?, parse_endpoint(&a.to)?);
    let ck = load_checkpoint(&a.ckpt.checkpoint)?;
    let depth = ck.model.depth();
    let level = a.level.unwrap_or(depth);
    if level > depth {
        return Err(usage(format!("--level {level} exceeds tree depth {depth}")));
    }
    let ds = a.input.load()?;
    let graph = build_graph(&ck.model.codebook, a.k, a.penalty)?;
    let resolve = |e: &Endpoint| -> anyhow::Result<NodeId> {
        match e {
            Endpoint::Node(n) => {
                if !graph.contains(*n) {
                    return Err(usage(format!("node {}:{} is not in the tree", n.level, n.index)));
                }
                Ok(*n)
            }
            Endpoint::Sample(i) => {
                let ds = ds.as_ref().ok_or_else(|| usage("sample endpoints need --data"))?;
                check_data_dim(&ck, ds)?;
                if *i >= ds.len() {
                    return Err(usage(format!("sample {i} out of range for {} samples", ds.len())));
                }
                let point = ck.model.code_points(&ds.features.select_rows(&[*i]))?;
                Ok(node_of_point(&ck.model.codebook, point.row(0), level)?)
            }
        }
    };
    let (start, end) = (resolve(&from)?, resolve(&to)?);
    let traj = shortest_path(&graph, start, end)?;
    let ex = export::trajectory_export(&graph, &traj);
    let prefix = a.out.to_string_lossy().into_owned();
    write(Path::new(&format!("{prefix}.csv")), &export::trajectory_csv(&ex))?;
    write(Path::new(&format!("{prefix}.json")), &serde_json::to_string_pretty(&ex)?)
}

fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt.checkpoint)?;
    let options = a.eval.options(ck.config.reconstruction_start)?;
    let ds = a.input.load()?;
    check_data_dim(&ck, &ds)?;
    let row = evaluate_model(&ck.model, &ds, &a.eval.dataset, a.eval.seed, &options)?;
    write(&a.out, &metrics_csv(&[row]))
}

fn baseline(a: &BaselineArgs) -> anyhow::Result<()> {
    let options = a.eval.options(0.25)?;
    let ds = a.input.load()?;
    let row = match a.method {
        BaselineMethod::WardRaw => {
            ward_baseline(&ds.features, &ds, &a.eval.dataset, "ward-raw", a.eval.seed, &options)?
        }
        BaselineMethod::WardEmbedding => {
            let path = a.checkpoint.as_deref().ok_or_else(|| usage("ward-embedding needs --checkpoint"))?;
            let ck = load_checkpoint(path)?;
            check_data_dim(&ck, &ds)?;
            let points = ck.model.code_points(&ds.features)?;
            ward_baseline(&points, &ds, &a.eval.dataset, "ward-embedding", a.eval.seed, &options)?
        }
    };
    write(&a.out, &metrics_csv(&[row]))
}

/// Reads `HDTREE_THREADS`; every stage runs on one thread, so larger values
/// are accepted but change nothing.
fn thread_budget() -> anyhow::Result<usize> {
    match std::env::var("HDTREE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("HDTREE_THREADS={v:?} is not a positive integer"))),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = thread_budget()?;
    log::debug!("thread budget {threads}");
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Tree(a) => tree(a),
        Command::Generate(a) => generate(a),
        Command::Lineage(a) => lineage(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Baseline(a) => baseline(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<hdtree::Error>() {
        return e.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<hdtree_core::Error>() {
        return hdtree::Error::Core(e.clone()).exit_code() as u8;
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
