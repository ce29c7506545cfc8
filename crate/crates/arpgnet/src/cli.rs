//! Command-line pipeline: configuration layering, run directories, and the
//! subcommands `synth`, `train`, `eval`, `loso`, `ablate`, `inspect-graph`,
//! `inspect-attention`, `bench`, and `export-report`.
//!
//! Options come from an optional TOML file (`--config`) overridden by flags.
//! Every command that writes results creates a fresh run directory under
//! `--out`, named by timestamp and seed, and echoes the merged configuration
//! into it as `run_config.json`. Failures print a single line of the form
//! `error[category] message` and exit nonzero.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{generate_synth, DataError, DataLayout, Dataset, RelationLayout, SynthTaskConfig};
use crate::evaluation::{
    ablation_run, bench_inference, dump_attention, evaluate, loso_run, stratified_split, EvalError,
};
use crate::graphs::{build_fusion_graph, build_relation_graph, AdjacencyMatrix, GraphError, GridSpec};
use crate::model::{ArpgNet, ArpgNetConfig, Backbone, CheckpointError, ModelError, Variant};
use crate::numerics::Tape;
use crate::training::{fit, TrainConfig, TrainingError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{reason}")]
    Config { reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Train(#[from] TrainingError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Graph(#[from] GraphError),
}

impl CliError {
    /// Stable machine-parsable failure category, printed as `error[...]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Graph(_) => "graph",
        }
    }
}

fn config_error(reasons: &[String]) -> CliError {
    CliError::Config {
        reason: reasons.join("; "),
    }
}

/// Contents of a `--config` TOML file. Every table and every field is
/// optional; omitted values fall back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ArpgNetConfig,
    pub train: TrainConfig,
    pub synth: SynthTaskConfig,
}

impl FileConfig {
    /// Loads the file when a path is given, otherwise returns defaults.
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| CliError::Config {
                    reason: format!("{}: {}", path.display(), e.message()),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Appearance,
    Relation,
    Concat,
    Fusion,
    FusionTrs,
}

impl VariantArg {
    pub fn to_variant(self) -> Variant {
        match self {
            VariantArg::Appearance => Variant::AppearanceOnly,
            VariantArg::Relation => Variant::RelationOnly,
            VariantArg::Concat => Variant::ConcatBaseline,
            VariantArg::Fusion => Variant::FusionNoTrs,
            VariantArg::FusionTrs => Variant::FusionTrs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    /// Convolutional trunks over raw frames.
    Toy,
    /// Precomputed per-frame features.
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    Relation,
    Fusion,
}

/// Flags shared by every command that reads a configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

/// Model-shape flags layered on top of the configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Which streams run and how they are combined.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Temporal response scope of the fusion graph.
    #[arg(long)]
    pub trs: Option<usize>,
    /// Patch grid side; the relation graph has p*p nodes.
    #[arg(long)]
    pub p: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feature source. For commands that read a dataset the stream shapes
    /// always come from the data; passing a kind that contradicts the
    /// dataset layout is an error.
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ArpgNetConfig) {
        if let Some(variant) = self.variant {
            cfg.variant = variant.to_variant();
        }
        if let Some(trs) = self.trs {
            cfg.trs = trs;
        }
        if let Some(p) = self.p {
            cfg.p = p;
        }
        if let Some(heads) = self.heads {
            cfg.heads = heads;
        }
        if let Some(backbone) = self.backbone {
            cfg.backbone = match backbone {
                BackboneArg::Toy => Backbone::Toy,
                BackboneArg::Features => match cfg.backbone {
                    Backbone::ExternalFeatures { .. } => cfg.backbone,
                    Backbone::Toy => Backbone::ExternalFeatures {
                        relation_map_channels: None,
                    },
                },
            };
        }
    }
}

/// Training flags layered on top of the configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(batch_size) = self.batch_size {
            cfg.batch_size = batch_size;
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "arpgnet",
    version,
    about = "Two-stream graph-attention sequence classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthCmd),
    /// Train one model on a stratified split and score the held-out side.
    Train(TrainCmd),
    /// Score a saved checkpoint on a dataset.
    Eval(EvalCmd),
    /// Leave-one-subject-out cross-validation.
    Loso(LosoCmd),
    /// Train and score every variant on one shared split.
    Ablate(AblateCmd),
    /// Serialize a relation or fusion graph as CSV and an edge list.
    InspectGraph(InspectGraphCmd),
    /// Dump every attention coefficient of one sample.
    InspectAttention(InspectAttentionCmd),
    /// Time eval-mode inference.
    Bench(BenchCmd),
    /// Summarize the artifacts of a run directory as markdown.
    ExportReport(ExportReportCmd),
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Generator seed; equal seeds produce byte-identical datasets.
    #[arg(long)]
    pub seed: u64,
    /// Dataset directory to create.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Seed for initialization, shuffling, frame sampling, and dropout.
    #[arg(long)]
    pub seed: u64,
    /// Parent directory for the run directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Share of each class held out for scoring.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// Model checkpoint written by `train`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset directory; every sample is scored.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Parent directory for the run directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LosoCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Args, Debug)]
pub struct InspectGraphCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Which graph to build.
    #[arg(long, value_enum)]
    pub kind: GraphKind,
    /// Patch grid side for the relation graph.
    #[arg(long)]
    pub p: Option<usize>,
    /// Frames per clip for the fusion graph.
    #[arg(long)]
    pub t: Option<usize>,
    /// Temporal response scope for the fusion graph.
    #[arg(long)]
    pub trs: Option<usize>,
    /// When given, also write adjacency.csv, edges.csv, and degrees.csv
    /// into a run directory here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectAttentionCmd {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Row of the dataset manifest to inspect.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Time this checkpoint instead of a freshly initialized model.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Timed runs after the single warmup pass.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Seed for the random inputs and, without a checkpoint, the weights.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportReportCmd {
    /// Run directory produced by another command.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
}

/// Entry point used by the binary: executes one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(cmd) => run_synth(cmd),
        Command::Train(cmd) => run_train(cmd),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Loso(cmd) => run_loso(cmd),
        Command::Ablate(cmd) => run_ablate(cmd),
        Command::InspectGraph(cmd) => run_inspect_graph(cmd),
        Command::InspectAttention(cmd) => run_inspect_attention(cmd),
        Command::Bench(cmd) => run_bench(cmd),
        Command::ExportReport(cmd) => run_export_report(cmd),
    }
}

/// Creates `out/<timestamp>-seed<seed>`, suffixing a counter on collision.
fn make_run_dir(out: &Path, seed: Option<u64>) -> Result<PathBuf, CliError> {
    let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = match seed {
        Some(seed) => format!("{stamp}-seed{seed}"),
        None => format!("{stamp}-eval"),
    };
    fs::create_dir_all(out)?;
    for attempt in 0.. {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{}", attempt + 1)
        };
        let dir = out.join(&name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("the collision counter is unbounded");
}

/// Stream shapes are facts of the dataset: the class count, the backbone
/// kind, and the feature widths always follow the data. A `--backbone` flag
/// that contradicts the layout is reported instead of silently corrected.
fn align_model_to_data(
    cfg: &mut ArpgNetConfig,
    dataset: &Dataset,
    explicit_backbone: Option<BackboneArg>,
) -> Result<(), CliError> {
    let layout = dataset.layout();
    if let Some(flag) = explicit_backbone {
        let compatible = match layout {
            DataLayout::Frames { .. } => flag == BackboneArg::Toy,
            DataLayout::Features { .. } => flag == BackboneArg::Features,
        };
        if !compatible {
            return Err(config_error(&[format!(
                "--backbone {} contradicts the dataset layout {}",
                match flag {
                    BackboneArg::Toy => "toy",
                    BackboneArg::Features => "features",
                },
                match layout {
                    DataLayout::Frames { .. } => "frames",
                    DataLayout::Features { .. } => "features",
                },
            )]));
        }
    }
    cfg.n_classes = dataset.n_classes();
    match layout {
        DataLayout::Frames {
            channels,
            height,
            width,
        } => {
            cfg.backbone = Backbone::Toy;
            cfg.input_channels = channels;
            cfg.input_height = height;
            cfg.input_width = width;
        }
        DataLayout::Features { c_prime, relation } => {
            cfg.c_prime = c_prime;
            cfg.backbone = Backbone::ExternalFeatures {
                relation_map_channels: match relation {
                    RelationLayout::Maps { channels } => Some(channels),
                    RelationLayout::Vectors => None,
                },
            };
        }
    }
    Ok(())
}

/// Validates the merged model and training configuration, reporting every
/// violated field at once.
fn validate_run(model: &ArpgNetConfig, train: &TrainConfig) -> Result<(), CliError> {
    let mut violations = Vec::new();
    if let Err(ModelError::Config { violations: v }) = model.validate() {
        violations.extend(v);
    }
    if train.epochs == 0 {
        violations.push("epochs must be at least 1".to_string());
    }
    if train.batch_size == 0 {
        violations.push("batch_size must be at least 1".to_string());
    }
    if train.gamma < 0.0 || !train.gamma.is_finite() {
        violations.push(format!("gamma must be finite and nonnegative, got {}", train.gamma));
    }
    for (name, lr) in [
        ("adam.lr_backbone", train.adam.lr_backbone),
        ("adam.lr_other", train.adam.lr_other),
    ] {
        if lr <= 0.0 || !lr.is_finite() {
            violations.push(format!("{name} must be positive, got {lr}"));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(config_error(&violations))
    }
}

fn validate_fraction(test_fraction: f64) -> Result<(), CliError> {
    if test_fraction <= 0.0 || test_fraction >= 1.0 || !test_fraction.is_finite() {
        return Err(config_error(&[format!(
            "test_fraction must lie strictly between 0 and 1, got {test_fraction}"
        )]));
    }
    Ok(())
}

/// Echoes the merged configuration into the run directory. The training
/// log directory is omitted because it always names the run directory
/// itself, which embeds a timestamp.
fn write_run_config(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    data: Option<&Path>,
    model: Option<&ArpgNetConfig>,
    train: Option<&TrainConfig>,
) -> Result<(), CliError> {
    let train_echo = train.map(|t| {
        let mut t = t.clone();
        t.log_dir = None;
        t
    });
    let value = serde_json::json!({
        "command": command,
        "seed": seed,
        "data": data.map(|p| p.display().to_string()),
        "model": model,
        "train": train_echo,
    });
    fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&value).expect("the echo serializes infallibly") + "\n",
    )?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize infallibly");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Confusion matrix as CSV: first column true class, remaining columns
/// predicted-class counts, with class names taken from the dataset.
fn confusion_csv(confusion: &[Vec<usize>], classes: &[String]) -> String {
    let mut csv = String::from("true");
    for name in classes {
        let _ = write!(csv, ",{name}");
    }
    csv.push('\n');
    for (row, name) in confusion.iter().zip(classes) {
        let _ = write!(csv, "{name}");
        for count in row {
            let _ = write!(csv, ",{count}");
        }
        csv.push('\n');
    }
    csv
}

fn run_synth(cmd: SynthCmd) -> Result<(), CliError> {
    let file = FileConfig::load(cmd.config.config.as_deref())?;
    let dataset = generate_synth(&file.synth, cmd.seed, &cmd.out)?;
    println!("dataset: {}", dataset.root().display());
    println!("samples: {}", dataset.len());
    println!("classes: {}", dataset.n_classes());
    println!("subjects: {}", dataset.subjects().len());
    Ok(())
}

fn run_train(cmd: TrainCmd) -> Result<(), CliError> {
    let file = FileConfig::load(cmd.config.config.as_deref())?;
    let dataset = Dataset::load(&cmd.data)?;
    let mut model_cfg = file.model;
    cmd.model.apply(&mut model_cfg);
    align_model_to_data(&mut model_cfg, &dataset, cmd.model.backbone)?;
    let mut train_cfg = file.train;
    cmd.train.apply(&mut train_cfg);
    train_cfg.seed = cmd.seed;
    validate_run(&model_cfg, &train_cfg)?;
    validate_fraction(cmd.test_fraction)?;

    let run_dir = make_run_dir(&cmd.out, Some(cmd.seed))?;
    write_run_config(
        &run_dir,
        "train",
        Some(cmd.seed),
        Some(&cmd.data),
        Some(&model_cfg),
        Some(&train_cfg),
    )?;
    let (train_indices, test_indices) = stratified_split(&dataset, cmd.test_fraction, cmd.seed)?;
    write_json(
        &run_dir.join("split.json"),
        &serde_json::json!({ "train": train_indices, "test": test_indices }),
    )?;

    let tape: Tape<f32> = Tape::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cmd.seed);
    let model = ArpgNet::new(model_cfg, &tape, &mut init_rng)?;
    train_cfg.log_dir = Some(run_dir.clone());
    let log = fit(&model, &dataset, &train_indices, &train_cfg)?;
    let metrics = evaluate(&model, &dataset, &test_indices)?;
    model.save(run_dir.join("model.ckpt"))?;
    write_json(&run_dir.join("metrics.json"), &metrics)?;
    fs::write(
        run_dir.join("confusion.csv"),
        confusion_csv(&metrics.confusion, dataset.classes()),
    )?;

    println!("run: {}", run_dir.display());
    if let Some(epoch) = log.epochs.last() {
        println!("final_train_accuracy: {}", epoch.train_accuracy);
    }
    println!("test_accuracy: {}", metrics.accuracy);
    println!("test_macro_f1: {}", metrics.macro_f1);
    println!("test_m_score: {}", metrics.m_score);
    Ok(())
}

fn run_eval(cmd: EvalCmd) -> Result<(), CliError> {
    let dataset = Dataset::load(&cmd.data)?;
    let tape: Tape<f32> = Tape::new();
    let model = ArpgNet::load(&cmd.checkpoint, &tape)?;
    if model.config().n_classes != dataset.n_classes() {
        return Err(config_error(&[format!(
            "the checkpoint has {} classes but the dataset has {}",
            model.config().n_classes,
            dataset.n_classes()
        )]));
    }
    let run_dir = make_run_dir(&cmd.out, None)?;
    write_run_config(
        &run_dir,
        "eval",
        None,
        Some(&cmd.data),
        Some(model.config()),
        None,
    )?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let metrics = evaluate(&model, &dataset, &indices)?;
    write_json(&run_dir.join("metrics.json"), &metrics)?;
    fs::write(
        run_dir.join("confusion.csv"),
        confusion_csv(&metrics.confusion, dataset.classes()),
    )?;
    println!("run: {}", run_dir.display());
    println!("accuracy: {}", metrics.accuracy);
    println!("macro_f1: {}", metrics.macro_f1);
    println!("m_score: {}", metrics.m_score);
    Ok(())
}

fn run_loso(cmd: LosoCmd) -> Result<(), CliError> {
    let file = FileConfig::load(cmd.config.config.as_deref())?;
    let dataset = Dataset::load(&cmd.data)?;
    let mut model_cfg = file.model;
    cmd.model.apply(&mut model_cfg);
    align_model_to_data(&mut model_cfg, &dataset, cmd.model.backbone)?;
    let mut train_cfg = file.train;
    cmd.train.apply(&mut train_cfg);
    train_cfg.seed = cmd.seed;
    validate_run(&model_cfg, &train_cfg)?;

    let run_dir = make_run_dir(&cmd.out, Some(cmd.seed))?;
    write_run_config(
        &run_dir,
        "loso",
        Some(cmd.seed),
        Some(&cmd.data),
        Some(&model_cfg),
        Some(&train_cfg),
    )?;
    train_cfg.log_dir = Some(run_dir.clone());
    let report = loso_run::<f32>(&dataset, &model_cfg, &train_cfg)?;
    fs::write(run_dir.join("loso.csv"), report.to_csv())?;
    write_json(&run_dir.join("loso.json"), &report)?;
    println!("run: {}", run_dir.display());
    println!("folds: {}", report.folds.len());
    println!(
        "accuracy: {} +- {}",
        report.mean_accuracy, report.std_accuracy
    );
    println!(
        "macro_f1: {} +- {}",
        report.mean_macro_f1, report.std_macro_f1
    );
    println!("m_score: {} +- {}", report.mean_m_score, report.std_m_score);
    Ok(())
}

fn run_ablate(cmd: AblateCmd) -> Result<(), CliError> {
    let file = FileConfig::load(cmd.config.config.as_deref())?;
    let dataset = Dataset::load(&cmd.data)?;
    let mut model_cfg = file.model;
    cmd.model.apply(&mut model_cfg);
    align_model_to_data(&mut model_cfg, &dataset, cmd.model.backbone)?;
    let mut train_cfg = file.train;
    cmd.train.apply(&mut train_cfg);
    train_cfg.seed = cmd.seed;
    validate_run(&model_cfg, &train_cfg)?;
    validate_fraction(cmd.test_fraction)?;

    let run_dir = make_run_dir(&cmd.out, Some(cmd.seed))?;
    write_run_config(
        &run_dir,
        "ablate",
        Some(cmd.seed),
        Some(&cmd.data),
        Some(&model_cfg),
        Some(&train_cfg),
    )?;
    let (train_indices, test_indices) = stratified_split(&dataset, cmd.test_fraction, cmd.seed)?;
    train_cfg.log_dir = Some(run_dir.clone());
    let report = ablation_run::<f32>(&dataset, &model_cfg, &train_cfg, &train_indices, &test_indices)?;
    fs::write(run_dir.join("ablation.csv"), report.to_csv())?;
    write_json(&run_dir.join("ablation.json"), &report)?;
    println!("run: {}", run_dir.display());
    for row in &report.rows {
        println!(
            "{}: accuracy {} macro_f1 {} m {}",
            row.variant, row.metrics.accuracy, row.metrics.macro_f1, row.metrics.m_score
        );
    }
    Ok(())
}

/// Builds the requested graph from the merged configuration.
fn inspect_graph_matrix(cmd: &InspectGraphCmd) -> Result<AdjacencyMatrix, CliError> {
    let file = FileConfig::load(cmd.config.config.as_deref())?;
    match cmd.kind {
        GraphKind::Relation => {
            let p = cmd.p.unwrap_or(file.model.p);
            let grid = GridSpec::new(p)?;
            Ok(build_relation_graph(&grid))
        }
        GraphKind::Fusion => {
            let t = cmd.t.unwrap_or(file.model.t);
            let trs = cmd.trs.unwrap_or(file.model.trs);
            Ok(build_fusion_graph(t, trs)?)
        }
    }
}

fn run_inspect_graph(cmd: InspectGraphCmd) -> Result<(), CliError> {
    let adj = inspect_graph_matrix(&cmd)?;
    if let Some(out) = &cmd.out {
        let run_dir = make_run_dir(out, None)?;
        fs::write(run_dir.join("adjacency.csv"), adj.to_csv())?;
        fs::write(run_dir.join("edges.csv"), adj.to_edge_list())?;
        let mut degrees = String::from("degree,nodes\n");
        for (degree, nodes) in adj.degree_histogram() {
            let _ = writeln!(degrees, "{degree},{nodes}");
        }
        fs::write(run_dir.join("degrees.csv"), degrees)?;
        eprintln!("run: {}", run_dir.display());
    }
    print!("{}", adj.to_edge_list());
    Ok(())
}

fn run_inspect_attention(cmd: InspectAttentionCmd) -> Result<(), CliError> {
    let dataset = Dataset::load(&cmd.data)?;
    let tape: Tape<f32> = Tape::new();
    let model = ArpgNet::load(&cmd.checkpoint, &tape)?;
    let run_dir = make_run_dir(&cmd.out, None)?;
    write_run_config(
        &run_dir,
        "inspect-attention",
        None,
        Some(&cmd.data),
        Some(model.config()),
        None,
    )?;
    let dump = dump_attention(&model, &dataset, cmd.sample)?;
    dump.write_to(&run_dir)?;
    println!("run: {}", run_dir.display());
    println!("fusion_records: {}", dump.fusion_records);
    println!("relation_records: {}", dump.relation_records);
    Ok(())
}

fn run_bench(cmd: BenchCmd) -> Result<(), CliError> {
    if cmd.repeats == 0 {
        return Err(config_error(&["repeats must be at least 1".to_string()]));
    }
    let tape: Tape<f32> = Tape::new();
    let model = match &cmd.checkpoint {
        Some(path) => ArpgNet::load(path, &tape)?,
        None => {
            let file = FileConfig::load(cmd.config.config.as_deref())?;
            let mut model_cfg = file.model;
            cmd.model.apply(&mut model_cfg);
            model_cfg.validate()?;
            let mut init_rng = ChaCha8Rng::seed_from_u64(cmd.seed);
            ArpgNet::new(model_cfg, &tape, &mut init_rng)?
        }
    };
    let report = bench_inference(&model, cmd.repeats, cmd.seed)?;
    let run_dir = make_run_dir(&cmd.out, Some(cmd.seed))?;
    write_run_config(
        &run_dir,
        "bench",
        Some(cmd.seed),
        None,
        Some(model.config()),
        None,
    )?;
    write_json(&run_dir.join("bench.json"), &report)?;
    println!("run: {}", run_dir.display());
    println!("mean_seconds: {}", report.mean_seconds);
    println!("n_params: {}", report.n_params);
    Ok(())
}

/// Renders a CSV body as a markdown table.
fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let columns = header.split(',').count();
    let mut table = format!("| {} |\n", header.split(',').collect::<Vec<_>>().join(" | "));
    let _ = writeln!(table, "|{}", " --- |".repeat(columns));
    for line in lines {
        let _ = writeln!(
            table,
            "| {} |",
            line.split(',').collect::<Vec<_>>().join(" | ")
        );
    }
    table
}

fn run_export_report(cmd: ExportReportCmd) -> Result<(), CliError> {
    if !cmd.run.is_dir() {
        return Err(config_error(&[format!(
            "{} is not a run directory",
            cmd.run.display()
        )]));
    }
    let mut report = String::from("# Run report\n");
    let _ = writeln!(report, "\nSource: `{}`\n", cmd.run.display());
    let mut artifacts = 0usize;

    let json_block = |report: &mut String, title: &str, text: &str| {
        let _ = writeln!(report, "## {title}\n\n```json\n{}\n```\n", text.trim_end());
    };
    for (file, title) in [
        ("run_config.json", "Configuration"),
        ("summary.json", "Training summary"),
        ("metrics.json", "Metrics"),
    ] {
        if let Ok(text) = fs::read_to_string(cmd.run.join(file)) {
            json_block(&mut report, title, &text);
            artifacts += 1;
        }
    }
    for (file, title) in [
        ("confusion.csv", "Confusion matrix"),
        ("loso.csv", "Cross-validation folds"),
        ("ablation.csv", "Variant ablation"),
    ] {
        if let Ok(text) = fs::read_to_string(cmd.run.join(file)) {
            let _ = writeln!(report, "## {title}\n\n{}", csv_to_markdown(&text));
            artifacts += 1;
        }
    }
    if let Ok(text) = fs::read_to_string(cmd.run.join("bench.json")) {
        json_block(&mut report, "Inference timing", &text);
        artifacts += 1;
    }
    for (file, title) in [
        ("fusion_attention.csv", "Fusion attention records"),
        ("relation_attention.csv", "Relation attention records"),
    ] {
        if let Ok(text) = fs::read_to_string(cmd.run.join(file)) {
            let records = text.lines().count().saturating_sub(1);
            let _ = writeln!(report, "## {title}\n\n{records} records in `{file}`.\n");
            artifacts += 1;
        }
    }
    if artifacts == 0 {
        return Err(config_error(&[format!(
            "{} holds no known artifacts",
            cmd.run.display()
        )]));
    }
    let path = cmd.run.join("report.md");
    fs::write(&path, &report)?;
    println!("report: {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthMode;
    use tempfile::TempDir;

    #[test]
    fn variant_flags_cover_every_variant_in_order() {
        let args = [
            VariantArg::Appearance,
            VariantArg::Relation,
            VariantArg::Concat,
            VariantArg::Fusion,
            VariantArg::FusionTrs,
        ];
        let mapped: Vec<Variant> = args.iter().map(|a| a.to_variant()).collect();
        assert_eq!(mapped, Variant::all());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nheads = 2\ntrs = 5\n\n[train]\nepochs = 3\n").unwrap();
        let file = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(file.model.heads, 2);
        assert_eq!(file.model.trs, 5);
        assert_eq!(file.train.epochs, 3);
        assert_eq!(file.train.batch_size, TrainConfig::default().batch_size);

        let mut model_cfg = file.model;
        let model_args = ModelArgs {
            heads: Some(3),
            variant: Some(VariantArg::Concat),
            ..ModelArgs::default()
        };
        model_args.apply(&mut model_cfg);
        assert_eq!(model_cfg.heads, 3);
        assert_eq!(model_cfg.trs, 5);
        assert_eq!(model_cfg.variant, Variant::ConcatBaseline);

        let mut train_cfg = file.train;
        TrainArgs {
            epochs: None,
            batch_size: Some(2),
        }
        .apply(&mut train_cfg);
        assert_eq!(train_cfg.epochs, 3);
        assert_eq!(train_cfg.batch_size, 2);
    }

    #[test]
    fn a_malformed_config_file_reports_the_path() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[model\n").unwrap();
        let err = FileConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("bad.toml"));
    }

    fn tiny_feature_dataset(dir: &Path) -> Dataset {
        let cfg = SynthTaskConfig {
            mode: SynthMode::Features {
                c_prime: 8,
                relation_map_channels: Some(2),
            },
            n_classes: 2,
            samples_per_class: 2,
            n_subjects: 2,
            frames_per_sample: 8,
            evidence_window: 1,
            noise_sigma: 0.1,
            appearance_hint: 0.5,
            pattern_strength: 2.0,
            decoys_per_sample: 1,
            decoy_margin: 1,
        };
        generate_synth(&cfg, 7, dir).unwrap()
    }

    #[test]
    fn dataset_facts_override_the_configured_shapes() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_feature_dataset(dir.path());
        let mut cfg = ArpgNetConfig::default();
        align_model_to_data(&mut cfg, &dataset, None).unwrap();
        assert_eq!(cfg.n_classes, 2);
        assert_eq!(cfg.c_prime, 8);
        assert_eq!(
            cfg.backbone,
            Backbone::ExternalFeatures {
                relation_map_channels: Some(2)
            }
        );

        let err = align_model_to_data(&mut cfg, &dataset, Some(BackboneArg::Toy)).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("--backbone toy"));
        assert!(align_model_to_data(&mut cfg, &dataset, Some(BackboneArg::Features)).is_ok());
    }

    #[test]
    fn validation_enumerates_every_violation_at_once() {
        let model = ArpgNetConfig {
            heads: 0,
            dropout: 1.5,
            ..ArpgNetConfig::default()
        };
        let train = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let err = validate_run(&model, &train).unwrap_err();
        assert_eq!(err.category(), "config");
        let message = err.to_string();
        for needle in ["heads", "dropout", "epochs"] {
            assert!(message.contains(needle), "{message} misses {needle}");
        }
        assert_eq!(message.lines().count(), 1);
    }

    #[test]
    fn run_directories_embed_the_seed_and_never_collide() {
        let dir = TempDir::new().unwrap();
        let first = make_run_dir(dir.path(), Some(9)).unwrap();
        let second = make_run_dir(dir.path(), Some(9)).unwrap();
        assert_ne!(first, second);
        assert!(first.file_name().unwrap().to_str().unwrap().ends_with("-seed9"));
        assert!(first.is_dir());
        assert!(second.is_dir());
    }

    #[test]
    fn the_relation_edge_list_holds_the_documented_mirror_pair() {
        let cmd = InspectGraphCmd {
            config: ConfigArgs::default(),
            kind: GraphKind::Relation,
            p: Some(6),
            t: None,
            trs: None,
            out: None,
        };
        let adj = inspect_graph_matrix(&cmd).unwrap();
        assert_eq!(adj.n_nodes(), 36);
        let edges = adj.to_edge_list();
        assert!(edges.lines().any(|l| l == "7,10"));
    }

    #[test]
    fn csv_tables_render_as_markdown() {
        let table = csv_to_markdown("a,b\n1,2\n3,4\n");
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "| a | b |");
        assert_eq!(lines[1], "| --- | --- |");
        assert_eq!(lines[2], "| 1 | 2 |");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn export_report_collects_known_artifacts() {
        let dir = TempDir::new().unwrap();
        fs::write(
            dir.path().join("ablation.csv"),
            "variant,accuracy,macro_f1,m_score\nfusion_trs,1,1,1\n",
        )
        .unwrap();
        fs::write(dir.path().join("bench.json"), "{\"mean_seconds\": 0.5}\n").unwrap();
        run_export_report(ExportReportCmd {
            run: dir.path().to_path_buf(),
        })
        .unwrap();
        let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(report.contains("# Run report"));
        assert!(report.contains("| variant | accuracy | macro_f1 | m_score |"));
        assert!(report.contains("Inference timing"));

        let empty = TempDir::new().unwrap();
        let err = run_export_report(ExportReportCmd {
            run: empty.path().to_path_buf(),
        })
        .unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
