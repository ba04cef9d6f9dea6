//! Command-line front end: `train`, `eval`, `sweep`, `synth` and `export`.
//!
//! Settings are resolved as command-line flags, then the TOML run file
//! (`--config`), then built-in defaults. The output directory falls back to
//! `$SLATE_EMBED_OUTPUT_DIR` and finally `slate-embed-out`. Relative paths
//! inside a run file are resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, Dataset, DatasetSchema, DatasetSplit, PlantedConfig, Records, Split, SyntheticKind, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_features, metrics_for, Metric, MetricReport};
use crate::grad::Batch;
use crate::models::{ModelParams, ModelVariant};
use crate::optim::{sweep, train, train_warm, SweepGrid, TrainConfig, TrainOutcome};

pub const OUTPUT_DIR_ENV: &str = "SLATE_EMBED_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "slate-embed-out";

#[derive(Debug, Parser)]
#[command(name = "slate-embed", version, about = "Hierarchical slate embeddings")]
pub struct Cli {
    /// TOML run file with [data], [train], [grid] and [planted] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $SLATE_EMBED_OUTPUT_DIR or slate-embed-out].
    #[arg(long, short = 'o', global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.json, history.csv and report.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data file and write eval.json.
    Eval(EvalArgs),
    /// Grid search; writes sweep.csv, dim_vs_metric.csv and best_checkpoint.json.
    Sweep(SweepArgs),
    /// Generate a planted synthetic dataset and its ground-truth checkpoint.
    Synth(SynthArgs),
    /// Export per-item click-model features to CSV.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Dataset schema (TOML).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// regression, semb1, semb2 or fm.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_linear: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Validation metric used for model selection.
    #[arg(long)]
    pub selection: Option<Metric>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Start from this checkpoint instead of a random initialisation. A
    /// SEMB-1 checkpoint may seed a SEMB-2 run (with w1 = w2 = 0).
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Records to evaluate.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema of `--data`; defaults to the schema stored in the checkpoint.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated metric names; defaults to all metrics of the model.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Embedding dimensions to try (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Regularisation strengths to try (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_linears: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// regression or click.
    #[arg(long)]
    pub kind: SyntheticKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub items_per_slate: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Scale of the planted vectors [default: the initialisation scale].
    #[arg(long)]
    pub planted_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// File name inside the output directory.
    #[arg(long, default_value = "features.csv")]
    pub out: PathBuf,
}

/// Dataset locations in a run file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Contents of a `--config` run file. Every table is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub output_dir: Option<PathBuf>,
    pub data: DataPaths,
    /// `TrainConfig` fields; `variant` is required here or on the command line.
    pub train: toml::Table,
    pub grid: SweepGrid,
    pub planted: PlantedConfig,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file: RunConfigFile = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        resolve(&mut file.output_dir);
        resolve(&mut file.data.schema);
        resolve(&mut file.data.train);
        resolve(&mut file.data.validation);
        resolve(&mut file.data.test);
        Ok(file)
    }

    /// Applies flag overrides on top of the `[train]` table and validates.
    pub fn train_config(&self, flags: &TrainOverrides) -> Result<TrainConfig> {
        let mut table = self.train.clone();
        let mut set = |key: &str, value: Option<toml::Value>| {
            if let Some(v) = value {
                table.insert(key.to_string(), v);
            }
        };
        let int = |v: Option<usize>| v.map(|v| toml::Value::Integer(v as i64));
        set("variant", flags.variant.map(|v| v.name().into()));
        set("dim", int(flags.dim));
        set("lambda", flags.lambda.map(toml::Value::Float));
        set("lambda_linear", flags.lambda_linear.map(toml::Value::Float));
        set("learning_rate", flags.learning_rate.map(toml::Value::Float));
        set("epochs", int(flags.epochs));
        set("batch_size", int(flags.batch_size));
        set("seed", flags.seed.map(|v| toml::Value::Integer(v as i64)));
        set("patience", int(flags.patience));
        set("selection", flags.selection.map(|m| m.name().into()));
        if !table.contains_key("variant") {
            return Err(Error::Config(format!(
                "no model variant given (use --variant or [train] variant; one of {})",
                ModelVariant::ALL.map(ModelVariant::name).join(", ")
            )));
        }
        let config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

struct Context {
    file: RunConfigFile,
    output_dir: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => RunConfigFile::load(path)?,
            None => RunConfigFile::default(),
        };
        let output_dir = cli
            .output_dir
            .clone()
            .or_else(|| file.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        Ok(Self { file, output_dir })
    }

    fn output(&self, name: impl AsRef<Path>) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        Ok(self.output_dir.join(name))
    }

    fn data_paths(&self, flags: &DataArgs) -> DataPaths {
        let file = &self.file.data;
        DataPaths {
            schema: flags.schema.clone().or_else(|| file.schema.clone()),
            train: flags.train.clone().or_else(|| file.train.clone()),
            validation: flags.validation.clone().or_else(|| file.validation.clone()),
            test: flags.test.clone().or_else(|| file.test.clone()),
        }
    }

    /// Loads the train / validation (/ test) splits named by flags or the run file.
    fn dataset(&self, flags: &DataArgs) -> Result<Dataset> {
        let paths = self.data_paths(flags);
        let required = |p: &Option<PathBuf>, what: &str| {
            let p = p
                .clone()
                .ok_or_else(|| Error::Config(format!("missing {what} path (--{what} or [data] {what})")))?;
            if !p.exists() {
                return Err(Error::Config(format!("{what} file not found: {}", p.display())));
            }
            Ok(p)
        };
        let schema_path = required(&paths.schema, "schema")?;
        let train_path = required(&paths.train, "train")?;
        let validation_path = required(&paths.validation, "validation")?;
        let test_path = paths.test.as_ref().map(|_| required(&paths.test, "test")).transpose()?;

        let schema = DatasetSchema::load(&schema_path)?;
        let load = |path: &Path| -> Result<Records> {
            let records = Records::load(path, &schema)?;
            if records.is_empty() {
                return Err(Error::Config(format!("{} contains no records", path.display())));
            }
            Ok(records)
        };
        let train = load(&train_path)?;
        let validation = load(&validation_path)?;
        let test = test_path.as_deref().map(load).transpose()?;
        Ok(match (train, validation, test) {
            (Records::Ratings(train), Records::Ratings(validation), test) => Dataset::Ratings(DatasetSplit {
                schema,
                train,
                validation,
                test: match test {
                    Some(Records::Ratings(t)) => t,
                    _ => Vec::new(),
                },
            }),
            (Records::Sessions(train), Records::Sessions(validation), test) => Dataset::Sessions(DatasetSplit {
                schema,
                train,
                validation,
                test: match test {
                    Some(Records::Sessions(t)) => t,
                    _ => Vec::new(),
                },
            }),
            _ => unreachable!("all splits are loaded with one schema"),
        })
    }
}

/// Loads a checkpoint and the record file it should be applied to.
fn checkpoint_and_records(checkpoint: &Path, data: &Path, schema: Option<&Path>) -> Result<(Checkpoint, Records)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let schema = match schema {
        Some(path) => {
            let schema = DatasetSchema::load(path)?;
            ckpt.ensure_compatible(&schema)?;
            schema
        }
        None => ckpt.dataset.clone(),
    };
    let records = Records::load(data, &schema)?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} contains no records", data.display())));
    }
    Ok((ckpt, records))
}

fn records_batch(records: &Records) -> Batch<'_> {
    match records {
        Records::Ratings(r) => Batch::Ratings(r),
        Records::Sessions(r) => Batch::Sessions(r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub validation: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let header = ["epoch", "train_objective", "metric", "value", "std_error", "count"].map(String::from);
    let rows: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|h| {
            vec![
                h.epoch.to_string(),
                h.train_objective.to_string(),
                h.validation.metric.to_string(),
                h.validation.value.to_string(),
                h.validation.std_error.to_string(),
                h.validation.count.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Adapts a warm-start checkpoint to the requested variant.
fn warm_start(ckpt: Checkpoint, config: &TrainConfig, dataset: &Dataset) -> Result<ModelParams> {
    ckpt.ensure_compatible(dataset.schema())?;
    let model = match (ckpt.model, config.variant) {
        (ModelParams::Click(m), v @ (ModelVariant::Semb1 | ModelVariant::Semb2)) => {
            let variant = if v == ModelVariant::Semb1 {
                crate::models::ClickVariant::Semb1
            } else {
                crate::models::ClickVariant::Semb2
            };
            ModelParams::Click(m.with_variant(variant))
        }
        (model, v) if model.variant() == v => model,
        (model, v) => {
            return Err(Error::Config(format!(
                "cannot start a {v} run from a {} checkpoint",
                model.variant()
            )))
        }
    };
    if model.dim() != config.dim {
        return Err(Error::Config(format!(
            "checkpoint dimension {} differs from configured dim {}",
            model.dim(),
            config.dim
        )));
    }
    Ok(model)
}

fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let config = ctx.file.train_config(&args.overrides)?;
    let dataset = ctx.dataset(&args.data)?;
    info!("training {} (config {})", config.variant, config.fingerprint());
    let outcome = match &args.init {
        Some(path) => {
            let model = warm_start(Checkpoint::load(path)?, &config, &dataset)?;
            train_warm(&config, &dataset, model)?
        }
        None => train(&config, &dataset)?,
    };
    let test = match dataset.batch(Split::Test) {
        b if b.is_empty() => None,
        b => Some(evaluate(&outcome.model, b, config.selection())?.with_fingerprint(config.fingerprint())),
    };
    Checkpoint::new(outcome.model.clone(), dataset.schema().clone(), Some(config.clone()))
        .save(ctx.output("checkpoint.json")?)?;
    write_history(&ctx.output("history.csv")?, &outcome)?;
    let report = RunReport {
        fingerprint: config.fingerprint(),
        config,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len() - 1,
        stopped_early: outcome.stopped_early,
        validation: outcome.best.clone(),
        test,
    };
    write_json(&ctx.output("report.json")?, &report)?;
    println!("best epoch {}: validation {}", report.best_epoch, report.validation);
    if let Some(test) = &report.test {
        println!("test {test}");
    }
    Ok(())
}

fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let metrics: Vec<Metric> = args.metrics.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let (ckpt, records) = checkpoint_and_records(&args.checkpoint, &args.data, args.schema.as_deref())?;
    let metrics = if metrics.is_empty() {
        metrics_for(&ckpt.model).to_vec()
    } else {
        metrics
    };
    let reports: Vec<MetricReport> = metrics
        .iter()
        .map(|&m| Ok(evaluate(&ckpt.model, records_batch(&records), m)?.with_fingerprint(ckpt.fingerprint.clone())))
        .collect::<Result<_>>()?;
    for r in &reports {
        println!("{r}");
    }
    write_json(&ctx.output("eval.json")?, &reports)
}

fn pick<T: Clone>(flag: &[T], file: &mut Vec<T>) {
    if !flag.is_empty() {
        *file = flag.to_vec();
    }
}

fn cmd_sweep(ctx: &Context, args: &SweepArgs) -> Result<()> {
    let base = ctx.file.train_config(&args.overrides)?;
    let mut grid = ctx.file.grid.clone();
    pick(&args.dims, &mut grid.dim);
    pick(&args.lambdas, &mut grid.lambda);
    pick(&args.lambda_linears, &mut grid.lambda_linear);
    pick(&args.learning_rates, &mut grid.learning_rate);
    if args.overrides.selection.is_some() {
        grid.selection = args.overrides.selection;
    }
    let dataset = ctx.dataset(&args.data)?;
    let outcome = sweep(&base, &grid, &dataset)?;
    for row in &outcome.failed {
        if let Err(e) = &row.result {
            warn!("grid point {} rejected: {e}", row.config.fingerprint());
        }
    }
    let Some(best) = &outcome.best else {
        return Err(Error::Config("every grid point failed".into()));
    };

    let mut header: Vec<String> = outcome.axes.iter().map(|a| a.name().to_string()).collect();
    header.extend([outcome.metric.name().to_string(), "std_error".to_string()]);
    let rows: Vec<Vec<String>> = outcome
        .ranked
        .iter()
        .filter_map(|row| {
            let report = row.result.as_ref().ok()?;
            let mut cells: Vec<String> = outcome.axes.iter().map(|a| a.value(&row.config)).collect();
            cells.extend([report.value.to_string(), report.std_error.to_string()]);
            Some(cells)
        })
        .collect();
    write_csv(&ctx.output("sweep.csv")?, &header, &rows)?;

    let header = ["dim".to_string(), outcome.metric.name().to_string(), "std_error".to_string()];
    let rows: Vec<Vec<String>> = outcome
        .dimension_table()
        .into_iter()
        .map(|(dim, r)| vec![dim.to_string(), r.value.to_string(), r.std_error.to_string()])
        .collect();
    write_csv(&ctx.output("dim_vs_metric.csv")?, &header, &rows)?;

    Checkpoint::new(best.model.clone(), dataset.schema().clone(), Some(best.config.clone()))
        .save(ctx.output("best_checkpoint.json")?)?;
    println!(
        "{} of {} grid points succeeded; best {}",
        outcome.ranked.len(),
        outcome.ranked.len() + outcome.failed.len(),
        best.best
    );
    Ok(())
}

fn cmd_synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let mut planted = ctx.file.planted.clone();
    if let Some(v) = args.records {
        planted.records = v;
    }
    if let Some(v) = args.dim {
        planted.dim = v;
    }
    if let Some(v) = args.items_per_slate {
        planted.items_per_slate = v;
    }
    if let Some(v) = args.noise_std {
        planted.noise_std = v;
    }
    if args.planted_std.is_some() {
        planted.planted_std = args.planted_std;
    }
    let (dataset, model) = generate_synthetic(args.kind, &planted, args.seed)?;
    let schema = dataset.schema().clone();
    let ext = match schema.task {
        Task::Regression => "csv",
        Task::Click => "jsonl",
    };
    for split in Split::ALL {
        let records = match dataset.batch(split) {
            Batch::Ratings(r) => Records::Ratings(r.to_vec()),
            Batch::Sessions(s) => Records::Sessions(s.to_vec()),
        };
        records.save(ctx.output(format!("{}.{ext}", split.name()))?, &schema)?;
    }
    schema.save(ctx.output("schema.toml")?)?;
    Checkpoint::new(model, schema, None).save(ctx.output("planted.json")?)?;
    let [a, b, c] = dataset.sizes();
    println!("wrote {a}/{b}/{c} records to {}", ctx.output_dir.display());
    Ok(())
}

fn cmd_export(ctx: &Context, args: &ExportArgs) -> Result<()> {
    let (ckpt, records) = checkpoint_and_records(&args.checkpoint, &args.data, args.schema.as_deref())?;
    let ModelParams::Click(model) = &ckpt.model else {
        return Err(Error::Config(format!(
            "feature export needs a SEMB-1 or SEMB-2 checkpoint, got {}",
            ckpt.variant
        )));
    };
    let Records::Sessions(sessions) = &records else {
        unreachable!("click checkpoints carry a click schema")
    };
    let path = ctx.output(&args.out)?;
    let rows = export_features(model, sessions, &path)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Export(a) => cmd_export(&ctx, a),
    }
}

/// Parses `args`, runs the command and maps errors to a one-line diagnosis.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
