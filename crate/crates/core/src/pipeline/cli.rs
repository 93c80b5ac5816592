//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{run_experiment_preset, sweep, train, DataSource, SweepSpec, TrainConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, DataFormat, Dataset, Split, SynthConfig};
use crate::eval::{
    evaluate_closed, evaluate_unseen_nn, one_shot_episodes, render_table, Embedder, EvalReport, Metric, RawFeatures,
    DEFAULT_EPISODES,
};
use crate::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use crate::network::{load_checkpoint, save_checkpoint, EncoderParams};

type BoxError = Box<dyn std::error::Error>;

#[derive(Debug, Parser)]
#[command(name = "hiercon", version, about = "Hierarchical contrastive embeddings with kNN evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Synth(SynthArgs),
    /// Train a model from a preset or config file.
    Train(TrainArgs),
    /// Closed-set kNN evaluation.
    Eval(EvalArgs),
    /// Unseen-NN and 1-shot evaluation on the unseen split.
    EvalUnseen(UnseenArgs),
    /// Grid search over config fields.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render report JSON files as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Built-in generator settings.
    #[arg(long, value_parser = ["separable"], conflicts_with = "config")]
    fixture: Option<String>,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelConfigArgs {
    /// SC, HC, HCλ (HC-lambda), HCE or HCEλ (HCE-lambda).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; overrides the config's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Field override, `name=value`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelConfigArgs,
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "history.json")]
    history: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, required_unless_present = "raw")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the raw input features instead of a trained model.
    #[arg(long, conflicts_with = "checkpoint")]
    raw: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UnseenArgs {
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_nn: Option<PathBuf>,
    #[arg(long)]
    out_one_shot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelConfigArgs,
    /// TOML grid: `[[param]]` tables with `name` and `values`, optional `cap`.
    #[arg(long)]
    grid: PathBuf,
    /// Write the leaderboard JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the winning config as TOML here.
    #[arg(long)]
    best_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON files, one table column each.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Column names, comma separated; defaults to file stems.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command) -> Result<i32, BoxError> {
    match command {
        Command::Synth(args) => synth_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::EvalUnseen(args) => unseen_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), BoxError> {
    fs::write(path, contents).map_err(|e| format!("writing {}: {e}", path.display()).into())
}

fn synth_cmd(args: SynthArgs) -> Result<i32, BoxError> {
    let mut cfg = match &args.config {
        Some(path) => toml::from_str::<SynthConfig>(&fs::read_to_string(path)?)?,
        None => SynthConfig::separable_fixture(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &args.out)?;
    println!("wrote {} records to {}", ds.len(), args.out.display());
    Ok(0)
}

fn read_data(path: &Path) -> Result<Dataset, BoxError> {
    load_dataset(path, DataFormat::from_path(path)).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn parse_set(s: &str) -> Result<(String, String), BoxError> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("--set expects NAME=VALUE, got `{s}`"))?;
    Ok((name.trim().to_string(), value.trim().to_string()))
}

/// Resolves the config (preset or file, then flags) and loads its dataset.
/// The model's input dimension follows the data.
fn resolve(args: &ModelConfigArgs) -> Result<(TrainConfig, Dataset), BoxError> {
    let overrides = args.sets.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), _) => run_experiment_preset(name, &[])?,
        (None, Some(path)) => TrainConfig::from_toml(&fs::read_to_string(path)?)?,
        (None, None) => return Err("one of --preset or --config is required".into()),
    };
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &args.data {
        cfg.data = Some(DataSource::Path(path.clone()));
    }
    let ds = match &cfg.data {
        Some(DataSource::Path(path)) => read_data(path)?,
        Some(DataSource::Synthetic(synth)) => generate_synthetic(synth)?,
        None => return Err("no dataset: pass --data or set `data` in the config".into()),
    };
    cfg.arch.input_dim = ds.dim();
    for (name, value) in &overrides {
        cfg.set(name, value)?;
    }
    Ok((cfg, ds))
}

fn train_cmd(args: TrainArgs) -> Result<i32, BoxError> {
    let (cfg, ds) = resolve(&args.model)?;
    let outcome = train(&cfg, &ds)?;
    save_checkpoint(&outcome.params, &args.checkpoint)?;
    write_file(&args.history, &outcome.history.to_json())?;
    let best = outcome.history.best();
    println!(
        "best epoch {} of {}: val balanced accuracy taxon {:.4} species {:.4} id {:.4}",
        outcome.history.best_epoch,
        cfg.epochs,
        best.val_balanced_accuracy.taxon,
        best.val_balanced_accuracy.species,
        best.val_balanced_accuracy.id
    );
    println!("checkpoint: {}", args.checkpoint.display());
    println!("history: {}", args.history.display());
    Ok(0)
}

fn load_model(args: &EmbedArgs) -> Result<(Box<dyn Embedder>, Dataset, String), BoxError> {
    let ds = read_data(&args.data)?;
    let (model, name): (Box<dyn Embedder>, String) = match &args.checkpoint {
        Some(path) if !args.raw => {
            let (params, _): (EncoderParams, _) =
                load_checkpoint(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (Box::new(params), stem)
        }
        _ => (Box::new(RawFeatures), "raw".into()),
    };
    Ok((model, ds, name))
}

fn eval_cmd(args: EvalArgs) -> Result<i32, BoxError> {
    let (model, ds, name) = load_model(&args.embed)?;
    let report = evaluate_closed(model.as_ref(), &ds, args.split, args.embed.k, args.embed.metric)?;
    if let Some(out) = &args.out {
        write_file(out, &report.to_json())?;
    }
    print!("{}", render_table(&[(name, report)]));
    Ok(0)
}

fn unseen_cmd(args: UnseenArgs) -> Result<i32, BoxError> {
    let (model, ds, name) = load_model(&args.embed)?;
    let (k, metric) = (args.embed.k, args.embed.metric);
    let nn = evaluate_unseen_nn(model.as_ref(), &ds, k, metric)?;
    let one_shot = one_shot_episodes(model.as_ref(), &ds, args.episodes, k, metric, args.seed)?;
    if let Some(out) = &args.out_nn {
        write_file(out, &nn.to_json())?;
    }
    if let Some(out) = &args.out_one_shot {
        write_file(out, &one_shot.to_json())?;
    }
    print!("{}", render_table(&[(format!("{name} NN"), nn), (format!("{name} 1-shot"), one_shot)]));
    Ok(0)
}

fn sweep_cmd(args: SweepArgs) -> Result<i32, BoxError> {
    let (base, ds) = resolve(&args.model)?;
    let spec = SweepSpec::from_toml(&fs::read_to_string(&args.grid)?)?;
    let outcome = sweep(&spec, &base, &ds)?;
    for (rank, row) in outcome.leaderboard.iter().enumerate() {
        let assignment: Vec<String> = row.assignments.iter().map(|(n, v)| format!("{n}={v}")).collect();
        println!(
            "{:>3}  id {:.4}  species {:.4}  taxon {:.4}  {}",
            rank + 1,
            row.val_id_accuracy,
            row.val_balanced_accuracy.species,
            row.val_balanced_accuracy.taxon,
            assignment.join(" ")
        );
    }
    if let Some(out) = &args.out {
        let json = serde_json::json!({
            "format_version": super::HISTORY_FORMAT_VERSION,
            "leaderboard": outcome.leaderboard,
        });
        write_file(out, &serde_json::to_string_pretty(&json)?)?;
    }
    if let Some(out) = &args.best_config {
        write_file(out, &outcome.best.to_toml())?;
    }
    Ok(0)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<i32, BoxError> {
    let entries = run_suite(args.seed, args.tolerance)?;
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:<22} max_rel_err {:.3e}  checked {:>4}  skipped {:>3}  clamped {:>2}  {}",
            e.name,
            e.report.max_relative_error,
            e.report.checked,
            e.report.skipped,
            e.clamped_pairs,
            if e.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!e.passed);
    }
    Ok(if failed == 0 { 0 } else { 2 })
}

fn report_cmd(args: ReportArgs) -> Result<i32, BoxError> {
    if !args.names.is_empty() && args.names.len() != args.files.len() {
        return Err(format!("{} names for {} files", args.names.len(), args.files.len()).into());
    }
    let mut columns = Vec::with_capacity(args.files.len());
    for (i, path) in args.files.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))?;
        let name = match args.names.get(i) {
            Some(n) => n.clone(),
            None => path.file_stem().map_or("?".into(), |s| s.to_string_lossy().into_owned()),
        };
        columns.push((name, report));
    }
    print!("{}", render_table(&columns));
    Ok(0)
}
