//! The `edgeopt` command line: train, prune, quantize, export and benchmark
//! models, and render the resulting reports.
//!
//! Status lines (including the seed in use) go to stderr; tables go to
//! stdout unless `--out` names a file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgeopt::bench::{compare, run_benchmark, BenchConfig, BenchReport, FormatTag};
use edgeopt::compress::{
    calibrate_activations, prune_magnitude, quantize_weights, sparsity_sweep, LayerMask, PruneMask, PruneScope,
    DEFAULT_SPARSITY_GRID,
};
use edgeopt::data::{load_folder, load_idx_dir, save_folder, split, synth_dataset, LabeledDataset, SynthSpec};
use edgeopt::lite::{export_lite, import_lite, LiteModel};
use edgeopt::nn::{canonical_cnn, Backend, ExecutionPlan, Model};
use edgeopt::report::{emit_comparison, emit_report, emit_sweep, OutputFormat};
use edgeopt::train::{
    evaluate, evaluate_with, finetune_fakequant_masked, finetune_masked, train, Optimizer, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "edgeopt",
    version,
    about = "Train, compress and benchmark small CNNs for edge inference"
)]
#[command(arg_required_else_help = true, propagate_version = true)]
pub struct Cli {
    /// Seed for initialization, shuffling and the train/validation split.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the default CNN and write it as a float .plite model.
    Train(TrainArgs),
    /// Prune a model at every sparsity of a grid and tabulate validation accuracy.
    Sweep(SweepArgs),
    /// Magnitude-prune a model and fine-tune it with the mask held.
    Prune(PruneArgs),
    /// Convert a float model to int8 with calibrated activation ranges.
    Quantize(QuantizeArgs),
    /// Re-encode a model file, or write a dataset split as a PGM folder.
    Export(ExportArgs),
    /// Time single-image inference over a PGM folder.
    Bench(BenchArgs),
    /// Tabulate saved benchmark reports against the first one.
    Compare(TablesArgs),
    /// Render saved benchmark reports as one column each.
    Report(TablesArgs),
}

/// Where images come from: an IDX directory, a folder of per-class PGM
/// directories, or `synth:CLASSES,PER_CLASS,SIZE`.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "SOURCE")]
    pub data: String,

    /// Fraction of every class used for training; the rest validates.
    #[arg(long, default_value_t = 0.7, value_parser = fraction)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = 32, value_parser = count::<1>)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01, value_parser = learning_rate)]
    pub lr: f64,
    /// Momentum coefficient; 0 gives plain SGD.
    #[arg(long, default_value_t = 0.9, value_parser = momentum)]
    pub momentum: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5, value_parser = count::<1>)]
    pub epochs: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Model name stored in the file; defaults to the output file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the validation split here as a PGM folder, ready for `bench`.
    #[arg(long, value_name = "DIR")]
    pub val_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated, strictly increasing sparsities.
    #[arg(long, value_delimiter = ',', value_parser = sparsity)]
    pub grid: Option<Vec<f64>>,
    /// Fine-tuning epochs per grid point.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value = "per-layer")]
    pub scope: PruneScope,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value = "csv")]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.7, value_parser = sparsity)]
    pub sparsity: f64,
    /// Fine-tuning epochs after pruning; 0 skips fine-tuning.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value = "per-layer")]
    pub scope: PruneScope,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training images used to calibrate activation ranges.
    #[arg(long, default_value_t = 100, value_parser = count::<1>)]
    pub calib: usize,
    /// Fake-quantized fine-tuning epochs before conversion; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub epochs: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["model", "data"]))]
pub struct ExportArgs {
    /// Model to re-encode into `--out`.
    #[arg(long, requires = "out")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset to write as a PGM folder into `--pgm-out`.
    #[arg(long, requires = "pgm_out")]
    pub data: Option<String>,
    #[arg(long, default_value_t = 0.7, value_parser = fraction)]
    pub train_fraction: f64,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
    pub split: String,
    #[arg(long, value_name = "DIR")]
    pub pgm_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PGM folder with one sub-directory per class.
    #[arg(long)]
    pub data: PathBuf,
    /// Images timed, the cold first one included.
    #[arg(long, default_value_t = 100, value_parser = count::<2>)]
    pub n: usize,
    #[arg(long, default_value = "accelerated")]
    pub backend: Backend,
    #[arg(long, default_value = "md")]
    pub format: OutputFormat,
    /// Overrides the tag inferred from the model file.
    #[arg(long)]
    pub format_tag: Option<FormatTag>,
    /// Overrides the model id (the file stem by default).
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also save the full report as JSON, for `compare` and `report`.
    #[arg(long, value_name = "JSON")]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    /// Saved JSON reports; for `compare` the first is the baseline.
    #[arg(long, required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "md")]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn count<const MIN: usize>(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= MIN {
        Ok(v)
    } else {
        Err(format!("{v} is less than {MIN}"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not strictly between 0 and 1"))
    }
}

fn sparsity(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("sparsity {v} outside [0, 1)"))
    }
}

fn learning_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("learning rate {v} must be finite and non-negative"))
    }
}

fn momentum(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("momentum {v} outside [0, 1)"))
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    eprintln!("seed: {seed}");
    match &cli.command {
        Command::Train(a) => cmd_train(a, seed),
        Command::Sweep(a) => cmd_sweep(a, seed),
        Command::Prune(a) => cmd_prune(a, seed),
        Command::Quantize(a) => cmd_quantize(a, seed),
        Command::Export(a) => cmd_export(a, seed),
        Command::Bench(a) => cmd_bench(a),
        Command::Compare(a) => {
            let table = compare(&load_reports(&a.reports)?)?;
            write_output(a.out.as_deref(), &emit_comparison(&table, a.format)?)
        }
        Command::Report(a) => write_output(a.out.as_deref(), &emit_report(&load_reports(&a.reports)?, a.format)?),
    }
}

/// Loads a dataset from an IDX directory, a PGM folder or a `synth:` spec.
pub fn load_source(source: &str, seed: u64) -> Result<LabeledDataset> {
    if let Some(spec) = source.strip_prefix("synth:") {
        let parts: Vec<usize> = spec
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .with_context(|| format!("`{source}` is not synth:CLASSES,PER_CLASS,SIZE"))?;
        let [classes, per_class, size] = parts[..] else {
            bail!("`{source}` is not synth:CLASSES,PER_CLASS,SIZE");
        };
        return Ok(synth_dataset(SynthSpec::new(classes, per_class, size), seed)?);
    }
    let path = Path::new(source);
    if !path.is_dir() {
        bail!("data source `{source}` is not a directory");
    }
    let has_idx = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().contains("-idx3-ubyte"));
    let ds = if has_idx {
        load_idx_dir(path)?
    } else {
        load_folder(path)?
    };
    Ok(ds)
}

fn load_split(args: &DataArgs, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = load_source(&args.data, seed)?;
    let (train_set, val) = split(&ds, args.train_fraction, seed)?;
    eprintln!(
        "data: {} images, {} train / {} validation",
        ds.len(),
        train_set.len(),
        val.len()
    );
    Ok((train_set, val))
}

fn train_config(fit: &FitArgs, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: fit.batch_size,
        learning_rate: fit.lr,
        seed,
        optimizer: if fit.momentum > 0.0 {
            Optimizer::SgdMomentum(fit.momentum)
        } else {
            Optimizer::Sgd
        },
    }
}

fn load_float(path: &Path) -> Result<Model<f32>> {
    match import_lite(path).with_context(|| format!("reading {}", path.display()))? {
        LiteModel::Float(m) => Ok(m),
        LiteModel::Quantized(_) => bail!("{} is quantized; this command needs a float model", path.display()),
    }
}

fn accuracy(model: &Model<f32>, data: &LabeledDataset) -> Result<f64> {
    let plan = ExecutionPlan::uniform(model.layers(), Backend::Accelerated);
    Ok(evaluate(model, data, &plan)?.accuracy)
}

fn check_classes(model: &Model<f32>, data: &LabeledDataset) -> Result<()> {
    if model.class_names() != data.class_names.as_slice() {
        bail!(
            "model classes {:?} do not match data classes {:?}",
            model.class_names(),
            data.class_names
        );
    }
    Ok(())
}

fn save(model: impl for<'a> FnOnce(&'a Path) -> edgeopt::Result<u64>, out: &Path) -> Result<()> {
    let bytes = model(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({bytes} bytes)", out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (train_set, val) = load_split(&a.data, seed)?;
    let shape = train_set.image_shape().context("training split is empty")?.to_vec();
    let init = canonical_cnn::<f32>(&shape, train_set.class_names.clone(), seed)?;
    let start = Instant::now();
    let (mut model, history) = train(&init, &train_set, &val, &train_config(&a.fit, a.epochs, seed))?;
    for (i, e) in history.epochs.iter().enumerate() {
        eprintln!(
            "epoch {}: train loss {:.4}, train accuracy {:.4}, val loss {:.4}, val accuracy {:.4}",
            i + 1,
            e.train_loss,
            e.train_accuracy,
            e.val_loss,
            e.val_accuracy
        );
    }
    let last = history.last().context("no epochs ran")?;
    println!(
        "val accuracy: {:.4} ({:.1}s)",
        last.val_accuracy,
        start.elapsed().as_secs_f64()
    );
    model.metadata.name = a.name.clone().unwrap_or_else(|| stem(&a.out));
    save(|p| export_lite(&model, p), &a.out)?;
    if let Some(dir) = &a.val_out {
        save_folder(&val, dir)?;
        println!("wrote validation split to {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<()> {
    let model = load_float(&a.model)?;
    let (train_set, val) = load_split(&a.data, seed)?;
    check_classes(&model, &val)?;
    let grid = a.grid.clone().unwrap_or_else(|| DEFAULT_SPARSITY_GRID.to_vec());
    let cfg = train_config(&a.fit, a.epochs.max(1), seed);
    let sweep = sparsity_sweep(&model, &train_set, &val, &grid, a.epochs, &cfg, a.scope)?;
    write_output(a.out.as_deref(), &emit_sweep(&sweep, a.format)?)
}

fn cmd_prune(a: &PruneArgs, seed: u64) -> Result<()> {
    let model = load_float(&a.model)?;
    let (train_set, val) = load_split(&a.data, seed)?;
    check_classes(&model, &val)?;
    println!("val accuracy before: {:.4}", accuracy(&model, &val)?);
    let (mut pruned, mask) = prune_magnitude(&model, a.sparsity, a.scope)?;
    println!(
        "pruned {} of {} weights ({:.4}), {} scope",
        mask.pruned_count(),
        mask.total(),
        mask.sparsity(),
        a.scope
    );
    println!("val accuracy after pruning: {:.4}", accuracy(&pruned, &val)?);
    if a.epochs > 0 {
        pruned = finetune_masked(&pruned, &mask, &train_set, &train_config(&a.fit, a.epochs, seed))?;
        println!(
            "val accuracy after {} fine-tuning epochs: {:.4}",
            a.epochs,
            accuracy(&pruned, &val)?
        );
    }
    save(|p| export_lite(&pruned, p), &a.out)
}

/// Mask that keeps every non-zero weight, so fine-tuning a pruned model
/// leaves its zeros in place.
fn zero_mask(model: &Model<f32>) -> PruneMask {
    PruneMask {
        layers: model
            .params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerMask {
                    shape: p.weights.shape().to_vec(),
                    keep: p.weights.data().iter().map(|&w| w != 0.0).collect(),
                })
            })
            .collect(),
    }
}

fn cmd_quantize(a: &QuantizeArgs, seed: u64) -> Result<()> {
    let mut model = load_float(&a.model)?;
    let (train_set, val) = load_split(&a.data, seed)?;
    check_classes(&model, &val)?;
    println!("float val accuracy: {:.4}", accuracy(&model, &val)?);
    let mut q = calibrate_activations(&quantize_weights(&model)?, &train_set, a.calib)?;
    println!("int8 val accuracy: {:.4}", evaluate_with(&q, &val)?.accuracy);
    if a.epochs > 0 {
        let mask = (model.metadata.sparsity > 0.0).then(|| zero_mask(&model));
        let cfg = train_config(&a.fit, a.epochs, seed);
        model = finetune_fakequant_masked(&model, &q.weight_scales(), mask.as_ref(), &train_set, &cfg)?;
        q = calibrate_activations(&quantize_weights(&model)?, &train_set, a.calib)?;
        println!(
            "int8 val accuracy after {} fake-quant epochs: {:.4}",
            a.epochs,
            evaluate_with(&q, &val)?.accuracy
        );
    }
    save(|p| export_lite(&q, p), &a.out)
}

fn cmd_export(a: &ExportArgs, seed: u64) -> Result<()> {
    if let (Some(model), Some(out)) = (&a.model, &a.out) {
        let lite = import_lite(model).with_context(|| format!("reading {}", model.display()))?;
        println!("format: {}", FormatTag::infer(&lite));
        save(|p| export_lite(&lite, p), out)?;
    }
    if let (Some(source), Some(dir)) = (&a.data, &a.pgm_out) {
        let ds = load_source(source, seed)?;
        let part = match a.split.as_str() {
            "all" => ds,
            which => {
                let (train_set, val) = split(&ds, a.train_fraction, seed)?;
                if which == "train" {
                    train_set
                } else {
                    val
                }
            }
        };
        save_folder(&part, dir)?;
        println!("wrote {} images ({} split) to {}", part.len(), a.split, dir.display());
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        n_images: a.n,
        backend: a.backend,
        model_id: a.model_id.clone(),
        format: a.format_tag,
        environment: None,
    };
    let report = run_benchmark(&a.model, &a.data, &cfg)?;
    if let Some(path) = &a.save {
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        eprintln!("saved report to {}", path.display());
    }
    write_output(a.out.as_deref(), &emit_report(std::slice::from_ref(&report), a.format)?)
}

fn load_reports(paths: &[PathBuf]) -> Result<Vec<BenchReport>> {
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let report: BenchReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            report
                .check_consistency()
                .with_context(|| format!("checking {}", p.display()))?;
            Ok(report)
        })
        .collect()
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
