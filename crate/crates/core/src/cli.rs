//! Command-line surface. Exit codes: 0 ok, 1 usage, 2 runtime.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::capsule::CapsuleConfig;
use crate::checkpoint;
use crate::data::{self, DataFormat, DatasetBundle};
use crate::error::{Error, Result};
use crate::model::{
    build_variant, compare_variant, count_parameters, kernel_sweep, ArchitectureVariant, ModelOptions, VariantBase,
    REFERENCE_COMPARISONS,
};
use crate::plot;
use crate::train::{self, Optimizer, RunRecord, TrainConfig};

pub const THREADS_ENV: &str = "DWCAPS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dwcaps", version, about = "Depthwise-separable capsule networks: cost analysis and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter/MAC report for a variant, its twin reduction, or a kernel sweep.
    Analyze(AnalyzeArgs),
    /// Train a variant and write run.csv and model.ckpt.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write a seeded synthetic dataset in raw-idx format.
    GenData(GenDataArgs),
    /// Accuracy-vs-epoch SVG chart from one or more run.csv files.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Filters of both convs.
    #[arg(long, default_value_t = 512)]
    filters: usize,
    /// Largest spatial extent handed to the capsule layers.
    #[arg(long, default_value_t = 8)]
    capsule_grid: usize,
    #[arg(long, default_value_t = 8)]
    primary_dim: usize,
    #[arg(long, default_value_t = 16)]
    class_dim: usize,
    #[arg(long, default_value_t = 3)]
    routing_iterations: usize,
    /// Omit bias terms everywhere.
    #[arg(long)]
    no_bias: bool,
}

impl ModelArgs {
    fn options(&self) -> ModelOptions {
        ModelOptions {
            filters: self.filters,
            capsule_grid: self.capsule_grid,
            with_bias: !self.no_bias,
            ..Default::default()
        }
    }

    fn caps(&self, num_classes: usize) -> CapsuleConfig {
        CapsuleConfig {
            primary_capsule_dim: self.primary_dim,
            class_capsule_dim: self.class_dim,
            num_classes,
            routing_iterations: self.routing_iterations,
        }
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Variant name such as 32-v1-2-2-k3.
    variant: Option<String>,
    /// Sweep k over 9, 7, 5, 3 for a base such as 32-v1-2-2.
    #[arg(long, value_name = "BASE", conflicts_with = "variant")]
    sweep: Option<String>,
    /// Print the reference twin comparisons.
    #[arg(long)]
    references: bool,
    /// Write the report as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 29)]
    classes: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset path.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "raw-idx")]
    format: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    variant: String,
    #[command(flatten)]
    data: DataArgs,
    /// Generated data instead of --data, e.g. classes=3,per-class=500,size=32.
    #[arg(long, value_name = "SPEC", conflicts_with = "data")]
    synthetic: Option<String>,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Fraction of each class kept before splitting.
    #[arg(long, default_value_t = 0.5)]
    subsample: f64,
    /// Train share of the split.
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    /// Stop once an epoch reaches this train accuracy.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Write 0 in the seconds column so run.csv is byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// run.csv files; repeat to overlay runs.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::GenData(a) => gen_data(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Caps the global rayon pool from `DWCAPS_THREADS` if it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot configure {n} threads: {e}")))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let caps = a.model.caps(a.classes);
    let options = a.model.options();
    let mut csv = String::new();
    if let Some(base) = &a.sweep {
        let base: VariantBase = base.parse()?;
        println!("{:<16} {:>14} {:>16} {:>12}", "variant", "params", "macs", "vs twin");
        csv.push_str("kernel,variant,params,macs,twin_reduction_pct\n");
        for entry in kernel_sweep(base, caps, options) {
            match entry.result {
                Ok((model, report)) => {
                    let pct =
                        compare_variant(model.variant, caps, options).map(|c| c.reduction_pct).unwrap_or(f64::NAN);
                    println!(
                        "{:<16} {:>14} {:>16} {:>11.1}%",
                        model.name(),
                        report.total_params,
                        report.total_macs,
                        pct
                    );
                    csv.push_str(&format!(
                        "{},{},{},{},{:.4}\n",
                        entry.kernel_size,
                        model.name(),
                        report.total_params,
                        report.total_macs,
                        pct
                    ));
                }
                Err(e) => {
                    println!("{base}-k{:<9} unavailable: {e}", entry.kernel_size);
                    csv.push_str(&format!("{},{base}-k{},,,\n", entry.kernel_size, entry.kernel_size));
                }
            }
        }
    } else if let Some(name) = &a.variant {
        let variant: ArchitectureVariant = name.parse()?;
        let model = build_variant(variant, caps, options)?;
        let report = count_parameters(&model)?;
        print!("{report}");
        match compare_variant(variant, caps, options) {
            Ok(c) => {
                println!(
                    "{} vs {}: {} vs {} params, reduction {:.1}%",
                    c.separable, c.standard, c.separable_params, c.standard_params, c.reduction_pct
                );
                if let Some(layer) = c.layer_reduction_pct {
                    println!("substituted conv reduction {layer:.1}%");
                }
            }
            Err(e) => println!("no twin comparison: {e}"),
        }
        csv = report.to_csv();
    } else if !a.references {
        return Err(Error::Usage("analyze needs a variant, --sweep BASE or --references".into()));
    }
    if a.references {
        println!("{:<20} {:<14} {:>10} {:>10}", "comparison", "variant", "measured", "published");
        for r in REFERENCE_COMPARISONS {
            let c = compare_variant(r.variant.parse()?, caps, options)?;
            println!("{:<20} {:<14} {:>9.1}% {:>9.0}%", r.label, r.variant, c.reduction_pct, r.published_pct);
        }
    }
    if let Some(path) = &a.csv {
        fs::write(path, csv)?;
    }
    Ok(())
}

fn load_data(args: &DataArgs, size: usize) -> Result<DatasetBundle> {
    let path = args.data.as_ref().ok_or_else(|| Error::Usage("--data PATH is required".into()))?;
    let format: DataFormat = args.format.parse()?;
    data::load_dataset(path, format, size)
}

/// Parses `classes=K,per-class=N,size=S`.
fn parse_synthetic(spec: &str) -> Result<(usize, usize, usize)> {
    let (mut classes, mut per_class, mut size) = (None, None, Some(32));
    for part in spec.split(',') {
        let (key, value) =
            part.split_once('=').ok_or_else(|| Error::Usage(format!("bad synthetic spec part '{part}'")))?;
        let value: usize = value.parse().map_err(|_| Error::Usage(format!("bad number in '{part}'")))?;
        match key.trim() {
            "classes" => classes = Some(value),
            "per-class" => per_class = Some(value),
            "size" => size = Some(value),
            _ => return Err(Error::Usage(format!("unknown synthetic key '{key}' (classes, per-class, size)"))),
        }
    }
    match (classes, per_class, size) {
        (Some(c), Some(p), Some(s)) => Ok((c, p, s)),
        _ => Err(Error::Usage("synthetic spec needs classes=K,per-class=N[,size=S]".into())),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let variant: ArchitectureVariant = a.variant.parse()?;
    let optimizer: Optimizer = a.optimizer.parse()?;
    let size = variant.base.input_size;
    let bundle = match &a.synthetic {
        Some(spec) => {
            let (classes, per_class, s) = parse_synthetic(spec)?;
            data::generate_synthetic(classes, per_class, s, a.seed)?
        }
        None => load_data(&a.data, size)?,
    };
    let bundle = data::split(&bundle, a.ratio, a.subsample, a.seed)?;
    let model = build_variant(variant, a.model.caps(bundle.num_classes()), a.model.options())?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        optimizer,
        seed: a.seed,
        subsample_fraction: a.subsample,
        split_ratio: a.ratio,
        stop_at_train_acc: a.stop_at,
        record_timing: !a.no_timing,
    };
    println!(
        "{}: {} train / {} test items, {} classes",
        model.name(),
        bundle.train.len(),
        bundle.test.len(),
        bundle.num_classes()
    );
    let outcome = train::train(&model, &bundle, &cfg)?;
    println!("initial loss {:.6}", outcome.record.initial_train_loss);
    for r in &outcome.record.rows {
        println!(
            "epoch {:>3}  loss {:.6}  train {:.4}  test {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.seconds
        );
    }
    outcome.write(&a.out)?;
    println!("checkpoint sha256 {}", outcome.record.checksum);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, params) = checkpoint::load_checkpoint(&a.checkpoint)?;
    let bundle = load_data(&a.data, model.input_extent())?;
    let e = train::evaluate(&model, &params, &bundle, &bundle.all_indices())?;
    println!("{}: accuracy {:.4} on {} items", model.name(), e.accuracy, bundle.len());
    println!("confusion (rows true, columns predicted):");
    for (name, row) in bundle.class_names.iter().zip(&e.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("{name:>12} {}", cells.join(""));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let bundle = data::generate_synthetic(a.classes, a.per_class, a.size, a.seed)?;
    bundle.save_raw_idx(&a.out)?;
    println!("wrote {} items ({} classes, {}x{}) to {}", bundle.len(), a.classes, a.size, a.size, a.out.display());
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let mut runs = Vec::new();
    for path in &a.run {
        let record = RunRecord::from_csv(&fs::read_to_string(path)?)?;
        runs.push((run_label(path), record));
    }
    fs::write(&a.out, plot::accuracy_svg(&runs))?;
    Ok(())
}

fn run_label(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name());
    match (path.file_stem(), parent) {
        (Some(stem), Some(dir)) if stem == "run" => dir.to_string_lossy().into_owned(),
        (Some(stem), _) => stem.to_string_lossy().into_owned(),
        _ => path.display().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spec() {
        assert_eq!(parse_synthetic("classes=3,per-class=500,size=64").unwrap(), (3, 500, 64));
        assert_eq!(parse_synthetic("classes=3,per-class=5").unwrap(), (3, 5, 32));
        for bad in ["classes=3", "classes=x,per-class=2", "colors=3,per-class=2", "junk"] {
            assert!(matches!(parse_synthetic(bad), Err(Error::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["dwcaps", "analyze", "32-v1-2-2-k3"]), 0);
        assert_eq!(run(["dwcaps", "analyze", "32-v9-2-2-k3"]), 1);
        assert_eq!(run(["dwcaps", "frobnicate"]), 1);
        assert_eq!(run(["dwcaps", "analyze"]), 1);
        assert_eq!(run(["dwcaps", "eval", "--checkpoint", "/nonexistent/m.ckpt", "--data", "/nonexistent"]), 2);
    }

    #[test]
    fn labels_from_paths() {
        assert_eq!(run_label(Path::new("out/k3/run.csv")), "k3");
        assert_eq!(run_label(Path::new("k5.csv")), "k5");
    }
}
