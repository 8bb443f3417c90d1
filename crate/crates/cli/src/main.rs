mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use tdcn::checkpoint::{load_checkpoint, save_checkpoint};
use tdcn::data::{generate, padded_dims, read_dataset, write_dataset, Batch, DataError, Family, Grid, Mnist, Split};
use tdcn::error::Error;
use tdcn::eval::{evaluate, infer, EvalOptions};
use tdcn::model::{map_argmax, write_pgm, ForwardOptions, Model, ModelConfig, ModelKind};
use tdcn::parallel::worker_count;
use tdcn::selectivity::{train_readout_heads, ReadoutConfig};
use tdcn::train::{metrics_rows, train, EvalSettings, TrainConfig, METRICS_HEADER};

/// Top-down control networks on Multi-MNIST.
///
/// Every subcommand accepts `--config FILE` with `key = value` lines; flags
/// given on the command line override the file. `TDCN_THREADS` caps the
/// number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "tdcn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a Multi-MNIST dataset file.
    #[command(args_override_self = true)]
    Gen(GenArgs),
    /// Train a model and write checkpoints and a metrics CSV.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Per-task accuracy of a checkpoint.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Readout-head selectivity matrix and index.
    #[command(args_override_self = true)]
    Selectivity(SelectivityArgs),
    /// Write localisation maps of a TD model as PGM images.
    #[command(args_override_self = true)]
    Maps(MapsArgs),
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Omit wall-clock figures from the printed summary. Output files do
    /// not depend on timing or thread count either way.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, clap::Args)]
struct GenArgs {
    /// Grid of digits, ROWSxCOLS (1x2, 2x2 or 3x3).
    #[arg(long, default_value = "3x3")]
    grid: Grid,
    /// Task family: by_loc or by_ref.
    #[arg(long, default_value = "by_loc")]
    family: Family,
    /// Number of samples.
    #[arg(long, default_value_t = 60000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// MNIST split to draw digits from: train or test.
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// single, multibranch, chmod, chmod-ext, controlnet, td-only or bu-only.
    #[arg(long, default_value = "controlnet")]
    model: ModelKind,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Dataset evaluated after each eval interval; selects the best checkpoint.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the localisation loss (TD models).
    #[arg(long, default_value_t = 1.0)]
    lambda_loc: f64,
    /// Evaluate every N epochs (0: after the last epoch only).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Evaluate at most N samples per task.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Reduced TD channel width, same at every stage.
    #[arg(long)]
    td_width: Option<usize>,
    /// Largest number of samples per forward pass; does not change results.
    #[arg(long, default_value_t = 32)]
    micro_batch: usize,
    /// Final checkpoint; `<out>.best` and `<out>.metrics.csv` are written
    /// next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Evaluate at most N samples per task.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct SelectivityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// by_loc dataset the readout heads are trained on.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for readout accuracy; without it the last 20% of
    /// `--data` is held out.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Readout training epochs.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Matrix CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct MapsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    samples: Vec<usize>,
    /// Comma-separated task indices (default: every task).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<usize>,
    #[arg(long, default_value = "maps")]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            Error::Config(_) | Error::Data(DataError::InvalidArgument(_)) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Error::from(e).into()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_gen(a: GenArgs) -> Result<(), Failure> {
    let mnist = Mnist::load_dir(&a.mnist_dir, a.split)?;
    let ds = generate(&mnist, a.family, a.grid, a.n, a.seed, worker_count())?;
    write_dataset(&ds, &a.out)?;
    println!("dataset: {}", a.out.display());
    println!("family: {}", a.family);
    println!("grid: {}", a.grid);
    println!("samples: {}", ds.len());
    println!("canvas: {}x{}", ds.header.height, ds.header.width);
    println!("tasks: {}", ds.task_count());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let train_ds = read_dataset(&a.data)?;
    let eval_ds = a.eval_data.as_deref().map(read_dataset).transpose()?;
    let (h, w) = padded_dims(train_ds.header.height, train_ds.header.width);
    let mut mcfg = ModelConfig::new(a.model, train_ds.task_count(), h, w);
    if let Some(c) = a.td_width {
        mcfg = mcfg.with_td_width(c);
    }
    let mut model = Model::build(&mcfg, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        seed: a.seed,
        lambda_loc: a.lambda_loc,
        eval_every: a.eval_every,
        eval: EvalSettings {
            limit_per_task: a.eval_limit,
            ..EvalSettings::default()
        },
        micro_batch: a.micro_batch,
    };
    let names: Vec<String> = train_ds.tasks().iter().map(|t| t.key()).collect();
    let mut csv = format!("{METRICS_HEADER}\n");
    let quiet_time = a.common.deterministic;
    let report = train(&mut model, &train_ds, eval_ds.as_ref(), &cfg, |e| {
        for row in metrics_rows(e, &names) {
            csv.push_str(&row);
            csv.push('\n');
        }
        let mut line = format!("epoch {}/{}", e.epoch, cfg.epochs);
        let seen: Vec<_> = e.train.iter().filter(|s| s.batches > 0).collect();
        if !seen.is_empty() {
            let loss = seen.iter().map(|s| s.mean_loss()).sum::<f64>() / seen.len() as f64;
            let _ = write!(line, " train_loss {loss:.4}");
        }
        if let Some(m) = &e.eval {
            let _ = write!(line, " eval_acc {:.4}", m.mean_accuracy());
        }
        if !quiet_time {
            let _ = write!(line, " ({:.1}s)", e.seconds);
        }
        eprintln!("{line}");
    })?;
    save_checkpoint(&model, &a.out)?;
    let best_path = with_suffix(&a.out, ".best");
    let mut best = model.clone();
    best.params = report.best_params.clone();
    save_checkpoint(&best, &best_path)?;
    let csv_path = with_suffix(&a.out, ".metrics.csv");
    write_file(&csv_path, csv.as_bytes())?;

    println!("model: {}", a.model);
    println!("parameters: {}", model.census());
    println!("tasks: {}", train_ds.task_count());
    println!("epochs: {}", a.epochs);
    println!("checkpoint: {}", a.out.display());
    println!("best_checkpoint: {}", best_path.display());
    println!("metrics: {}", csv_path.display());
    if let Some(m) = &report.best_eval {
        println!("best_epoch: {}", report.best_epoch);
        for t in &m.per_task {
            println!("accuracy[{}]: {:.4}", t.task, t.accuracy());
        }
        println!("mean_accuracy: {:.4}", m.mean_accuracy());
    }
    if !quiet_time {
        println!("seconds: {:.1}", report.seconds);
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    let ds = read_dataset(&a.data)?;
    let m = evaluate(
        &model,
        &ds,
        EvalOptions {
            batch: a.batch,
            limit_per_task: a.limit,
            ..EvalOptions::default()
        },
    )?;
    println!("model: {}", model.cfg.kind);
    println!("parameters: {}", model.census());
    for t in &m.per_task {
        println!("accuracy[{}]: {:.4} ({}/{})", t.task, t.accuracy(), t.correct, t.total);
    }
    println!("mean_accuracy: {:.4}", m.mean_accuracy());
    println!("mean_loss: {:.4}", m.mean_loss());
    Ok(())
}

fn run_selectivity(a: SelectivityArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    let ds = read_dataset(&a.data)?;
    let (train_ds, eval_ds) = match &a.eval_data {
        Some(p) => (ds, read_dataset(p)?),
        None => {
            let cut = ds.len() - ds.len() / 5;
            ds.split_at(cut)
        }
    };
    let cfg = ReadoutConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        seed: a.seed,
        ..ReadoutConfig::default()
    };
    let report = train_readout_heads(&model, &train_ds, &eval_ds, &cfg)?;
    write_file(&a.out, report.to_csv().as_bytes())?;
    println!("model: {}", model.cfg.kind);
    println!("matrix: {}", a.out.display());
    println!("diagonal_mean: {:.4}", report.diagonal_mean());
    println!("off_diagonal_mean: {:.4}", report.off_diagonal_mean());
    println!("chance: {}", report.chance);
    println!("selectivity: {}", report.index);
    Ok(())
}

fn run_maps(a: MapsArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.ckpt)?;
    if !model.cfg.kind.has_td() {
        return Err(Failure::Usage(format!("{} model has no localisation maps", model.cfg.kind)));
    }
    let ds = read_dataset(&a.data)?;
    tdcn::eval::check_compatible(&model, &ds)?;
    let tasks = ds.tasks();
    let selected: Vec<usize> = if a.tasks.is_empty() { (0..tasks.len()).collect() } else { a.tasks.clone() };
    if let Some(&t) = selected.iter().find(|&&t| t >= tasks.len()) {
        return Err(Failure::Usage(format!("task {t} out of range for {} tasks", tasks.len())));
    }
    if let Some(&i) = a.samples.iter().find(|&&i| i >= ds.len()) {
        return Err(Failure::Usage(format!("sample {i} out of range for {} samples", ds.len())));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Data(format!("{}: {e}", a.out_dir.display())))?;
    for &t in &selected {
        for &i in &a.samples {
            let Some(center) = ds.answer_center(i, &tasks[t]) else {
                println!("skip: sample {i} has no answer for {}", tasks[t]);
                continue;
            };
            let b = Batch::assemble(&ds, &[i], &tasks[t], false)?;
            let map = infer(&model, &b.images, t, ForwardOptions::default())?.loc_map.expect("TD model");
            let (h, w) = (map.shape()[2], map.shape()[3]);
            let path = a.out_dir.join(format!("{i}_{t}.pgm"));
            write_pgm(&path, map.data(), h, w).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            let (y, x) = map_argmax(map.data(), w);
            println!(
                "map: {} task {} argmax ({y},{x}) center ({},{})",
                path.display(),
                tasks[t],
                center.0,
                center.1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::expand(argv, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => run_gen(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Selectivity(a) => run_selectivity(a),
        Cmd::Maps(a) => run_maps(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
