//! `snelsd`: train sentence-encoder models, evaluate checkpoints, and render
//! chunk-boundary heatmaps.
//!
//! Every failure prints a single line `error[<kind>]: <message>` on stderr
//! and exits with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snelsd::config::{EncoderKind, Joint, RunConfig, Task};
use snelsd::optim::{AdadeltaConfig, AdamConfig, OptimizerConfig};
use snelsd::run::{self, HeatmapFormat};
use snelsd::{Error, Result};

#[derive(Parser)]
#[command(name = "snelsd", version, about = "Sentence encoders with latent chunk detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and best.ckpt under the output directory.
    Train(Box<TrainArgs>),
    /// Report accuracy and a confusion matrix for a checkpoint on a corpus file.
    Eval(EvalArgs),
    /// Render boundary indicators of a chunk-detecting checkpoint.
    InspectChunks(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Adam,
    Adadelta,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ansi,
    Html,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value (TOML) config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory against which relative corpus and embedding paths resolve.
    #[arg(long, env = "SNELSD_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    joint_with: Option<String>,
    #[arg(long)]
    late_fusion: bool,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_compose: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    reduce: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the resolved config as JSON and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Expected task; a mismatch with the checkpoint is an error.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    sentences: PathBuf,
    #[arg(long, value_enum, default_value = "ansi")]
    format: Format,
    /// Write to this file instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn resolve(root: Option<&Path>, p: PathBuf) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}

fn build_config(a: TrainArgs) -> Result<RunConfig> {
    let task: Option<Task> = a.task.as_deref().map(str::parse).transpose()?;
    let mut c = match &a.config {
        Some(path) => RunConfig::from_toml_file(path, task)?,
        None => RunConfig::for_task(task.unwrap_or(Task::Nli)),
    };
    if let Some(e) = a.encoder.as_deref() {
        c.encoder = e.parse::<EncoderKind>()?;
    }
    if let Some(j) = a.joint_with.as_deref() {
        c.joint_with = j.parse::<Joint>()?;
    }
    c.late_fusion |= a.late_fusion;
    c.lowercase |= a.lowercase;
    macro_rules! set {
        ($($field:ident <- $arg:expr),+) => { $(if let Some(v) = $arg { c.$field = v; })+ };
    }
    set!(d_emb <- a.d_emb, d_hidden <- a.d_hidden, d_compose <- a.d_compose, batch_size <- a.batch_size,
         epochs <- a.epochs, dropout <- a.dropout, seed <- a.seed, trials <- a.trials, out_dir <- a.out_dir);
    if a.mlp_hidden.is_some() {
        c.mlp_hidden = a.mlp_hidden;
    }
    if a.reduce.is_some() {
        c.reduce = a.reduce;
    }
    match a.optimizer {
        Some(OptimizerKind::Adam) if !matches!(c.optimizer, OptimizerConfig::Adam(_)) => {
            c.optimizer = OptimizerConfig::Adam(AdamConfig::default());
        }
        Some(OptimizerKind::Adadelta) if !matches!(c.optimizer, OptimizerConfig::Adadelta(_)) => {
            c.optimizer = OptimizerConfig::Adadelta(AdadeltaConfig::default());
        }
        _ => {}
    }
    match &mut c.optimizer {
        OptimizerConfig::Adam(o) => {
            if a.rho.is_some() {
                return Err(Error::Config("--rho applies to adadelta only".into()));
            }
            set_opt(&mut o.lr, a.lr);
            set_opt(&mut o.beta1, a.beta1);
            set_opt(&mut o.beta2, a.beta2);
            set_opt(&mut o.eps, a.eps);
        }
        OptimizerConfig::Adadelta(o) => {
            if a.lr.is_some() || a.beta1.is_some() || a.beta2.is_some() {
                return Err(Error::Config("adadelta takes no --lr, --beta1 or --beta2".into()));
            }
            set_opt(&mut o.rho, a.rho);
            set_opt(&mut o.eps, a.eps);
        }
    }
    let root = a.data_root.as_deref();
    let pick = |flag: Option<PathBuf>, from_file: Option<PathBuf>| flag.or(from_file).map(|p| resolve(root, p));
    c.train_path = pick(a.train, c.train_path.take());
    c.dev_path = pick(a.dev, c.dev_path.take());
    c.test_path = pick(a.test, c.test_path.take());
    c.embeddings_path = pick(a.embeddings, c.embeddings_path.take());
    c.validate()?;
    Ok(c)
}

fn set_opt(dst: &mut f64, v: Option<f64>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let print_only = a.print_config;
    let cfg = build_config(a)?;
    println!("config {}", cfg.to_json());
    if print_only {
        return Ok(());
    }
    let summaries = run::run_training(&cfg)?;
    for s in &summaries {
        let dev = s.best_dev_acc.map_or("n/a".to_string(), |d| format!("{:.1}%", 100.0 * d));
        println!(
            "trial {} seed {}: {} epochs, best epoch {}, dev {dev}, checkpoint {}",
            s.trial,
            s.seed,
            s.epochs_run,
            s.best_epoch,
            s.checkpoint.display()
        );
    }
    let devs: Vec<f64> = summaries.iter().filter_map(|s| s.best_dev_acc).collect();
    if devs.len() > 1 {
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let sd = (devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        println!("dev accuracy over {} trials: {:.1}% ± {:.1}", devs.len(), 100.0 * mean, 100.0 * sd);
    }
    if let Some(test) = &cfg.test_path {
        for s in &summaries {
            let r = run::run_eval(&s.checkpoint, test, Some(cfg.task))?;
            println!("trial {} test accuracy: {:.1}%", s.trial, 100.0 * r.accuracy());
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let task: Option<Task> = a.task.as_deref().map(str::parse).transpose()?;
    let ckpt = snelsd::checkpoint::Checkpoint::load(&a.checkpoint)?;
    let report = run::run_eval(&a.checkpoint, &a.data, task)?;
    print!("{}", run::format_report(ckpt.config.task, &report));
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let text = fs::read_to_string(&a.sentences)
        .map_err(|e| Error::Data(format!("{}: {e}", a.sentences.display())))?;
    let format = match a.format {
        Format::Ansi => HeatmapFormat::Ansi,
        Format::Html => HeatmapFormat::Html,
    };
    let out = run::run_inspect(&a.checkpoint, &text, format)?;
    match a.output {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectChunks(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
