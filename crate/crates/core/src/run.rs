//! End-to-end commands: train from a config, evaluate a checkpoint, and
//! render boundary heatmaps.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::data::{load_embeddings, parse_snli, parse_sst, random_table, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{Model, SideBatch};
use crate::optim::Optimizer;
use crate::train::{build_vocab, evaluate, to_examples, train, Corpus, EpochRecord, EvalReport};
use crate::viz;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Guesses the task of a corpus file from its first non-blank line:
/// line-delimited records are sentence pairs, bracketed trees are sentiment.
pub fn sniff_task(text: &str) -> Result<Task> {
    match text.lines().map(str::trim_start).find(|l| !l.is_empty()) {
        Some(l) if l.starts_with('{') => Ok(Task::Nli),
        Some(l) if l.starts_with('(') => Ok(Task::Sa),
        Some(_) => Err(Error::parse(1, "neither a JSON record nor a bracketed tree")),
        None => Err(Error::Data("corpus file is empty".into())),
    }
}

pub fn parse_corpus(task: Task, text: &str, lowercase: bool) -> Result<Corpus> {
    match task {
        Task::Nli => Ok(Corpus::Nli(parse_snli(text, lowercase)?)),
        Task::Sa => Ok(Corpus::Sa(parse_sst(text, true)?)),
    }
}

/// Loads a corpus file for `task`, rejecting files of the other task.
pub fn load_corpus(task: Task, path: &Path, lowercase: bool) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let found = sniff_task(&text)?;
    if found != task {
        return Err(Error::Config(format!(
            "{} holds {found} data but the task is {task}",
            path.display()
        )));
    }
    parse_corpus(task, &text, lowercase)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub final_train_acc: f64,
    pub checkpoint: PathBuf,
}

fn trial_dir(cfg: &RunConfig, trial: usize) -> PathBuf {
    if cfg.trials > 1 {
        cfg.out_dir.join(format!("trial-{trial}"))
    } else {
        cfg.out_dir.clone()
    }
}

/// Trains `cfg.trials` models; trial `k` uses seed `cfg.seed + k`. Each
/// trial writes `metrics.jsonl` (one record per epoch) and keeps the
/// checkpoint with the best dev accuracy (the latest epoch when there is no
/// dev split) as `best.ckpt`.
pub fn run_training(cfg: &RunConfig) -> Result<Vec<TrialSummary>> {
    cfg.validate()?;
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("train_path is required".into()))?;
    let train_corpus = load_corpus(cfg.task, train_path, cfg.lowercase)?;
    let dev_corpus = cfg
        .dev_path
        .as_ref()
        .map(|p| load_corpus(cfg.task, p, cfg.lowercase))
        .transpose()?;
    let mut summaries = Vec::new();
    for trial in 0..cfg.trials {
        let mut tc = cfg.clone();
        tc.seed = cfg.seed + trial as u64;
        tc.trials = 1;
        summaries.push(run_trial(&tc, trial, &trial_dir(cfg, trial), &train_corpus, dev_corpus.as_ref())?);
    }
    Ok(summaries)
}

fn run_trial(cfg: &RunConfig, trial: usize, dir: &Path, train_corpus: &Corpus, dev: Option<&Corpus>) -> Result<TrialSummary> {
    let vocab = build_vocab(cfg, train_corpus)?;
    let train_set = to_examples(cfg, train_corpus, &vocab)?;
    let dev_set = dev.map(|d| to_examples(cfg, d, &vocab)).transpose()?;
    let table = match &cfg.embeddings_path {
        Some(p) => load_embeddings(p, &vocab, cfg.d_emb, cfg.seed)?.table,
        None => random_table(vocab.len(), cfg.d_emb, cfg.seed),
    };
    let mut model = Model::new(cfg, table)?;
    let mut opt = Optimizer::new(&model.store, cfg.optimizer);
    fs::create_dir_all(dir)?;
    let mut log = File::create(dir.join(METRICS_FILE))?;
    let ckpt_path = dir.join(BEST_CHECKPOINT);
    let mut best: Option<(usize, Option<f64>)> = None;
    let mut history: Vec<EpochRecord> = Vec::new();
    let records = train(&mut model, &mut opt, &train_set, dev_set.as_deref(), trial, |rec, m, o| {
        writeln!(log, "{}", serde_json::to_string(rec).expect("record serializes"))?;
        log.flush()?;
        history.push(rec.clone());
        let improved = match (best, rec.dev_acc) {
            (None, _) => true,
            (Some((_, Some(b))), Some(d)) => d > b,
            (Some(_), None) => true,
            (Some((_, None)), Some(_)) => true,
        };
        if improved {
            best = Some((rec.epoch, rec.dev_acc));
            Checkpoint::from_model(m, &vocab, Some(o), rec.epoch, &history).save(&ckpt_path)?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    let (best_epoch, best_dev_acc) = best.unwrap_or((0, None));
    Ok(TrialSummary {
        trial,
        seed: cfg.seed,
        epochs_run: records.len(),
        best_epoch,
        best_dev_acc,
        final_train_acc: records.last().map_or(0.0, |r| r.train_acc),
        checkpoint: ckpt_path,
    })
}

/// Evaluates a checkpoint on a corpus file. `expected_task`, when given,
/// must match the checkpoint.
pub fn run_eval(checkpoint: &Path, data: &Path, expected_task: Option<Task>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(t) = expected_task {
        if t != ckpt.config.task {
            return Err(Error::Config(format!(
                "checkpoint is for task {} but {t} was requested",
                ckpt.config.task
            )));
        }
    }
    let corpus = load_corpus(ckpt.config.task, data, ckpt.config.lowercase)?;
    let model = ckpt.model()?;
    let examples = to_examples(&ckpt.config, &corpus, &ckpt.vocab)?;
    evaluate(&model, &examples, ckpt.config.batch_size)
}

/// Plain-text accuracy and confusion matrix.
pub fn format_report(task: Task, report: &EvalReport) -> String {
    let names: Vec<String> = match task {
        Task::Nli => crate::data::NliLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        Task::Sa => (0..crate::data::NUM_SENTIMENT_CLASSES).map(|k| k.to_string()).collect(),
    };
    let width = names.iter().map(String::len).max().unwrap_or(1).max(6);
    let mut out = format!(
        "accuracy: {:.1}% ({}/{})\nconfusion (rows = gold, columns = predicted):\n{:>width$}",
        100.0 * report.accuracy(),
        report.correct,
        report.total,
        ""
    );
    for n in &names {
        out.push_str(&format!(" {n:>width$}"));
    }
    out.push('\n');
    for (n, row) in names.iter().zip(&report.confusion) {
        out.push_str(&format!("{n:>width$}"));
        for c in row {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Ansi,
    Html,
}

/// Boundary indicators for whitespace-tokenized sentences.
pub fn chunk_traces(ckpt: &Checkpoint, sentences: &[Vec<String>]) -> Result<Vec<Vec<f64>>> {
    let model = ckpt.model()?;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(ckpt.config.batch_size.max(1)) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|s| ckpt.vocab.encode(s)).collect();
        let side = SideBatch {
            seq: SequenceBatch::from_sequences(&ids)?,
            trees: None,
        };
        out.extend(model.chunk_traces(&side)?);
    }
    Ok(out)
}

/// Renders one heatmap line per non-blank line of `sentences`.
pub fn run_inspect(checkpoint: &Path, sentences: &str, format: HeatmapFormat) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if !ckpt.config.encoder.has_detection() {
        return Err(Error::Capability(format!(
            "checkpoint encoder {} has no chunk detection layer",
            ckpt.config.encoder
        )));
    }
    let lowercase = ckpt.config.lowercase;
    let tokenized: Vec<Vec<String>> = sentences
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
                .collect()
        })
        .collect();
    let traces = chunk_traces(&ckpt, &tokenized)?;
    let rows: Vec<(Vec<String>, Vec<f64>)> = tokenized.into_iter().zip(traces).collect();
    Ok(match format {
        HeatmapFormat::Ansi => viz::render_ansi(&rows),
        HeatmapFormat::Html => viz::render_html(&rows),
    })
}

/// Appends one JSON line; used for summaries across trials.
pub fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{value}")?;
    Ok(())
}
