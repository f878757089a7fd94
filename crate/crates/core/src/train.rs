//! Turning corpora into model examples, the training loop, and evaluation.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::config::{EncoderKind, RunConfig, Task};
use crate::data::{batch_indices, NliExample, ParseTree, Vocab};
use crate::error::{Error, Result};
use crate::model::{Batch, Example, Model, Side};
use crate::optim::{cross_entropy, Dropout, Mode, Optimizer};
use crate::tensor::Graph;

fn lower(tokens: impl IntoIterator<Item = impl AsRef<str>>, lowercase: bool) -> Vec<String> {
    tokens
        .into_iter()
        .map(|t| if lowercase { t.as_ref().to_lowercase() } else { t.as_ref().to_string() })
        .collect()
}

/// Tokens of one sentence and, for the tree encoder, its parse.
type SideTokens = (Vec<String>, Option<ParseTree>);

fn nli_sides(cfg: &RunConfig, e: &NliExample) -> Result<Vec<SideTokens>> {
    if cfg.encoder == EncoderKind::Tree {
        let (Some(p), Some(h)) = (&e.premise_tree, &e.hypothesis_tree) else {
            return Err(Error::Config(
                "the tree encoder requires binary parses for every sentence pair".into(),
            ));
        };
        Ok(vec![
            (lower(p.leaves(), cfg.lowercase), Some(p.clone())),
            (lower(h.leaves(), cfg.lowercase), Some(h.clone())),
        ])
    } else {
        Ok(vec![
            (lower(&e.premise, cfg.lowercase), None),
            (lower(&e.hypothesis, cfg.lowercase), None),
        ])
    }
}

fn sa_sides(cfg: &RunConfig, t: &ParseTree) -> Vec<SideTokens> {
    let tree = (cfg.encoder == EncoderKind::Tree).then(|| t.clone());
    vec![(lower(t.leaves(), cfg.lowercase), tree)]
}

/// Raw corpus of either task.
#[derive(Clone, Debug)]
pub enum Corpus {
    Nli(Vec<NliExample>),
    Sa(Vec<ParseTree>),
}

impl Corpus {
    pub fn task(&self) -> Task {
        match self {
            Corpus::Nli(_) => Task::Nli,
            Corpus::Sa(_) => Task::Sa,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Nli(v) => v.len(),
            Corpus::Sa(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn items(&self, cfg: &RunConfig) -> Result<Vec<(Vec<SideTokens>, usize)>> {
        match self {
            Corpus::Nli(v) => v.iter().map(|e| Ok((nli_sides(cfg, e)?, e.label.index()))).collect(),
            Corpus::Sa(v) => v
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let label = t
                        .label()
                        .ok_or_else(|| Error::Data(format!("tree {i} has no root label")))?;
                    Ok((sa_sides(cfg, t), label as usize))
                })
                .collect(),
        }
    }
}

/// Vocabulary over every token the configured encoder will read.
pub fn build_vocab(cfg: &RunConfig, corpus: &Corpus) -> Result<Vocab> {
    let items = corpus.items(cfg)?;
    Ok(Vocab::build(
        items.iter().flat_map(|(sides, _)| sides.iter().flat_map(|(toks, _)| toks.iter().map(String::as_str))),
    ))
}

pub fn to_examples(cfg: &RunConfig, corpus: &Corpus, vocab: &Vocab) -> Result<Vec<Example>> {
    if corpus.task() != cfg.task {
        return Err(Error::Config(format!(
            "corpus is for task {} but the model is for {}",
            corpus.task(),
            cfg.task
        )));
    }
    Ok(corpus
        .items(cfg)?
        .into_iter()
        .map(|(sides, label)| Example {
            sides: sides
                .into_iter()
                .map(|(toks, tree)| Side {
                    ids: vocab.encode(&toks),
                    tree,
                })
                .collect(),
            label,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub trial: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Predicted class of every example, in corpus order.
pub fn predict(model: &Model, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for idx in batch_indices(examples.len(), batch_size, 0, false)? {
        let batch = Batch::from_examples(examples, &idx)?;
        let g = Graph::with_params(&model.store, false);
        let probs = g.value(model.forward(&g, &batch, &mut Dropout::off())?);
        out.extend((0..batch.len()).map(|r| argmax(probs.row(r))));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<EvalReport> {
    let k = model.num_classes();
    let preds = predict(model, examples, batch_size)?;
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (e, &p) in examples.iter().zip(&preds) {
        confusion[e.label][p] += 1;
        correct += usize::from(e.label == p);
    }
    Ok(EvalReport {
        correct,
        total: examples.len(),
        confusion,
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// One pass over `examples` in a seeded shuffled order. Returns the mean
/// loss and the fraction of correct training-mode predictions.
pub fn train_epoch(model: &mut Model, opt: &mut Optimizer, examples: &[Example], epoch: usize) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let (seed, bs, rate) = (cfg.seed, cfg.batch_size, cfg.dropout);
    let mut total_loss = 0.0;
    let mut correct = 0;
    for (bi, idx) in batch_indices(examples.len(), bs, mix(seed, epoch as u64, 0), true)?
        .into_iter()
        .enumerate()
    {
        let batch = Batch::from_examples(examples, &idx)?;
        let mut drop = Dropout::new(rate, Mode::Train, mix(seed, epoch as u64, bi as u64 + 1))?;
        let grads = {
            let g = Graph::with_params(&model.store, true);
            let probs = model.forward(&g, &batch, &mut drop)?;
            let loss = cross_entropy(&g, probs, &batch.labels)?;
            let pv = g.value(probs);
            correct += (0..batch.len()).filter(|&r| argmax(pv.row(r)) == batch.labels[r]).count();
            total_loss += g.scalar(loss) * batch.len() as f64;
            let grads = g.backward(loss)?;
            g.param_grads(&grads)
        };
        opt.step(&mut model.store, &grads)?;
    }
    let n = examples.len().max(1) as f64;
    Ok((total_loss / n, correct as f64 / n))
}

/// Runs up to `model.config.epochs` epochs. After each epoch the dev split
/// (if any) is evaluated and `on_epoch` is called; it may stop training
/// early by returning `Break`.
pub fn train<F>(
    model: &mut Model,
    opt: &mut Optimizer,
    train_set: &[Example],
    dev: Option<&[Example]>,
    trial: usize,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &Model, &Optimizer) -> Result<ControlFlow<()>>,
{
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut history = Vec::new();
    for epoch in 1..=model.config.epochs {
        let (train_loss, train_acc) = train_epoch(model, opt, train_set, epoch)?;
        let dev_acc = dev
            .map(|d| evaluate(model, d, model.config.batch_size).map(|r| r.accuracy()))
            .transpose()?;
        let rec = EpochRecord {
            trial,
            epoch,
            train_loss,
            train_acc,
            dev_acc,
        };
        let flow = on_epoch(&rec, model, opt)?;
        history.push(rec);
        if flow.is_break() {
            break;
        }
    }
    Ok(history)
}
