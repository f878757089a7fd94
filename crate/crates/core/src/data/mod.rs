//! Corpus ingestion, vocabulary, embedding tables and batching.

mod embeddings;
mod nli;
mod sst;
mod tree;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, random_table, read_embeddings, EmbeddingLoad, OOV_STD};
pub use nli::{load_snli, parse_snli, NliExample, NliLabel, NUM_NLI_CLASSES};
pub use sst::{load_sst, parse_sst};
pub use tree::{ParseTree, NUM_SENTIMENT_CLASSES};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id mapping with reserved padding and unknown entries. Ids of
/// ordinary tokens are assigned by descending corpus frequency, ties broken
/// lexicographically, so they are stable for a given corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocab::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Rebuilds a vocabulary from its ordinary tokens in id order (ids start
    /// after the reserved entries).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut v = Vocab {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Ordinary tokens in id order, without the reserved entries.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Padded id matrix `[batch × max_len]` in row-major order, with a validity
/// mask of leading ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl SequenceBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<SequenceBatch> {
        Self::padded(seqs, 0)
    }

    /// Like [`from_sequences`](Self::from_sequences) but pads every row to at
    /// least `min_len` positions.
    pub fn padded<S: AsRef<[usize]>>(seqs: &[S], min_len: usize) -> Result<SequenceBatch> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence("batch has no sentences".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::EmptySequence(format!("sentence {i} of the batch is empty")));
        }
        let max_len = lengths.iter().copied().max().unwrap_or(0).max(min_len);
        let mut ids = vec![PAD; seqs.len() * max_len];
        let mut mask = vec![false; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.as_ref().iter().enumerate() {
                ids[b * max_len + t] = id;
                mask[b * max_len + t] = true;
            }
        }
        Ok(SequenceBatch {
            ids,
            mask,
            lengths,
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }
}

/// Groups `0..n` into batches of `batch_size`, shuffled with a ChaCha stream
/// seeded by `seed` when `shuffle` is set. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Premise and hypothesis batches for the same example indices.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub indices: Vec<usize>,
    pub premise: SequenceBatch,
    pub hypothesis: SequenceBatch,
    pub labels: Vec<usize>,
}

pub fn batchify_pairs(
    examples: &[NliExample],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<PairBatch>> {
    batch_indices(examples.len(), batch_size, seed, shuffle)?
        .into_iter()
        .map(|idx| {
            let p: Vec<Vec<usize>> = idx.iter().map(|&i| vocab.encode(&examples[i].premise)).collect();
            let h: Vec<Vec<usize>> = idx.iter().map(|&i| vocab.encode(&examples[i].hypothesis)).collect();
            Ok(PairBatch {
                premise: SequenceBatch::from_sequences(&p)?,
                hypothesis: SequenceBatch::from_sequences(&h)?,
                labels: idx.iter().map(|&i| examples[i].label.index()).collect(),
                indices: idx,
            })
        })
        .collect()
}

/// Sentence batches for labeled trees (leaf tokens, root label).
#[derive(Clone, Debug)]
pub struct SentenceBatch {
    pub indices: Vec<usize>,
    pub tokens: SequenceBatch,
    pub labels: Vec<usize>,
}

pub fn batchify_sentences(
    trees: &[ParseTree],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<SentenceBatch>> {
    batch_indices(trees.len(), batch_size, seed, shuffle)?
        .into_iter()
        .map(|idx| {
            let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| vocab.encode(&trees[i].leaves())).collect();
            let labels = idx
                .iter()
                .map(|&i| {
                    trees[i]
                        .label()
                        .map(usize::from)
                        .ok_or_else(|| Error::Data(format!("tree {i} has no root label")))
                })
                .collect::<Result<_>>()?;
            Ok(SentenceBatch {
                tokens: SequenceBatch::from_sequences(&seqs)?,
                labels,
                indices: idx,
            })
        })
        .collect()
}
