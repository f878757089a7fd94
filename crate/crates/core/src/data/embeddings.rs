//! Pre-trained word vectors in plain text.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OOV_STD: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct EmbeddingLoad {
    pub table: Tensor,
    /// Vocabulary ids whose rows were copied from the file.
    pub found: Vec<usize>,
}

/// A `[|vocab| × dim]` table drawn entirely from `N(0, OOV_STD²)` with the
/// pad row zeroed. Every row's draw depends only on the seed and its id.
pub fn random_table(vocab_len: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, OOV_STD).expect("finite std");
    let mut data: Vec<f64> = (0..vocab_len * dim).map(|_| normal.sample(&mut rng)).collect();
    data[PAD * dim..(PAD + 1) * dim].fill(0.0);
    Tensor::new(vec![vocab_len, dim], data).expect("shape matches")
}

/// Reads `token f1 … fdim` lines. Tokens that themselves contain spaces are
/// handled by taking the last `dim` fields as the vector.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingLoad> {
    read_embeddings(BufReader::new(File::open(path)?), vocab, dim, seed)
}

pub fn read_embeddings(reader: impl BufRead, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingLoad> {
    let mut table = random_table(vocab.len(), dim, seed);
    let mut found = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < dim + 1 {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} values after the token, found {}", fields.len().saturating_sub(1)),
            ));
        }
        let split = fields.len() - dim;
        let token = fields[..split].join(" ");
        let Some(id) = vocab.get(&token) else { continue };
        if id == PAD {
            continue;
        }
        let row = &mut table.data_mut()[id * dim..(id + 1) * dim];
        for (dst, f) in row.iter_mut().zip(&fields[split..]) {
            *dst = f
                .parse()
                .map_err(|_| Error::parse(lineno, format!("'{f}' is not a number")))?;
        }
        found.push(id);
    }
    Ok(EmbeddingLoad { table, found })
}
