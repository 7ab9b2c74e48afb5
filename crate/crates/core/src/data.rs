//! Byte-level corpora, contiguous train/valid/test splits and shuffled
//! fixed-length training windows.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A token stream of raw bytes (`vocab = 256`) with split boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub source: PathBuf,
    /// `[train_end, valid_end]`; test runs from `valid_end` to the end.
    pub boundaries: [usize; 2],
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], source: impl Into<PathBuf>) -> Corpus {
        let tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
        let n = tokens.len();
        Corpus {
            tokens,
            source: source.into(),
            boundaries: [n, n],
        }
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.boundaries[0]]
    }

    pub fn valid(&self) -> &[usize] {
        &self.tokens[self.boundaries[0]..self.boundaries[1]]
    }

    pub fn test(&self) -> &[usize] {
        &self.tokens[self.boundaries[1]..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens.iter().map(|&t| t as u8).collect()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(Corpus::from_bytes(&bytes, path))
}

/// Contiguous prefix/middle/suffix split by `fractions = [train, valid, test]`.
pub fn split(corpus: Corpus, fractions: [f64; 3]) -> Result<Corpus> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::arg(format!("split fractions must be positive: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split fractions sum to {total}, not 1")));
    }
    let n = corpus.tokens.len();
    let train_end = (n as f64 * fractions[0]).round() as usize;
    let valid_end = (n as f64 * (fractions[0] + fractions[1])).round() as usize;
    if train_end == 0 || valid_end <= train_end || valid_end >= n {
        return Err(Error::arg(format!(
            "split of {n} tokens by {fractions:?} leaves an empty part"
        )));
    }
    Ok(Corpus {
        boundaries: [train_end, valid_end],
        ..corpus
    })
}

/// One training batch: `inputs` and `targets` are `[batch, L]` row-major,
/// with `targets` the inputs shifted left by one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Shuffled non-overlapping windows of a token stream. Window `w` covers
/// inputs `[w*L, (w+1)*L)` and targets one token to the right; a trailing
/// remainder shorter than `L + 1` is dropped. Each epoch reshuffles with a
/// seed derived from the base seed and the epoch number; batches never mix
/// epochs, so an epoch's last partial batch is dropped.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    tokens: &'a [usize],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    repeat: bool,
}

impl<'a> Batches<'a> {
    pub fn new(tokens: &'a [usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch_size == 0 {
            return Err(Error::arg("sequence length and batch size must be positive"));
        }
        if tokens.len() < seq_len + 1 {
            return Err(Error::arg(format!(
                "{} tokens are too few for one window of length {seq_len}",
                tokens.len()
            )));
        }
        let windows = (tokens.len() - 1) / seq_len;
        if windows < batch_size {
            return Err(Error::arg(format!(
                "{windows} windows of length {seq_len} cannot fill a batch of {batch_size}"
            )));
        }
        let mut it = Batches {
            tokens,
            seq_len,
            batch_size,
            seed,
            epoch: 0,
            order: (0..windows).collect(),
            cursor: 0,
            repeat: false,
        };
        it.shuffle();
        Ok(it)
    }

    /// Cycle through epochs forever instead of stopping after one.
    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn windows(&self) -> usize {
        self.order.len()
    }

    /// Window start offsets of the current epoch, in visiting order.
    pub fn window_order(&self) -> Vec<usize> {
        self.order.iter().map(|w| w * self.seq_len).collect()
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order.shuffle(&mut rng);
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch_size > self.order.len() {
            if !self.repeat {
                return None;
            }
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let l = self.seq_len;
        let mut inputs = Vec::with_capacity(self.batch_size * l);
        let mut targets = Vec::with_capacity(self.batch_size * l);
        for &w in &self.order[self.cursor..self.cursor + self.batch_size] {
            let start = w * l;
            inputs.extend_from_slice(&self.tokens[start..start + l]);
            targets.extend_from_slice(&self.tokens[start + 1..start + l + 1]);
        }
        self.cursor += self.batch_size;
        Some(Batch {
            inputs,
            targets,
            batch_size: self.batch_size,
            seq_len: l,
        })
    }
}

pub fn batches(tokens: &[usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    Batches::new(tokens, seq_len, batch_size, seed)
}
