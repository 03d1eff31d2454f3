use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LmError, TokenizerSpec};

/// Tokenized corpus with the last tenth (by bytes) held out for validation.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: TokenizerSpec,
    pub train: Arc<Vec<usize>>,
    pub validation: Arc<Vec<usize>>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self, LmError> {
        Self::with_tokenizer(text, TokenizerSpec::from_corpus(text))
    }

    pub fn with_tokenizer(text: &str, tokenizer: TokenizerSpec) -> Result<Self, LmError> {
        let mut split = text.len() - text.len() / 10;
        while !text.is_char_boundary(split) {
            split += 1;
        }
        let (train, validation) = text.split_at(split);
        Ok(Self { train: Arc::new(tokenizer.tokenize(train)?), validation: Arc::new(tokenizer.tokenize(validation)?), tokenizer })
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `batch_size` rows of `seq_len + 1` consecutive token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, batch_size: usize, seq_len: usize) -> Result<Self, LmError> {
        if tokens.len() != batch_size * (seq_len + 1) || batch_size == 0 || seq_len == 0 {
            return Err(LmError::EmptyDataset);
        }
        Ok(Self { tokens, batch_size, seq_len })
    }

    /// First `seq_len` ids of every row.
    pub fn inputs(&self) -> Vec<usize> {
        self.tokens.chunks_exact(self.seq_len + 1).flat_map(|r| r[..self.seq_len].iter().copied()).collect()
    }

    /// Inputs shifted left by one.
    pub fn labels(&self) -> Vec<usize> {
        self.tokens.chunks_exact(self.seq_len + 1).flat_map(|r| r[1..].iter().copied()).collect()
    }

    pub fn predicted_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<(), LmError> {
        match self.tokens.iter().find(|&&t| t >= vocab) {
            Some(&id) => Err(LmError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }
}

/// Uniformly random windows, reproducible from the seed.
pub struct BatchSampler {
    tokens: Arc<Vec<usize>>,
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(tokens: Arc<Vec<usize>>, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self, LmError> {
        if tokens.len() < seq_len + 1 {
            return Err(LmError::CorpusTooSmall { needed: seq_len + 1, available: tokens.len() });
        }
        Ok(Self { tokens, batch_size, seq_len, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self) -> Batch {
        let window = self.seq_len + 1;
        let mut out = Vec::with_capacity(self.batch_size * window);
        for _ in 0..self.batch_size {
            let start = self.rng.gen_range(0..=self.tokens.len() - window);
            out.extend_from_slice(&self.tokens[start..start + window]);
        }
        Batch { tokens: out, batch_size: self.batch_size, seq_len: self.seq_len }
    }
}

/// Non-overlapping windows covering `tokens` so that every id after the first
/// is predicted exactly once. A trailing short window becomes its own batch.
/// `max_tokens` caps the number of ids consumed.
pub fn eval_batches(tokens: &[usize], batch_size: usize, seq_len: usize, max_tokens: Option<usize>) -> Vec<Batch> {
    let tokens = match max_tokens {
        Some(cap) if cap < tokens.len() => &tokens[..cap],
        _ => tokens,
    };
    let mut windows: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        windows.push(&tokens[start..end]);
        start += seq_len;
    }
    let mut batches = Vec::new();
    let full: Vec<&[usize]> = windows.iter().copied().filter(|w| w.len() == seq_len + 1).collect();
    for group in full.chunks(batch_size.max(1)) {
        batches.push(Batch { tokens: group.concat(), batch_size: group.len(), seq_len });
    }
    if let Some(last) = windows.last().filter(|w| w.len() < seq_len + 1) {
        batches.push(Batch { tokens: last.to_vec(), batch_size: 1, seq_len: last.len() - 1 });
    }
    batches
}
