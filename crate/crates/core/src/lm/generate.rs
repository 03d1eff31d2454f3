use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LanguageModel, LmError, TokenizerSpec};
use crate::autodiff::Graph;

/// Temperatures at or below this decode greedily.
const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Samples `n_tokens` continuation characters after `prompt`.
///
/// The context window slides over the last `max_seq_len` tokens. Sampling is
/// reproducible given `seed`; ties under greedy decoding go to the lowest id.
pub fn generate(model: &dyn LanguageModel, tokenizer: &TokenizerSpec, prompt: &str, n_tokens: usize, temperature: f64, seed: u64) -> Result<String, LmError> {
    let mut ids = tokenizer.tokenize(prompt)?;
    if n_tokens == 0 {
        return Ok(prompt.to_string());
    }
    if ids.is_empty() {
        return Err(LmError::EmptyDataset);
    }
    let max = model.config().max_seq_len;
    let vocab = model.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_tokens {
        let ctx = &ids[ids.len().saturating_sub(max)..];
        let mut g = Graph::new();
        let logits = model.logits(&mut g, ctx, 1, ctx.len())?;
        let row = &g.value(logits).data()[(ctx.len() - 1) * vocab..];
        let next = if temperature <= GREEDY_TEMPERATURE {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        } else {
            let max_logit = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row.iter().map(|v| ((v - max_logit) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen::<f64>() * total;
            let mut pick = vocab - 1;
            for (i, w) in weights.iter().enumerate() {
                if draw < *w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            pick
        };
        ids.push(next);
    }
    Ok(tokenizer.detokenize(&ids))
}
