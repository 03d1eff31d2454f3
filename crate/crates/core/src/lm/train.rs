use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{forward, Batch, BatchSampler, Corpus, LanguageModel, LmError, Transformer, TransformerConfig};
use crate::autodiff::{Adam, AdamConfig, Graph, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

/// Trains a freshly initialized model with Adam on random windows of the
/// training split. Returns the model and the per-step training losses.
pub fn train_base(config: TransformerConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<(Transformer, Vec<f64>), LmError> {
    let seq = config.max_seq_len;
    let needed = 10 * opts.batch_size * seq;
    if corpus.train.len() < needed {
        return Err(LmError::CorpusTooSmall { needed, available: corpus.train.len() });
    }
    let mut model = Transformer::init(config, opts.seed)?;
    let mut sampler = BatchSampler::new(Arc::clone(&corpus.train), opts.batch_size, seq, opts.seed ^ 0x5eed_ba7c)?;
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch = sampler.next_batch();
        let (loss, grads) = {
            let mut g = Graph::new();
            let (backbone, mut dense) = model.bind(&mut g, true);
            let logits = forward(&mut g, &model.config, &backbone, &batch.inputs(), batch.batch_size, batch.seq_len, &mut dense)?;
            let loss = g.cross_entropy(logits, Arc::new(batch.labels()))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(LmError::NonFiniteLoss { step });
            }
            let grads = g.backward(loss)?;
            let vars: Vec<_> = backbone.vars().into_iter().chain(dense.vars()).collect();
            let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
            let flat: Vec<Vec<f64>> = vars.iter().zip(sizes).map(|(&v, n)| grads.get_or_zeros(v, n)).collect();
            (value, flat)
        };
        losses.push(loss);
        let mut params: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut params, &grad_refs)?;
    }
    Ok((model, losses))
}

/// Mean next-token negative log-likelihood over one batch.
pub fn nll_loss(model: &dyn LanguageModel, batch: &Batch) -> Result<f64, LmError> {
    batch.check_vocab(model.config().vocab_size)?;
    let mut g = Graph::new();
    let logits = model.logits(&mut g, &batch.inputs(), batch.batch_size, batch.seq_len)?;
    let loss = g.cross_entropy(logits, Arc::new(batch.labels()))?;
    Ok(g.value(loss).item())
}

/// `(total NLL, predicted token count)` over a dataset.
pub fn mean_nll(model: &dyn LanguageModel, batches: &[Batch]) -> Result<(f64, usize), LmError> {
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        total += nll_loss(model, b)? * b.predicted_tokens() as f64;
        count += b.predicted_tokens();
    }
    Ok((total, count))
}

/// `exp` of the mean token NLL over the dataset.
pub fn perplexity(model: &dyn LanguageModel, batches: &[Batch]) -> Result<f64, LmError> {
    let (total, count) = mean_nll(model, batches)?;
    if count == 0 {
        return Err(LmError::EmptyDataset);
    }
    Ok((total / count as f64).exp())
}
