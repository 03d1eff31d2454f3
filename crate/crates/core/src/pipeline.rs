//! End-to-end stages driven by a [`RunConfig`]: base training, mask
//! training, and perplexity sweeps over compression ratios.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compressor::{apply_plan, plan_for_ratio, registry_shapes, restore, CompressError, CompressionPlan, PlanOptions};
use crate::config::RunConfig;
use crate::lm::{eval_batches, perplexity, train_base, Batch, Corpus, LmError, Transformer};
use crate::pruner::{run_pruning_with, PruneError, PruneOutcome, ScoreMap, StepRecord};
use crate::reparam::{reparametrize, LayerRegistry, ReparamError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Compress(#[from] CompressError),
}

pub fn train(config: &RunConfig, corpus: &Corpus) -> Result<(Transformer, Vec<f64>), PipelineError> {
    let model_config = config.transformer_config(corpus.tokenizer.vocab_size());
    Ok(train_base(model_config, corpus, &config.train_options())?)
}

/// Reparametrization followed by one pruning run on the training split.
pub fn prune(
    config: &RunConfig,
    base: &Transformer,
    corpus: &Corpus,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(LayerRegistry, PruneOutcome), PipelineError> {
    let mut registry = reparametrize(base, &config.reparam_config())?;
    let outcome = run_pruning_with(&mut registry, Arc::clone(&corpus.train), &config.prune_config(), on_step)?;
    Ok((registry, outcome))
}

/// Validation batches used for every perplexity number.
pub fn eval_set(config: &RunConfig, corpus: &Corpus, seq_len: usize) -> Vec<Batch> {
    eval_batches(&corpus.validation, config.eval.batch_size, seq_len, config.eval.max_tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub perplexity: f64,
    pub stored_params: usize,
    pub mode_counts: String,
}

impl TradeoffRow {
    fn new(plan: &CompressionPlan, perplexity: f64) -> Self {
        let mode_counts = plan.mode_counts().iter().map(|(m, c)| format!("{}={c}", m.name())).collect::<Vec<_>>().join(";");
        Self { target_ratio: plan.target_ratio, achieved_ratio: plan.achieved_ratio, perplexity, stored_params: plan.stored_params(), mode_counts }
    }
}

/// Perplexity at each ratio via mask-only plans and restore. Ratios are
/// evaluated in descending order; rows come back in input order.
pub fn sweep(
    registry: &mut LayerRegistry,
    scores: &ScoreMap,
    ratios: &[f64],
    options: PlanOptions,
    batches: &[Batch],
) -> Result<Vec<TradeoffRow>, PipelineError> {
    let shapes = registry_shapes(registry);
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]));
    let mut rows: Vec<Option<TradeoffRow>> = vec![None; ratios.len()];
    for i in order {
        let plan = plan_for_ratio(scores, &shapes, ratios[i], options)?;
        apply_plan(registry, &plan)?;
        let ppl = perplexity(registry, batches);
        restore(registry);
        rows[i] = Some(TradeoffRow::new(&plan, ppl?));
    }
    Ok(rows.into_iter().map(|r| r.expect("every ratio evaluated")).collect())
}

pub fn write_tradeoff_csv(mut out: impl Write, rows: &[TradeoffRow]) -> std::io::Result<()> {
    writeln!(out, "target_ratio,achieved_ratio,perplexity,stored_params,mode_counts")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.target_ratio, r.achieved_ratio, r.perplexity, r.stored_params, r.mode_counts)?;
    }
    Ok(())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
