//! Mask training with a scheduled ℓ1 penalty, score tracking and adapter
//! post-tuning.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Graph, Optimizer};
use crate::instrument;
use crate::lm::{forward, Batch, BatchSampler, LayerId, LmError};
use crate::reparam::LayerRegistry;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at step {step} (lambda {lambda:e}); {}", format_norms(.layer_norms))]
    NonFiniteLoss { step: usize, lambda: f64, layer_norms: Vec<LayerNorms> },
    #[error("size ratio {ratio:.4} still above r_stop {r_stop} after {steps} steps; the lambda schedule is too weak")]
    MaxStepsExceeded { steps: usize, ratio: f64, r_stop: f64 },
    #[error("stop criterion already reached; masks are frozen")]
    AlreadyStopped,
    #[error("invalid pruning config: {0}")]
    InvalidConfig(String),
}

/// Parameter norms reported when a run diverges.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms {
    pub layer: LayerId,
    pub beta: f64,
    pub adapter: f64,
}

fn format_norms(norms: &[LayerNorms]) -> String {
    norms.iter().map(|n| format!("{}: |beta| {:.3e} |adapter| {:.3e}", n.layer, n.beta, n.adapter)).collect::<Vec<_>>().join(", ")
}

/// Sparsity term added to the β gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `λ·‖β‖₁`; pruned entries are pulled back up towards zero.
    L1,
    /// `λ·Σβ`, equal to `λ·‖β‖₁` on active entries; pruned entries keep
    /// sinking, so only the loss gradient can revive them.
    #[default]
    OneSided,
}

impl Penalty {
    pub fn gradient(self, lambda: f64, beta: f64) -> f64 {
        match self {
            Penalty::L1 => lambda * sign(beta),
            Penalty::OneSided => lambda,
        }
    }
}

/// `λ(t) = lambda0 · factor^⌊t / every⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { lambda0: 1e-3, factor: 1.01, every: 4 }
    }
}

impl LambdaSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let k = (step / self.every.max(1)) as i32;
        self.lambda0 * self.factor.powi(k)
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.lambda0 > 0.0 && self.factor > 1.0 && self.every > 0) {
            return Err(PruneError::InvalidConfig(format!("lambda schedule {self:?} needs lambda0 > 0, factor > 1, every > 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer_id: LayerId,
    pub scores: Vec<f64>,
    pub pruned: Vec<bool>,
}

/// Per-singular-value importance. Active entries hold `|β|`; pruned entries
/// hold a negative integer that drops by one every step they stay pruned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub layers: Vec<LayerScores>,
}

impl ScoreMap {
    /// Scores from the current `β`, as if `update_scores` ran on a fresh map.
    pub fn new(registry: &LayerRegistry) -> Self {
        let mut map = Self {
            layers: registry.layers.iter().map(|l| LayerScores { layer_id: l.layer_id, scores: vec![0.0; l.rank()], pruned: vec![false; l.rank()] }).collect(),
        };
        update_scores(registry, &mut map);
        map
    }

    pub fn pruned_count(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.iter().filter(|&&p| p).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.scores.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One score update; see [`ScoreMap`].
pub fn update_scores(registry: &LayerRegistry, map: &mut ScoreMap) {
    for (layer, entry) in registry.layers.iter().zip(&mut map.layers) {
        for (i, &b) in layer.beta.data().iter().enumerate() {
            if b > 0.0 {
                entry.scores[i] = b.abs();
                entry.pruned[i] = false;
            } else if !entry.pruned[i] {
                entry.scores[i] = -1.0;
                entry.pruned[i] = true;
            } else {
                entry.scores[i] -= 1.0;
            }
        }
    }
}

/// Storage cost of an `m×n` layer keeping `k` singular triples.
pub fn layer_cost(m: usize, n: usize, k: usize, adapter_rank: Option<usize>) -> usize {
    let k = k + adapter_rank.unwrap_or(0);
    (k * (m + n)).min(m * n)
}

/// `Σ min(k_l (m_l+n_l), m_l n_l) / Σ m_l n_l` with `k_l = #{β_l > 0}`.
pub fn current_size_ratio(registry: &LayerRegistry, include_adapters: bool) -> f64 {
    let (mut kept, mut total) = (0usize, 0usize);
    for l in &registry.layers {
        let (m, n) = (l.out_features(), l.in_features());
        kept += layer_cost(m, n, l.active_count(), include_adapters.then(|| l.adapter_rank()));
        total += m * n;
    }
    kept as f64 / total as f64
}

/// Loss and gradients for one step of mask training.
pub struct ObjectiveGrads {
    pub loss: f64,
    pub beta: Vec<Vec<f64>>,
    pub adapter_a: Vec<Vec<f64>>,
    pub adapter_b: Vec<Vec<f64>>,
}

/// Source of the data term `L` in a pruning step.
pub trait Objective {
    fn evaluate(&mut self, registry: &LayerRegistry, batch: &Batch) -> Result<ObjectiveGrads, PruneError>;
}

/// Next-token cross-entropy of the parametrized model.
pub struct LmObjective {
    dropout: ChaCha8Rng,
}

impl LmObjective {
    pub fn new(seed: u64) -> Self {
        Self { dropout: ChaCha8Rng::seed_from_u64(seed ^ 0xd50b_0a7e) }
    }
}

impl Objective for LmObjective {
    fn evaluate(&mut self, registry: &LayerRegistry, batch: &Batch) -> Result<ObjectiveGrads, PruneError> {
        let mut g = Graph::new();
        let (backbone, mut proj) = registry.bind(&mut g, true, true, Some(&mut self.dropout));
        let logits = forward(&mut g, registry.config(), &backbone, &batch.inputs(), batch.batch_size, batch.seq_len, &mut proj)?;
        let loss = g.cross_entropy(logits, Arc::new(batch.labels()))?;
        let value = g.value(loss).item();
        if let Some(rng) = proj.take_dropout_rng() {
            self.dropout = rng;
        }
        if !value.is_finite() {
            return Ok(ObjectiveGrads { loss: value, beta: vec![], adapter_a: vec![], adapter_b: vec![] });
        }
        let grads = g.backward(loss)?;
        let mut out = ObjectiveGrads { loss: value, beta: vec![], adapter_a: vec![], adapter_b: vec![] };
        for (bl, l) in proj.layers.iter().zip(&registry.layers) {
            out.beta.push(grads.get_or_zeros(bl.beta, l.rank()));
            let (a, b) = bl.adapter.expect("adapters bound during training");
            out.adapter_a.push(grads.get_or_zeros(a, l.adapter_a.len()));
            out.adapter_b.push(grads.get_or_zeros(b, l.adapter_b.len()));
        }
        Ok(out)
    }
}

/// `L ≡ 0`; leaves only the ℓ1 term.
pub struct ZeroObjective;

impl Objective for ZeroObjective {
    fn evaluate(&mut self, registry: &LayerRegistry, _batch: &Batch) -> Result<ObjectiveGrads, PruneError> {
        Ok(ObjectiveGrads {
            loss: 0.0,
            beta: registry.layers.iter().map(|l| vec![0.0; l.rank()]).collect(),
            adapter_a: registry.layers.iter().map(|l| vec![0.0; l.adapter_a.len()]).collect(),
            adapter_b: registry.layers.iter().map(|l| vec![0.0; l.adapter_b.len()]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub lr: f64,
    pub schedule: LambdaSchedule,
    pub penalty: Penalty,
    pub r_stop: f64,
    pub post_tune_steps: usize,
    pub max_steps: usize,
    /// Step after which scores are no longer updated.
    pub score_freeze_step: Option<usize>,
    pub count_adapters: bool,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            schedule: LambdaSchedule::default(),
            penalty: Penalty::default(),
            r_stop: 0.4,
            post_tune_steps: 1000,
            max_steps: 50_000,
            score_freeze_step: None,
            count_adapters: false,
            batch_size: 16,
            seq_len: 128,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        self.schedule.validate()?;
        if !(self.r_stop > 0.0 && self.r_stop <= 1.0) {
            return Err(PruneError::InvalidConfig(format!("r_stop {} outside (0, 1]", self.r_stop)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.seq_len == 0 {
            return Err(PruneError::InvalidConfig("lr, batch_size and seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Mutable state of a pruning run.
pub struct PruneRunState {
    pub step: usize,
    pub lambda: f64,
    pub schedule: LambdaSchedule,
    pub penalty: Penalty,
    pub scores: ScoreMap,
    pub r_stop: f64,
    pub score_freeze_step: Option<usize>,
    pub post_tune_steps: usize,
    pub count_adapters: bool,
    pub stopped: bool,
    pub beta_optimizer: Box<dyn Optimizer>,
    pub adapter_optimizer: Box<dyn Optimizer>,
}

impl PruneRunState {
    pub fn new(registry: &LayerRegistry, config: &PruneConfig) -> Self {
        Self::with_optimizers(registry, config, Box::new(Adam::new(AdamConfig::with_lr(config.lr))), Box::new(Adam::new(AdamConfig::with_lr(config.lr))))
    }

    pub fn with_optimizers(registry: &LayerRegistry, config: &PruneConfig, beta_optimizer: Box<dyn Optimizer>, adapter_optimizer: Box<dyn Optimizer>) -> Self {
        Self {
            step: 0,
            lambda: config.schedule.at(0),
            schedule: config.schedule,
            penalty: config.penalty,
            scores: ScoreMap::new(registry),
            r_stop: config.r_stop,
            score_freeze_step: config.score_freeze_step,
            post_tune_steps: config.post_tune_steps,
            count_adapters: config.count_adapters,
            stopped: false,
            beta_optimizer,
            adapter_optimizer,
        }
    }

    fn scores_frozen(&self) -> bool {
        self.score_freeze_step.is_some_and(|s| self.step >= s)
    }
}

/// One row of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub loss: f64,
    pub size_ratio: f64,
    pub pruned: usize,
}

/// A mask crossing zero in either direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEvent {
    pub step: usize,
    pub layer: usize,
    pub index: usize,
    pub pruned: bool,
}

/// Step on `{β, A, B}` with LM cross-entropy.
pub fn prune_step(registry: &mut LayerRegistry, batch: &Batch, state: &mut PruneRunState) -> Result<StepRecord, PruneError> {
    let mut objective = LmObjective::new(state.step as u64);
    prune_step_with(registry, batch, state, &mut objective)
}

/// Step on `{β, A, B}` with an arbitrary data term.
pub fn prune_step_with(
    registry: &mut LayerRegistry,
    batch: &Batch,
    state: &mut PruneRunState,
    objective: &mut dyn Objective,
) -> Result<StepRecord, PruneError> {
    prune_step_logged(registry, batch, state, objective, &mut Vec::new())
}

fn prune_step_logged(
    registry: &mut LayerRegistry,
    batch: &Batch,
    state: &mut PruneRunState,
    objective: &mut dyn Objective,
    events: &mut Vec<MaskEvent>,
) -> Result<StepRecord, PruneError> {
    if state.stopped {
        return Err(PruneError::AlreadyStopped);
    }
    let lambda = state.schedule.at(state.step);
    state.lambda = lambda;
    let mut grads = objective.evaluate(registry, batch)?;
    if !grads.loss.is_finite() {
        let layer_norms = registry
            .layers
            .iter()
            .map(|l| LayerNorms {
                layer: l.layer_id,
                beta: norm(l.beta.data()),
                adapter: (norm(l.adapter_a.data()).powi(2) + norm(l.adapter_b.data()).powi(2)).sqrt(),
            })
            .collect();
        return Err(PruneError::NonFiniteLoss { step: state.step, lambda, layer_norms });
    }
    for (g, l) in grads.beta.iter_mut().zip(&registry.layers) {
        for (gi, &b) in g.iter_mut().zip(l.beta.data()) {
            *gi += state.penalty.gradient(lambda, b);
        }
    }
    let before: Vec<Vec<bool>> = registry.layers.iter().map(|l| l.beta.data().iter().map(|&b| b > 0.0).collect()).collect();
    {
        let mut betas: Vec<&mut [f64]> = registry.layers.iter_mut().map(|l| l.beta.data_mut()).collect();
        let refs: Vec<&[f64]> = grads.beta.iter().map(Vec::as_slice).collect();
        state.beta_optimizer.step(&mut betas, &refs)?;
    }
    {
        let mut adapters: Vec<&mut [f64]> = Vec::with_capacity(2 * registry.layers.len());
        for l in &mut registry.layers {
            adapters.push(l.adapter_a.data_mut());
            adapters.push(l.adapter_b.data_mut());
        }
        let refs: Vec<&[f64]> = grads.adapter_a.iter().zip(&grads.adapter_b).flat_map(|(a, b)| [a.as_slice(), b.as_slice()]).collect();
        state.adapter_optimizer.step(&mut adapters, &refs)?;
    }
    for (li, (l, was)) in registry.layers.iter().zip(&before).enumerate() {
        for (i, (&b, &active)) in l.beta.data().iter().zip(was).enumerate() {
            if active != (b > 0.0) {
                events.push(MaskEvent { step: state.step, layer: li, index: i, pruned: active });
            }
        }
    }
    if !state.scores_frozen() {
        update_scores(registry, &mut state.scores);
    }
    let record = StepRecord {
        step: state.step,
        lambda,
        loss: grads.loss,
        size_ratio: current_size_ratio(registry, state.count_adapters),
        pruned: registry.layers.iter().map(|l| l.rank() - l.active_count()).sum(),
    };
    state.step += 1;
    state.lambda = state.schedule.at(state.step);
    Ok(record)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Everything a pruning run produces besides the updated registry.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub scores: ScoreMap,
    pub log: Vec<StepRecord>,
    pub events: Vec<MaskEvent>,
    pub pruning_steps: usize,
    pub post_tune_losses: Vec<f64>,
}

/// Mask training until the size ratio reaches `r_stop`, then adapter
/// post-tuning. `tokens` is the training split.
pub fn run_pruning(registry: &mut LayerRegistry, tokens: Arc<Vec<usize>>, config: &PruneConfig) -> Result<PruneOutcome, PruneError> {
    run_pruning_with(registry, tokens, config, &mut |_| {})
}

/// [`run_pruning`] with a callback invoked after every pruning step.
pub fn run_pruning_with(
    registry: &mut LayerRegistry,
    tokens: Arc<Vec<usize>>,
    config: &PruneConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<PruneOutcome, PruneError> {
    config.validate()?;
    instrument::record_pruning_run();
    let seq = config.seq_len.min(registry.config().max_seq_len);
    let mut sampler = BatchSampler::new(Arc::clone(&tokens), config.batch_size, seq, config.seed ^ 0x9e37_79b9)?;
    let mut state = PruneRunState::new(registry, config);
    let mut objective = LmObjective::new(config.seed);
    let mut log = Vec::new();
    let mut events = Vec::new();
    while current_size_ratio(registry, config.count_adapters) > config.r_stop {
        if state.step >= config.max_steps {
            return Err(PruneError::MaxStepsExceeded { steps: state.step, ratio: current_size_ratio(registry, config.count_adapters), r_stop: config.r_stop });
        }
        let batch = sampler.next_batch();
        let record = prune_step_logged(registry, &batch, &mut state, &mut objective, &mut events)?;
        on_step(&record);
        log.push(record);
    }
    state.stopped = true;
    let pruning_steps = state.step;
    let post_tune_losses = post_tune_sampled(registry, &mut sampler, config.post_tune_steps, config.lr, &mut objective)?;
    Ok(PruneOutcome { scores: state.scores, log, events, pruning_steps, post_tune_losses })
}

/// Adapter-only training with frozen masks for `steps` steps.
pub fn post_tune(registry: &mut LayerRegistry, tokens: Arc<Vec<usize>>, steps: usize, config: &PruneConfig) -> Result<Vec<f64>, PruneError> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let seq = config.seq_len.min(registry.config().max_seq_len);
    let mut sampler = BatchSampler::new(tokens, config.batch_size, seq, config.seed ^ 0x7057_7e5e)?;
    let mut objective = LmObjective::new(config.seed);
    post_tune_sampled(registry, &mut sampler, steps, config.lr, &mut objective)
}

fn post_tune_sampled(
    registry: &mut LayerRegistry,
    sampler: &mut BatchSampler,
    steps: usize,
    lr: f64,
    objective: &mut LmObjective,
) -> Result<Vec<f64>, PruneError> {
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next_batch();
        let grads = objective.evaluate(registry, &batch)?;
        if !grads.loss.is_finite() {
            return Err(PruneError::NonFiniteLoss { step, lambda: 0.0, layer_norms: Vec::new() });
        }
        let mut adapters: Vec<&mut [f64]> = Vec::with_capacity(2 * registry.layers.len());
        for l in &mut registry.layers {
            adapters.push(l.adapter_a.data_mut());
            adapters.push(l.adapter_b.data_mut());
        }
        let refs: Vec<&[f64]> = grads.adapter_a.iter().zip(&grads.adapter_b).flat_map(|(a, b)| [a.as_slice(), b.as_slice()]).collect();
        adam.step(&mut adapters, &refs)?;
        losses.push(grads.loss);
    }
    Ok(losses)
}

pub fn write_step_log(mut out: impl Write, log: &[StepRecord]) -> std::io::Result<()> {
    writeln!(out, "step,lambda,loss,size_ratio,pruned")?;
    for r in log {
        writeln!(out, "{},{:e},{},{},{}", r.step, r.lambda, r.loss, r.size_ratio, r.pruned)?;
    }
    Ok(())
}

/// Rebuilds pruned-entry scores from a mask event log: an entry last pruned
/// at step `p` and still pruned after step `last` scores `p − last − 1`.
pub fn replay_scores(registry: &LayerRegistry, events: &[MaskEvent], last_step: usize) -> ScoreMap {
    let mut map = ScoreMap::new(registry);
    let mut pruned_at: Vec<Vec<Option<usize>>> = registry.layers.iter().map(|l| vec![None; l.rank()]).collect();
    for e in events {
        pruned_at[e.layer][e.index] = e.pruned.then_some(e.step);
    }
    for (entry, times) in map.layers.iter_mut().zip(&pruned_at) {
        for (i, t) in times.iter().enumerate() {
            if let Some(p) = t {
                entry.scores[i] = *p as f64 - last_step as f64 - 1.0;
                entry.pruned[i] = true;
            }
        }
    }
    map
}
