//! Materializing models at arbitrary sizes from a score map.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::lm::{dense_projection, forward, Backbone, LanguageModel, LayerId, Linear, LmError, Projections, TransformerConfig};
use crate::pruner::{layer_cost, LayerScores, ScoreMap};
use crate::reparam::{LayerOverride, LayerRegistry, ReparamError};

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("target ratio {target} is below the smallest achievable ratio {floor:.6}")]
    InfeasibleRatio { target: f64, floor: f64 },
    #[error("target ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("plan does not match registry: {0}")]
    Mismatch(String),
}

impl From<ReparamError> for CompressError {
    fn from(e: ReparamError) -> Self {
        Self::Mismatch(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Factored,
    DenseRecovered,
    Reset,
}

impl LayerMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Factored => "factored",
            Self::DenseRecovered => "dense_recovered",
            Self::Reset => "reset",
        }
    }
}

/// Geometry of one target layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: LayerId,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub adapter_rank: usize,
}

pub fn registry_shapes(registry: &LayerRegistry) -> Vec<LayerShape> {
    registry
        .layers
        .iter()
        .map(|l| LayerShape { layer_id: l.layer_id, rows: l.out_features(), cols: l.in_features(), rank: l.rank(), adapter_rank: l.adapter_rank() })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanOptions {
    /// Restore the original dense weight of layers that cannot be stored
    /// more cheaply in factored form.
    pub reset_rule: bool,
    /// Account adapters as `(k+ρ)(m+n)` in the size ratio.
    pub count_adapters: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { reset_rule: true, count_adapters: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: LayerId,
    pub kept: Vec<usize>,
    pub mode: LayerMode,
    pub stored_params: usize,
}

/// Kept singular values and storage mode per layer for one target ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    /// Length of the pruned prefix of the global ranking.
    pub pruned: usize,
    pub options: PlanOptions,
    pub layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    /// Parameters held by target layers after materialization, adapters and
    /// dense layers included.
    pub fn stored_params(&self) -> usize {
        self.layers.iter().map(|l| l.stored_params).sum()
    }

    pub fn mode_counts(&self) -> [(LayerMode, usize); 3] {
        [LayerMode::Factored, LayerMode::DenseRecovered, LayerMode::Reset].map(|m| (m, self.layers.iter().filter(|l| l.mode == m).count()))
    }
}

/// All entries ordered by `(score, layer_id, index)`, lowest first.
pub fn global_ranking(scores: &ScoreMap) -> Vec<(LayerId, usize)> {
    let mut all: Vec<(f64, LayerId, usize)> = scores.layers.iter().flat_map(|l| l.scores.iter().enumerate().map(move |(i, &s)| (s, l.layer_id, i))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|(_, id, i)| (id, i)).collect()
}

fn kept_counts(ranking: &[(LayerId, usize)], shapes: &[LayerShape], slot: &HashMap<LayerId, usize>, j: usize) -> Vec<usize> {
    let mut k: Vec<usize> = shapes.iter().map(|s| s.rank).collect();
    for (id, _) in &ranking[..j] {
        k[slot[id]] -= 1;
    }
    k
}

fn ratio_for(shapes: &[LayerShape], kept: &[usize], count_adapters: bool) -> f64 {
    let mut num = 0usize;
    let mut den = 0usize;
    for (s, &k) in shapes.iter().zip(kept) {
        num += layer_cost(s.rows, s.cols, k, count_adapters.then_some(s.adapter_rank));
        den += s.rows * s.cols;
    }
    num as f64 / den as f64
}

/// Size ratio after pruning the first `j` entries of `ranking`.
pub fn ratio_after_pruning(ranking: &[(LayerId, usize)], shapes: &[LayerShape], j: usize, count_adapters: bool) -> f64 {
    let slot: HashMap<LayerId, usize> = shapes.iter().enumerate().map(|(i, s)| (s.layer_id, i)).collect();
    ratio_for(shapes, &kept_counts(ranking, shapes, &slot, j), count_adapters)
}

/// Smallest prefix of the global ranking whose removal brings the size
/// ratio to at most `target`, found by binary search over the prefix length.
pub fn plan_for_ratio(scores: &ScoreMap, shapes: &[LayerShape], target: f64, options: PlanOptions) -> Result<CompressionPlan, CompressError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(CompressError::InvalidRatio(target));
    }
    if scores.layers.len() != shapes.len() || scores.layers.iter().zip(shapes).any(|(l, s)| l.layer_id != s.layer_id || l.scores.len() != s.rank) {
        return Err(CompressError::Mismatch("score map and layer shapes disagree".into()));
    }
    let ranking = global_ranking(scores);
    let slot: HashMap<LayerId, usize> = shapes.iter().enumerate().map(|(i, s)| (s.layer_id, i)).collect();
    let ratio = |j: usize| ratio_for(shapes, &kept_counts(&ranking, shapes, &slot, j), options.count_adapters);

    let total = ranking.len();
    let floor = ratio(total);
    if floor > target {
        return Err(CompressError::InfeasibleRatio { target, floor });
    }
    let (mut lo, mut hi) = (0usize, total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ratio(mid) <= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let j = lo;

    let mut pruned: Vec<Vec<bool>> = shapes.iter().map(|s| vec![false; s.rank]).collect();
    for (id, i) in &ranking[..j] {
        pruned[slot[id]][*i] = true;
    }
    let layers = shapes
        .iter()
        .zip(&pruned)
        .map(|(s, p)| {
            let kept: Vec<usize> = (0..s.rank).filter(|&i| !p[i]).collect();
            let k = kept.len();
            let accounted = if options.count_adapters { k + s.adapter_rank } else { k };
            let dense = s.rows * s.cols;
            if accounted * (s.rows + s.cols) < dense {
                LayerPlan { layer_id: s.layer_id, kept, mode: LayerMode::Factored, stored_params: (k + s.adapter_rank) * (s.rows + s.cols) }
            } else if options.reset_rule {
                LayerPlan { layer_id: s.layer_id, kept: (0..s.rank).collect(), mode: LayerMode::Reset, stored_params: dense }
            } else {
                LayerPlan { layer_id: s.layer_id, kept, mode: LayerMode::DenseRecovered, stored_params: dense }
            }
        })
        .collect();
    Ok(CompressionPlan { target_ratio: target, achieved_ratio: ratio(j), pruned: j, options, layers })
}

/// Singular values as scores; the magnitude baseline.
pub fn magnitude_score_map(registry: &LayerRegistry) -> ScoreMap {
    ScoreMap {
        layers: registry.layers.iter().map(|l| LayerScores { layer_id: l.layer_id, scores: l.factors.s.clone(), pruned: vec![false; l.rank()] }).collect(),
    }
}

fn check_plan(registry: &LayerRegistry, plan: &CompressionPlan) -> Result<(), CompressError> {
    if plan.layers.len() != registry.layers.len() {
        return Err(CompressError::Mismatch(format!("{} layer plans for {} layers", plan.layers.len(), registry.layers.len())));
    }
    for (p, l) in plan.layers.iter().zip(&registry.layers) {
        if p.layer_id != l.layer_id || p.kept.iter().any(|&i| i >= l.rank()) {
            return Err(CompressError::Mismatch(format!("plan entry {} does not fit {}", p.layer_id, l.layer_id)));
        }
    }
    Ok(())
}

/// Evaluates `plan` through mask overrides; `β` is left untouched.
pub fn apply_plan(registry: &mut LayerRegistry, plan: &CompressionPlan) -> Result<(), CompressError> {
    check_plan(registry, plan)?;
    let overrides = plan
        .layers
        .iter()
        .zip(&registry.layers)
        .map(|(p, l)| {
            let mut mask = vec![0.0; l.rank()];
            for &i in &p.kept {
                mask[i] = 1.0;
            }
            LayerOverride { mask, use_adapter: p.mode != LayerMode::Reset, original_weight: p.mode == LayerMode::Reset }
        })
        .collect();
    registry.set_overrides(overrides)?;
    Ok(())
}

/// Undoes [`apply_plan`]; a no-op when no plan is applied.
pub fn restore(registry: &mut LayerRegistry) {
    registry.clear_overrides();
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompressedWeight {
    /// `y = P·(Q·x) (+ A·(Bᵀ·x))`; `P` is `m×K`, `Q` is `K×n`. The adapter
    /// pair is kept apart only when not merged, with its scale folded into `A`.
    Factored {
        p: Tensor,
        q: Tensor,
        adapter: Option<(Tensor, Tensor)>,
    },
    Dense(Tensor),
}

impl CompressedWeight {
    pub fn stored_params(&self) -> usize {
        match self {
            Self::Factored { p, q, adapter } => p.len() + q.len() + adapter.as_ref().map_or(0, |(a, b)| a.len() + b.len()),
            Self::Dense(w) => w.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub layer_id: LayerId,
    pub weight: CompressedWeight,
    pub bias: Tensor,
    /// `None` for projections that were never targets.
    pub mode: Option<LayerMode>,
}

/// A deployable model: frozen host parameters plus one realized weight per
/// block projection, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub config: TransformerConfig,
    pub backbone: Backbone,
    pub layers: Vec<CompressedLayer>,
    pub plan: CompressionPlan,
    pub merged: bool,
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ka, kb) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(m * (ka + kb));
    for i in 0..m {
        out.extend_from_slice(&a.data()[i * ka..(i + 1) * ka]);
        out.extend_from_slice(&b.data()[i * kb..(i + 1) * kb]);
    }
    Tensor::matrix(m, ka + kb, out).expect("concatenated shape")
}

fn vcat(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.cols();
    let mut out = a.data().to_vec();
    out.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), n, out).expect("stacked shape")
}

/// Discards pruned triples and realizes every target layer per its plan mode.
pub fn materialize(registry: &LayerRegistry, plan: &CompressionPlan, merge_adapters: bool) -> Result<CompressedModel, CompressError> {
    check_plan(registry, plan)?;
    let config = registry.config().clone();
    let mut layers: Vec<CompressedLayer> = config
        .layer_ids()
        .into_iter()
        .zip(&registry.base.linears)
        .map(|(id, lin)| CompressedLayer { layer_id: id, weight: CompressedWeight::Dense(lin.weight.clone()), bias: lin.bias.clone(), mode: None })
        .collect();
    for (p, l) in plan.layers.iter().zip(&registry.layers) {
        let slot = config.layer_slot(l.layer_id);
        let (m, n, k) = (l.out_features(), l.in_features(), p.kept.len());
        let weight = match p.mode {
            LayerMode::Reset => CompressedWeight::Dense(registry.base.linears[slot].weight.clone()),
            LayerMode::DenseRecovered => {
                let mut mask = vec![0.0; l.rank()];
                p.kept.iter().for_each(|&i| mask[i] = 1.0);
                CompressedWeight::Dense(l.effective_weight(&mask, true))
            }
            LayerMode::Factored => {
                let r = l.rank();
                let (u, v) = (l.factors.u.data(), l.factors.v.data());
                let mut us = Vec::with_capacity(m * k);
                for i in 0..m {
                    us.extend(p.kept.iter().map(|&c| u[i * r + c] * l.factors.s[c]));
                }
                let mut vt = Vec::with_capacity(k * n);
                for &c in &p.kept {
                    vt.extend((0..n).map(|j| v[j * r + c]));
                }
                let us = Tensor::matrix(m, k, us).expect("m×k");
                let vt = Tensor::matrix(k, n, vt).expect("k×n");
                let rho = l.adapter_rank();
                let sa = Tensor::matrix(m, rho, l.adapter_a.data().iter().map(|a| a * l.adapter_scale).collect()).expect("m×ρ");
                let bt = l.adapter_b.transpose();
                if rho == 0 {
                    CompressedWeight::Factored { p: us, q: vt, adapter: None }
                } else if merge_adapters {
                    CompressedWeight::Factored { p: hcat(&us, &sa), q: vcat(&vt, &bt), adapter: None }
                } else {
                    CompressedWeight::Factored { p: us, q: vt, adapter: Some((sa, bt)) }
                }
            }
        };
        if weight.stored_params() != p.stored_params {
            return Err(CompressError::Mismatch(format!("{} stores {} parameters, plan says {}", l.layer_id, weight.stored_params(), p.stored_params)));
        }
        layers[slot] = CompressedLayer { layer_id: l.layer_id, weight, bias: registry.base.linears[slot].bias.clone(), mode: Some(p.mode) };
    }
    Ok(CompressedModel { config, backbone: registry.base.backbone.clone(), layers, plan: plan.clone(), merged: merge_adapters })
}

impl CompressedModel {
    /// Parameters of all target layers as stored.
    pub fn stored_target_params(&self) -> usize {
        self.layers.iter().filter(|l| l.mode.is_some()).map(|l| l.weight.stored_params()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        let backbone: usize = self.backbone.named_tensors().iter().map(|(_, t)| t.len()).sum();
        backbone + self.layers.iter().map(|l| l.weight.stored_params() + l.bias.len()).sum::<usize>()
    }

    /// Reassembles the dense equivalent of one untouched projection.
    pub fn linear(&self, slot: usize) -> Option<Linear> {
        match &self.layers[slot].weight {
            CompressedWeight::Dense(w) => Some(Linear { weight: w.clone(), bias: self.layers[slot].bias.clone() }),
            CompressedWeight::Factored { .. } => None,
        }
    }
}

enum BoundWeight {
    Factored { p: Var, q: Var, adapter: Option<(Var, Var)> },
    Dense(Var),
}

struct CompressedProjections {
    layers: Vec<(BoundWeight, Var)>,
    config: TransformerConfig,
}

impl Projections for CompressedProjections {
    fn project(&mut self, g: &mut Graph, id: LayerId, x: Var) -> Result<Var, AutodiffError> {
        let (w, b) = &self.layers[self.config.layer_slot(id)];
        match *w {
            BoundWeight::Dense(w) => dense_projection(g, x, w, *b),
            BoundWeight::Factored { p, q, adapter } => {
                let h = g.matmul_nt(x, q)?;
                let mut y = g.matmul_nt(h, p)?;
                if let Some((a, bt)) = adapter {
                    let t = g.matmul_nt(x, bt)?;
                    let t = g.matmul_nt(t, a)?;
                    y = g.add(y, t)?;
                }
                g.add_bias(y, *b)
            }
        }
    }
}

impl LanguageModel for CompressedModel {
    fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn logits(&self, g: &mut Graph, tokens: &[usize], batch: usize, seq: usize) -> Result<Var, LmError> {
        let backbone = self.backbone.bind(g, false);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = match &l.weight {
                    CompressedWeight::Dense(w) => BoundWeight::Dense(g.constant(w.clone())),
                    CompressedWeight::Factored { p, q, adapter } => BoundWeight::Factored {
                        p: g.constant(p.clone()),
                        q: g.constant(q.clone()),
                        adapter: adapter.as_ref().map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone()))),
                    },
                };
                (w, g.constant(l.bias.clone()))
            })
            .collect();
        let mut proj = CompressedProjections { layers, config: self.config.clone() };
        forward(g, &self.config, &backbone, tokens, batch, seq, &mut proj)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::lm::{Batch, LayerKind, Transformer};
    use crate::reparam::{reparametrize, ReparamConfig};

    fn shape(block: usize, kind: LayerKind, rows: usize, cols: usize) -> LayerShape {
        LayerShape { layer_id: LayerId::new(block, kind), rows, cols, rank: rows.min(cols), adapter_rank: 2 }
    }

    fn random_scores(shapes: &[LayerShape], rng: &mut ChaCha8Rng) -> ScoreMap {
        ScoreMap {
            layers: shapes
                .iter()
                .map(|s| {
                    let scores: Vec<f64> =
                        (0..s.rank).map(|_| if rng.gen_bool(0.4) { -(rng.gen_range(1..6) as f64) } else { rng.gen_range(0.01..1.0) }).collect();
                    LayerScores { layer_id: s.layer_id, pruned: scores.iter().map(|&x| x < 0.0).collect(), scores }
                })
                .collect(),
        }
    }

    fn toy_shapes() -> Vec<LayerShape> {
        vec![shape(0, LayerKind::AttnQ, 6, 4), shape(0, LayerKind::AttnK, 3, 3)]
    }

    fn tiny_registry(seed: u64) -> LayerRegistry {
        let cfg =
            TransformerConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 12, max_seq_len: 6, vocab_size: 7, target_layer_kinds: LayerKind::ALL.to_vec() };
        let mut m = Transformer::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let mut reg = reparametrize(&m, &ReparamConfig { seed, ..ReparamConfig::default() }).unwrap();
        for l in &mut reg.layers {
            let (r, nb) = (l.rank(), l.adapter_b.len());
            l.beta = Tensor::vector((0..r).map(|_| rng.gen_range(-1.0..1.0)).collect());
            l.adapter_b = Tensor::new(l.adapter_b.shape().to_vec(), (0..nb).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        }
        reg
    }

    fn learned_scores(reg: &LayerRegistry, rng: &mut ChaCha8Rng) -> ScoreMap {
        let shapes = registry_shapes(reg);
        random_scores(&shapes, rng)
    }

    fn logits_of(model: &dyn LanguageModel, batch: &Batch) -> Vec<f64> {
        let mut g = Graph::new();
        let v = model.logits(&mut g, &batch.inputs(), batch.batch_size, batch.seq_len).unwrap();
        g.value(v).data().to_vec()
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch::new((0..18).map(|_| rng.gen_range(0..7)).collect(), 3, 5).unwrap()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn ranking_examples() {
        let l0 = LayerId::new(0, LayerKind::AttnQ);
        let l1 = LayerId::new(0, LayerKind::AttnK);
        let map = ScoreMap {
            layers: vec![
                LayerScores { layer_id: l0, scores: vec![-5.0, 0.3], pruned: vec![true, false] },
                LayerScores { layer_id: l1, scores: vec![-2.0, 0.1], pruned: vec![true, false] },
            ],
        };
        assert_eq!(global_ranking(&map), vec![(l0, 0), (l1, 0), (l1, 1), (l0, 1)]);
        let flat = ScoreMap {
            layers: vec![
                LayerScores { layer_id: l1, scores: vec![1.0, 1.0], pruned: vec![false; 2] },
                LayerScores { layer_id: l0, scores: vec![1.0], pruned: vec![false] },
            ],
        };
        assert_eq!(global_ranking(&flat), vec![(l0, 0), (l1, 0), (l1, 1)]);
    }

    proptest! {
        #[test]
        fn ranking_matches_stable_sort(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes = toy_shapes();
            let map = random_scores(&shapes, &mut rng);
            // entries listed in (layer_id, index) order, then stably sorted by score
            let mut entries: Vec<(LayerId, usize, f64)> = Vec::new();
            let mut layers = map.layers.clone();
            layers.sort_by_key(|l| l.layer_id);
            for l in &layers {
                for (i, s) in l.scores.iter().enumerate() {
                    entries.push((l.layer_id, i, *s));
                }
            }
            entries.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
            let oracle: Vec<(LayerId, usize)> = entries.into_iter().map(|(id, i, _)| (id, i)).collect();
            prop_assert_eq!(global_ranking(&map), oracle);
        }

        #[test]
        fn plan_matches_brute_force(seed in 0u64..200, target in 0.01f64..=1.0, reset in any::<bool>(), adapters in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes = toy_shapes();
            let map = random_scores(&shapes, &mut rng);
            let ranking = global_ranking(&map);
            let options = PlanOptions { reset_rule: reset, count_adapters: adapters };
            let ratios: Vec<f64> = (0..=ranking.len()).map(|j| ratio_after_pruning(&ranking, &shapes, j, adapters)).collect();
            for w in ratios.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            match ratios.iter().position(|&r| r <= target) {
                None => {
                    let floor = *ratios.last().unwrap();
                    let is_infeasible = matches!(plan_for_ratio(&map, &shapes, target, options), Err(CompressError::InfeasibleRatio { .. }));
                    prop_assert!(is_infeasible, "expected infeasible for floor {}", floor);
                }
                Some(j) => {
                    let plan = plan_for_ratio(&map, &shapes, target, options).unwrap();
                    prop_assert_eq!(plan.pruned, j);
                    prop_assert!(plan.achieved_ratio <= target);
                    prop_assert_eq!(plan.achieved_ratio, ratios[j]);
                    if j > 0 {
                        prop_assert!(ratios[j - 1] > target);
                    }
                    for (lp, s) in plan.layers.iter().zip(&shapes) {
                        let accounted = |k: usize| if adapters { k + s.adapter_rank } else { k };
                        match lp.mode {
                            LayerMode::Factored => prop_assert!(accounted(lp.kept.len()) * (s.rows + s.cols) < s.rows * s.cols),
                            LayerMode::Reset => prop_assert!(reset && lp.kept.len() == s.rank),
                            LayerMode::DenseRecovered => prop_assert!(!reset),
                        }
                        prop_assert!(lp.kept.windows(2).all(|w| w[0] < w[1]));
                    }
                }
            }
        }
    }

    #[test]
    fn single_4x4_layer() {
        let s = [LayerShape { layer_id: LayerId::new(0, LayerKind::AttnQ), rows: 4, cols: 4, rank: 4, adapter_rank: 0 }];
        let costs: Vec<f64> = (0..=4).map(|k| layer_cost(4, 4, k, None) as f64 / 16.0).collect();
        assert_eq!(costs, vec![0.0, 0.5, 1.0, 1.0, 1.0]);
        let map = ScoreMap { layers: vec![LayerScores { layer_id: s[0].layer_id, scores: vec![0.9, 0.1, 0.5, 0.3], pruned: vec![false; 4] }] };
        let plan = plan_for_ratio(&map, &s, 0.5, PlanOptions::default()).unwrap();
        assert_eq!(plan.achieved_ratio, 0.5);
        assert_eq!(plan.layers[0].kept, vec![0]);
        assert_eq!(plan.layers[0].mode, LayerMode::Factored);
        let full = plan_for_ratio(&map, &s, 1.0, PlanOptions::default()).unwrap();
        assert_eq!(full.pruned, 0);
        assert_eq!(full.layers[0].mode, LayerMode::Reset);
        assert!(matches!(plan_for_ratio(&map, &s, 0.0, PlanOptions::default()), Err(CompressError::InvalidRatio(_))));
        assert!(matches!(plan_for_ratio(&map, &s, 1.5, PlanOptions::default()), Err(CompressError::InvalidRatio(_))));
        let counted = PlanOptions { count_adapters: true, ..PlanOptions::default() };
        let s2 = [LayerShape { adapter_rank: 1, ..s[0] }];
        assert!(matches!(plan_for_ratio(&map, &s2, 0.4, counted), Err(CompressError::InfeasibleRatio { floor, .. }) if floor == 0.5));
    }

    #[test]
    fn ratio_one_reproduces_base_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = tiny_registry(1);
        let scores = learned_scores(&reg, &mut rng);
        let plan = plan_for_ratio(&scores, &registry_shapes(&reg), 1.0, PlanOptions::default()).unwrap();
        assert!(plan.layers.iter().all(|l| l.mode == LayerMode::Reset));
        let b = batch(2);
        let base = logits_of(&reg.base, &b);
        let model = materialize(&reg, &plan, true).unwrap();
        assert_eq!(logits_of(&model, &b), base);
        apply_plan(&mut reg, &plan).unwrap();
        assert_eq!(logits_of(&reg, &b), base);
    }

    #[test]
    fn materialized_forward_matches_masked_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let mut reg = tiny_registry(10 + trial);
            let scores = learned_scores(&reg, &mut rng);
            let options = PlanOptions { reset_rule: trial % 2 == 0, count_adapters: trial % 3 == 0 };
            let shapes = registry_shapes(&reg);
            let floor = ratio_after_pruning(&global_ranking(&scores), &shapes, scores.len(), options.count_adapters);
            let target = rng.gen_range(floor.max(0.3)..=1.0);
            let plan = plan_for_ratio(&scores, &shapes, target, options).unwrap();
            let b = batch(trial);
            apply_plan(&mut reg, &plan).unwrap();
            let masked = logits_of(&reg, &b);
            restore(&mut reg);
            for merge in [false, true] {
                let model = materialize(&reg, &plan, merge).unwrap();
                assert_eq!(model.stored_target_params(), plan.stored_params());
                let got = logits_of(&model, &b);
                assert!(max_rel(&masked, &got) <= 1e-10, "trial {trial} merge {merge}: {:e}", max_rel(&masked, &got));
            }
        }
    }

    #[test]
    fn merged_layer_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reg = tiny_registry(4);
        let l = &reg.layers[4];
        let (m, n) = (l.out_features(), l.in_features());
        let kept = vec![0, 2, 3];
        let scores = ScoreMap {
            layers: reg
                .layers
                .iter()
                .map(|x| LayerScores {
                    layer_id: x.layer_id,
                    scores: (0..x.rank()).map(|i| if x.layer_id == l.layer_id && !kept.contains(&i) { -1.0 } else { 1.0 }).collect(),
                    pruned: vec![false; x.rank()],
                })
                .collect(),
        };
        let shapes = registry_shapes(&reg);
        let total: usize = shapes.iter().map(|s| s.rows * s.cols).sum();
        let j = l.rank() - kept.len();
        let ranking = global_ranking(&scores);
        let target = ratio_after_pruning(&ranking, &shapes, j, false);
        assert!(target < 1.0 && total > 0);
        let plan = plan_for_ratio(&scores, &shapes, target, PlanOptions::default()).unwrap();
        let model = materialize(&reg, &plan, true).unwrap();
        let slot = reg.config().layer_slot(l.layer_id);
        let CompressedWeight::Factored { p, q, adapter: None } = &model.layers[slot].weight else { panic!("expected merged factors") };
        assert_eq!(p.shape(), &[m, kept.len() + 4]);
        assert_eq!(q.shape(), &[kept.len() + 4, n]);
        assert_eq!(model.layers[slot].weight.stored_params(), (kept.len() + 4) * (m + n));
        // W_eff = U_k Σ_k V_kᵀ + s A Bᵀ applied to x, summed directly
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (u, v, s) = (l.factors.u.data(), l.factors.v.data(), &l.factors.s);
        let (a, b) = (l.adapter_a.data(), l.adapter_b.data());
        let r = l.rank();
        for i in 0..m {
            let mut expect = 0.0;
            for j in 0..n {
                let mut w = 0.0;
                for &c in &kept {
                    w += u[i * r + c] * s[c] * v[j * r + c];
                }
                for c in 0..4 {
                    w += l.adapter_scale * a[i * 4 + c] * b[j * 4 + c];
                }
                expect += w * x[j];
            }
            let k = p.cols();
            let got: f64 = (0..k).map(|c| p.data()[i * k + c] * (0..n).map(|j| q.data()[c * n + j] * x[j]).sum::<f64>()).sum();
            assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn apply_and_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = tiny_registry(5);
        let initial = reg.clone();
        let b = batch(5);
        let before = logits_of(&reg, &b);
        restore(&mut reg);
        assert_eq!(reg, initial);
        let scores = learned_scores(&reg, &mut rng);
        let shapes = registry_shapes(&reg);
        for target in [0.5, 0.8, 0.3] {
            let plan = plan_for_ratio(&scores, &shapes, target, PlanOptions::default()).unwrap();
            apply_plan(&mut reg, &plan).unwrap();
            assert_ne!(logits_of(&reg, &b), before);
            restore(&mut reg);
            assert_eq!(logits_of(&reg, &b), before);
        }
        assert_eq!(reg, initial);
    }

    #[test]
    fn magnitude_map_prunes_smallest_first() {
        let mut reg = tiny_registry(6);
        reg.layers.truncate(1);
        let reg = LayerRegistry::from_parts(reg.base.clone(), reg.layers, reg.config.clone()).unwrap();
        let map = magnitude_score_map(&reg);
        assert_eq!(map.layers[0].scores, reg.layers[0].factors.s);
        let plan = plan_for_ratio(&map, &registry_shapes(&reg), 0.3, PlanOptions::default()).unwrap();
        let k = plan.layers[0].kept.len();
        assert!(k > 0);
        assert_eq!(plan.layers[0].kept, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn plan_serializes_to_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = toy_shapes();
        let plan = plan_for_ratio(&random_scores(&shapes, &mut rng), &shapes, 0.7, PlanOptions::default()).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"mode\""));
        let back: CompressionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut reg = tiny_registry(8);
        let scores = learned_scores(&reg, &mut rng);
        let mut plan = plan_for_ratio(&scores, &registry_shapes(&reg), 0.6, PlanOptions::default()).unwrap();
        plan.layers.pop();
        assert!(matches!(materialize(&reg, &plan, false), Err(CompressError::Mismatch(_))));
        assert!(matches!(apply_plan(&mut reg, &plan), Err(CompressError::Mismatch(_))));
    }
}
