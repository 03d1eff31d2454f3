//! SVD reparametrization of target projections.
//!
//! Each target weight `W` becomes `U · M(β) · Σ · Vᵀ + (α/ρ) · A · Bᵀ` where
//! `U, Σ, V` come from the compact SVD of `W` and stay frozen, `M(β)` is the
//! diagonal 0/1 mask `β > 0`, and `A·Bᵀ` is a rank-ρ adapter with `B = 0` at
//! construction. With every `β > 0` the layer reproduces `W` up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::linalg::{svd, LinalgError, SvdFactors};
use crate::lm::{dense_projection, forward, BoundBackbone, LanguageModel, LayerId, LmError, Projections, Transformer, TransformerConfig};

#[derive(Debug, thiserror::Error)]
pub enum ReparamError {
    #[error("SVD of {layer} failed: {source}")]
    Svd { layer: LayerId, source: LinalgError },
    #[error("no target layer kinds selected")]
    NoTargets,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 2.0, dropout: 0.0 }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReparamConfig {
    pub adapter: AdapterConfig,
    /// Initial value of every mask parameter.
    pub mask_scale: f64,
    pub seed: u64,
}

impl Default for ReparamConfig {
    fn default() -> Self {
        Self { adapter: AdapterConfig::default(), mask_scale: 0.02, seed: 0 }
    }
}

/// Thresholded masks: `1` for `β > 0`, `0` for `β ≤ 0`.
pub fn mask_values(beta: &[f64]) -> Vec<f64> {
    beta.iter().map(|&b| if b > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// One reparametrized projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSvdLayer {
    pub layer_id: LayerId,
    pub factors: SvdFactors,
    pub beta: Tensor,
    pub adapter_a: Tensor,
    pub adapter_b: Tensor,
    pub bias: Tensor,
    pub adapter_scale: f64,
}

impl MaskedSvdLayer {
    pub fn out_features(&self) -> usize {
        self.factors.rows()
    }

    pub fn in_features(&self) -> usize {
        self.factors.cols()
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn adapter_rank(&self) -> usize {
        self.adapter_a.cols()
    }

    pub fn masks(&self) -> Vec<f64> {
        mask_values(self.beta.data())
    }

    pub fn active_count(&self) -> usize {
        self.beta.data().iter().filter(|&&b| b > 0.0).count()
    }

    pub fn learnable_count(&self) -> usize {
        self.beta.len() + self.adapter_a.len() + self.adapter_b.len()
    }

    /// `y = U·diag(mask∘σ)·Vᵀ·x + (α/ρ)·A·(Bᵀ·x) + b` for one input vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_with_mask(x, &self.masks(), true)
    }

    pub fn apply_with_mask(&self, x: &[f64], mask: &[f64], use_adapter: bool) -> Vec<f64> {
        let (m, n, r) = (self.out_features(), self.in_features(), self.rank());
        assert_eq!(x.len(), n, "input length");
        let (u, v) = (self.factors.u.data(), self.factors.v.data());
        let mut coeff = vec![0.0; r];
        for k in 0..r {
            if mask[k] == 0.0 {
                continue;
            }
            let dot: f64 = (0..n).map(|j| v[j * r + k] * x[j]).sum();
            coeff[k] = mask[k] * self.factors.s[k] * dot;
        }
        let mut y = self.bias.data().to_vec();
        for i in 0..m {
            y[i] += (0..r).map(|k| u[i * r + k] * coeff[k]).sum::<f64>();
        }
        if use_adapter {
            let rho = self.adapter_rank();
            let (a, b) = (self.adapter_a.data(), self.adapter_b.data());
            let t: Vec<f64> = (0..rho).map(|k| (0..n).map(|j| b[j * rho + k] * x[j]).sum()).collect();
            for i in 0..m {
                y[i] += self.adapter_scale * (0..rho).map(|k| a[i * rho + k] * t[k]).sum::<f64>();
            }
        }
        y
    }

    /// Dense `U·diag(mask∘σ)·Vᵀ (+ (α/ρ)·A·Bᵀ)`.
    pub fn effective_weight(&self, mask: &[f64], use_adapter: bool) -> Tensor {
        let weights: Vec<f64> = mask.iter().zip(&self.factors.s).map(|(m, s)| m * s).collect();
        let mut w = self.factors.reconstruct_scaled(&weights);
        if use_adapter && self.adapter_rank() > 0 {
            let (m, n, rho) = (self.out_features(), self.in_features(), self.adapter_rank());
            let (a, b) = (self.adapter_a.data(), self.adapter_b.data());
            let d = w.data_mut();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..rho {
                        acc += a[i * rho + k] * b[j * rho + k];
                    }
                    d[i * n + j] += self.adapter_scale * acc;
                }
            }
        }
        w
    }
}

/// Temporary per-layer replacement of the learned masks, used to evaluate
/// a compression plan without touching `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOverride {
    pub mask: Vec<f64>,
    pub use_adapter: bool,
    /// Use the original dense weight instead of the factors.
    pub original_weight: bool,
}

/// Reparametrized model: frozen host parameters plus one masked layer per
/// target projection, in block-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRegistry {
    pub base: Transformer,
    pub layers: Vec<MaskedSvdLayer>,
    pub config: ReparamConfig,
    overrides: Option<Vec<LayerOverride>>,
    slot_to_layer: Vec<Option<usize>>,
}

/// Builds the registry: SVD of every target weight, `β = mask_scale`,
/// `A ~ U(−1/√n, 1/√n)`, `B = 0`.
pub fn reparametrize(model: &Transformer, config: &ReparamConfig) -> Result<LayerRegistry, ReparamError> {
    let targets = model.config.target_ids();
    if targets.is_empty() {
        return Err(ReparamError::NoTargets);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rho = config.adapter.rank;
    let mut layers = Vec::with_capacity(targets.len());
    for id in targets {
        let lin = model.linear(id);
        let factors = svd(&lin.weight).map_err(|source| ReparamError::Svd { layer: id, source })?;
        let (m, n, r) = (factors.rows(), factors.cols(), factors.rank());
        let bound = 1.0 / (n as f64).sqrt();
        let a: Vec<f64> = (0..m * rho).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(MaskedSvdLayer {
            layer_id: id,
            factors,
            beta: Tensor::filled(&[r], config.mask_scale),
            adapter_a: Tensor::new(vec![m, rho], a).expect("m×ρ"),
            adapter_b: Tensor::zeros(&[n, rho]),
            bias: lin.bias.clone(),
            adapter_scale: config.adapter.scale(),
        });
    }
    LayerRegistry::from_parts(model.clone(), layers, config.clone())
}

impl LayerRegistry {
    pub fn from_parts(base: Transformer, layers: Vec<MaskedSvdLayer>, config: ReparamConfig) -> Result<Self, ReparamError> {
        let mut slot_to_layer = vec![None; base.config.layer_ids().len()];
        for (i, l) in layers.iter().enumerate() {
            let slot = base.config.layer_slot(l.layer_id);
            if slot >= slot_to_layer.len() || slot_to_layer[slot].is_some() {
                return Err(ReparamError::Invalid(format!("{} registered twice or out of range", l.layer_id)));
            }
            let (m, n) = base.config.layer_shape(l.layer_id.kind);
            if l.out_features() != m || l.in_features() != n {
                return Err(ReparamError::Invalid(format!("{} has factors for {}×{}", l.layer_id, l.out_features(), l.in_features())));
            }
            slot_to_layer[slot] = Some(i);
        }
        Ok(Self { base, layers, config, overrides: None, slot_to_layer })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.base.config
    }

    pub fn layer(&self, id: LayerId) -> Option<&MaskedSvdLayer> {
        self.slot_to_layer.get(self.base.config.layer_slot(id)).copied().flatten().map(|i| &self.layers[i])
    }

    /// Σ_l (r_l + ρ·(m_l + n_l)).
    pub fn learnable_parameter_count(&self) -> usize {
        self.layers.iter().map(MaskedSvdLayer::learnable_count).sum()
    }

    pub fn overrides(&self) -> Option<&[LayerOverride]> {
        self.overrides.as_deref()
    }

    /// Replaces every layer's masks until [`LayerRegistry::clear_overrides`].
    pub fn set_overrides(&mut self, overrides: Vec<LayerOverride>) -> Result<(), ReparamError> {
        if overrides.len() != self.layers.len() {
            return Err(ReparamError::Invalid(format!("{} overrides for {} layers", overrides.len(), self.layers.len())));
        }
        for (o, l) in overrides.iter().zip(&self.layers) {
            if o.mask.len() != l.rank() {
                return Err(ReparamError::Invalid(format!("override for {} has {} masks, rank is {}", l.layer_id, o.mask.len(), l.rank())));
            }
        }
        self.overrides = Some(overrides);
        Ok(())
    }

    pub fn clear_overrides(&mut self) -> Option<Vec<LayerOverride>> {
        self.overrides.take()
    }

    /// Binds the registry on `g`. Masks and adapters become trainable leaves
    /// as requested; everything else is constant. `dropout` supplies the RNG
    /// for adapter-input dropout (training only).
    pub fn bind(&self, g: &mut Graph, train_masks: bool, train_adapters: bool, dropout: Option<&mut ChaCha8Rng>) -> (BoundBackbone, RegistryProjections) {
        let backbone = self.base.backbone.bind(g, false);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let ov = self.overrides.as_ref().map(|o| &o[i]);
            let beta = g.leaf(l.beta.clone(), train_masks && ov.is_none());
            let adapter = if ov.is_none_or(|o| o.use_adapter) {
                Some((g.leaf(l.adapter_a.clone(), train_adapters), g.leaf(l.adapter_b.clone(), train_adapters)))
            } else {
                None
            };
            let mask = match ov {
                Some(o) => MaskSource::Fixed(g.constant(Tensor::vector(o.mask.clone()))),
                None => MaskSource::Threshold,
            };
            layers.push(BoundLayer {
                beta,
                mask,
                adapter,
                original: ov.is_some_and(|o| o.original_weight),
                u: g.constant(l.factors.u.clone()),
                v: g.constant(l.factors.v.clone()),
                sigma: g.constant(Tensor::vector(l.factors.s.clone())),
                bias: g.constant(l.bias.clone()),
                adapter_scale: l.adapter_scale,
            });
        }
        let dense = self.base.linears.iter().map(|lin| (g.constant(lin.weight.clone()), g.constant(lin.bias.clone()))).collect();
        let dropout = dropout.filter(|_| self.config.adapter.dropout > 0.0).map(|rng| (rng.clone(), self.config.adapter.dropout));
        let projections = RegistryProjections { layers, dense, slot_to_layer: self.slot_to_layer.clone(), config: self.base.config.clone(), dropout };
        (backbone, projections)
    }
}

enum MaskSource {
    Threshold,
    Fixed(Var),
}

/// Graph handles for one masked layer.
pub struct BoundLayer {
    pub beta: Var,
    mask: MaskSource,
    pub adapter: Option<(Var, Var)>,
    original: bool,
    pub u: Var,
    pub v: Var,
    pub sigma: Var,
    pub bias: Var,
    adapter_scale: f64,
}

impl BoundLayer {
    /// Makes the model forward use `mask` in place of the thresholded `β`.
    pub fn replace_mask(&mut self, mask: Var) {
        self.mask = MaskSource::Fixed(mask);
    }

    /// Forward with an explicit mask node (e.g. a leaf standing in for the
    /// thresholded `β`).
    pub fn forward_with_mask(&self, g: &mut Graph, x: Var, mask: Var, dropout: Option<Vec<f64>>) -> Result<Var, AutodiffError> {
        let h = g.matmul(x, self.v)?;
        let s = g.mul(mask, self.sigma)?;
        let h = g.mul_cols(h, s)?;
        let mut y = g.matmul_nt(h, self.u)?;
        if let Some((a, b)) = self.adapter {
            let xin = match dropout {
                Some(m) => g.dropout(x, m)?,
                None => x,
            };
            let t = g.matmul(xin, b)?;
            let t = g.matmul_nt(t, a)?;
            let t = g.scale(t, self.adapter_scale);
            y = g.add(y, t)?;
        }
        g.add_bias(y, self.bias)
    }
}

/// [`Projections`] over a bound registry.
pub struct RegistryProjections {
    pub layers: Vec<BoundLayer>,
    dense: Vec<(Var, Var)>,
    slot_to_layer: Vec<Option<usize>>,
    config: TransformerConfig,
    dropout: Option<(ChaCha8Rng, f64)>,
}

impl RegistryProjections {
    /// The dropout RNG after use, so callers can carry it across steps.
    pub fn take_dropout_rng(&mut self) -> Option<ChaCha8Rng> {
        self.dropout.take().map(|(r, _)| r)
    }
}

impl Projections for RegistryProjections {
    fn project(&mut self, g: &mut Graph, id: LayerId, x: Var) -> Result<Var, AutodiffError> {
        let slot = self.config.layer_slot(id);
        let Some(idx) = self.slot_to_layer[slot] else {
            let (w, b) = self.dense[slot];
            return dense_projection(g, x, w, b);
        };
        let layer = &self.layers[idx];
        if layer.original {
            let (w, b) = self.dense[slot];
            return dense_projection(g, x, w, b);
        }
        let mask = match layer.mask {
            MaskSource::Threshold => g.threshold(layer.beta),
            MaskSource::Fixed(m) => m,
        };
        let dropout = match (&mut self.dropout, layer.adapter) {
            (Some((rng, p)), Some(_)) => {
                let keep = 1.0 / (1.0 - *p);
                Some((0..g.value(x).len()).map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep }).collect())
            }
            _ => None,
        };
        self.layers[idx].forward_with_mask(g, x, mask, dropout)
    }
}

impl LanguageModel for LayerRegistry {
    fn config(&self) -> &TransformerConfig {
        &self.base.config
    }

    fn logits(&self, g: &mut Graph, tokens: &[usize], batch: usize, seq: usize) -> Result<Var, LmError> {
        let (backbone, mut proj) = self.bind(g, false, false, None);
        forward(g, &self.base.config, &backbone, tokens, batch, seq, &mut proj)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::lm::{nll_loss, Batch, LayerKind, TransformerConfig};

    fn tiny(vocab: usize) -> TransformerConfig {
        TransformerConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 12, max_seq_len: 6, vocab_size: vocab, target_layer_kinds: LayerKind::ALL.to_vec() }
    }

    fn model(seed: u64) -> Transformer {
        let mut m = Transformer::init(tiny(7), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch::new((0..3 * 6).map(|_| rng.gen_range(0..7)).collect(), 3, 5).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mask_threshold_cases() {
        assert_eq!(mask_values(&[0.02, 0.0, -0.01]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_at_construction() {
        let m = model(1);
        let reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        for l in &reg.layers {
            assert!(l.beta.data().iter().all(|&b| b == 0.02));
            assert!(l.adapter_b.data().iter().all(|&b| b == 0.0));
            assert!(l.adapter_a.data().iter().any(|&a| a != 0.0));
        }
        let b = batch(2);
        let mut g = Graph::new();
        let lo = m.logits(&mut g, &b.inputs(), 3, 5).unwrap();
        let base = g.value(lo).data().to_vec();
        let mut g = Graph::new();
        let lr = reg.logits(&mut g, &b.inputs(), 3, 5).unwrap();
        let ours = g.value(lr).data().to_vec();
        let scale = base.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let worst = base.iter().zip(&ours).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(worst / scale <= 1e-8, "{worst:e}");
        assert!((nll_loss(&m, &b).unwrap() - nll_loss(&reg, &b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn parameter_bookkeeping_for_8x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::new(vec![8, 6], random_vec(&mut rng, 48)).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.rank(), 6);
        assert_eq!(f.u.len(), 48);
        assert_eq!(f.v.len(), 36);
    }

    #[test]
    fn learnable_count_matches_registry_walk() {
        let reg = reparametrize(&model(4), &ReparamConfig::default()).unwrap();
        let cfg = reg.config().clone();
        let rho = 4;
        let expected: usize = cfg
            .target_ids()
            .iter()
            .map(|id| {
                let (m, n) = cfg.layer_shape(id.kind);
                m.min(n) + rho * (m + n)
            })
            .sum();
        assert_eq!(reg.learnable_parameter_count(), expected);
    }

    #[test]
    fn only_selected_kinds_are_registered() {
        let mut m = model(5);
        m.config.target_layer_kinds = vec![LayerKind::AttnV, LayerKind::MlpDown];
        let reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        let ids: Vec<LayerId> = reg.layers.iter().map(|l| l.layer_id).collect();
        assert_eq!(
            ids,
            vec![
                LayerId::new(0, LayerKind::AttnV),
                LayerId::new(0, LayerKind::MlpDown),
                LayerId::new(1, LayerKind::AttnV),
                LayerId::new(1, LayerKind::MlpDown)
            ]
        );
        assert!(reg.layer(LayerId::new(0, LayerKind::AttnQ)).is_none());
        m.config.target_layer_kinds.clear();
        assert!(matches!(reparametrize(&m, &ReparamConfig::default()), Err(ReparamError::NoTargets)));
    }

    #[test]
    fn layer_forward_cases() {
        let m = model(6);
        let mut reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = LayerId::new(1, LayerKind::MlpUp);
        let lin = m.linear(id).clone();
        let layer = reg.layers.iter_mut().find(|l| l.layer_id == id).unwrap();
        let x = random_vec(&mut rng, layer.in_features());

        // all masks on, no adapter: original W·x + b
        let y = layer.apply(&x);
        for i in 0..lin.out_features() {
            let expect: f64 = (0..8).map(|j| lin.weight.data()[i * 8 + j] * x[j]).sum::<f64>() + lin.bias.data()[i];
            assert!((y[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }

        // all masks off: bias only
        layer.beta = Tensor::filled(&[layer.rank()], -0.5);
        assert_eq!(layer.apply(&x), layer.bias.data().to_vec());

        // random masks and adapter vs dense oracle
        layer.beta = Tensor::vector(random_vec(&mut rng, layer.rank()));
        layer.adapter_b = Tensor::new(vec![8, 4], random_vec(&mut rng, 32)).unwrap();
        let y = layer.apply(&x);
        let w = layer.effective_weight(&layer.masks(), true);
        for i in 0..12 {
            let expect: f64 = (0..8).map(|j| w.data()[i * 8 + j] * x[j]).sum::<f64>() + layer.bias.data()[i];
            assert!((y[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn graph_forward_matches_vector_forward() {
        let m = model(8);
        let mut reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &mut reg.layers {
            l.beta = Tensor::vector(random_vec(&mut rng, l.rank()));
            let (n, rho) = (l.in_features(), l.adapter_rank());
            l.adapter_b = Tensor::new(vec![n, rho], random_vec(&mut rng, n * rho)).unwrap();
        }
        let layer = &reg.layers[3];
        let x = random_vec(&mut rng, 2 * layer.in_features());
        let mut g = Graph::new();
        let (_, mut proj) = reg.bind(&mut g, true, true, None);
        let xv = g.constant(Tensor::matrix(2, layer.in_features(), x.clone()).unwrap());
        let y = proj.project(&mut g, layer.layer_id, xv).unwrap();
        let got = g.value(y).data().to_vec();
        for r in 0..2 {
            let expect = layer.apply(&x[r * 8..(r + 1) * 8]);
            for (a, b) in got[r * 8..(r + 1) * 8].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_gradient_equals_mask_leaf_gradient() {
        let m = model(10);
        let mut reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for l in &mut reg.layers {
            l.beta = Tensor::vector(random_vec(&mut rng, l.rank()));
        }
        let b = batch(12);
        let run = |leaf_masks: bool| {
            let mut g = Graph::new();
            let (backbone, mut proj) = reg.bind(&mut g, true, true, None);
            let mut mask_leaves = Vec::new();
            if leaf_masks {
                for (bl, l) in proj.layers.iter_mut().zip(&reg.layers) {
                    let leaf = g.param(Tensor::vector(l.masks()));
                    bl.replace_mask(leaf);
                    mask_leaves.push(leaf);
                }
            }
            let logits = forward(&mut g, reg.config(), &backbone, &b.inputs(), 3, 5, &mut proj).unwrap();
            let loss = g.cross_entropy(logits, Arc::new(b.labels())).unwrap();
            let grads = g.backward(loss).unwrap();
            let targets: Vec<Var> = if leaf_masks { mask_leaves } else { proj.layers.iter().map(|l| l.beta).collect() };
            targets.iter().zip(&reg.layers).map(|(&v, l)| grads.get_or_zeros(v, l.rank())).collect::<Vec<_>>()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn masks_depend_on_beta_only() {
        let m = model(13);
        let mut reg = reparametrize(&m, &ReparamConfig::default()).unwrap();
        let before: Vec<Vec<f64>> = reg.layers.iter().map(|l| l.masks()).collect();
        for l in &mut reg.layers {
            l.factors.s.iter_mut().for_each(|s| *s *= 3.7);
        }
        let after: Vec<Vec<f64>> = reg.layers.iter().map(|l| l.masks()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn overrides_validate_and_clear() {
        let mut reg = reparametrize(&model(14), &ReparamConfig::default()).unwrap();
        assert!(reg.set_overrides(vec![]).is_err());
        let ov: Vec<LayerOverride> =
            reg.layers.iter().map(|l| LayerOverride { mask: vec![0.0; l.rank()], use_adapter: false, original_weight: false }).collect();
        reg.set_overrides(ov.clone()).unwrap();
        assert_eq!(reg.overrides().unwrap(), ov.as_slice());
        assert_eq!(reg.clear_overrides(), Some(ov));
        assert!(reg.clear_overrides().is_none());
    }
}
