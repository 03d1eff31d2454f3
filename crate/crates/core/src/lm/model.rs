use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LmError;
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Linear projections inside a transformer block, in registry order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [LayerKind::AttnQ, LayerKind::AttnK, LayerKind::AttnV, LayerKind::AttnO, LayerKind::MlpUp, LayerKind::MlpDown];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::AttnQ => "attn_q",
            LayerKind::AttnK => "attn_k",
            LayerKind::AttnV => "attn_v",
            LayerKind::AttnO => "attn_o",
            LayerKind::MlpUp => "mlp_up",
            LayerKind::MlpDown => "mlp_down",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(block index, projection kind)`; ordering is block-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind)
    }
}

fn default_targets() -> Vec<LayerKind> {
    LayerKind::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_targets")]
    pub target_layer_kinds: Vec<LayerKind>,
}

impl TransformerConfig {
    /// Two pre-norm blocks, width 64, four heads, 256-wide MLP, context 128.
    pub fn desk(vocab_size: usize) -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, d_ff: 256, max_seq_len: 128, vocab_size, target_layer_kinds: default_targets() }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |msg: String| Err(LmError::InvalidConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("max_seq_len and vocab_size must be positive".into());
        }
        Ok(())
    }

    /// `(out, in)` dimensions of a projection.
    pub fn layer_shape(&self, kind: LayerKind) -> (usize, usize) {
        match kind {
            LayerKind::MlpUp => (self.d_ff, self.d_model),
            LayerKind::MlpDown => (self.d_model, self.d_ff),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Every projection in block-major order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.n_layers).flat_map(|b| LayerKind::ALL.map(|k| LayerId::new(b, k))).collect()
    }

    pub fn target_ids(&self) -> Vec<LayerId> {
        self.layer_ids().into_iter().filter(|id| self.target_layer_kinds.contains(&id.kind)).collect()
    }

    pub fn layer_slot(&self, id: LayerId) -> usize {
        id.block * LayerKind::ALL.len() + id.kind.slot()
    }
}

/// Dense `y = W·x + b` with `W` stored out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockNorms {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Everything except the block projections: embeddings, norms, and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockNorms>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl Backbone {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &b.ln1_gain));
            out.push((format!("blocks.{i}.ln1.bias"), &b.ln1_bias));
            out.push((format!("blocks.{i}.ln2.gain"), &b.ln2_gain));
            out.push((format!("blocks.{i}.ln2.bias"), &b.ln2_bias));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Same order as [`Backbone::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Rebuilds a backbone from tensors in [`Backbone::named_tensors`] order.
    pub fn from_tensors(config: &TransformerConfig, tensors: Vec<Tensor>) -> Result<Self, LmError> {
        let expected = 6 + 4 * config.n_layers;
        if tensors.len() != expected {
            return Err(LmError::InvalidConfig(format!("backbone needs {expected} tensors, got {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers).map(|_| BlockNorms { ln1_gain: next(), ln1_bias: next(), ln2_gain: next(), ln2_bias: next() }).collect();
        let backbone = Self { tok_emb, pos_emb, blocks, ln_f_gain: next(), ln_f_bias: next(), head_weight: next(), head_bias: next() };
        backbone.check_shapes(config)?;
        Ok(backbone)
    }

    fn check_shapes(&self, c: &TransformerConfig) -> Result<(), LmError> {
        let (d, v) = (c.d_model, c.vocab_size);
        let mut expect: Vec<Vec<usize>> = vec![vec![v, d], vec![c.max_seq_len, d]];
        for _ in 0..c.n_layers {
            expect.extend([vec![d], vec![d], vec![d], vec![d]]);
        }
        expect.extend([vec![d], vec![d], vec![v, d], vec![v]]);
        for ((name, t), shape) in self.named_tensors().into_iter().zip(expect) {
            if t.shape() != shape.as_slice() {
                return Err(LmError::InvalidConfig(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        BoundBackbone {
            tok_emb: leaf(&self.tok_emb),
            pos_emb: leaf(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| [leaf(&b.ln1_gain), leaf(&b.ln1_bias), leaf(&b.ln2_gain), leaf(&b.ln2_bias)]).collect(),
            ln_f: (leaf(&self.ln_f_gain), leaf(&self.ln_f_bias)),
            head: (leaf(&self.head_weight), leaf(&self.head_bias)),
        }
    }
}

/// Graph handles for a bound [`Backbone`].
pub struct BoundBackbone {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<[Var; 4]>,
    pub ln_f: (Var, Var),
    pub head: (Var, Var),
}

impl BoundBackbone {
    /// Same order as [`Backbone::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.extend([self.ln_f.0, self.ln_f.1, self.head.0, self.head.1]);
        out
    }
}

/// Supplies the output of each block projection during a forward pass.
pub trait Projections {
    fn project(&mut self, g: &mut Graph, id: LayerId, x: Var) -> Result<Var, AutodiffError>;
}

/// `x · Wᵀ + b` in the graph.
pub fn dense_projection(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
    let y = g.matmul_nt(x, weight)?;
    g.add_bias(y, bias)
}

/// Logits `[batch·seq, vocab]` for `tokens` laid out row-major as batch × seq.
pub fn forward(
    g: &mut Graph,
    config: &TransformerConfig,
    backbone: &BoundBackbone,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    proj: &mut dyn Projections,
) -> Result<Var, LmError> {
    if seq == 0 || seq > config.max_seq_len {
        return Err(LmError::SequenceTooLong { len: seq, max: config.max_seq_len });
    }
    if tokens.len() != batch * seq {
        return Err(LmError::Autodiff(AutodiffError::ShapeMismatch { op: "forward", detail: format!("{} tokens for a {batch}×{seq} batch", tokens.len()) }));
    }
    let ids = Arc::new(tokens.to_vec());
    let positions = Arc::new((0..batch).flat_map(|_| 0..seq).collect::<Vec<_>>());
    let tok = g.gather(backbone.tok_emb, ids)?;
    let pos = g.gather(backbone.pos_emb, positions)?;
    let mut h = g.add(tok, pos)?;
    for (b, [ln1g, ln1b, ln2g, ln2b]) in backbone.blocks.iter().copied().enumerate() {
        let x = g.layer_norm(h, ln1g, ln1b)?;
        let q = proj.project(g, LayerId::new(b, LayerKind::AttnQ), x)?;
        let k = proj.project(g, LayerId::new(b, LayerKind::AttnK), x)?;
        let v = proj.project(g, LayerId::new(b, LayerKind::AttnV), x)?;
        let a = g.causal_attention(q, k, v, batch, seq, config.n_heads)?;
        let o = proj.project(g, LayerId::new(b, LayerKind::AttnO), a)?;
        h = g.add(h, o)?;
        let x = g.layer_norm(h, ln2g, ln2b)?;
        let up = proj.project(g, LayerId::new(b, LayerKind::MlpUp), x)?;
        let act = g.gelu(up);
        let down = proj.project(g, LayerId::new(b, LayerKind::MlpDown), act)?;
        h = g.add(h, down)?;
    }
    let x = g.layer_norm(h, backbone.ln_f.0, backbone.ln_f.1)?;
    Ok(dense_projection(g, x, backbone.head.0, backbone.head.1)?)
}

/// The dense base model: backbone plus every block projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub backbone: Backbone,
    /// Indexed by [`TransformerConfig::layer_slot`].
    pub linears: Vec<Linear>,
}

fn uniform_with_std(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let a = std * 3f64.sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("shape")
}

impl Transformer {
    /// Deterministic initialization from `seed`.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let backbone = Backbone {
            tok_emb: uniform_with_std(&mut rng, &[v, d], std),
            pos_emb: uniform_with_std(&mut rng, &[config.max_seq_len, d], std),
            blocks: (0..config.n_layers)
                .map(|_| BlockNorms {
                    ln1_gain: Tensor::filled(&[d], 1.0),
                    ln1_bias: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::filled(&[d], 1.0),
                    ln2_bias: Tensor::zeros(&[d]),
                })
                .collect(),
            ln_f_gain: Tensor::filled(&[d], 1.0),
            ln_f_bias: Tensor::zeros(&[d]),
            head_weight: uniform_with_std(&mut rng, &[v, d], std),
            head_bias: Tensor::zeros(&[v]),
        };
        let linears = config
            .layer_ids()
            .into_iter()
            .map(|id| {
                let (m, n) = config.layer_shape(id.kind);
                let s = if matches!(id.kind, LayerKind::AttnO | LayerKind::MlpDown) { resid_std } else { std };
                Linear { weight: uniform_with_std(&mut rng, &[m, n], s), bias: Tensor::zeros(&[m]) }
            })
            .collect();
        Ok(Self { config, backbone, linears })
    }

    pub fn linear(&self, id: LayerId) -> &Linear {
        &self.linears[self.config.layer_slot(id)]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        for (id, l) in self.config.layer_ids().into_iter().zip(&self.linears) {
            out.push((format!("{id}.weight"), &l.weight));
            out.push((format!("{id}.bias"), &l.bias));
        }
        out
    }

    /// Same order as [`Transformer::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        for l in &mut self.linears {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn from_tensors(config: TransformerConfig, tensors: Vec<Tensor>) -> Result<Self, LmError> {
        config.validate()?;
        let n_backbone = 6 + 4 * config.n_layers;
        let n_linear = 2 * config.layer_ids().len();
        if tensors.len() != n_backbone + n_linear {
            return Err(LmError::InvalidConfig(format!("model needs {} tensors, got {}", n_backbone + n_linear, tensors.len())));
        }
        let mut tensors = tensors;
        let rest = tensors.split_off(n_backbone);
        let backbone = Backbone::from_tensors(&config, tensors)?;
        let mut linears = Vec::new();
        let mut it = rest.into_iter();
        for id in config.layer_ids() {
            let (weight, bias) = (it.next().expect("counted"), it.next().expect("counted"));
            let (m, n) = config.layer_shape(id.kind);
            if weight.shape() != [m, n] || bias.shape() != [m] {
                return Err(LmError::InvalidConfig(format!("{id} has shapes {:?}/{:?}", weight.shape(), bias.shape())));
            }
            linears.push(Linear { weight, bias });
        }
        Ok(Self { config, backbone, linears })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (BoundBackbone, DenseProjections) {
        let backbone = self.backbone.bind(g, trainable);
        let linears = self.linears.iter().map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable))).collect();
        (backbone, DenseProjections { linears, config: self.config.clone() })
    }
}

/// Graph handles for every dense projection of a [`Transformer`].
pub struct DenseProjections {
    pub linears: Vec<(Var, Var)>,
    config: TransformerConfig,
}

impl DenseProjections {
    /// Weight and bias handles in slot order.
    pub fn vars(&self) -> Vec<Var> {
        self.linears.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Projections for DenseProjections {
    fn project(&mut self, g: &mut Graph, id: LayerId, x: Var) -> Result<Var, AutodiffError> {
        let (w, b) = self.linears[self.config.layer_slot(id)];
        dense_projection(g, x, w, b)
    }
}

/// Forward-only evaluation of a language model.
pub trait LanguageModel {
    fn config(&self) -> &TransformerConfig;

    /// Logits for a batch, built on `g` without trainable leaves.
    fn logits(&self, g: &mut Graph, tokens: &[usize], batch: usize, seq: usize) -> Result<Var, LmError>;
}

impl LanguageModel for Transformer {
    fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn logits(&self, g: &mut Graph, tokens: &[usize], batch: usize, seq: usize) -> Result<Var, LmError> {
        let (backbone, mut dense) = self.bind(g, false);
        forward(g, &self.config, &backbone, tokens, batch, seq, &mut dense)
    }
}
