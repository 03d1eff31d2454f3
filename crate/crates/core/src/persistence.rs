//! Checkpoint directories (`manifest.json` + `tensors.bin`) and CSV exports.
//!
//! Tensors are stored as little-endian `f32` and widened back to `f64` on
//! load, so a load/save cycle reproduces the files byte for byte.
//! Parametrized checkpoints store the host weights, masks and adapters; the
//! SVD factors are recomputed from the stored weights when loading.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::compressor::{CompressedLayer, CompressedModel, CompressedWeight, CompressionPlan, LayerMode};
use crate::lm::{Backbone, LmError, TokenizerSpec, Transformer, TransformerConfig};
use crate::pruner::ScoreMap;
use crate::reparam::{reparametrize, LayerRegistry, ReparamConfig, ReparamError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: manifest says {expected:08x}, blob hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },
    #[error("tensor blob truncated: {found} bytes, manifest needs {expected}")]
    Truncated { expected: u64, found: u64 },
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: CheckpointKind, found: CheckpointKind },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl From<LmError> for PersistError {
    fn from(e: LmError) -> Self {
        Self::Format(e.to_string())
    }
}

impl From<ReparamError> for PersistError {
    fn from(e: ReparamError) -> Self {
        Self::Format(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Parametrized,
    Compressed,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Parametrized => "parametrized",
            Self::Compressed => "compressed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

/// What a pruning run left behind, for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunerSummary {
    pub pruning_steps: usize,
    pub post_tune_steps: usize,
    pub final_lambda: f64,
    pub final_ratio: f64,
    pub r_stop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: TransformerConfig,
    pub tokenizer: TokenizerSpec,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub checksum: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reparam: Option<ReparamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruner: Option<PrunerSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_map: Option<ScoreMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<CompressionPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged: Option<bool>,
}

impl Manifest {
    fn new(kind: CheckpointKind, config: TransformerConfig, tokenizer: TokenizerSpec, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            config,
            tokenizer,
            seed,
            tensors: Vec::new(),
            checksum: 0,
            reparam: None,
            pruner: None,
            score_map: None,
            plan: None,
            merged: None,
        }
    }
}

/// Writes `tensors` into `dir`, filling the manifest's tensor directory and
/// checksum.
pub fn write_checkpoint(dir: &Path, mut manifest: Manifest, tensors: &[(String, &Tensor)]) -> Result<Manifest, PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| 4 * t.len()).sum());
    manifest.tensors.clear();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset, length: blob.len() as u64 - offset });
    }
    manifest.checksum = crc32fast::hash(&blob);
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PersistError::Format(e.to_string()))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads and verifies a checkpoint directory; tensors come back in manifest
/// order.
pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>), PersistError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| PersistError::Format(format!("{}: {e}", manifest_path.display())))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64).ok_or_else(|| PersistError::Format("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(PersistError::Version { found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| PersistError::Format(format!("{}: {e}", manifest_path.display())))?;

    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let mut expected = 0u64;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f32" || e.offset != expected || e.length != 4 * numel as u64 {
            return Err(PersistError::Format(format!("tensor entry {} is inconsistent", e.name)));
        }
        expected += e.length;
    }
    let found = blob.len() as u64;
    if found < expected {
        return Err(PersistError::Truncated { expected, found });
    }
    if found > expected {
        return Err(PersistError::Format(format!("{} trailing bytes after the last tensor", found - expected)));
    }
    let checksum = crc32fast::hash(&blob);
    if checksum != manifest.checksum {
        return Err(PersistError::Checksum { expected: manifest.checksum, found: checksum });
    }
    let tensors = manifest
        .tensors
        .iter()
        .map(|e| {
            let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            (e.name.clone(), Tensor::new(e.shape.clone(), data).expect("shape checked"))
        })
        .collect();
    Ok((manifest, tensors))
}

fn expect_kind(manifest: &Manifest, kind: CheckpointKind) -> Result<(), PersistError> {
    if manifest.kind != kind {
        return Err(PersistError::Kind { expected: kind, found: manifest.kind });
    }
    Ok(())
}

fn take_named(tensors: &mut impl Iterator<Item = (String, Tensor)>, name: &str) -> Result<Tensor, PersistError> {
    match tensors.next() {
        Some((n, t)) if n == name => Ok(t),
        Some((n, _)) => Err(PersistError::Format(format!("expected tensor {name}, found {n}"))),
        None => Err(PersistError::Format(format!("missing tensor {name}"))),
    }
}

pub fn save_base(dir: &Path, model: &Transformer, tokenizer: &TokenizerSpec, seed: u64) -> Result<Manifest, PersistError> {
    let manifest = Manifest::new(CheckpointKind::Base, model.config.clone(), tokenizer.clone(), seed);
    write_checkpoint(dir, manifest, &model.named_tensors())
}

pub fn load_base(dir: &Path) -> Result<(Transformer, Manifest), PersistError> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    expect_kind(&manifest, CheckpointKind::Base)?;
    let model = model_from(&manifest, tensors)?;
    Ok((model, manifest))
}

fn model_from(manifest: &Manifest, tensors: Vec<(String, Tensor)>) -> Result<Transformer, PersistError> {
    let probe = Transformer::init(manifest.config.clone(), 0)?;
    let names: Vec<String> = probe.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut it = tensors.into_iter();
    let ordered = names.iter().map(|n| take_named(&mut it, n)).collect::<Result<Vec<_>, _>>()?;
    Ok(Transformer::from_tensors(manifest.config.clone(), ordered)?)
}

/// Reparametrized model plus whatever pruning produced.
#[derive(Clone, Debug)]
pub struct LoadedRegistry {
    pub registry: LayerRegistry,
    pub manifest: Manifest,
}

impl LoadedRegistry {
    pub fn scores(&self) -> Option<&ScoreMap> {
        self.manifest.score_map.as_ref()
    }
}

pub fn save_registry(
    dir: &Path,
    registry: &LayerRegistry,
    tokenizer: &TokenizerSpec,
    seed: u64,
    scores: Option<&ScoreMap>,
    summary: Option<PrunerSummary>,
) -> Result<Manifest, PersistError> {
    let mut manifest = Manifest::new(CheckpointKind::Parametrized, registry.base.config.clone(), tokenizer.clone(), seed);
    manifest.reparam = Some(registry.config.clone());
    manifest.score_map = scores.cloned();
    manifest.pruner = summary;
    let mut tensors = registry.base.named_tensors();
    for l in &registry.layers {
        tensors.push((format!("{}.beta", l.layer_id), &l.beta));
        tensors.push((format!("{}.adapter_a", l.layer_id), &l.adapter_a));
        tensors.push((format!("{}.adapter_b", l.layer_id), &l.adapter_b));
    }
    write_checkpoint(dir, manifest, &tensors)
}

pub fn load_registry(dir: &Path) -> Result<LoadedRegistry, PersistError> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    expect_kind(&manifest, CheckpointKind::Parametrized)?;
    let reparam = manifest.reparam.clone().ok_or_else(|| PersistError::Format("parametrized checkpoint without reparam config".into()))?;
    let n_base = Transformer::init(manifest.config.clone(), 0)?.named_tensors().len();
    let mut tensors = tensors;
    if tensors.len() < n_base {
        return Err(PersistError::Format("missing host tensors".into()));
    }
    let extra = tensors.split_off(n_base);
    let base = model_from(&manifest, tensors)?;
    let mut registry = reparametrize(&base, &reparam)?;
    let mut it = extra.into_iter();
    for l in &mut registry.layers {
        for (suffix, slot) in [("beta", &mut l.beta), ("adapter_a", &mut l.adapter_a), ("adapter_b", &mut l.adapter_b)] {
            let t = take_named(&mut it, &format!("{}.{suffix}", l.layer_id))?;
            if t.shape() != slot.shape() {
                return Err(PersistError::Format(format!("{}.{suffix} has shape {:?}, expected {:?}", l.layer_id, t.shape(), slot.shape())));
            }
            *slot = t;
        }
    }
    if it.next().is_some() {
        return Err(PersistError::Format("unexpected trailing tensors".into()));
    }
    if let Some(map) = &manifest.score_map {
        let fits = map.layers.len() == registry.layers.len()
            && map.layers.iter().zip(&registry.layers).all(|(s, l)| s.layer_id == l.layer_id && s.scores.len() == l.rank());
        if !fits {
            return Err(PersistError::Format("score map does not match the registry".into()));
        }
    }
    Ok(LoadedRegistry { registry, manifest })
}

pub fn save_compressed(dir: &Path, model: &CompressedModel, tokenizer: &TokenizerSpec, seed: u64) -> Result<Manifest, PersistError> {
    let mut manifest = Manifest::new(CheckpointKind::Compressed, model.config.clone(), tokenizer.clone(), seed);
    manifest.plan = Some(model.plan.clone());
    manifest.merged = Some(model.merged);
    let mut tensors = model.backbone.named_tensors();
    for l in &model.layers {
        match &l.weight {
            CompressedWeight::Dense(w) => tensors.push((format!("{}.weight", l.layer_id), w)),
            CompressedWeight::Factored { p, q, adapter } => {
                tensors.push((format!("{}.p", l.layer_id), p));
                tensors.push((format!("{}.q", l.layer_id), q));
                if let Some((a, b)) = adapter {
                    tensors.push((format!("{}.adapter_a", l.layer_id), a));
                    tensors.push((format!("{}.adapter_bt", l.layer_id), b));
                }
            }
        }
        tensors.push((format!("{}.bias", l.layer_id), &l.bias));
    }
    write_checkpoint(dir, manifest, &tensors)
}

pub fn load_compressed(dir: &Path) -> Result<(CompressedModel, Manifest), PersistError> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    expect_kind(&manifest, CheckpointKind::Compressed)?;
    let plan = manifest.plan.clone().ok_or_else(|| PersistError::Format("compressed checkpoint without plan".into()))?;
    let merged = manifest.merged.unwrap_or(false);
    let config = manifest.config.clone();
    let n_backbone = 6 + 4 * config.n_layers;
    let mut tensors = tensors;
    if tensors.len() < n_backbone {
        return Err(PersistError::Format("missing backbone tensors".into()));
    }
    let rest = tensors.split_off(n_backbone);
    let backbone = Backbone::from_tensors(&config, tensors.into_iter().map(|(_, t)| t).collect())?;
    let modes: std::collections::HashMap<_, LayerMode> = plan.layers.iter().map(|l| (l.layer_id, l.mode)).collect();
    let mut it = rest.into_iter().peekable();
    let mut layers = Vec::new();
    for id in config.layer_ids() {
        let mode = modes.get(&id).copied();
        let weight = if mode == Some(LayerMode::Factored) {
            let p = take_named(&mut it, &format!("{id}.p"))?;
            let q = take_named(&mut it, &format!("{id}.q"))?;
            let adapter = if it.peek().is_some_and(|(n, _)| *n == format!("{id}.adapter_a")) {
                Some((take_named(&mut it, &format!("{id}.adapter_a"))?, take_named(&mut it, &format!("{id}.adapter_bt"))?))
            } else {
                None
            };
            CompressedWeight::Factored { p, q, adapter }
        } else {
            CompressedWeight::Dense(take_named(&mut it, &format!("{id}.weight"))?)
        };
        let bias = take_named(&mut it, &format!("{id}.bias"))?;
        layers.push(CompressedLayer { layer_id: id, weight, bias, mode });
    }
    if it.next().is_some() {
        return Err(PersistError::Format("unexpected trailing tensors".into()));
    }
    Ok((CompressedModel { config, backbone, layers, plan, merged }, manifest))
}

/// Every pruned score collapses to −1 for display; active scores pass through.
pub fn normalized_score(score: f64) -> f64 {
    if score < 0.0 {
        -1.0
    } else {
        score
    }
}

/// `block,layer_kind,index,raw_score,normalized_score`, one row per entry.
pub fn export_scores(map: &ScoreMap, mut out: impl Write) -> io::Result<()> {
    writeln!(out, "block,layer_kind,index,raw_score,normalized_score")?;
    for l in &map.layers {
        for (i, &s) in l.scores.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", l.layer_id.block, l.layer_id.kind, i, s, normalized_score(s))?;
        }
    }
    Ok(())
}

pub fn export_scores_to(map: &ScoreMap, path: &Path) -> Result<(), PersistError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    export_scores(map, &mut w).and_then(|_| w.flush()).map_err(io_err(path))
}
