//! The `acip` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3
//! checkpoint error, 4 infeasible compression ratio.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::compressor::{magnitude_score_map, materialize, plan_for_ratio, registry_shapes, CompressError};
use crate::config::{ConfigError, RunConfig};
use crate::instrument;
use crate::lm::{generate, perplexity, Corpus, LanguageModel, LmError, TokenizerSpec};
use crate::persistence::{
    export_scores_to, load_base, load_compressed, load_registry, read_checkpoint, save_base, save_compressed, save_registry, CheckpointKind, PersistError,
    PrunerSummary, MANIFEST_FILE,
};
use crate::pipeline::{self, write_tradeoff_csv, PipelineError};
use crate::pruner::{current_size_ratio, write_step_log, PruneError, ScoreMap};
use crate::reparam::{reparametrize, LayerRegistry};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("infeasible ratio: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Checkpoint(_) => EXIT_CHECKPOINT,
            Self::Infeasible(_) => EXIT_INFEASIBLE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        Self::Checkpoint(e.to_string())
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::InfeasibleRatio { .. } | CompressError::InvalidRatio(_) => Self::Infeasible(e.to_string()),
            CompressError::Mismatch(_) => Self::Checkpoint(e.to_string()),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::InvalidConfig(_) | LmError::CorpusTooSmall { .. } | LmError::Untokenizable { .. } => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::InvalidConfig(_) => Self::Config(e.to_string()),
            PruneError::Lm(e) => e.into(),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Lm(e) => e.into(),
            PipelineError::Prune(e) => e.into(),
            PipelineError::Compress(e) => e.into(),
            PipelineError::Reparam(e) => Self::Runtime(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "acip", version, about = "Any-size compression of character-level transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command. Flags override values from `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output, including the effective config.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Keep incompressible layers in recovered dense form instead of
    /// restoring the original weight.
    #[arg(long, global = true)]
    pub no_reset_rule: bool,
    /// Count adapter parameters in size ratios.
    #[arg(long, global = true)]
    pub count_adapters: bool,
    /// Store adapters separately instead of merging them into the factors.
    #[arg(long, global = true)]
    pub no_merge_adapters: bool,
    #[arg(long, global = true)]
    pub max_eval_tokens: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreSource {
    /// Score map learned by mask training.
    Learned,
    /// Singular values.
    Magnitude,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the dense base model.
    TrainBase {
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Reparametrize a base checkpoint without training masks.
    Reparam {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reparametrize, train masks down to r_stop, and post-tune adapters.
    Prune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        r_stop: Option<f64>,
        #[arg(long)]
        post_tune_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        score_freeze_step: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Materialize one compressed model.
    Compress {
        /// Parametrized checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_enum, default_value = "learned")]
        scores: ScoreSource,
        #[command(flatten)]
        common: Common,
    },
    /// Perplexity at several ratios from a single score map.
    Sweep {
        /// Parametrized checkpoint with a score map.
        #[arg(long, conflicts_with = "base", required_unless_present = "base")]
        checkpoint: Option<PathBuf>,
        /// Base checkpoint; runs one pruning run first.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "learned")]
        scores: ScoreSource,
        #[command(flatten)]
        common: Common,
    },
    /// Validation perplexity of any checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate a parametrized checkpoint under the plan for this ratio.
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample text from any checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        tokens: usize,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Write the score map of a parametrized checkpoint as CSV.
    ExportScores {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; defaults to `scores.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::TrainBase { common, .. }
            | Self::Reparam { common, .. }
            | Self::Prune { common, .. }
            | Self::Compress { common, .. }
            | Self::Sweep { common, .. }
            | Self::Eval { common, .. }
            | Self::Generate { common, .. }
            | Self::ExportScores { common, .. } => common,
        }
    }
}

/// Parses `args`, runs the command, reports errors on stderr and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("acip: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(command: &Command) -> Result<RunConfig, CliError> {
    let common = command.common();
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(corpus) = &common.corpus {
        config.corpus = corpus.clone();
    }
    if common.no_reset_rule {
        config.reset_rule = false;
    }
    if common.count_adapters {
        config.count_adapters = true;
    }
    if common.no_merge_adapters {
        config.merge_adapters = false;
    }
    if common.max_eval_tokens.is_some() {
        config.eval.max_tokens = common.max_eval_tokens;
    }
    match command {
        Command::TrainBase { steps: Some(s), .. } => config.train.steps = *s,
        Command::Prune { r_stop, post_tune_steps, lr, score_freeze_step, .. } => {
            if let Some(r) = r_stop {
                config.pruner.r_stop = *r;
            }
            if let Some(p) = post_tune_steps {
                config.pruner.post_tune_steps = *p;
            }
            if let Some(l) = lr {
                config.pruner.lr = *l;
            }
            if score_freeze_step.is_some() {
                config.pruner.score_freeze_step = *score_freeze_step;
            }
        }
        Command::Sweep { ratios: Some(r), .. } => config.sweep_ratios = r.clone(),
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

pub fn run(command: Command) -> Result<(), CliError> {
    let config = effective_config(&command)?;
    let out_dir = command.common().out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(io_error(&out_dir))?;
    let echo = out_dir.join("effective_config.json");
    fs::write(&echo, config.to_json()).map_err(io_error(&echo))?;
    match command {
        Command::TrainBase { .. } => train_base_cmd(&config, &out_dir),
        Command::Reparam { base, .. } => reparam_cmd(&config, &base, &out_dir),
        Command::Prune { base, .. } => prune_cmd(&config, &base, &out_dir).map(|_| ()),
        Command::Compress { checkpoint, ratio, scores, .. } => compress_cmd(&config, &checkpoint, ratio, scores, &out_dir),
        Command::Sweep { checkpoint, base, scores, .. } => sweep_cmd(&config, checkpoint.as_deref(), base.as_deref(), scores, &out_dir),
        Command::Eval { checkpoint, ratio, .. } => eval_cmd(&config, &checkpoint, ratio, &out_dir),
        Command::Generate { checkpoint, prompt, tokens, temperature, .. } => generate_cmd(&config, &checkpoint, &prompt, tokens, temperature, &out_dir),
        Command::ExportScores { checkpoint, out, .. } => {
            let loaded = load_registry(&checkpoint)?;
            let scores = loaded.scores().ok_or_else(|| CliError::Checkpoint(format!("{} has no score map", checkpoint.display())))?;
            let path = out.unwrap_or_else(|| out_dir.join("scores.csv"));
            export_scores_to(scores, &path)?;
            println!("wrote {} rows to {}", scores.len(), path.display());
            Ok(())
        }
    }
}

fn load_corpus(config: &RunConfig, tokenizer: Option<&TokenizerSpec>) -> Result<Corpus, CliError> {
    let text = fs::read_to_string(&config.corpus).map_err(|e| CliError::Config(format!("corpus {}: {e}", config.corpus.display())))?;
    Ok(match tokenizer {
        Some(t) => Corpus::with_tokenizer(&text, t.clone())?,
        None => Corpus::from_text(&text)?,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_error(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value).expect("json value") + "\n")
}

fn train_base_cmd(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let corpus = load_corpus(config, None)?;
    eprintln!("training {} steps on {} tokens", config.train.steps, corpus.train.len());
    let (model, losses) = pipeline::train(config, &corpus)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    write_file(&out_dir.join("train_log.csv"), log)?;
    let dir = out_dir.join("base.acip");
    save_base(&dir, &model, &corpus.tokenizer, config.seed)?;
    let (model, _) = load_base(&dir)?;
    let batches = pipeline::eval_set(config, &corpus, model.config.max_seq_len);
    let ppl = perplexity(&model, &batches)?;
    println!("base model: {} parameters, validation perplexity {ppl:.4}", model.parameter_count());
    Ok(())
}

fn reparam_cmd(config: &RunConfig, base: &Path, out_dir: &Path) -> Result<(), CliError> {
    let (model, manifest) = load_base(base)?;
    let registry = reparametrize(&model, &config.reparam_config()).map_err(|e| CliError::Runtime(e.to_string()))?;
    save_registry(&out_dir.join("parametrized.acip"), &registry, &manifest.tokenizer, config.seed, None, None)?;
    println!("{} target layers, {} learnable parameters", registry.layers.len(), registry.learnable_parameter_count());
    Ok(())
}

fn prune_cmd(config: &RunConfig, base: &Path, out_dir: &Path) -> Result<(), CliError> {
    let (model, manifest) = load_base(base)?;
    let corpus = load_corpus(config, Some(&manifest.tokenizer))?;
    let mut last_report = 0;
    let (registry, outcome) = pipeline::prune(config, &model, &corpus, &mut |r| {
        if r.step == 0 || r.step >= last_report + 100 {
            last_report = r.step;
            eprintln!("step {:>6}  lambda {:.3e}  loss {:.4}  ratio {:.4}  pruned {}", r.step, r.lambda, r.loss, r.size_ratio, r.pruned);
        }
    })?;
    let log_path = out_dir.join("prune_log.csv");
    let mut buf = Vec::new();
    write_step_log(&mut buf, &outcome.log).map_err(io_error(&log_path))?;
    write_file(&log_path, buf)?;
    let summary = PrunerSummary {
        pruning_steps: outcome.pruning_steps,
        post_tune_steps: outcome.post_tune_losses.len(),
        final_lambda: outcome.log.last().map_or(config.pruner.lambda0, |r| r.lambda),
        final_ratio: current_size_ratio(&registry, config.count_adapters),
        r_stop: config.pruner.r_stop,
    };
    save_registry(&out_dir.join("parametrized.acip"), &registry, &manifest.tokenizer, config.seed, Some(&outcome.scores), Some(summary.clone()))?;
    println!("pruned to ratio {:.4} in {} steps, {} post-tune steps", summary.final_ratio, summary.pruning_steps, summary.post_tune_steps);
    Ok(())
}

fn scores_for(registry: &LayerRegistry, learned: Option<&ScoreMap>, source: ScoreSource, path: &Path) -> Result<ScoreMap, CliError> {
    match source {
        ScoreSource::Magnitude => Ok(magnitude_score_map(registry)),
        ScoreSource::Learned => learned.cloned().ok_or_else(|| CliError::Checkpoint(format!("{} has no score map; run prune first", path.display()))),
    }
}

fn compress_cmd(config: &RunConfig, checkpoint: &Path, ratio: f64, source: ScoreSource, out_dir: &Path) -> Result<(), CliError> {
    let loaded = load_registry(checkpoint)?;
    let scores = scores_for(&loaded.registry, loaded.scores(), source, checkpoint)?;
    let backward_before = instrument::backward_calls();
    let plan = plan_for_ratio(&scores, &registry_shapes(&loaded.registry), ratio, config.plan_options())?;
    let model = materialize(&loaded.registry, &plan, config.merge_adapters)?;
    let backward_calls = instrument::backward_calls() - backward_before;
    save_compressed(&out_dir.join("compressed.acip"), &model, &loaded.manifest.tokenizer, config.seed)?;
    write_file(&out_dir.join("plan.json"), serde_json::to_string_pretty(&plan).expect("plan json") + "\n")?;
    write_json(
        &out_dir.join("compress_log.json"),
        &json!({ "target_ratio": ratio, "achieved_ratio": plan.achieved_ratio, "stored_params": plan.stored_params(), "backward_calls": backward_calls }),
    )?;
    let modes: Vec<String> = plan.mode_counts().iter().map(|(m, c)| format!("{} {c}", m.name())).collect();
    println!("ratio {:.4} (target {ratio}), {} stored parameters, {}", plan.achieved_ratio, plan.stored_params(), modes.join(", "));
    Ok(())
}

fn sweep_cmd(config: &RunConfig, checkpoint: Option<&Path>, base: Option<&Path>, source: ScoreSource, out_dir: &Path) -> Result<(), CliError> {
    let runs_before = instrument::pruning_runs();
    let (mut registry, learned, tokenizer, path) = match (checkpoint, base) {
        (Some(c), _) => {
            let loaded = load_registry(c)?;
            let scores = loaded.scores().cloned();
            (loaded.registry, scores, loaded.manifest.tokenizer, c.to_path_buf())
        }
        (None, Some(b)) => {
            prune_cmd(config, b, out_dir)?;
            // evaluate what was saved so the rows match a later `sweep --checkpoint`
            let path = out_dir.join("parametrized.acip");
            let loaded = load_registry(&path)?;
            let scores = loaded.scores().cloned();
            (loaded.registry, scores, loaded.manifest.tokenizer, path)
        }
        (None, None) => return Err(CliError::Config("sweep needs --checkpoint or --base".into())),
    };
    let scores = scores_for(&registry, learned.as_ref(), source, &path)?;
    let corpus = load_corpus(config, Some(&tokenizer))?;
    let batches = pipeline::eval_set(config, &corpus, registry.config().max_seq_len);
    let backward_before = instrument::backward_calls();
    let rows = pipeline::sweep(&mut registry, &scores, &config.sweep_ratios, config.plan_options(), &batches)?;
    let backward_calls = instrument::backward_calls() - backward_before;
    let csv_path = out_dir.join("tradeoff.csv");
    let mut buf = Vec::new();
    write_tradeoff_csv(&mut buf, &rows).map_err(io_error(&csv_path))?;
    write_file(&csv_path, &buf)?;
    write_json(
        &out_dir.join("sweep_log.json"),
        &json!({
            "points": rows.len(),
            "pruning_runs": instrument::pruning_runs() - runs_before,
            "backward_calls_during_compression": backward_calls,
        }),
    )?;
    io::stdout().write_all(&buf).map_err(io_error(Path::new("stdout")))?;
    Ok(())
}

fn load_model(checkpoint: &Path, ratio: Option<f64>, config: &RunConfig) -> Result<(Box<dyn LanguageModel>, TokenizerSpec), CliError> {
    let manifest_path = checkpoint.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CliError::Checkpoint(format!("{} is not a checkpoint directory", checkpoint.display())));
    }
    let kind = read_checkpoint(checkpoint)?.0.kind;
    if ratio.is_some() && kind != CheckpointKind::Parametrized {
        return Err(CliError::Config("--ratio applies to parametrized checkpoints only".into()));
    }
    Ok(match kind {
        CheckpointKind::Base => {
            let (m, manifest) = load_base(checkpoint)?;
            (Box::new(m), manifest.tokenizer)
        }
        CheckpointKind::Compressed => {
            let (m, manifest) = load_compressed(checkpoint)?;
            (Box::new(m), manifest.tokenizer)
        }
        CheckpointKind::Parametrized => {
            let loaded = load_registry(checkpoint)?;
            let mut registry = loaded.registry;
            if let Some(r) = ratio {
                let scores = scores_for(&registry, loaded.manifest.score_map.as_ref(), ScoreSource::Learned, checkpoint)?;
                let plan = plan_for_ratio(&scores, &registry_shapes(&registry), r, config.plan_options())?;
                crate::compressor::apply_plan(&mut registry, &plan)?;
            }
            (Box::new(registry), loaded.manifest.tokenizer)
        }
    })
}

fn eval_cmd(config: &RunConfig, checkpoint: &Path, ratio: Option<f64>, out_dir: &Path) -> Result<(), CliError> {
    let (model, tokenizer) = load_model(checkpoint, ratio, config)?;
    let corpus = load_corpus(config, Some(&tokenizer))?;
    let batches = pipeline::eval_set(config, &corpus, model.config().max_seq_len);
    let ppl = perplexity(model.as_ref(), &batches)?;
    let tokens: usize = batches.iter().map(|b| b.predicted_tokens()).sum();
    write_json(&out_dir.join("eval.json"), &json!({ "checkpoint": checkpoint.display().to_string(), "ratio": ratio, "perplexity": ppl, "tokens": tokens }))?;
    println!("perplexity {ppl:.4} over {tokens} tokens");
    Ok(())
}

fn generate_cmd(config: &RunConfig, checkpoint: &Path, prompt: &str, tokens: usize, temperature: f64, out_dir: &Path) -> Result<(), CliError> {
    let (model, tokenizer) = load_model(checkpoint, None, config)?;
    let text = generate(model.as_ref(), &tokenizer, prompt, tokens, temperature, config.seed).map_err(|e| match e {
        LmError::Untokenizable { .. } | LmError::EmptyDataset => CliError::Config(e.to_string()),
        other => other.into(),
    })?;
    write_file(&out_dir.join("generated.txt"), &text)?;
    println!("{text}");
    Ok(())
}
