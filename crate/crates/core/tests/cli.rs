use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use acip::autodiff::Graph;
use acip::config::RunConfig;
use acip::lm::{Batch, LanguageModel};
use acip::persistence::{load_base, load_compressed};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/shakespeare.txt");

fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "corpus": CORPUS,
        "seed": 5,
        "model": { "n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 16 },
        "train": { "steps": 30, "batch_size": 8, "lr": 0.01 },
        "pruner": { "lr": 0.01, "r_stop": 0.6, "post_tune_steps": 5, "batch_size": 4, "lambda0": 0.01, "every": 1, "factor": 1.05, "max_steps": 2000 },
        "eval": { "batch_size": 8, "max_tokens": 1024 },
        "sweep_ratios": [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    })
}

fn acip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acip")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn base(&self) -> PathBuf {
        self.root.join("train/base.acip")
    }
    fn parametrized(&self) -> PathBuf {
        self.root.join("prune/parametrized.acip")
    }
}

/// Base training and one pruning run shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        fs::write(&config, tiny_config().to_string()).unwrap();
        let out = acip(&["train-base", "--config", s(&config), "--out-dir", s(&root.join("train"))]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = acip(&["prune", "--base", s(&root.join("train/base.acip")), "--config", s(&config), "--out-dir", s(&root.join("prune"))]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture { _dir: dir, root, config }
    })
}

fn logits(model: &dyn LanguageModel, batch: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let v = model.logits(&mut g, &batch.inputs(), batch.batch_size, batch.seq_len).unwrap();
    g.value(v).data().to_vec()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sede": 1}"#).unwrap();
    let out = acip(&["train-base", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sede"), "{}", stderr(&out));

    fs::write(&bad, r#"{"pruner": {"factor": 0.5}}"#).unwrap();
    assert_eq!(code(&acip(&["train-base", "--config", s(&bad), "--out-dir", s(dir.path())])), 2);
    assert_eq!(code(&acip(&["train-base", "--config", s(&dir.path().join("missing.json"))])), 2);
    assert_eq!(code(&acip(&["compress", "--ratio", "0.5"])), 2);
    assert_eq!(code(&acip(&["no-such-command"])), 2);
    assert_eq!(code(&acip(&["sweep", "--ratios", "0.5", "--out-dir", s(dir.path())])), 2);
}

#[test]
fn checkpoint_errors_exit_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = acip(&["compress", "--checkpoint", s(&dir.path().join("nope")), "--ratio", "0.5", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    // a base checkpoint carries no score map
    let out = acip(&["compress", "--checkpoint", s(&f.base()), "--ratio", "0.5", "--config", s(&f.config), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let copy = dir.path().join("corrupt.acip");
    fs::create_dir(&copy).unwrap();
    for name in ["manifest.json", "tensors.bin"] {
        fs::copy(f.parametrized().join(name), copy.join(name)).unwrap();
    }
    let mut blob = fs::read(copy.join("tensors.bin")).unwrap();
    blob[10] ^= 0x40;
    fs::write(copy.join("tensors.bin"), blob).unwrap();
    let out = acip(&["eval", "--checkpoint", s(&copy), "--config", s(&f.config), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn infeasible_ratios_exit_4() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.parametrized();
    // with adapters counted, pruning every singular value still leaves ratio > 0.001
    for (ratio, extra) in [("0.0", None), ("1.5", None), ("-0.2", None), ("0.001", Some("--count-adapters"))] {
        let flag = format!("--ratio={ratio}");
        let mut args = vec!["compress", "--checkpoint", s(&ckpt), &flag, "--config", s(&f.config), "--out-dir", s(dir.path())];
        args.extend(extra);
        let out = acip(&args);
        assert_eq!(code(&out), 4, "ratio {ratio}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
    }
}

#[test]
fn compress_at_full_ratio_reproduces_base() {
    let f = fixture();
    let out_dir = f.root.join("compress1");
    let out = acip(&["compress", "--checkpoint", s(&f.parametrized()), "--ratio", "1.0", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (base, _) = load_base(&f.base()).unwrap();
    let (model, _) = load_compressed(&out_dir.join("compressed.acip")).unwrap();
    for id in base.config.target_ids() {
        let slot = base.config.layer_slot(id);
        let lin = model.linear(slot).expect("reset layers are dense");
        assert_eq!(lin.weight, base.linear(id).weight, "{id}");
        assert_eq!(lin.bias, base.linear(id).bias, "{id}");
    }
    let batch = Batch::new((0..34).map(|i| (i * 7) % base.config.vocab_size).collect(), 2, 16).unwrap();
    assert_eq!(logits(&model, &batch), logits(&base, &batch));
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("compress_log.json")).unwrap()).unwrap();
    assert_eq!(log["backward_calls"], 0);
    assert!(out_dir.join("plan.json").exists());
}

#[test]
fn compress_factored_model_evaluates() {
    let f = fixture();
    let out_dir = f.root.join("compress06");
    let out = acip(&["compress", "--checkpoint", s(&f.parametrized()), "--ratio", "0.6", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("plan.json")).unwrap()).unwrap();
    assert!(plan["achieved_ratio"].as_f64().unwrap() <= 0.6);
    let out = acip(&["eval", "--checkpoint", s(&out_dir.join("compressed.acip")), "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let from_file: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();

    // the mask-only plan on the parametrized checkpoint gives the same number
    let masked_dir = f.root.join("eval06");
    let out = acip(&["eval", "--checkpoint", s(&f.parametrized()), "--ratio", "0.6", "--config", s(&f.config), "--out-dir", s(&masked_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let masked: serde_json::Value = serde_json::from_str(&fs::read_to_string(masked_dir.join("eval.json")).unwrap()).unwrap();
    let (a, b) = (from_file["perplexity"].as_f64().unwrap(), masked["perplexity"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-4 * b, "{a} vs {b}");
}

#[test]
fn sweep_is_amortized_and_reproducible() {
    let f = fixture();
    let mut csvs = Vec::new();
    for run in ["sweep_a", "sweep_b"] {
        let out_dir = f.root.join(run);
        let out = acip(&["sweep", "--checkpoint", s(&f.parametrized()), "--config", s(&f.config), "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let rows = read_csv(&out_dir.join("tradeoff.csv"));
        assert_eq!(rows.len(), 7);
        let achieved: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        assert!(achieved.windows(2).all(|w| w[0] >= w[1]), "{achieved:?}");
        for r in &rows {
            assert!(r[1].parse::<f64>().unwrap() <= r[0].parse::<f64>().unwrap());
        }
        let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep_log.json")).unwrap()).unwrap();
        assert_eq!(log["pruning_runs"], 0);
        assert_eq!(log["backward_calls_during_compression"], 0);
        csvs.push(fs::read(out_dir.join("tradeoff.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn sweep_from_base_prunes_once() {
    let f = fixture();
    let out_dir = f.root.join("sweep_base");
    let out = acip(&["sweep", "--base", s(&f.base()), "--ratios", "0.9,0.7", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep_log.json")).unwrap()).unwrap();
    assert_eq!(log["pruning_runs"], 1);
    assert_eq!(log["points"], 2);
    assert_eq!(log["backward_calls_during_compression"], 0);
    // same config and seed as the fixture's prune command
    let again = read_csv(&out_dir.join("tradeoff.csv"));
    let dir2 = f.root.join("sweep_base_ckpt");
    let out = acip(&["sweep", "--checkpoint", s(&f.parametrized()), "--ratios", "0.9,0.7", "--config", s(&f.config), "--out-dir", s(&dir2)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(again, read_csv(&dir2.join("tradeoff.csv")));
}

#[test]
fn flags_override_config_and_are_echoed() {
    let f = fixture();
    let out_dir = f.root.join("echo");
    let out = acip(&[
        "sweep",
        "--checkpoint",
        s(&f.parametrized()),
        "--ratios",
        "0.8",
        "--config",
        s(&f.config),
        "--seed",
        "9",
        "--no-reset-rule",
        "--max-eval-tokens",
        "256",
        "--scores",
        "magnitude",
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed: RunConfig = serde_json::from_str(&fs::read_to_string(out_dir.join("effective_config.json")).unwrap()).unwrap();
    let mut expected: RunConfig = serde_json::from_value(tiny_config()).unwrap();
    expected.seed = 9;
    expected.reset_rule = false;
    expected.eval.max_tokens = Some(256);
    expected.sweep_ratios = vec![0.8];
    assert_eq!(echoed, expected);
}

#[test]
fn export_generate_and_reparam() {
    let f = fixture();
    let out_dir = f.root.join("misc");
    let out = acip(&["export-scores", "--checkpoint", s(&f.parametrized()), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    assert!(csv.starts_with("block,layer_kind,index,raw_score,normalized_score\n"));
    // one block, six projections of rank 16
    assert_eq!(csv.lines().count(), 1 + 6 * 16);

    let out = acip(&["generate", "--checkpoint", s(&f.base()), "--prompt", "ROMEO:", "--tokens", "20", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("generated.txt")).unwrap();
    assert!(text.starts_with("ROMEO:") && text.chars().count() == 26, "{text:?}");
    let out = acip(&["generate", "--checkpoint", s(&f.base()), "--prompt", "\u{263a}", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2);

    let out = acip(&["reparam", "--base", s(&f.base()), "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = acip(&["compress", "--checkpoint", s(&out_dir.join("parametrized.acip")), "--ratio", "0.7", "--config", s(&f.config), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 3, "reparam alone has no learned scores");
    let out = acip(&[
        "compress",
        "--checkpoint",
        s(&out_dir.join("parametrized.acip")),
        "--ratio",
        "0.7",
        "--scores",
        "magnitude",
        "--config",
        s(&f.config),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
