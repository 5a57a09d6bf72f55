use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_submark");

const SMALL: &str = r#"{
  "model": {"vocab_size": 256, "d_model": 32, "n_layers": 4, "n_heads": 4, "d_ff": 128, "max_seq": 8},
  "world": {"n_subjects": 48, "n_relations": 2},
  "pretrain": {"epochs": 40},
  "n_bits": 16,
  "n_reference": 16,
  "black_box": {"m": 32},
  "attack_layers": [1, 2, 3]
}"#;

fn submark(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SUBMARK_SEED").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Reads a float stored as its hex bit pattern.
fn float(v: &serde_json::Value) -> f64 {
    f64::from_bits(u64::from_str_radix(v["hex"].as_str().expect("hex float"), 16).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("small.json");
        fs::write(&config, SMALL).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the pipeline into `deploy-<tag>` with the key at `secret/<tag>.json`.
    fn pipeline(&self, tag: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
        let out = self.path(&format!("deploy-{tag}"));
        let key = self.path(&format!("secret/{tag}.json"));
        let mut args = vec!["pipeline", "--config", s(&self.config), "--out-dir", s(&out), "--key", s(&key)];
        args.extend_from_slice(extra);
        let o = submark(&args);
        assert_eq!(code(&o), 0, "pipeline failed: {}", stderr(&o));
        (out.join("model.ckpt"), key)
    }
}

#[test]
fn pipeline_writes_artifacts_and_verifies_in_both_modes() {
    let run = Run::new();
    let (model, key) = run.pipeline("a", &[]);
    let dir = model.parent().unwrap();
    for f in ["model.ckpt", "report.json", "config.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert!(!dir.join("a.json").exists());

    let o = submark(&["validate-key", "--key", s(&key), "--model", s(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report = run.path("white.json");
    let o = submark(&["verify", "--mode", "white", "--model", s(&model), "--key", s(&key), "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("OWNED"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(float(&v["ber"]), 0.0);
    assert_eq!(v["verdict"], "OWNED");

    let o = submark(&["verify", "--mode", "black", "--model", s(&model), "--key", s(&key)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn black_box_verification_through_an_endpoint() {
    let run = Run::new();
    let (model, key) = run.pipeline("a", &[]);
    let endpoint = format!("{BIN} serve --model {}", s(&model));
    let in_proc = submark(&["verify", "--mode", "black", "--model", s(&model), "--key", s(&key)]);
    let remote = submark(&["verify", "--mode", "black", "--endpoint", &endpoint, "--key", s(&key)]);
    assert_eq!(code(&remote), 0, "{}", stderr(&remote));
    assert_eq!(stdout(&remote), stdout(&in_proc));

    let o = submark(&["verify", "--mode", "white", "--endpoint", &endpoint, "--key", s(&key)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn reruns_are_bitwise_identical_and_match_the_staged_commands() {
    let run = Run::new();
    let (m1, k1) = run.pipeline("a", &[]);
    let (m2, k2) = run.pipeline("b", &[]);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(fs::read(&k1).unwrap(), fs::read(&k2).unwrap());

    let base = run.path("base");
    let draft = run.path("secret/draft.json");
    let staged = run.path("deploy-staged/model.ckpt");
    let key = run.path("secret/staged.json");
    let cfg = s(&run.config);
    for args in [
        vec!["pretrain", "--config", cfg, "--out-dir", s(&base)],
        vec!["keygen", "--config", cfg, "--base", s(&base.join("base.ckpt")), "--out", s(&draft)],
        vec!["inject", "--base", s(&base.join("base.ckpt")), "--draft", s(&draft), "--out", s(&staged)],
        vec!["signatures", "--model", s(&staged), "--draft", s(&draft), "--key", s(&key)],
    ] {
        let o = submark(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(fs::read(&staged).unwrap(), fs::read(&m1).unwrap());
    assert_eq!(fs::read(&key).unwrap(), fs::read(&k1).unwrap());
}

#[test]
fn seed_flag_and_environment_change_the_artifacts() {
    let run = Run::new();
    let (_, k1) = run.pipeline("a", &["--seed", "5"]);
    let out = run.path("deploy-env");
    let k2 = run.path("secret/env.json");
    let o = Command::new(BIN)
        .args(["pipeline", "--config", s(&run.config), "--out-dir", s(&out), "--key", s(&k2)])
        .env("SUBMARK_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&k1).unwrap(), fs::read(&k2).unwrap());
    let (_, k0) = run.pipeline("zero", &[]);
    assert_ne!(fs::read(&k0).unwrap(), fs::read(&k1).unwrap());
}

#[test]
fn independent_model_is_not_owned() {
    let run = Run::new();
    let (_, key) = run.pipeline("a", &[]);
    let other = run.path("other");
    let o = submark(&["--seed", "77", "pretrain", "--config", s(&run.config), "--out-dir", s(&other)]);
    assert_eq!(code(&o), 0);
    let o = submark(&["verify", "--mode", "white", "--model", s(&other.join("base.ckpt")), "--key", s(&key)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("NOT-OWNED"));
    let o = submark(&["validate-key", "--key", s(&key), "--model", s(&other.join("base.ckpt"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn key_is_never_written_next_to_the_model() {
    let run = Run::new();
    let out = run.path("deploy");
    let o = submark(&["pipeline", "--config", s(&run.config), "--out-dir", s(&out), "--key", s(&out.join("key.json"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("refusing"));
    assert!(!out.join("key.json").exists());
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn capacity_violation_names_the_bound() {
    let run = Run::new();
    let cfg = run.path("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    v["n_bits"] = 20.into();
    v["joint_orthogonal"] = true.into();
    fs::write(&cfg, v.to_string()).unwrap();
    let o = submark(&["pipeline", "--config", s(&cfg), "--out-dir", s(&run.path("d")), "--key", s(&run.path("k/k.json"))]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("config") && err.contains("2N"), "{err}");
}

#[test]
fn usage_errors_exit_with_failure_status() {
    assert_eq!(code(&submark(&["verify", "--mode", "gray", "--key", "k"])), 3);
    assert_eq!(code(&submark(&["no-such-command"])), 3);
    assert_eq!(code(&submark(&["--help"])), 0);
    assert_eq!(code(&submark(&["verify", "--mode", "white", "--model", "/nonexistent", "--key", "/nonexistent"])), 3);
}

#[test]
fn attacks_write_checkpoint_and_gate_report() {
    let run = Run::new();
    let (model, key) = run.pipeline("a", &[]);
    let cfg = s(&run.config);

    let quant = run.path("attacked/quant.ckpt");
    let o = submark(&["attack", "--kind", "quant", "--bits", "8", "--model", s(&model), "--out", s(&quant), "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = submark(&["verify", "--mode", "white", "--model", s(&quant), "--key", s(&key)]);
    assert_eq!(code(&o), 0, "quantized model lost the watermark: {}", stdout(&o));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("attacked/quant.ckpt.report.json")).unwrap()).unwrap();
    assert_eq!(rep["gate_passed"], true);

    let merged = run.path("attacked/merge1.ckpt");
    let o = submark(&["attack", "--kind", "merge", "--alpha", "1", "--model", s(&model), "--out", s(&merged), "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = submark(&["verify", "--mode", "white", "--model", s(&merged), "--key", s(&key)]);
    assert_eq!(code(&o), 0);

    let weak = run.path("attacked/weak.ckpt");
    let report = run.path("attacked/weak.json");
    let o = submark(&[
        "attack", "--kind", "sft", "--steps", "1", "--model", s(&model), "--out", s(&weak), "--config", cfg, "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 3);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["gate_passed"], false);
}

#[test]
fn ecc_round_trip_through_the_cli() {
    let run = Run::new();
    let cfg = run.path("ecc.json");
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    v["n_bits"] = 14.into();
    fs::write(&cfg, v.to_string()).unwrap();
    let out = run.path("deploy");
    let key = run.path("secret/key.json");
    let o = submark(&["pipeline", "--config", s(&cfg), "--ecc", "hamming74", "--out-dir", s(&out), "--key", s(&key)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = out.join("model.ckpt");
    let report = run.path("v.json");
    let o = submark(&["verify", "--mode", "white", "--ecc", "hamming74", "--model", s(&model), "--key", s(&key), "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let k: serde_json::Value = serde_json::from_str(&fs::read_to_string(&key).unwrap()).unwrap();
    assert_eq!(v["decoded_payload"], k["payload"]);
    let o = submark(&["verify", "--mode", "white", "--ecc", "repetition3", "--model", s(&model), "--key", s(&key)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn lineage_pool_separates_derivatives_from_independents() {
    let run = Run::new();
    let (model, key) = run.pipeline("a", &[]);
    let out = run.path("lineage.json");
    let o = submark(&["eval-lineage", "--model", s(&model), "--key", s(&key), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 12);
    for mode in ["white", "black"] {
        assert_eq!(float(&v[mode]["auc"]), 1.0, "{mode}");
    }
}
