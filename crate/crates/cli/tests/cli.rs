//! End-to-end runs of the `forge` binary on a miniature benchmark.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MINI: &str = r#"
seed = 3
out_dir = "out"

[synth]
seed = 3
entities = 8

[[synth.sources]]
name = "web"
family = "broad"
docs = 80

[[synth.sources]]
name = "math"
family = "math"
docs = 80

[[synth.sources]]
name = "code"
family = "code"
docs = 80

[[synth.sources]]
name = "facts"
family = "knowledge"
docs = 80

[[synth.sources]]
name = "spam"
family = "spam"
docs = 60

[[sources]]
id = "web"
path = "out/synth/web.jsonl"

[[sources]]
id = "math"
path = "out/synth/math.jsonl"

[[sources]]
id = "code"
path = "out/synth/code.jsonl"

[[sources]]
id = "facts"
path = "out/synth/facts.jsonl"

[[sources]]
id = "spam"
path = "out/synth/spam.jsonl"

[model]
layers = 1
heads = 2
kv_heads = 1
dim = 16
hidden_dim = 32
seq_len = 32

[probes]
target_size = 16
probe_fraction = 0.5

[[probes.chain]]
name = "fluency"
kind = "threshold_classifier"
threshold = 4.0
scale = 5.0

[[probes.chain]]
name = "domain"
kind = "domain_judge"
top_fraction = 0.5

[capabilities]
code = ["code", "web"]
math = ["math", "web"]
knowledge = ["facts", "web"]

[influence.training]
token_budget = 2000
checkpoints = 2

[mixture]
floor_unrepresented = true

[loo.run]
token_budget = 1500
seeds = [0, 1]
eval_every = 5

[pretrain]
token_budget = 2000

[coevolve]
pool_per_source = 10

[coevolve.run]
max_phases = 2
phase_budget = 1500

[diagnostics]
probe_batch = 8

[diagnostics.sweep]
learning_rates = [0.001, 0.003, 0.01]
pretrain_steps = 4
midtrain_steps = 2
"#;

fn forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("forge binary runs")
}

fn mini(dir: &Path) -> &'static str {
    fs::write(dir.join("mini.toml"), MINI).unwrap();
    "mini.toml"
}

#[test]
fn full_pipeline_writes_every_manifest_and_mix_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini(tmp.path());
    let synth = forge(tmp.path(), &["synth", "--config", cfg]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let run = forge(tmp.path(), &["run", "--config", cfg]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let out = tmp.path().join("out");
    for stage in ["ingest", "probes", "capmodels", "influence", "mix", "loo", "coevolve", "diag"] {
        assert!(out.join(stage).join("manifest.json").exists(), "{stage}");
    }
    assert!(out.join("manifest.json").exists());

    let weights = out.join("mix/weights.jsonl");
    let before = fs::read(&weights).unwrap();
    let again = forge(tmp.path(), &["mix", "--config", cfg]);
    assert!(again.status.success());
    assert_eq!(before, fs::read(&weights).unwrap());
}

#[test]
fn missing_upstream_artifact_exits_2_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini(tmp.path());
    let out = forge(tmp.path(), &["mix", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn undeclared_capability_source_exits_3_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = MINI.replace(r#"knowledge = ["facts", "web"]"#, r#"knowledge = ["facts", "wikipedia"]"#);
    fs::write(tmp.path().join("bad.toml"), bad).unwrap();
    let out = forge(tmp.path(), &["ingest", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("capabilities.knowledge"), "{err}");
}

#[test]
fn print_config_dumps_effective_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini(tmp.path());
    let out = forge(tmp.path(), &["run", "--config", cfg, "--seed", "99", "--print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 99"));
    assert!(text.contains("[coevolve.run]"));
}
