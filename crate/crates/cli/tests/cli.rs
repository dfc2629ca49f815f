use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adaptive2::data::{generate_synthetic, write_synthetic_csv, SyntheticConfig};
use adaptive2_cli::commands::RunMetrics;
use adaptive2_cli::config::RunConfig;
use adaptive2_cli::manifest::ExperimentManifest;
use tempfile::TempDir;

const BASE: &str = r#"
output_dir = "out"

[data.synthetic]
domains = 3
fields = 4
vocab = 20
samples = 1200
seed = 3
embedding_dim = 8

[model]
hidden = 16
fusion_layers = 2

[model.dmm]
m = 3

[training]
epochs = 2
batch_size = 64
seed = 1
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptive2")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn train_writes_a_complete_manifest() {
    let (dir, cfg) = setup(BASE);
    ok(&["train", "-c", cfg.to_str().unwrap()]);
    let out = dir.path().join("out");
    let manifest = ExperimentManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.seed, 1);
    assert_eq!(manifest.config_hash, manifest.config.content_hash());
    assert_eq!(manifest.config_hash.len(), 64);
    for f in ["checkpoint.bin", "history.csv", "metrics.json"] {
        assert!(manifest.files.contains(&PathBuf::from(f)), "{f} missing from manifest");
        assert!(out.join(f).is_file());
    }
    let metrics: RunMetrics = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&metrics).unwrap(), manifest.metrics);
    assert!(metrics.validation.nmi.is_some());
}

#[test]
fn seed_override_changes_only_the_seed() {
    let (dir, cfg) = setup(BASE);
    let path = cfg.to_str().unwrap();
    let base = RunConfig::load(&cfg, &[]).unwrap();
    let seeded = RunConfig::load(&cfg, &["training.seed=9".to_string()]).unwrap();
    let mut reverted = seeded.clone();
    reverted.training.seed = base.training.seed;
    assert_eq!(reverted, base);
    assert_ne!(seeded.content_hash(), base.content_hash());

    ok(&["train", "-c", path, "-o", "training.seed=9"]);
    let m = ExperimentManifest::read(&dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(m.seed, 9);
    assert_eq!(m.config, seeded);
}

#[test]
fn training_is_reproducible() {
    let (dir, cfg) = setup(BASE);
    let path = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    ok(&["train", "-c", path]);
    let first = std::fs::read(out.join("checkpoint.bin")).unwrap();
    let first_metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    ok(&["train", "-c", path]);
    assert_eq!(first, std::fs::read(out.join("checkpoint.bin")).unwrap());
    assert_eq!(first_metrics, std::fs::read_to_string(out.join("metrics.json")).unwrap());
}

#[test]
fn evaluate_reproduces_training_metrics() {
    let (dir, cfg) = setup(BASE);
    let path = cfg.to_str().unwrap();
    ok(&["train", "-c", path]);
    let stdout = ok(&["evaluate", "-c", path]);
    let printed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let out = dir.path().join("out");
    let train = ExperimentManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(printed, train.metrics["validation"]);
    let eval = ExperimentManifest::read(&out.join("manifest-evaluate.json")).unwrap();
    assert_eq!(eval.files, vec![PathBuf::from("eval_val.json")]);
    assert_eq!(eval.config_hash, train.config_hash);
}

#[test]
fn export_covers_every_sample_with_valid_domains() {
    let (dir, cfg) = setup(BASE);
    let path = cfg.to_str().unwrap();
    ok(&["train", "-c", path]);
    let out = dir.path().join("out");
    for stage in ["pre", "post"] {
        ok(&["export-domains", "-c", path, "--stage", stage]);
    }
    let rows = read_csv(&out.join("domains_post_encoder.csv"));
    assert_eq!(rows.len(), 1200);
    let mut ids: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    ids.dedup();
    assert_eq!(ids, (0..1200).collect::<Vec<_>>());
    assert!(rows.iter().all(|r| r[1].parse::<usize>().unwrap() < 3));
    assert_eq!(read_csv(&out.join("projection_pre_encoder.csv")).len(), 1200);
    let m = ExperimentManifest::read(&out.join("manifest-export-domains.json")).unwrap();
    assert!(m.files.iter().all(|f| out.join(f).is_file()));

    ok(&["export-domains", "-c", path, "--split", "test"]);
    assert_eq!(read_csv(&out.join("domains_post_encoder.csv")).len(), 120);
}

#[test]
fn profile_prints_matched_baseline() {
    let (_dir, cfg) = setup(BASE);
    let text = ok(&["profile", "-c", cfg.to_str().unwrap(), "--batch", "128"]);
    assert!(text.starts_with("batch size 128\n"));
    assert!(text.contains("adaptive2") && text.contains("mlp (flops-matched"));
    let json: serde_json::Value = serde_json::from_str(&ok(&["profile", "-c", cfg.to_str().unwrap(), "--batch", "128", "--json"])).unwrap();
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let (a, b) = (reports[0]["flops"].as_f64().unwrap(), reports[1]["flops"].as_f64().unwrap());
    assert!((a - b).abs() <= 0.05 * a);
    for r in reports {
        assert!(text.contains(&r["flops"].to_string()));
    }
}

#[test]
fn sweep_reports_one_row_per_m() {
    let (dir, cfg) = setup(BASE);
    let out = ok(&["sweep-m", "-c", cfg.to_str().unwrap(), "--m-values", "1,2,4", "--parallel", "3"]);
    assert_eq!(out.lines().filter(|l| l.trim_end().ends_with('*')).count(), 1);
    let rows = read_csv(&dir.path().join("out/sweep.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2", "4"]);
    assert_eq!(rows.iter().filter(|r| r[4] == "true").count(), 1);
    let entropy: f64 = rows[0][3].parse().unwrap();
    assert_eq!(entropy, 0.0);
    let m = ExperimentManifest::read(&dir.path().join("out/manifest-sweep-m.json")).unwrap();
    assert_eq!(m.files.len(), 1 + 3 * 4);
}

#[test]
fn csv_data_runs_with_an_explicit_schema() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticConfig { samples: 600, fields: 3, vocab: 10, seed: 5, ..Default::default() }).unwrap();
    write_synthetic_csv(&dir.path().join("log.csv"), &ds).unwrap();
    let mut config: toml::Table = "output_dir = \"out\"\n[data.csv]\npath = \"log.csv\"\n[training]\nepochs = 1\nbatch_size = 32\n".parse().unwrap();
    config.insert("schema".into(), toml::Value::try_from(&ds.schema).unwrap());
    let config = toml::to_string(&config).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    ok(&["train", "-c", cfg.to_str().unwrap()]);
    assert!(dir.path().join("out/manifest.json").is_file());
}

#[test]
fn invalid_configuration_exits_with_status_2() {
    let (dir, cfg) = setup(BASE);
    let path = cfg.to_str().unwrap();
    let code = |args: &[&str]| cli(args).status.code();
    assert_eq!(code(&["train", "-c", path, "-o", "model.hidden=0"]), Some(2));
    assert_eq!(code(&["train", "-c", path, "-o", "model.unknown=1"]), Some(2));
    assert_eq!(code(&["train", "-c", path, "-o", "training.seed=-1"]), Some(2));
    assert_eq!(code(&["train", "-c", "/nonexistent/run.toml"]), Some(2));
    assert_eq!(code(&["train"]), Some(2));
    assert_eq!(code(&["evaluate", "-c", path]), Some(2), "missing checkpoint");
    assert_eq!(code(&["sweep-m", "-c", path, "--m-values", "0"]), Some(2));
    assert!(!dir.path().join("out/manifest.json").exists());

    ok(&["train", "-c", path]);
    let other = ["evaluate", "-c", path, "-o", "data.synthetic.fields=5"];
    assert_eq!(code(&other), Some(2), "schema mismatch");
}

#[test]
fn diverging_training_exits_with_status_3() {
    let (dir, cfg) = setup(BASE);
    let out = cli(&["train", "-c", cfg.to_str().unwrap(), "-o", "training.optimizer.learning_rate=1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out/manifest.json").exists());
}
