use std::fs;
use std::path::Path;
use std::process::Command;

use unicon_core::cli::{
    cmd_ablate, cmd_generate, cmd_report, cmd_run, CommandOptions, ABLATION_ARMS,
};
use unicon_core::config::{parse_config, ConfigError, ExperimentConfig};

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.num_classes = 3;
    cfg.dataset.per_class = 30;
    cfg.dataset.test_per_class = 10;
    cfg.hyperparams.batch_size = 16;
    cfg.hyperparams.warmup_epochs = 2;
    cfg.hyperparams.total_epochs = 5;
    cfg.arch.hidden_dim = 16;
    cfg.arch.embed_dim = 8;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unicon"))
}

#[test]
fn generate_writes_a_reproducible_noisy_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.noise.rate = 0.8;
    for sub in ["a", "b"] {
        cfg.output_dir = dir.path().join(sub);
        cmd_generate(&cfg).unwrap();
    }
    let a = fs::read_to_string(dir.path().join("a/dataset.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/dataset.csv")).unwrap();
    assert_eq!(a, b);

    let mut rows = a.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 8 + 2);
    assert_eq!(&header[8..], ["true_label", "given_label"]);
    let body: Vec<Vec<&str>> = rows.map(|l| l.split(',').collect()).collect();
    assert_eq!(body.len(), 1000);
    let flipped = body.iter().filter(|r| r[8] != r[9]).count();
    assert_eq!(flipped, 800);
    let test = fs::read_to_string(dir.path().join("a/test.csv")).unwrap();
    assert_eq!(test.lines().count(), 400 + 1);
}

#[test]
fn run_is_deterministic_and_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let opts = CommandOptions {
        export_selection: true,
    };
    let a = cmd_run(&small_config(&dir.path().join("a")), &opts).unwrap();
    cmd_run(&small_config(&dir.path().join("b")), &opts).unwrap();
    for file in [
        "metrics.csv",
        "checkpoint.bin",
        "summary.json",
        "selection/epoch_003_net1.csv",
    ] {
        let x = fs::read(dir.path().join("a").join(file)).unwrap();
        let y = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    assert!(a.summary.best_acc >= a.summary.last_acc);
    assert_eq!(a.metrics.len(), 5);

    let metrics = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 6);
    // warmup rows leave every selection column empty
    let warm: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(warm[1], "warmup");
    assert!(warm[2..8].iter().all(|f| f.is_empty()), "{warm:?}");
    let ssl: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(ssl[1], "ssl");
    assert!(!ssl[2].is_empty());
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let opts = CommandOptions::default();
    let mut cfg = small_config(&dir.path().join("a"));
    cmd_run(&cfg, &opts).unwrap();
    cfg.seed = 1;
    cfg.output_dir = dir.path().join("b");
    cmd_run(&cfg, &opts).unwrap();
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn ablate_runs_every_arm_and_wires_the_switches() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.noise.rate = 0.3;
    let arms = cmd_ablate(
        &cfg,
        &CommandOptions {
            export_selection: true,
        },
    )
    .unwrap();
    let names: Vec<&str> = arms.iter().map(|a| a.arm).collect();
    assert_eq!(names, ABLATION_ARMS);
    for arm in ABLATION_ARMS {
        assert!(dir.path().join(arm).join("metrics.csv").is_file());
    }
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "arm,best_acc,last_acc,final_R,final_auc,final_histogram,skew_ratio"
    );
    assert_eq!(table.lines().count(), 5);

    let quotas = |arm: &str| {
        let a = arms.iter().find(|a| a.arm == arm).unwrap();
        a.output.final_selections.as_ref().unwrap()[0]
            .per_class_quota
            .clone()
    };
    assert!(
        quotas("no_balancing").is_empty(),
        "global selection has no class quotas"
    );
    assert_eq!(quotas("full").len(), 3);
    assert_eq!(quotas("no_contrastive").len(), 3);

    let rows = cmd_report(dir.path()).unwrap();
    assert!(rows > 0);
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(
        report.lines().next().unwrap(),
        "run,epoch,phase,metric,value"
    );
    assert!(report.contains("no_ensemble,"));
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"hyperparams": {"kappa": -1.0}}"#).unwrap();
    let err = parse_config(&path)
        .and_then(|c| c.validate().map(|_| c))
        .unwrap_err();
    assert!(
        matches!(err, ConfigError::OutOfRange { ref key, .. } if key == "hyperparams.kappa"),
        "{err}"
    );

    fs::write(&path, r#"{"noise": {"rat": 0.5}}"#).unwrap();
    let err = parse_config(&path).unwrap_err();
    assert!(err.to_string().contains("noise.rat"), "{err}");

    fs::write(&path, r#"{"seed": "zero"}"#).unwrap();
    let err = parse_config(&path).unwrap_err();
    assert!(
        matches!(err, ConfigError::InvalidType { ref key, .. } if key == "seed"),
        "{err}"
    );

    let err = parse_config(&dir.path().join("missing.json")).unwrap_err();
    assert!(matches!(err, ConfigError::Missing { .. }), "{err}");
}

#[test]
fn binary_reports_bad_configs_with_a_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"noise": {"rate": 1.5}}"#).unwrap();
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("noise.rate"), "{stderr}");
    assert!(!dir.path().join("out/metrics.csv").exists());
}

#[test]
fn binary_generate_and_run_resolve_paths_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Path::new("results"));
    cfg.hyperparams.total_epochs = 3;
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_json()).unwrap();

    let out = bin()
        .arg("generate")
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("results/dataset.csv").is_file());

    let out = bin()
        .args(["run", "--seed", "4", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(summary["best_acc"].as_f64().unwrap() >= summary["last_acc"].as_f64().unwrap());
    assert!(summary.get("final_R").is_some());
    assert!(dir.path().join("results/summary.json").is_file());
}
