use std::fs;
use std::path::Path;
use std::process::Command as Process;

use splitguard::benchmark::read_benchmark;
use splitguard_cli::commands::BENCHMARK_FILE;
use splitguard_cli::*;

const SMALL: &str = "
data.source = synthetic
data.train = 200
data.aux = 64
data.test = 64
train.phase1_epochs = 1
train.phase2_epochs = 1
attacks = likelihood_max
lm.iterations = 10
lm.eval_samples = 2
mi.systems = 12
export.n = 5
";

fn raw(extra: &str) -> RawConfig {
    RawConfig::parse(&format!("{SMALL}{extra}")).unwrap()
}

fn config(extra: &str, cmd: Command) -> ExperimentConfig {
    ExperimentConfig::resolve(&raw(extra), cmd).unwrap()
}

fn assert_manifest_matches_files(dir: &Path, m: &Manifest) {
    assert!(!m.artifacts.is_empty());
    for a in &m.artifacts {
        let bytes = fs::read(dir.join(&a.file)).unwrap();
        assert_eq!(sha256_hex(&bytes), a.sha256, "{}", a.file);
        assert_eq!(bytes.len() as u64, a.bytes);
    }
    let on_disk: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(&on_disk, m);
}

#[test]
fn missing_required_key_is_named() {
    let raw = RawConfig::parse("data.source = synthetic\n").unwrap();
    let err = ExperimentConfig::resolve(&raw, Command::Sweep).unwrap_err();
    assert!(matches!(&err, ConfigError::MissingKey(k) if k == "sweep.ratios"), "{err}");
    assert!(err.to_string().contains("sweep.ratios"));
    let err = ExperimentConfig::resolve(&RawConfig::default(), Command::Train).unwrap_err();
    assert!(err.to_string().contains("data.source"));
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RawConfig::parse("seed = 1\ntrain.learning_rate = 0.1\n").unwrap_err();
    assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "train.learning_rate"), "{err}");
}

#[test]
fn invalid_values_are_caught_before_compute() {
    for (extra, key) in [
        ("pipeline.ratio = 1.5\n", "pipeline"),
        ("sweep.ratios = 0, 2\n", "sweep.ratios"),
        ("attack.mode = sa\n", "attacks"),
        ("data.source = imagenet\n", "data.source"),
    ] {
        let base = if extra.starts_with("data.source") {
            SMALL.replace("data.source = synthetic\n", "")
        } else {
            SMALL.to_string()
        };
        let text = format!("{base}{extra}");
        let raw = RawConfig::parse(&text).unwrap();
        let err = ExperimentConfig::resolve(&raw, Command::Train).unwrap_err();
        assert!(err.to_string().contains(key), "{extra}: {err}");
    }
}

#[test]
fn sweep_over_four_ratios_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("sweep.ratios = 0, 0.3, 0.6, 1\n", Command::Sweep);
    let out = cmd_sweep(&cfg, dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "ratio,utility,ssim_mean,psnr_mean,leakage");
    assert_eq!(out.rows.rows.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    assert_manifest_matches_files(dir.path(), &out.manifest);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = run(Command::Mi, &raw("seed = 9\n"), &a).unwrap();
    let again = RawConfig::load(&a.join("resolved.cfg")).unwrap();
    let second = run(Command::Mi, &again, &b).unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert_eq!(first.seed, 9);
}

#[test]
fn train_checkpoint_feeds_later_commands() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("train");
    let train = cmd_train(&config("", Command::Train), &t).unwrap();
    assert_manifest_matches_files(&t, &train.manifest);
    let epochs = fs::read_to_string(t.join("train_epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);

    let ckpt = t.join("checkpoint.dibm");
    let extra = format!("checkpoint = {}\neval.defenses = none, disco\n", ckpt.display());
    let e = dir.path().join("eval");
    let eval = cmd_eval(&config(&extra, Command::Eval), &e).unwrap();
    // same weights, seed and test split as the training summary
    assert_eq!(eval.rows.rows[0].utility, train.rows.utility_none);
    assert_eq!(eval.rows.rows[1].utility, train.rows.utility_defended);
    assert_eq!(eval.manifest.inputs.len(), 1);
    assert_eq!(eval.manifest.inputs[0].sha256, sha256_hex(&fs::read(&ckpt).unwrap()));

    let x = dir.path().join("export");
    let export = cmd_export(&config(&extra, Command::Export), &x).unwrap();
    let records = read_benchmark(&x.join(BENCHMARK_FILE)).unwrap();
    assert_eq!(records, export.rows);
    assert_eq!(records.len(), 3 + 5);
}

#[test]
fn attack_writes_reconstruction_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_attack(&config("images = 1\n", Command::Attack), dir.path()).unwrap();
    let ppm = fs::read(dir.path().join("likelihood_max_recon0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert!(!dir.path().join("likelihood_max_recon1.ppm").exists());
    let csv = fs::read_to_string(dir.path().join("attack.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_manifest_matches_files(dir.path(), &out.manifest);
}

#[test]
fn mi_systems_pass_the_exact_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_mi(&config("", Command::Mi), dir.path()).unwrap();
    assert_eq!(out.rows.len(), 12);
    assert!(out.rows.iter().all(|r| r.passed()));
    let jsonl = fs::read_to_string(dir.path().join("mi.jsonl")).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["pruning"]["h_fp"].is_number());
    }
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_splitguard"))
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("data.source"), "{stderr}");
}

#[test]
fn binary_seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mi.cfg");
    fs::write(&cfg, "mi.systems = 3\nseed = 1\n").unwrap();
    let o = dir.path().join("o");
    let status = Process::new(env!("CARGO_BIN_EXE_splitguard"))
        .args(["mi", "--seed", "42", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&o)
        .status()
        .unwrap();
    assert!(status.success());
    let m: Manifest = serde_json::from_slice(&fs::read(o.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 42);
    let csv = fs::read_to_string(o.join("mi.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("42,"));
}
