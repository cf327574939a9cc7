use std::fs;
use std::path::Path;
use std::process::Command;

use tosc_bench::config::{ExperimentConfig, Scheme};
use tosc_bench::report::emit_report;
use tosc_bench::runner::{self, load_corpus, read_metrics, run_attack, run_eval, run_train};
use tosc_bench::BenchError;
use tosc_core::codec::ModelBundle;
use tosc_core::system::Transceiver;

fn tiny(scheme: Scheme, root: &Path) -> ExperimentConfig {
    let src = format!(
        r#"
scheme = "{}"
epochs = 1
batch_size = 64
output = "{}"
data_root = "{}"

[dataset]
name = "tiny"
synthetic = "objects"
train_images = 400
test_images = 200

[encryption]
key = "000102030405060708090a0b0c0d0e0f"

[attack]
pairs = 200
epochs = 1
test_pairs = 150
perceptual_epochs = 1
grid_images = 4
snr_db = [4, 12]

[mi]
min_pairs = 100
"#,
        scheme.as_str(),
        root.join("out").display(),
        root.join("data").display()
    );
    ExperimentConfig::from_toml_str(&src).unwrap()
}

fn data_rows(log: &str) -> usize {
    log.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count()
}

#[test]
fn train_smoke_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scheme::Baseline, dir.path());
    let t = run_train(&cfg, 0).unwrap();
    assert!(t.bundle.is_file());
    let log = fs::read_to_string(cfg.run_dir(0).join(runner::TRAIN_LOG)).unwrap();
    assert_eq!(data_rows(&log), 1);
    assert!(log.contains(&cfg.hash()));
    assert!(log.contains("deviation batch_size = 64"));
    let b = ModelBundle::load(&t.bundle).unwrap();
    assert_eq!(b.metadata["training"]["config_hash"], cfg.hash());
    assert_eq!(b.metadata["training"]["seed"], 0);
}

#[test]
fn lbvq_bundle_records_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scheme::Lbvq, dir.path());
    let t = run_train(&cfg, 0).unwrap();
    let b = ModelBundle::load(&t.bundle).unwrap();
    let m = &b.metadata["spec"]["mechanism"];
    assert_eq!(m["codebook_size"], 16);
    assert_eq!(m["seg_dim"], 4);
}

#[test]
fn training_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let la = run_train(&tiny(Scheme::Ibal, a.path()), 3).unwrap().final_loss;
    let lb = run_train(&tiny(Scheme::Ibal, b.path()), 3).unwrap().final_loss;
    assert_eq!(la, lb);
}

#[test]
fn eval_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scheme::Dp, dir.path());
    assert!(matches!(run_eval(&cfg, 0), Err(BenchError::Core(tosc_core::Error::NotFound(_)))));
    run_train(&cfg, 0).unwrap();
    let rows = run_eval(&cfg, 0).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().map(|r| r.snr_db).collect::<Vec<_>>(), vec![4.0, 8.0, 12.0, 16.0, 20.0]);
    assert!(rows.iter().all(|r| r.mi_leakage.is_none() && r.epsilon == Some(0.1)));
    let on_disk = read_metrics(&cfg.run_dir(0).join(runner::METRICS)).unwrap();
    assert_eq!(on_disk, rows);
    let log = fs::read_to_string(cfg.run_dir(0).join(runner::TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("# eval ")).count(), on_disk.len());
    let header = fs::read_to_string(cfg.run_dir(0).join(runner::METRICS)).unwrap();
    assert_eq!(header.lines().next().unwrap(), tosc_core::metrics::METRICS_COLUMNS.join(","));
    assert!(cfg.run_dir(0).join(runner::TIMING).is_file());
}

#[test]
fn eval_rejects_mismatched_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scheme::Baseline, dir.path());
    run_train(&cfg, 0).unwrap();
    let mut other = tiny(Scheme::Encryption, dir.path());
    other.label = cfg.label.clone();
    assert!(matches!(run_eval(&other, 0), Err(BenchError::Config { .. })));
}

#[test]
fn noiseless_accuracy_not_below_low_snr() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Scheme::Baseline, dir.path());
    cfg.epochs = 3;
    run_train(&cfg, 0).unwrap();
    let tx = Transceiver::<f32>::from_bundle(&ModelBundle::load(&cfg.run_dir(0).join(runner::BUNDLE)).unwrap()).unwrap();
    let test = load_corpus(&cfg).unwrap().test;
    let clean = tx.evaluate(&test, tosc_core::channel::NOISELESS, 1).unwrap().accuracy;
    let noisy = tx.evaluate(&test, 4.0, 1).unwrap().accuracy;
    assert!(clean >= noisy, "noiseless {clean} < 4 dB {noisy}");
}

#[test]
fn attack_fills_rows_and_writes_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scheme::Encryption, dir.path());
    run_train(&cfg, 1).unwrap();
    assert!(run_attack(&cfg, 1).is_err());
    run_eval(&cfg, 1).unwrap();
    let rows = run_attack(&cfg, 1).unwrap();
    for r in &rows {
        let attacked = r.snr_db == 4.0 || r.snr_db == 12.0;
        assert_eq!(r.attacker_mse.is_some(), attacked);
        assert_eq!(r.mi_leakage.is_some(), attacked);
    }
    let grids: Vec<_> = fs::read_dir(cfg.run_dir(1).join(runner::GRIDS)).unwrap().collect();
    assert_eq!(grids.len(), 2);
    let png = fs::read(cfg.run_dir(1).join(runner::GRIDS).join("encryption_snr12.png")).unwrap();
    let text = String::from_utf8_lossy(&png);
    assert!(text.contains(&cfg.hash()));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.run_dir(1).join(runner::ATTACK)).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    assert!(report["perceptual_network"]["layers"].is_array());
}

#[test]
fn report_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    assert!(matches!(emit_report(&out), Err(BenchError::Core(tosc_core::Error::Validation(_)))));
    for s in [Scheme::Baseline, Scheme::Lbvq] {
        let cfg = tiny(s, dir.path());
        run_train(&cfg, 0).unwrap();
        run_eval(&cfg, 0).unwrap();
    }
    let files = emit_report(&out).unwrap();
    let acc = fs::read_to_string(out.join("report/accuracy_vs_snr_tiny.svg")).unwrap();
    assert!(acc.contains(">baseline<") && acc.contains(">lbvq<"));
    assert!(acc.contains(&tiny(Scheme::Baseline, dir.path()).hash()));
    let table = fs::read_to_string(out.join("report/complexity.md")).unwrap();
    assert!(table.contains("| Scheme | FLOPs | Params | Train Time for 1 Epoch | Test Time for 1 Instance |"));
    let before: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    let again = emit_report(&out).unwrap();
    assert_eq!(files, again);
    let after: Vec<Vec<u8>> = again.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn cli_reports_config_errors_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "preset = \"cifar10-small\"\nscheme = \"dp\"\n[dp]\nepsilon = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tosc")).args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    let ok = Command::new(env!("CARGO_BIN_EXE_tosc")).args(["preset", "celeba-attr-small"]).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("Mustache"));
    let missing = Command::new(env!("CARGO_BIN_EXE_tosc")).args(["report", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!missing.status.success());
}
