use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use alignlab::harness::ExperimentConfig;

fn alignlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn write_tiny(dir: &Path) -> String {
    let cfg = ExperimentConfig::tiny("out");
    fs::write(dir.join("tiny.toml"), cfg.to_toml().unwrap()).unwrap();
    "tiny.toml".into()
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "seeds = [\n").unwrap();
    let out = alignlab(dir.path(), &["gen-data", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_override_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    for args in [
        vec!["pretrain", "--config", &cfg, "--instance-len", "31"],
        vec!["pretrain", "--config", &cfg, "--objective", "BERT"],
        vec!["pretrain", "--config", &cfg, "--transform", "Trans+Rot"],
        vec!["report", "--rows", "rows.csv", "--absent", "MLM"],
    ] {
        let out = alignlab(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_rows_file_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = alignlab(dir.path(), &["report", "--rows", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_rows_file_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rows.csv"), "objective,transform,task,B_S,B_Z,alignment\nMLM,Trans,NER,abc,1,2\n").unwrap();
    let out = alignlab(dir.path(), &["report", "--rows", "rows.csv"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tiny_pipeline_runs_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let common = ["--config", cfg.as_str(), "--total-steps", "10"];
    for stage in ["train-bpe", "gen-data", "pretrain", "finetune", "eval", "report"] {
        let mut args = vec![stage];
        args.extend(common);
        let out = alignlab(dir.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let data = dir.path().join("out/data/trans_inv");
    for f in ["bpe.merges", "bpe.vocab", "manifest.json", "correspondence.tsv"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let out = alignlab(dir.path(), &["gen-data", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("UpToDate"));

    let tables = fs::read_to_string(dir.path().join("out/report/tables.csv")).unwrap();
    assert_eq!(tables.lines().count(), 5);

    // Reporting again from the written rows gives the same tables.
    let out = alignlab(dir.path(), &["report", "--rows", "out/report/rows.csv", "--out", "again"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("again/tables.csv")).unwrap(), tables);
}

#[test]
fn config_prints_resolved_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = alignlab(dir.path(), &["config", "--seeds", "4,5", "--objective", "MLM,ALIGN_MLM", "--alpha", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds, vec![4, 5]);
    assert_eq!(cfg.objectives().len(), 2);
    assert!(cfg.objectives().iter().all(|o| o.alpha == 2.0));
}
