//! End-to-end runs of the `sbdm` binary on a tiny level-1 setup.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbdm_core::cohort::{load_cohort, FieldKind, VertexField};

const TINY: &str = r#"{
  "synthetic": {"level": 1, "n_subjects": 30},
  "split": [0.6, 0.2, 0.2],
  "train": {
    "epochs": 2, "batch_size": 8, "horizon": 10,
    "model": {"base_channels": 8, "level_top": 1, "depth": 1, "channel_mults": [1, 2], "embed_dim": 8, "heads": 2}
  },
  "sample": {"stages": 4}
}"#;

fn sbdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbdm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = if extra.is_empty() {
        TINY.to_string()
    } else {
        TINY.replacen('{', &format!("{{{extra},"), 1)
    };
    let path = dir.join(format!("cfg{}.json", extra.len()));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn version_and_usage_errors() {
    let v = sbdm(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).starts_with("sbdm 0.1.0 (sbdf v1, manifest v1, checkpoint v1, report v1)"));
    assert_eq!(sbdm(&[]).status.code(), Some(1));
    assert_eq!(sbdm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sbdm(&["mesh", "info"]).status.code(), Some(1));
    assert_eq!(sbdm(&["--help"]).status.code(), Some(0));
}

#[test]
fn mesh_info_counts() {
    let o = sbdm(&["mesh", "info", "--level", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).contains("vertices=642 faces=1280 edges=1920"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn mesh_export_writes_obj() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l1.obj");
    assert_eq!(
        sbdm(&["mesh", "export", "--level", "1", "--out", p(&out)])
            .status
            .code(),
        Some(0)
    );
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 42);
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 80);
}

#[test]
fn bad_configs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), r#""epochz": 3"#);
    let o = sbdm(&[
        "data",
        "gen",
        "--config",
        p(&unknown),
        "--out",
        p(&dir.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let o = sbdm(&["train", "--config", p(&bad), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = sbdm(&["data", "inspect", "--manifest", p(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_cohorts_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = sbdm(&["--seed", seed, "data", "gen", "--config", p(&cfg), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        load_cohort(&out.join("manifest.json")).unwrap()
    };
    let (a, b, c) = (gen("a", "4"), gen("b", "4"), gen("c", "5"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.subjects.len(), 30);
}

#[test]
fn train_predict_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let o = sbdm(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = run.join("checkpoint.sbdm");
    assert!(ck.exists() && run.join("run_config.json").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // A baseline field to forecast from.
    let cohort_dir = dir.path().join("cohort");
    assert_eq!(
        sbdm(&["data", "gen", "--config", p(&cfg), "--out", p(&cohort_dir)])
            .status
            .code(),
        Some(0)
    );
    let cohort = load_cohort(&cohort_dir.join("manifest.json")).unwrap();
    let baseline = cohort_dir
        .join("fields")
        .join(format!("{}_base.sbdf", cohort.subjects[0].id));

    let pred = dir.path().join("pred.sbdf");
    let base_args = [
        "predict",
        "--checkpoint",
        p(&ck),
        "--baseline",
        p(&baseline),
        "--t",
        "24",
        "--age",
        "72",
        "--sex",
        "F",
        "--dx0",
        "MCI",
    ];
    let mut args = base_args.to_vec();
    args.extend(["--out", p(&pred), "--deterministic"]);
    let o = sbdm(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let field = VertexField::read(&pred).unwrap();
    assert_eq!(
        (field.level(), field.kind(), field.len()),
        (1, FieldKind::Thickness, 42)
    );
    assert_eq!(field.mask(), cohort.mask.as_slice());

    // The checkpoint was trained without follow-up diagnosis conditioning.
    let mut args = base_args.to_vec();
    args.extend(["--dxt", "AD"]);
    assert_eq!(sbdm(&args).status.code(), Some(1));
    let o = sbdm(&[
        "trajectory",
        "--checkpoint",
        p(&ck),
        "--manifest",
        p(&cohort_dir.join("manifest.json")),
        "--target-dx",
        "AD",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = sbdm(&[
        "trajectory",
        "--checkpoint",
        p(&ck),
        "--manifest",
        p(&cohort_dir.join("manifest.json")),
        "--subject",
        &cohort.subjects[0].id,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);

    let eval_dir = dir.path().join("eval");
    let o = sbdm(&["eval", "--checkpoint", p(&ck), "--out", p(&eval_dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["baselines"].as_array().unwrap().len(), 2);
    assert!(eval_dir.join("error_map.sbdf").exists());
    let csv = std::fs::read_to_string(eval_dir.join("error_map.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("vertex_index,error_mm"));
    assert_eq!(csv.lines().count() - 1, cohort.mask.iter().filter(|&&m| m).count());

    // Resuming for one more epoch appends to the log.
    let o = sbdm(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--epochs",
        "3",
        "--resume",
        p(&ck),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    // Any other change is refused.
    let other = dir.path().join("other.json");
    std::fs::write(&other, TINY.replace(r#""batch_size": 8"#, r#""batch_size": 4"#)).unwrap();
    let o = sbdm(&[
        "train",
        "--config",
        p(&other),
        "--out",
        p(&run),
        "--epochs",
        "4",
        "--resume",
        p(&ck),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
