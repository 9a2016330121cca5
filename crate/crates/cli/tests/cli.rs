use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use owr_cli::commands::{ablate, AblationAxis, AblationTable};
use owr_cli::config::DatasetConfig;
use owr_cli::ExperimentConfig;
use owr_core::datasets::Generator;

fn owr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owr"))
        .args(args)
        .env_remove("OWR_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::example();
    c.dataset = DatasetConfig::Synthetic {
        generator: Generator::GaussianBlobs,
        n_classes: 5,
        dim: 4,
        samples_per_class: 30,
        variance_range: (0.2, 0.4),
        spacing: 6.0,
        seed: 1,
    };
    c.extractor.layer_dims = vec![6, 4];
    c.schedule.n_known = 4;
    c.schedule.initial = 2;
    c.schedule.step = 2;
    c.training.learning_rate = 0.01;
    c.training.epochs_initial = 2;
    c.training.epochs_incremental = 1;
    c.training.batch_size = 16;
    c.training.threshold_epochs = 3;
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_init_prints_a_valid_config() {
    let out = owr(&["config", "init"]);
    assert!(out.status.success());
    let parsed = ExperimentConfig::from_toml(&stdout(&out)).unwrap();
    assert_eq!(parsed, ExperimentConfig::example());
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(
        &path,
        tiny()
            .to_toml()
            .replace("batch_size = 16", "batch_size = 1"),
    )
    .unwrap();
    let out = owr(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));

    fs::write(&path, "[dataset]\nkind = \"synthetic\"\nbogus = 1\n").unwrap();
    assert_eq!(
        owr(&["config", "check", path.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(owr(&["run"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.dataset = DatasetConfig::Csv {
        path: "absent.csv".into(),
        has_header: true,
        label_column: 0,
        split_column: None,
        split_seed: 0,
    };
    let path = write_config(dir.path(), &c);
    let out = owr(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.csv"), "{}", stderr(&out));
}

#[test]
fn orders_times_runs_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.output.checkpoints = false;
    let path = write_config(dir.path(), &c);
    let out_dir = dir.path().join("out");
    let out = owr(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--order-seeds",
        "0,1,2,3,4",
        "--runs",
        "3",
        "--workers",
        "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dirs: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(dirs.len(), 15);
    for f in ["summary.jsonl", "summary.txt", "plot.tsv", "config.toml"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let exp = out_dir.join("order3_run2");
    let cfg = ExperimentConfig::load(&exp.join("config.toml")).unwrap();
    assert_eq!(cfg.schedule.order_seeds, vec![3]);
    assert_eq!(cfg.training.seed, 2);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.output.dir = "nested".into();
    c.output.checkpoints = false;
    let path = write_config(dir.path(), &c);
    let out = Command::new(env!("CARGO_BIN_EXE_owr"))
        .args(["run", path.to_str().unwrap()])
        .env("OWR_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("nested/summary.jsonl").exists());
}

#[test]
fn eval_reproduces_run_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let path = write_config(dir.path(), &c);
    let out_dir = dir.path().join("out");
    let out = owr(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let exp = out_dir.join("order0_run0");

    let ck = exp.join("checkpoint_step1.json");
    let eval_out = dir.path().join("eval.jsonl");
    let out = owr(&[
        "eval",
        ck.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let evaluated: serde_json::Value = serde_json::from_str(
        fs::read_to_string(&eval_out)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let stored: serde_json::Value = fs::read_to_string(exp.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["record"] == "step" && v["step"] == 1)
        .unwrap();
    for key in [
        "cw_no_rej",
        "cw_rej",
        "open_set_acc",
        "owr",
        "owr_h",
        "known_rejection_rate",
    ] {
        assert_eq!(evaluated[key], stored[key], "{key}");
    }

    let out = owr(&[
        "eval",
        ck.to_str().unwrap(),
        "--delta-override",
        "inf",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(
        fs::read_to_string(&eval_out)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(v["cw_rej"], v["cw_no_rej"]);

    // Schedule without unknown classes: open set metrics go missing.
    let mut schedule: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp.join("schedule.json")).unwrap()).unwrap();
    schedule["unknown_pool"] = serde_json::json!([]);
    let sched_path = dir.path().join("no_unknown.json");
    fs::write(&sched_path, schedule.to_string()).unwrap();
    let out = owr(&[
        "eval",
        ck.to_str().unwrap(),
        "--schedule",
        sched_path.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(
        fs::read_to_string(&eval_out)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert!(v["open_set_acc"].is_null() && v["owr_h"].is_null());
    assert_eq!(v["cw_no_rej"], stored["cw_no_rej"]);

    // A checkpoint from a future format.
    let mut raw: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    raw["format_version"] = 99.into();
    let bad = dir.path().join("future.json");
    fs::write(&bad, raw.to_string()).unwrap();
    let out = owr(&["eval", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(
        msg.contains("expected 1") && msg.contains("found 99"),
        "{msg}"
    );
}

#[test]
fn rejection_ablation_shares_one_extractor() {
    let mut c = tiny();
    c.schedule.order_seeds = vec![0, 1];
    let data = c.dataset.load(Path::new(".")).unwrap();
    let AblationTable::Rejection { rows } = ablate(&c, &data, AblationAxis::Rejection, 2).unwrap()
    else {
        panic!("wrong axis");
    };
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.extractor_digests == rows[0].extractor_digests));
    assert_eq!(rows[0].extractor_digests.len(), 2);
    for r in &rows {
        if let (Some(k), Some(u), Some(d)) =
            (r.known_rejection_rate, r.unknown_rejection_rate, r.diff)
        {
            assert!((d - (u - k)).abs() < 1e-15);
        }
    }
}

#[test]
fn ablate_and_compare_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let path = write_config(dir.path(), &c);
    let out_dir = dir.path().join("abl");
    let out = owr(&[
        "ablate",
        "--axis",
        "losses",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("ablation_losses.txt")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("gc+lc"));
    assert!(text.lines().next().unwrap().contains("owr@1"));

    let out = owr(&[
        "ablate",
        "--axis",
        "rejection",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("ablation_rejection.txt")).unwrap();
    assert_eq!(text.lines().count(), 5);

    let out = owr(&[
        "compare",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("compare.txt")).unwrap();
    for m in ["ours", "nno", "deepnno"] {
        assert!(text.contains(m), "{text}");
    }
}

#[test]
fn csv_dataset_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let data = c.dataset.load(Path::new(".")).unwrap();
    owr_core::datasets::write_feature_csv(&dir.path().join("feats.csv"), &data).unwrap();
    let mut csv = c.clone();
    csv.dataset = DatasetConfig::Csv {
        path: "feats.csv".into(),
        has_header: true,
        label_column: 0,
        split_column: Some(data.input_dim() + 1),
        split_seed: 0,
    };
    csv.output.checkpoints = false;
    let path = write_config(dir.path(), &csv);
    let out = owr(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}
