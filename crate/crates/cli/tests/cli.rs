use std::path::Path;
use std::process::{Command, Output};

fn ocf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL: &[&str] = &[
    "--synth",
    "--n-points",
    "1500",
    "--classes",
    "3",
    "--dim",
    "4",
    "--batch",
    "500",
    "--reps",
    "800",
];

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ocf(&args)
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// metrics.csv with the wall-time column dropped.
fn metrics_without_time(dir: &Path) -> Vec<String> {
    read(dir.join("metrics.csv"))
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn synth_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.csv", "contingency.csv", "entropy.csv", "points.csv"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    assert!(tmp.path().join("snapshot/snapshot.json").is_file());
    assert!(tmp.path().join("snapshot/pool.bin").is_file());
    let metrics = read(tmp.path().join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "trigger_index,cumulative,n_clusters,f1,wall_time_ms");
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert_eq!(read(tmp.path().join("points.csv")).lines().count(), 1 + 1500);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_into(a.path(), &["--seed", "5"])), 0);
    assert_eq!(code(&run_into(b.path(), &["--seed", "5"])), 0);
    assert_eq!(metrics_without_time(a.path()), metrics_without_time(b.path()));
    assert_eq!(read(a.path().join("points.csv")), read(b.path().join("points.csv")));
}

#[test]
fn missing_data_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ocf(&["run", "--data", "/nonexistent/data.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_into(tmp.path(), &["--variant", "no-such-variant"])), 2);
    assert_eq!(code(&run_into(tmp.path(), &["--eps-v", "-1"])), 2);
    assert_eq!(code(&ocf(&["run"])), 2);
    assert_eq!(code(&ocf(&["frobnicate"])), 2);
    let out = ocf(&["run", "--synth", "--data", "x.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"engine": {"batch_size": 300, "alpha": 2.0}, "order": "ns"}"#).unwrap();
    let out_dir = tmp.path().join("out");
    let out = run_into(&out_dir, &["--config", cfg.to_str().unwrap(), "--alpha", "3.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let effective: serde_json::Value = serde_json::from_str(&read(out_dir.join("config.json"))).unwrap();
    // --batch 500 from SMALL wins over the file, the file wins over defaults.
    assert_eq!(effective["engine"]["batch_size"], 500);
    assert_eq!(effective["engine"]["alpha"], 3.0);
    assert_eq!(effective["order"], "ns");

    std::fs::write(&cfg, r#"{"engine": {"batch_sise": 300}}"#).unwrap();
    assert_eq!(code(&run_into(&out_dir, &["--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn synth_then_run_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.csv");
    let out = ocf(&[
        "synth",
        "--n-points",
        "1200",
        "--classes",
        "2",
        "--dim",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&data).lines().count(), 1 + 1200);

    let run_dir = tmp.path().join("run");
    let out = ocf(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--batch",
        "400",
        "--reps",
        "600",
        "--order",
        "random",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(run_dir.join("points.csv")).lines().count(), 1 + 1200);
}

#[test]
fn eval_reproduces_run_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    assert_eq!(code(&run_into(&run_dir, &[])), 0);

    let eval_dir = tmp.path().join("eval");
    let out = ocf(&[
        "eval",
        "--points",
        run_dir.join("points.csv").to_str().unwrap(),
        "--metrics",
        run_dir.join("metrics.csv").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "contingency.csv", "entropy.csv", "points.csv"] {
        assert_eq!(read(run_dir.join(f)), read(eval_dir.join(f)), "{f}");
    }
}

#[test]
fn eval_from_snapshot_labels_new_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.csv");
    let synth = ["synth", "--n-points", "1500", "--classes", "3", "--dim", "4", "--out", data.to_str().unwrap()];
    assert_eq!(code(&ocf(&synth)), 0);
    let run_dir = tmp.path().join("run");
    let out = ocf(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--batch",
        "500",
        "--reps",
        "800",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let eval_dir = tmp.path().join("eval");
    let out = ocf(&[
        "eval",
        "--snapshot",
        run_dir.join("snapshot").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Final-model labels in stream order versus file order: same multiset of rows.
    let sorted = |p: &Path| {
        let mut v: Vec<String> = read(p).lines().map(str::to_string).collect();
        v.sort();
        v
    };
    assert_eq!(sorted(&run_dir.join("points.csv")), sorted(&eval_dir.join("points.csv")));

    let out = ocf(&["eval", "--snapshot", "/nonexistent", "--data", data.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_writes_one_block_per_variant_and_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "--out", tmp.path().to_str().unwrap(), "--variants", "oc-density,only-merging"];
    args.extend_from_slice(SMALL);
    let out = ocf(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let compare = read(tmp.path().join("compare.csv"));
    let rows: Vec<&str> = compare.lines().skip(1).collect();
    // 2 variants x 3 orderings x 3 triggers.
    assert_eq!(rows.len(), 18);
    for v in ["oc-density", "only-merging"] {
        for o in ["we", "ns", "random"] {
            let prefix = format!("{v},{o},");
            assert_eq!(rows.iter().filter(|r| r.starts_with(&prefix)).count(), 3, "{prefix}");
        }
    }
    let summary = read(tmp.path().join("summary.csv"));
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("oc-density,3,"));

    let mut args = vec!["compare", "--out", tmp.path().to_str().unwrap(), "--variants", "oc-density,bogus"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&ocf(&args)), 2);
}
