use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slate_embed::cli::OUTPUT_DIR_ENV;
use slate_embed::data::{load_sessions, DatasetSchema};
use slate_embed::eval::{export_header, MetricReport};
use slate_embed::Checkpoint;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slate-embed"))
        .args(args)
        .env_remove(OUTPUT_DIR_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

fn synth(dir: &Path, kind: &str, extra: &[&str]) -> PathBuf {
    let data = dir.join(format!("{kind}-data"));
    let mut args = vec!["-o", s(&data), "synth", "--kind", kind];
    args.extend_from_slice(extra);
    ok(&args);
    data
}

fn train_args<'a>(out: &'a str, data: &'a str, ext: &str, variant: &'a str) -> Vec<String> {
    [
        "-o", out, "train", "--variant", variant, "--epochs", "5", "--schema",
    ]
    .iter()
    .map(|a| a.to_string())
    .chain([
        format!("{data}/schema.toml"),
        "--train".into(),
        format!("{data}/train.{ext}"),
        "--validation".into(),
        format!("{data}/validation.{ext}"),
    ])
    .collect()
}

#[test]
fn synth_writes_split_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "regression", &["--records", "1000", "--seed", "4"]);
    assert_eq!(lines(&a.join("train.csv")), 800);
    assert_eq!(lines(&a.join("validation.csv")), 100);
    assert_eq!(lines(&a.join("test.csv")), 100);
    assert!(a.join("schema.toml").exists() && a.join("planted.json").exists());

    let b = dir.path().join("again");
    ok(&["-o", s(&b), "synth", "--kind", "regression", "--records", "1000", "--seed", "4"]);
    for f in ["train.csv", "validation.csv", "test.csv", "schema.toml", "planted.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_click_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "click", &["--records", "50", "--items-per-slate", "2"]);
    let schema = DatasetSchema::load(data.join("schema.toml")).unwrap();
    let sessions = load_sessions(data.join("train.jsonl"), &schema).unwrap();
    assert_eq!(sessions.len(), 40);
    assert!(sessions.iter().all(|r| r.items.len() == 2));
}

#[test]
fn missing_config_names_the_path() {
    let err = fails(&["--config", "/nonexistent/run.toml", "train", "--variant", "regression"]);
    assert!(err.contains("/nonexistent/run.toml"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_best_metric() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "regression", &["--records", "600", "--seed", "2"]);
    let out = dir.path().join("run");
    let args = train_args(s(&out), s(&data), "csv", "regression");
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    for f in ["checkpoint.json", "history.csv", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(lines(&out.join("history.csv")), 1 + 6);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let best: MetricReport = serde_json::from_value(report["validation"].clone()).unwrap();

    let eval_out = dir.path().join("eval");
    ok(&[
        "-o",
        s(&eval_out),
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--data",
        s(&data.join("validation.csv")),
    ]);
    let reports: Vec<MetricReport> = serde_json::from_str(&fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(reports[0].value.to_bits(), best.value.to_bits());
    assert_eq!(reports[0].fingerprint, best.fingerprint);
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "regression", &["--records", "300"]);
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "output_dir = \"from-file\"\n[data]\nschema = \"{0}/schema.toml\"\ntrain = \"{0}/train.csv\"\nvalidation = \"{0}/validation.csv\"\n[train]\nvariant = \"regression\"\nlambda = 0.5\nepochs = 2\ndim = 3\n",
            s(&data)
        ),
    )
    .unwrap();
    ok(&["--config", s(&config), "train", "--lambda", "0.25"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from-file/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["lambda"], 0.25);
    assert_eq!(report["config"]["dim"], 3);
    assert_eq!(report["config"]["learning_rate"], 1e-3);

    let flag_dir = dir.path().join("from-flag");
    ok(&["--config", s(&config), "-o", s(&flag_dir), "train"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(flag_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["lambda"], 0.5);
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("env-out");
    let out = Command::new(env!("CARGO_BIN_EXE_slate-embed"))
        .args(["synth", "--kind", "regression", "--records", "20"])
        .env(OUTPUT_DIR_ENV, &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("train.csv").exists());
    assert!(!dir.path().join("slate-embed-out").exists());
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "regression", &["--records", "100"]);
    let planted = data.join("planted.json");

    let err = fails(&["-o", s(dir.path()), "eval", "--checkpoint", s(&planted), "--data", s(&data.join("test.csv")), "--metrics", "auc"]);
    assert!(err.contains("mse, mrr, ndcg, nll"), "{err}");

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let err = fails(&["-o", s(dir.path()), "eval", "--checkpoint", s(&planted), "--data", s(&empty)]);
    assert!(err.contains("empty.csv"), "{err}");

    let schema = fs::read_to_string(data.join("schema.toml")).unwrap();
    let altered = dir.path().join("altered.toml");
    fs::write(&altered, schema.replace("cardinality = 5", "cardinality = 6")).unwrap();
    let err = fails(&[
        "-o",
        s(dir.path()),
        "eval",
        "--checkpoint",
        s(&planted),
        "--data",
        s(&data.join("test.csv")),
        "--schema",
        s(&altered),
    ]);
    assert!(err.contains("position"), "{err}");
}

#[test]
fn sweep_writes_ranked_table_and_skips_invalid_points() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "regression", &["--records", "300"]);
    let base = |out: &Path| {
        vec![
            "-o".to_string(),
            s(out).to_string(),
            "sweep".into(),
            "--variant".into(),
            "regression".into(),
            "--epochs".into(),
            "2".into(),
            "--schema".into(),
            format!("{}/schema.toml", s(&data)),
            "--train".into(),
            format!("{}/train.csv", s(&data)),
            "--validation".into(),
            format!("{}/validation.csv", s(&data)),
        ]
    };

    let one = dir.path().join("one");
    let mut args = base(&one);
    args.extend(["--dims".into(), "5".into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = fs::read_to_string(one.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dim,mse,std_error");
    assert_eq!(csv.lines().count(), 2);
    assert!(one.join("best_checkpoint.json").exists());
    assert_eq!(lines(&one.join("dim_vs_metric.csv")), 2);

    let two = dir.path().join("two");
    let mut args = base(&two);
    args.extend(["--dims".into(), "2,5".into(), "--lambdas=-1,0.001".into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = fs::read_to_string(two.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dim,lambda,mse,std_error");
    assert_eq!(csv.lines().count(), 3);

    let bad = dir.path().join("bad");
    let mut args = base(&bad);
    args.extend(["--lambdas=-1".into()]);
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn export_is_deterministic_with_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "click", &["--records", "60", "--items-per-slate", "4", "--planted-std", "1"]);
    let run = dir.path().join("run");
    let args = train_args(s(&run), s(&data), "jsonl", "semb2");
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let ckpt = Checkpoint::load(run.join("checkpoint.json")).unwrap();

    let export = |name: &str| {
        ok(&[
            "-o",
            s(&run),
            "export",
            "--checkpoint",
            s(&run.join("checkpoint.json")),
            "--data",
            s(&data.join("validation.jsonl")),
            "--out",
            name,
        ]);
        fs::read_to_string(run.join(name)).unwrap()
    };
    let a = export("a.csv");
    let b = export("b.csv");
    assert_eq!(a, b);
    assert_eq!(a.lines().next().unwrap(), export_header(ckpt.dim).join(","));
    assert_eq!(a.lines().count(), 1 + 6 * 4);

    let err = fails(&[
        "-o",
        s(&run),
        "export",
        "--checkpoint",
        s(&synth(dir.path(), "regression", &["--records", "20"]).join("planted.json")),
        "--data",
        s(&data.join("validation.jsonl")),
    ]);
    assert!(err.starts_with("error:"), "{err}");
}
