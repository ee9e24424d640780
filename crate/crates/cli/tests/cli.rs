use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chronoexplain"))
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    let config = core_fixture("worked_example.toml");
    bin().arg("--config").arg(&config).arg("--out").arg(out).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn staged_run_on_the_toy_graph_yields_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "mine", "paths"] {
        let o = run(&[stage], dir.path());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = run(&["gen", "--backend", "mock"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = dir.path().join("dataset");
    let mut lines = std::fs::read_to_string(ds.join("train.jsonl")).unwrap();
    lines.push_str(&std::fs::read_to_string(ds.join("test.jsonl")).unwrap());
    let positive = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["class"] == "positive")
        .expect("a positive instance");
    assert_eq!(positive["answer_label"], "yes");
    assert!(positive["question"].as_str().unwrap().contains("China will host a visit Barack Obama"));
    assert!(positive["context"].as_str().unwrap().contains("Barack Obama"));

    let o = run(&["validate"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn gen_before_mine_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["ingest"], dir.path()).status.success());
    let o = run(&["gen"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("rules.tsv") && err.contains("mine"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn stats_counts_the_toy_graph() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["stats"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("entities: 5") && s.contains("relations: 6") && s.contains("quadruples: 10"), "{s}");
}

#[test]
fn evaluate_reports_the_hand_computed_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["evaluate", "--gold"])
        .arg(fixture("gold.jsonl"))
        .arg("--pred")
        .arg(fixture("pred.jsonl"))
        .arg("--report-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("positive     50.0   50.0   50.0"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    let expect = [("positive", 0.5, 0.5, 0.5), ("negative", 2.0 / 3.0, 1.0, 0.8), ("neutral", 1.0, 0.5, 2.0 / 3.0)];
    for (label, p, r, f1) in expect {
        let c = report["classification"]["per_class"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["class"] == label)
            .unwrap();
        for (key, want) in [("precision", p), ("recall", r), ("f1", f1)] {
            let got = c["scores"][key].as_f64().unwrap();
            assert!((got - want).abs() < 1e-9, "{label} {key}: {got} vs {want}");
        }
    }
}

#[test]
fn bad_flags_and_missing_files_fail_cleanly() {
    let o = bin().args(["stats", "--backend", "psychic"]).output().unwrap();
    assert!(!o.status.success());
    let o = bin().args(["evaluate", "--gold", "/nonexistent/g.jsonl", "--pred", "/nonexistent/p.jsonl"]).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: "));
}
