use std::path::Path;
use std::process::{Command, Output};

fn plate_bench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plate-bench"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BACKENDS: &str = r#"
[[backend]]
id = "mock-clean"
kind = "mock"
[backend.mock]
manifest = "data/manifest.jsonl"

[[backend]]
id = "mock-noisy"
kind = "mock"
[backend.mock]
manifest = "data/manifest.jsonl"
char_error_rate = 0.3
seed = 4
"#;

const PLAN: &str = r#"
manifest = "data/manifest.jsonl"
backends_file = "backends.toml"
backends = ["mock-clean", "mock-noisy"]
prompts = ["canonical", "prompt3"]
run_file = "runs/run.jsonl"
cache_dir = "cache"
cache = "use"
"#;

#[test]
fn forge_bench_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = plate_bench(&["forge", "--count", "6", "--seed", "3", "--out", "data", "--sp", "0.05"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("data/manifest.jsonl").is_file());
    assert_eq!(std::fs::read_dir(d.join("data/images")).unwrap().count(), 6);

    std::fs::write(d.join("backends.toml"), BACKENDS).unwrap();
    std::fs::write(d.join("plan.toml"), PLAN).unwrap();
    std::fs::create_dir_all(d.join("runs")).unwrap();
    let o = plate_bench(&["backends", "check", "--config", "backends.toml"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mock-clean: ok"));

    let o = plate_bench(&["bench", "--plan", "plan.toml"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("24 cells: 0 already done, 24 run"), "{}", stdout(&o));
    let o = plate_bench(&["bench", "--plan", "plan.toml"], d);
    assert!(stdout(&o).contains("24 already done, 0 run"), "{}", stdout(&o));

    let o = plate_bench(&["report", "--runs", "runs/run.jsonl", "--out", "report"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("mock-clean") && table.contains("42/42") && table.contains("6/6"), "{table}");
    for f in ["report.txt", "heatmap.csv", "summary.json"] {
        assert!(d.join("report").join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"][0]["plate_accuracy_pct"], "100.0000");
}

#[test]
fn validation_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(plate_bench(&["forge", "--count", "2", "--seed", "1", "--out", "data"], d).status.success());
    std::fs::write(d.join("backends.toml"), BACKENDS).unwrap();
    std::fs::write(d.join("plan.toml"), PLAN.replace("\"mock-noisy\"", "\"gpt-nowhere\"")).unwrap();
    let o = plate_bench(&["bench", "--plan", "plan.toml"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown backend id \"gpt-nowhere\""), "{}", stderr(&o));
    assert!(!d.join("runs/run.jsonl").exists());

    let o = plate_bench(&["forge", "--count", "0", "--out", "x"], d);
    assert!(!o.status.success());
    let o = plate_bench(&["report", "--runs", "missing.jsonl"], d);
    assert!(!o.status.success());
}

#[test]
fn pipeline_and_catalog_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(plate_bench(&["forge", "--count", "2", "--seed", "1", "--out", "data"], d).status.success());
    std::fs::write(d.join("backends.toml"), BACKENDS).unwrap();
    let o = plate_bench(
        &[
            "pipeline", "--manifest", "data/manifest.jsonl", "--detect-backend", "mock-clean",
            "--recognize-backend", "mock-clean", "--color", "red", "--out", "p.jsonl",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // nothing is scripted as a car, so both images end with no plates
    let lines = std::fs::read_to_string(d.join("p.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(stdout(&o).contains("images correct 0/2"), "{}", stdout(&o));

    let o = plate_bench(&["prompts", "list"], d);
    assert!(o.status.success());
    let ids: Vec<String> = stdout(&o).lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    assert_eq!(ids, ["canonical", "prompt1", "prompt2", "prompt3", "prompt4"]);

    let o = plate_bench(&["adjudicate", "serve", "--help"], d);
    assert!(stdout(&o).contains("127.0.0.1"), "{}", stdout(&o));
}
