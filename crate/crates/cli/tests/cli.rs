use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn lva<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lva"))
        .args(args)
        .env_remove("LVA_CONFIG")
        .env_remove("LVA_MASTER_API_KEY")
        .env_remove("LVA_GROUNDING_API_KEY")
        .env_remove("LVA_VISION_API_KEY")
        .output()
        .expect("spawn lva")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lva(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(lva(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lva(&["--help"]).status.code(), Some(0));
    let o = lva(&[
        "run",
        "--episode",
        p(&data("episodes/s05e06.json")),
        "--question",
        "nope",
        "--fixtures",
        p(&data("fixtures/cases.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn run_prints_answer_and_reward() {
    let o = lva(&[
        "run",
        "--episode",
        p(&data("episodes/s05e06.json")),
        "--question",
        "s05e06_q01",
        "--fixtures",
        p(&data("fixtures/cases.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("The answer is: a3: a bus stop"), "{out}");
    assert!(out.contains("R=2.5"), "{out}");
}

fn eval_into(dir: &Path, extra: &[&str]) -> Output {
    let (episodes, fixtures) = (data("episodes"), data("fixtures/cases.json"));
    let mut args = vec!["eval", "--dataset", p(&episodes), "--fixtures", p(&fixtures), "--out", p(dir)];
    args.extend_from_slice(extra);
    lva(&args)
}

#[test]
fn eval_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = eval_into(a.path(), &["--parallelism", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("100.00"));
    assert_eq!(eval_into(b.path(), &["--parallelism", "1"]).status.code(), Some(0));
    for name in ["report.json", "results.jsonl", "summary.txt", "trajectories/s10e04_q01.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn strict_abort_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("one.json");
    let mut fx: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data("fixtures/cases.json")).unwrap()).unwrap();
    let qs = fx["questions"].as_object_mut().unwrap();
    qs.retain(|k, _| k == "s05e06_q01");
    std::fs::write(&fixtures, fx.to_string()).unwrap();
    let episodes = data("episodes");
    let base = [
        "eval",
        "--dataset",
        p(&episodes),
        "--fixtures",
        p(&fixtures),
        "--out",
        p(dir.path()),
    ];
    let lenient = lva(&base);
    assert_eq!(lenient.status.code(), Some(0), "{}", stderr(&lenient));
    assert!(stdout(&lenient).contains("errored (3)"));
    let strict = lva(&[&base[..], &["--strict"]].concat());
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lva(&[
        "eval",
        "--dataset",
        p(&dir.path().join("absent")),
        "--fixtures",
        p(&data("fixtures/cases.json")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn remote_backend_needs_keys_from_the_environment() {
    let o = lva(&[
        "run",
        "--config",
        p(&data("config.example.toml")),
        "--backend",
        "remote",
        "--episode",
        p(&data("episodes/s05e06.json")),
        "--question",
        "s05e06_q01",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LVA_MASTER_API_KEY"), "{}", stderr(&o));
}

#[test]
fn config_file_is_picked_up_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[run]\nmax_steps = 2\n").unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_lva"))
        .args([
            "eval",
            "--dataset",
            p(&data("episodes")),
            "--fixtures",
            p(&data("fixtures/cases.json")),
            "--out",
            p(&out),
        ])
        .env("LVA_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"max_steps\": 2"), "{report}");

    std::fs::write(&cfg, "[run]\nmax_stepz = 2\n").unwrap();
    let o = lva(&["eval", "--config", p(&cfg), "--dataset", p(&data("episodes")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max_stepz"));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = lva(&[
        "sweep",
        "--dataset",
        p(&data("episodes")),
        "--fixtures",
        p(&data("fixtures/cases.json")),
        "--axis",
        "max-steps=2,5",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for sub in ["max-steps=2", "max-steps=5"] {
        assert!(dir.path().join(sub).join("report.json").exists(), "{sub}");
    }
    assert!(dir.path().join("comparison.txt").exists());
}

#[test]
fn build_dataset_reproduces_shipped_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let o = lva(&["build-dataset", "--dataset", p(&data("raw")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for ep in ["s05e06.json", "s10e04.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(ep)).unwrap(),
            std::fs::read(data("episodes").join(ep)).unwrap(),
            "{ep}"
        );
    }
}

#[test]
fn validate_accepts_shipped_data() {
    let o = lva(&[
        "validate",
        "--dataset",
        p(&data("episodes")),
        "--fixtures",
        p(&data("fixtures/cases.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 violation(s)"));
}

#[test]
fn score_rollouts_exports_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let o = lva(&[
        "score-rollouts",
        "--dataset",
        p(&data("episodes")),
        "--fixtures",
        p(&data("fixtures/cases.json")),
        "--rollouts",
        "3",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let batch = std::fs::read_to_string(dir.path().join("batch.jsonl")).unwrap();
    let lines: Vec<&str> = batch.lines().collect();
    assert_eq!(lines.len(), 1 + 4 * 3);
    assert!(lines[0].contains("\"record\":\"metadata\""));
}

#[test]
fn simulate_generates_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let o = lva(&["simulate", "--questions", "40", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("fixtures.json").exists());
    let report = std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    assert!(report.contains("\"answer_accuracy\": 100.0"), "{report}");
}
