use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn effigen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effigen")).args(args).output().unwrap()
}

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap().flatten() {
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A corpus holding only `prime_fib`, sharing the shipped replay store.
fn single_task_corpus(dir: &Path) -> PathBuf {
    let root = dir.join("corpus");
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(root.join("manifest.json"), r#"{"name": "one", "tasks": ["prime_fib"]}"#).unwrap();
    std::fs::copy(corpus().join("prime_fib.json"), root.join("prime_fib.json")).unwrap();
    root
}

#[test]
fn verify_store_accepts_the_shipped_store() {
    let out = effigen(&["verify-store", "--store", corpus().join("replay").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("entries verified"));
}

#[test]
fn verify_store_reports_corruption_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    copy_dir(&corpus().join("replay"), &store);
    let victim = std::fs::read_dir(&store)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .find(|p| p.to_string_lossy().ends_with(".request.json"))
        .unwrap();
    let text = std::fs::read_to_string(&victim).unwrap();
    std::fs::write(&victim, text.replacen("scripted", "scripteD", 1)).unwrap();
    let out = effigen(&["verify-store", "--store", store.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&effigen(&["run", "--no-such-flag"])), 2);
    assert_eq!(code(&effigen(&["verify-store", "--store", dir.path().to_str().unwrap()])), 2);
    let out = effigen(&["run", "--corpus", dir.path().join("absent").to_str().unwrap(), "--no-eval"]);
    assert_eq!(code(&out), 2);
    let out = effigen(&["run", "--corpus", corpus().to_str().unwrap(), "--variant", "variant9", "--no-eval"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_solutions_exit_1_and_still_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = single_task_corpus(dir.path());
    let empty = dir.path().join("solutions");
    std::fs::create_dir_all(&empty).unwrap();
    let reports = dir.path().join("reports");
    let out = effigen(&[
        "eval",
        "--corpus",
        root.to_str().unwrap(),
        "--solutions",
        empty.to_str().unwrap(),
        "--report-dir",
        reports.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["pass_at_1"], 0.0);
}

#[test]
fn eval_scores_a_correct_solution() {
    let dir = tempfile::tempdir().unwrap();
    let root = single_task_corpus(dir.path());
    let task: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("prime_fib.json")).unwrap()).unwrap();
    let expert = task["reference_solutions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["role"] == "expert")
        .unwrap()["code"]
        .as_str()
        .unwrap()
        .to_string();
    let solutions = dir.path().join("solutions");
    std::fs::create_dir_all(&solutions).unwrap();
    std::fs::write(solutions.join("prime_fib.py"), expert).unwrap();
    let reports = dir.path().join("reports");
    let out = effigen(&[
        "eval",
        "--corpus",
        root.to_str().unwrap(),
        "--solutions",
        solutions.to_str().unwrap(),
        "--report-dir",
        reports.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("prime_fib"));
    assert!(reports.join("eval.txt").exists());
}

#[test]
fn run_on_an_empty_store_is_an_infrastructure_failure() {
    let dir = tempfile::tempdir().unwrap();
    let root = single_task_corpus(dir.path());
    let store = dir.path().join("empty-store");
    std::fs::create_dir_all(&store).unwrap();
    let runs = dir.path().join("runs");
    let out = effigen(&[
        "run",
        "--corpus",
        root.to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
        "--run-id",
        "miss",
        "--no-eval",
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    // the failed run is still recorded
    assert!(runs.join("miss/prime_fib.json").exists());
}
