use std::path::PathBuf;
use std::time::{Duration, Instant};

use effigen_core::domain::TestStatus;
use effigen_core::sandbox::{ExecRequest, Sandbox, SandboxError, ShimScript, ShimSpec};

const SLEEPER: &str = "import time\n\ndef nap(ms):\n    time.sleep(ms / 1000)\n    return ms\n";

fn python() -> Sandbox {
    Sandbox::default().with_workers(2)
}

/// A child speaking the line protocol from a canned shell script.
fn stub(dir: &tempfile::TempDir, body: &str) -> Sandbox {
    let path: PathBuf = dir.path().join("stub.sh");
    std::fs::write(&path, format!("cat > /dev/null\n{body}\n")).unwrap();
    Sandbox::new(ShimSpec {
        program: "sh".into(),
        args: vec![],
        script: ShimScript::Path(path),
    })
}

fn asserts(lines: &[&str]) -> Vec<String> {
    lines.iter().map(|s| s.to_string()).collect()
}

#[test]
fn sleep_fixtures_keep_their_time_ratio() {
    let sb = python();
    let req = |ms: u32| ExecRequest::timed(SLEEPER, vec![format!("assert nap({ms}) == {ms}")], 3);
    let fast = sb.run_timed(&req(10)).unwrap().worst_time.unwrap();
    let slow = sb.run_timed(&req(30)).unwrap().worst_time.unwrap();
    let ratio = slow / fast;
    assert!((2.25..=3.75).contains(&ratio), "{slow} / {fast} = {ratio}");
}

#[test]
fn infinite_loop_is_killed_and_scored_timeout() {
    let sb = python();
    let code = "def spin():\n    while True:\n        pass\n";
    let timeout = Duration::from_secs(1);
    for req in [
        ExecRequest::functional(code, asserts(&["assert spin() is None"])),
        ExecRequest::timed(code, asserts(&["assert spin() is None"]), 3),
    ] {
        let started = Instant::now();
        let out = sb.run(&req.with_timeout(timeout)).unwrap();
        assert!(started.elapsed() < timeout + Duration::from_secs(1), "{:?}", started.elapsed());
        assert_eq!(out.statuses(), [TestStatus::Timeout]);
        assert_eq!(out.worst_time, None);
    }
}

#[test]
fn a_crash_in_one_test_does_not_touch_the_next() {
    let sb = python();
    let code = "import os\n\ndef f(x):\n    if x == 0:\n        os._exit(3)\n    return x\n";
    let out = sb
        .run_functional(&ExecRequest::functional(code, asserts(&["assert f(0) == 0", "assert f(2) == 2"])))
        .unwrap();
    assert_eq!(out.statuses(), [TestStatus::Error, TestStatus::Pass]);
}

#[test]
fn functional_results_are_repeatable() {
    let sb = python();
    let code = "def f(xs):\n    return sorted(set(xs))\n";
    let tests = asserts(&[
        "assert f([3, 1, 3]) == [1, 3]",
        "assert f([]) == [1]",
        "assert f(None) == []",
        "assert g() == 1",
    ]);
    let first = sb.run_functional(&ExecRequest::functional(code, tests.clone())).unwrap();
    let second = sb.run_functional(&ExecRequest::functional(code, tests)).unwrap();
    assert_eq!(first.statuses(), second.statuses());
    assert_eq!(
        first.statuses(),
        [TestStatus::Pass, TestStatus::Fail, TestStatus::Error, TestStatus::Error]
    );
}

#[test]
fn timed_mode_times_the_call_not_the_arguments() {
    let sb = python();
    let code = "def first(xs):\n    return xs[0]\n";
    // building the argument takes far longer than the call
    let out = sb
        .run_timed(&ExecRequest::timed(code, asserts(&["assert first(list(range(2_000_000))) == 0"]), 3))
        .unwrap();
    assert!(out.worst_time.unwrap() < 1e-3, "{:?}", out.worst_time);
}

#[test]
fn timed_calls_get_fresh_arguments() {
    let sb = python();
    let code = "import time\n\ndef grow(xs):\n    xs.append(0)\n    time.sleep(0.002 * len(xs))\n    return len(xs)\n";
    let out = sb
        .run_timed(&ExecRequest::timed(code, asserts(&["assert grow([]) == 1"]), 3))
        .unwrap();
    let t = out.worst_time.unwrap();
    assert!((0.0015..0.004).contains(&t), "{t}");
}

#[test]
fn stub_child_lines_become_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(
        &dir,
        r#"echo '{"index": 0, "status": "pass", "message": "", "times": [0.25, 0.5]}'
echo '{"index": 1, "status": "fail", "message": "AssertionError", "times": []}'
echo '{"index": 2, "status": "error", "message": "boom", "times": []}'"#,
    );
    let out = sb.run_timed(&ExecRequest::timed("x", asserts(&["a", "b", "c"]), 2)).unwrap();
    assert_eq!(out.statuses(), [TestStatus::Pass, TestStatus::Fail, TestStatus::Error]);
    assert_eq!(out.per_test[0].best_time, Some(0.25));
    assert_eq!(out.per_test[2].message, "boom");
    assert_eq!(out.worst_time, Some(0.25));
}

#[test]
fn stub_child_that_skips_an_index_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(&dir, r#"echo '{"index": 1, "status": "pass", "message": "", "times": [0.1]}'"#);
    let err = sb.run_timed(&ExecRequest::timed("x", asserts(&["a", "b"]), 1)).unwrap_err();
    assert!(matches!(err, SandboxError::ShimProtocolError(_)), "{err}");
}

#[test]
fn stub_child_garbage_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(&dir, "echo 'not json at all'");
    let err = sb.run_functional(&ExecRequest::functional("x", asserts(&["a"]))).unwrap_err();
    assert!(matches!(err, SandboxError::ShimProtocolError(_)), "{err}");
}

#[test]
fn stub_child_timed_pass_without_times_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(&dir, r#"echo '{"index": 0, "status": "pass", "message": "", "times": []}'"#);
    let err = sb.run_timed(&ExecRequest::timed("x", asserts(&["a"]), 1)).unwrap_err();
    assert!(matches!(err, SandboxError::ShimProtocolError(_)), "{err}");
}

#[test]
fn stub_child_exiting_early_leaves_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(&dir, r#"echo '{"index": 0, "status": "pass", "message": "", "times": [0.1]}'"#);
    let out = sb.run_timed(&ExecRequest::timed("x", asserts(&["a", "b", "c"]), 1)).unwrap();
    assert_eq!(out.statuses(), [TestStatus::Pass, TestStatus::Error, TestStatus::Error]);
}

#[test]
fn stub_child_load_failure_marks_every_test() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(&dir, r#"echo '{"index": -1, "status": "error", "message": "SyntaxError", "times": []}'"#);
    let out = sb.run_timed(&ExecRequest::timed("x", asserts(&["a", "b"]), 1)).unwrap();
    assert_eq!(out.statuses(), [TestStatus::Error, TestStatus::Error]);
    assert!(out.per_test.iter().all(|t| t.message == "SyntaxError"));
}

#[test]
fn stub_child_that_hangs_after_one_report_times_out_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let sb = stub(
        &dir,
        r#"echo '{"index": 0, "status": "pass", "message": "", "times": [0.1]}'
sleep 30"#,
    );
    let started = Instant::now();
    let out = sb
        .run_timed(&ExecRequest::timed("x", asserts(&["a", "b", "c"]), 1).with_timeout(Duration::from_millis(500)))
        .unwrap();
    assert!(started.elapsed() < Duration::from_secs(3));
    assert_eq!(out.statuses(), [TestStatus::Pass, TestStatus::Timeout, TestStatus::Timeout]);
    assert_eq!(out.worst_time, None);
}
