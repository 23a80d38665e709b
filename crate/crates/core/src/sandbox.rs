//! Supervised execution of untrusted candidates against assertion suites.
//!
//! The supervisor spawns an interpreter running a runner script (the shim),
//! sends one JSON command on stdin and reads one JSON line per assertion.
//! Isolation is process + timeout + scratch working directory; there is no
//! namespace or seccomp sandboxing.
//!
//! Functional runs use one child per assertion so a hang or crash is
//! attributed to exactly one test. Timed runs reuse one warm child per
//! candidate and are serialized process-wide.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::TestStatus;

/// Runner script compiled into the binary; used unless a shim path is given.
pub const BUNDLED_SHIM: &str = include_str!("../shim/stub_shim.py");

pub const DEFAULT_FUNCTIONAL_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_TIMED_TIMEOUT: Duration = Duration::from_secs(30);

static TIMED_LOCK: Lazy<Mutex<()>> = Lazy::new(|| Mutex::new(()));

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("shim protocol error: {0}")]
    ShimProtocolError(String),
    #[error("failed to spawn sandbox process: {0}")]
    SandboxSpawnFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Functional,
    Timed,
}

#[derive(Debug, Clone)]
pub struct ExecRequest {
    pub code: String,
    pub assertions: Vec<String>,
    pub per_test_timeout: Duration,
    pub mode: ExecMode,
    pub repeats: u32,
}

impl ExecRequest {
    pub fn functional(code: impl Into<String>, assertions: Vec<String>) -> Self {
        Self {
            code: code.into(),
            assertions,
            per_test_timeout: DEFAULT_FUNCTIONAL_TIMEOUT,
            mode: ExecMode::Functional,
            repeats: 1,
        }
    }

    pub fn timed(code: impl Into<String>, assertions: Vec<String>, repeats: u32) -> Self {
        Self {
            code: code.into(),
            assertions,
            per_test_timeout: DEFAULT_TIMED_TIMEOUT,
            mode: ExecMode::Timed,
            repeats: repeats.max(1),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.per_test_timeout = timeout;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub index: usize,
    pub status: TestStatus,
    pub message: String,
    pub best_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub per_test: Vec<TestOutcome>,
    pub suite_wall_clock: f64,
    /// Max over passing tests' best time; `None` outside timed mode or when
    /// any timed test timed out.
    pub worst_time: Option<f64>,
}

impl ExecOutcome {
    pub fn statuses(&self) -> Vec<TestStatus> {
        self.per_test.iter().map(|t| t.status).collect()
    }

    pub fn pass_count(&self) -> usize {
        self.per_test.iter().filter(|t| t.status.is_pass()).count()
    }

    pub fn all_pass(&self) -> bool {
        self.per_test.iter().all(|t| t.status.is_pass())
    }
}

#[derive(Serialize)]
struct ShimCommand<'a> {
    source: &'a str,
    assertions: &'a [String],
    mode: ExecMode,
    repeats: u32,
}

#[derive(Debug, Deserialize)]
struct ShimLine {
    index: i64,
    status: String,
    #[serde(default)]
    message: String,
    #[serde(default)]
    times: Vec<f64>,
}

/// How to start the runner: `program args... <script>`.
#[derive(Debug, Clone)]
pub struct ShimSpec {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub script: ShimScript,
}

#[derive(Debug, Clone)]
pub enum ShimScript {
    /// [`BUNDLED_SHIM`], written once per sandbox and precompiled when the
    /// interpreter allows.
    Bundled,
    Path(PathBuf),
    /// Run `program args...` with no script argument.
    None,
}

impl ShimSpec {
    /// `interpreter -S`: no `site` import, which cuts interpreter start-up
    /// roughly fivefold. Candidates then see the standard library only.
    pub fn python(interpreter: impl Into<PathBuf>) -> Self {
        Self {
            program: interpreter.into(),
            args: vec!["-S".to_string()],
            script: ShimScript::Bundled,
        }
    }

    /// Let candidates import installed third-party packages.
    pub fn with_site_packages(mut self) -> Self {
        self.args.retain(|a| a != "-S");
        self
    }

    pub fn with_script(mut self, script: impl Into<PathBuf>) -> Self {
        self.script = ShimScript::Path(script.into());
        self
    }
}

impl Default for ShimSpec {
    fn default() -> Self {
        Self::python("python3")
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    shim: ShimSpec,
    workers: usize,
    bundled: Arc<OnceLock<Result<BundledShim, String>>>,
}

#[derive(Debug)]
struct BundledShim {
    _dir: tempfile::TempDir,
    script: PathBuf,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new(ShimSpec::default())
    }
}

struct Spawned {
    child: Child,
    lines: mpsc::Receiver<std::io::Result<String>>,
    _scratch: tempfile::TempDir,
}

impl Sandbox {
    pub fn new(shim: ShimSpec) -> Self {
        Self {
            shim,
            workers: 1,
            bundled: Arc::default(),
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Functional runs spawn one interpreter per test, so compiling the shim
    /// once instead of on every start-up is worth an extra process.
    fn bundled_script(&self) -> Result<&Path, SandboxError> {
        let shim = self.bundled.get_or_init(|| {
            let dir = tempfile::Builder::new()
                .prefix("effigen-shim-")
                .tempdir()
                .map_err(|e| e.to_string())?;
            let source = dir.path().join("effigen_shim.py");
            std::fs::write(&source, BUNDLED_SHIM).map_err(|e| e.to_string())?;
            let compiled = dir.path().join("effigen_shim.pyc");
            let ok = Command::new(&self.shim.program)
                .args(&self.shim.args)
                .arg("-c")
                .arg("import py_compile, sys; py_compile.compile(sys.argv[1], cfile=sys.argv[2], doraise=True)")
                .arg(&source)
                .arg(&compiled)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .is_ok_and(|s| s.success());
            let script = if ok && compiled.is_file() { compiled } else { source };
            Ok(BundledShim { _dir: dir, script })
        });
        shim.as_ref()
            .map(|b| b.script.as_path())
            .map_err(|e| SandboxError::SandboxSpawnFailure(e.clone()))
    }

    fn spawn(&self, command: &ShimCommand<'_>) -> Result<Spawned, SandboxError> {
        let scratch = tempfile::Builder::new()
            .prefix("effigen-sandbox-")
            .tempdir()
            .map_err(|e| SandboxError::SandboxSpawnFailure(e.to_string()))?;
        let mut cmd = Command::new(&self.shim.program);
        cmd.args(&self.shim.args);
        match &self.shim.script {
            ShimScript::Bundled => {
                cmd.arg(self.bundled_script()?);
            }
            ShimScript::Path(p) => {
                cmd.arg(absolute(p));
            }
            ShimScript::None => {}
        }
        cmd.current_dir(scratch.path())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", scratch.path())
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("no_proxy", "*")
            .env("http_proxy", "http://127.0.0.1:9")
            .env("https_proxy", "http://127.0.0.1:9")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::SandboxSpawnFailure(format!("{}: {e}", self.shim.program.display())))?;

        let payload = serde_json::to_vec(command)
            .map_err(|e| SandboxError::ShimProtocolError(e.to_string()))?;
        if let Some(mut stdin) = child.stdin.take() {
            // A child that dies before reading surfaces as missing lines.
            let _ = stdin.write_all(&payload);
        }
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Spawned {
            child,
            lines: rx,
            _scratch: scratch,
        })
    }

    /// Runs each assertion in its own child. Tests are distributed over the
    /// configured worker count; results come back in assertion order.
    pub fn run_functional(&self, req: &ExecRequest) -> Result<ExecOutcome, SandboxError> {
        let started = Instant::now();
        let n = req.assertions.len();
        let results: Vec<Mutex<Option<Result<TestOutcome, SandboxError>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(n.max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = self.run_single(&req.code, &req.assertions[i], req.per_test_timeout);
                    let r = r.map(|mut o| {
                        o.index = i;
                        o.best_time = None;
                        o
                    });
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        let per_test = results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every test visited"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExecOutcome {
            per_test,
            suite_wall_clock: started.elapsed().as_secs_f64(),
            worst_time: None,
        })
    }

    fn run_single(
        &self,
        code: &str,
        assertion: &str,
        timeout: Duration,
    ) -> Result<TestOutcome, SandboxError> {
        let assertions = [assertion.to_string()];
        let command = ShimCommand {
            source: code,
            assertions: &assertions,
            mode: ExecMode::Functional,
            repeats: 1,
        };
        let mut spawned = self.spawn(&command)?;
        let deadline = Instant::now() + timeout;
        let outcome = match next_line(&spawned.lines, deadline) {
            LineEvent::Line(line) => {
                let parsed = parse_line(&line)?;
                if parsed.index == -1 {
                    TestOutcome {
                        index: 0,
                        status: TestStatus::Error,
                        message: parsed.message,
                        best_time: None,
                    }
                } else {
                    to_outcome(parsed, 0)?
                }
            }
            LineEvent::Timeout => timeout_outcome(0, timeout),
            LineEvent::Closed => TestOutcome {
                index: 0,
                status: TestStatus::Error,
                message: "runner exited without a report".into(),
                best_time: None,
            },
        };
        kill(&mut spawned.child);
        Ok(outcome)
    }

    /// Runs the suite in one warm child, `repeats` timed calls per test;
    /// best time is the minimum over repeats. Serialized process-wide.
    pub fn run_timed(&self, req: &ExecRequest) -> Result<ExecOutcome, SandboxError> {
        let _guard = TIMED_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let started = Instant::now();
        let repeats = req.repeats.max(1);
        let command = ShimCommand {
            source: &req.code,
            assertions: &req.assertions,
            mode: ExecMode::Timed,
            repeats,
        };
        let n = req.assertions.len();
        let mut spawned = self.spawn(&command)?;
        let mut per_test: Vec<TestOutcome> = Vec::with_capacity(n);
        let mut timed_out = false;
        while per_test.len() < n {
            let i = per_test.len();
            let deadline = Instant::now() + req.per_test_timeout;
            match next_line(&spawned.lines, deadline) {
                LineEvent::Line(line) => {
                    let parsed = parse_line(&line)?;
                    if parsed.index == -1 {
                        let message = parsed.message;
                        per_test = (0..n)
                            .map(|index| TestOutcome {
                                index,
                                status: TestStatus::Error,
                                message: message.clone(),
                                best_time: None,
                            })
                            .collect();
                        break;
                    }
                    if parsed.index != i as i64 {
                        kill(&mut spawned.child);
                        return Err(SandboxError::ShimProtocolError(format!(
                            "expected report for test {i}, got {}",
                            parsed.index
                        )));
                    }
                    let mut outcome = to_outcome(parsed, i)?;
                    if outcome.status.is_pass() && outcome.best_time.is_none() {
                        kill(&mut spawned.child);
                        return Err(SandboxError::ShimProtocolError(format!(
                            "timed report for test {i} carries no times"
                        )));
                    }
                    if !outcome.status.is_pass() {
                        outcome.best_time = None;
                    }
                    per_test.push(outcome);
                }
                LineEvent::Timeout => {
                    timed_out = true;
                    per_test.push(timeout_outcome(i, req.per_test_timeout));
                    for index in i + 1..n {
                        per_test.push(TestOutcome {
                            index,
                            status: TestStatus::Timeout,
                            message: "not run: an earlier test timed out".into(),
                            best_time: None,
                        });
                    }
                }
                LineEvent::Closed => {
                    for index in i..n {
                        per_test.push(TestOutcome {
                            index,
                            status: TestStatus::Error,
                            message: "runner exited without a report".into(),
                            best_time: None,
                        });
                    }
                }
            }
        }
        kill(&mut spawned.child);
        let worst_time = if timed_out {
            None
        } else {
            per_test
                .iter()
                .filter(|t| t.status.is_pass())
                .filter_map(|t| t.best_time)
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
        };
        Ok(ExecOutcome {
            per_test,
            suite_wall_clock: started.elapsed().as_secs_f64(),
            worst_time,
        })
    }

    /// Dispatches on `req.mode`.
    pub fn run(&self, req: &ExecRequest) -> Result<ExecOutcome, SandboxError> {
        match req.mode {
            ExecMode::Functional => self.run_functional(req),
            ExecMode::Timed => self.run_timed(req),
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

enum LineEvent {
    Line(String),
    Timeout,
    Closed,
}

fn next_line(rx: &mpsc::Receiver<std::io::Result<String>>, deadline: Instant) -> LineEvent {
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(remaining) {
            Ok(Ok(line)) if line.trim().is_empty() => continue,
            Ok(Ok(line)) => return LineEvent::Line(line),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => return LineEvent::Closed,
            Err(RecvTimeoutError::Timeout) => return LineEvent::Timeout,
        }
    }
}

fn parse_line(line: &str) -> Result<ShimLine, SandboxError> {
    serde_json::from_str(line)
        .map_err(|e| SandboxError::ShimProtocolError(format!("{e}: {}", truncate(line, 200))))
}

fn to_outcome(line: ShimLine, index: usize) -> Result<TestOutcome, SandboxError> {
    let status = match line.status.as_str() {
        "pass" => TestStatus::Pass,
        "fail" => TestStatus::Fail,
        "error" => TestStatus::Error,
        "timeout" => TestStatus::Timeout,
        other => {
            return Err(SandboxError::ShimProtocolError(format!(
                "unknown status `{other}`"
            )))
        }
    };
    if line.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(SandboxError::ShimProtocolError("negative or non-finite time".into()));
    }
    let best_time = line.times.iter().copied().fold(None, |acc: Option<f64>, t| {
        Some(acc.map_or(t, |a| a.min(t)))
    });
    Ok(TestOutcome {
        index,
        status,
        message: line.message,
        best_time,
    })
}

fn timeout_outcome(index: usize, timeout: Duration) -> TestOutcome {
    TestOutcome {
        index,
        status: TestStatus::Timeout,
        message: format!("killed after {:.1}s", timeout.as_secs_f64()),
        best_time: None,
    }
}

fn kill(child: &mut Child) {
    let _ = child.kill();
    let _ = child.wait();
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Shared handle used across worker threads.
pub type SharedSandbox = Arc<Sandbox>;
