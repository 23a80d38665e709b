//! Evaluation of final solutions against hidden tests and references.
//!
//! Correctness: one functional run over all hidden tests. Efficiency: the
//! solution and every reference without `measured_runtimes` are timed in
//! interleaved rounds, and a program's runtime is the sum over levels of its
//! worst per-test best time at that level.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Once;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::domain::{LevelIndex, SolutionRole, Task, TestStatus};
use crate::metrics::{beyond, dps, eff, RuntimeDistribution, TaskRow};
use crate::sandbox::{ExecOutcome, ExecRequest, Sandbox, SandboxError, TestOutcome, DEFAULT_TIMED_TIMEOUT};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no solution for task `{0}`")]
    MissingSolution(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("cannot read solution {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Per-level worst time of one timed run; `None` at a level where any test
/// did not pass.
pub type LevelTimes = BTreeMap<LevelIndex, Option<f64>>;

pub struct Evaluator<'a> {
    pub sandbox: &'a Sandbox,
    pub timing_repeats: u32,
    pub functional_timeout: Duration,
    pub timed_timeout: Duration,
}

impl<'a> Evaluator<'a> {
    pub fn new(sandbox: &'a Sandbox, timing_repeats: u32, functional_timeout: Duration) -> Self {
        Self {
            sandbox,
            timing_repeats,
            functional_timeout,
            timed_timeout: DEFAULT_TIMED_TIMEOUT,
        }
    }

    pub fn passes(&self, task: &Task, code: &str) -> Result<bool, SandboxError> {
        let req = ExecRequest::functional(code, task.hidden_tests.clone())
            .with_timeout(self.functional_timeout);
        Ok(self.sandbox.run_functional(&req)?.all_pass())
    }

    pub fn level_times(&self, task: &Task, code: &str) -> Result<LevelTimes, SandboxError> {
        Ok(self.level_times_interleaved(task, &[code])?.remove(0))
    }

    /// Times every program in interleaved rounds, one single-repeat warm
    /// process per program per round, keeping each test's best time. Slow
    /// phases of the host then hit all programs alike instead of whichever one
    /// happened to be running. After `timing_repeats` rounds, a program whose
    /// last round still improved some level's time by more than [`SETTLED`]
    /// gets more rounds, up to [`EXTRA_ROUNDS`].
    pub fn level_times_interleaved(
        &self,
        task: &Task,
        codes: &[&str],
    ) -> Result<Vec<LevelTimes>, SandboxError> {
        WARM_UP.call_once(warm_up_cpu);
        let min_rounds = self.timing_repeats.max(1);
        let mut merged: Vec<Option<ExecOutcome>> = vec![None; codes.len()];
        let mut levels: Vec<Option<LevelTimes>> = vec![None; codes.len()];
        // a program is settled once a round no longer improves any level
        let mut settled = vec![false; codes.len()];
        for round in 0..min_rounds + EXTRA_ROUNDS {
            // alternate the order so drift favours no program
            let order: Vec<usize> = if round % 2 == 0 {
                (0..codes.len()).collect()
            } else {
                (0..codes.len()).rev().collect()
            };
            for i in order {
                if merged[i].as_ref().is_some_and(|o| !o.all_pass())
                    || (round >= min_rounds && settled[i])
                {
                    continue;
                }
                let req = ExecRequest::timed(codes[i], task.hidden_tests.clone(), 1)
                    .with_timeout(self.timed_timeout);
                let out = self.sandbox.run_timed(&req)?;
                let out = match merged[i].take() {
                    Some(prev) => keep_best(prev, out),
                    None => out,
                };
                let now = group_by_level(task, &out);
                settled[i] = levels[i].as_ref().is_some_and(|before| {
                    !now.iter().any(|(l, t)| match (before.get(l).copied().flatten(), t) {
                        (Some(b), Some(t)) => *t < b * (1.0 - SETTLED),
                        _ => false,
                    })
                });
                levels[i] = Some(now);
                merged[i] = Some(out);
            }
            let done = (0..codes.len())
                .all(|i| settled[i] || merged[i].as_ref().is_some_and(|o| !o.all_pass()));
            if round + 1 >= min_rounds && done {
                break;
            }
        }
        Ok(levels.into_iter().map(|l| l.expect("at least one round")).collect())
    }

    /// Scores one solution; `None` code counts as a failed task.
    pub fn evaluate(&self, task: &Task, code: Option<&str>) -> Result<TaskRow, SandboxError> {
        let passed = match code {
            Some(c) => self.passes(task, c)?,
            None => false,
        };
        let has_refs = !task.reference_solutions.is_empty();
        let has_expert = task.expert().is_some();
        let mut row = TaskRow {
            task_id: task.task_id.clone(),
            difficulty: task.difficulty,
            passed,
            solution_runtime: None,
            dps: has_refs.then_some(0.0),
            beyond: has_refs.then_some(0.0),
            eff: has_expert.then_some(0.0),
        };
        let (true, true, Some(code)) = (passed, has_refs, code) else {
            return Ok(row);
        };

        let live: Vec<&str> = task
            .reference_solutions
            .iter()
            .filter(|r| r.measured_runtimes.is_none())
            .map(|r| r.code.as_str())
            .chain([code])
            .collect();
        let mut measured = self.level_times_interleaved(task, &live)?.into_iter();
        let mut reference_runtimes = Vec::new();
        let mut expert_times = None;
        for reference in &task.reference_solutions {
            let times: LevelTimes = match &reference.measured_runtimes {
                Some(m) => m.iter().map(|(l, t)| (*l, Some(*t))).collect(),
                None => measured.next().expect("one measurement per live reference"),
            };
            match runtime(&times) {
                Some(total) => reference_runtimes.push(total),
                None => tracing::warn!(task = %task.task_id, "a reference solution failed its timed run"),
            }
            if reference.role == SolutionRole::Expert && times.values().all(Option::is_some) {
                expert_times = Some(times.into_iter().map(|(l, t)| (l, t.unwrap())).collect());
            }
        }
        let times = measured.next().expect("solution measured last");
        row.solution_runtime = runtime(&times);
        if let Ok(dist) = RuntimeDistribution::new(task.task_id.clone(), reference_runtimes) {
            row.dps = Some(dps(row.solution_runtime, &dist));
            row.beyond = Some(beyond(row.solution_runtime, &dist));
        } else {
            row.dps = None;
            row.beyond = None;
        }
        row.eff = match expert_times {
            Some(expert) => eff(&times, &expert, &task.weights()).ok(),
            None => None,
        };
        Ok(row)
    }
}

/// Rounds allowed beyond `timing_repeats` while times keep improving.
pub const EXTRA_ROUNDS: u32 = 4;
/// Relative improvement below which a round counts as settled.
pub const SETTLED: f64 = 0.05;

static WARM_UP: Once = Once::new();

/// Keeps the CPU busy until fixed slices of work take a steady time. A host
/// waking from idle runs noticeably slower for about a second, and the first
/// programs timed would otherwise absorb that.
fn warm_up_cpu() {
    const SLICE: u64 = 200_000;
    let started = Instant::now();
    let mut best = f64::INFINITY;
    let mut steady = 0;
    while (steady < 20 || started.elapsed() < Duration::from_secs(1))
        && started.elapsed() < Duration::from_secs(3)
    {
        let t = Instant::now();
        let mut acc = 0u64;
        for i in 0..SLICE {
            acc = std::hint::black_box(acc.wrapping_mul(31).wrapping_add(i));
        }
        let took = t.elapsed().as_secs_f64();
        if took < best {
            best = took;
        }
        steady = if took < best * 1.1 { steady + 1 } else { 0 };
    }
}

/// Per test, the faster of two passing runs; otherwise whichever did not pass.
fn keep_best(prev: ExecOutcome, next: ExecOutcome) -> ExecOutcome {
    let per_test: Vec<TestOutcome> = prev
        .per_test
        .into_iter()
        .zip(next.per_test)
        .map(|(a, b)| match (a.status.is_pass(), b.status.is_pass()) {
            (true, true) => {
                let best = match (a.best_time, b.best_time) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                };
                TestOutcome { best_time: best, ..a }
            }
            (false, _) => a,
            (true, false) => b,
        })
        .collect();
    let worst_time = if per_test.iter().any(|t| t.status == TestStatus::Timeout) {
        None
    } else {
        per_test
            .iter()
            .filter(|t| t.status.is_pass())
            .filter_map(|t| t.best_time)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
    };
    ExecOutcome {
        per_test,
        suite_wall_clock: prev.suite_wall_clock + next.suite_wall_clock,
        worst_time,
    }
}

pub fn group_by_level(task: &Task, out: &ExecOutcome) -> LevelTimes {
    let mut levels: LevelTimes = task.levels().into_iter().map(|l| (l, Some(0.0))).collect();
    for (i, t) in out.per_test.iter().enumerate() {
        let slot = levels.entry(task.level_of(i)).or_insert(Some(0.0));
        *slot = match (*slot, t.status.is_pass(), t.best_time) {
            (Some(worst), true, Some(time)) => Some(worst.max(time)),
            _ => None,
        };
    }
    levels
}

/// Sum of per-level worst times; `None` when any level failed.
pub fn runtime(times: &LevelTimes) -> Option<f64> {
    times.values().try_fold(0.0, |acc, t| t.map(|t| acc + t))
}

/// Reads `<dir>/<task_id>.py`.
pub fn load_solution(dir: &Path, task_id: &str) -> Result<String, HarnessError> {
    let path = dir.join(format!("{task_id}.py"));
    if !path.exists() {
        return Err(HarnessError::MissingSolution(task_id.to_string()));
    }
    std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Difficulty, TestStatus};
    use crate::sandbox::TestOutcome;

    fn task(levels: Vec<u32>) -> Task {
        Task {
            task_id: "t".into(),
            description: "def f(): ...".into(),
            entry_point: "f".into(),
            difficulty: Difficulty::Easy,
            hidden_tests: levels.iter().map(|l| format!("assert f() == {l}")).collect(),
            hidden_test_levels: Some(levels),
            reference_solutions: vec![],
            level_weights: None,
        }
    }

    fn outcome(results: &[(TestStatus, Option<f64>)]) -> ExecOutcome {
        ExecOutcome {
            per_test: results
                .iter()
                .enumerate()
                .map(|(index, (status, best_time))| TestOutcome {
                    index,
                    status: *status,
                    message: String::new(),
                    best_time: *best_time,
                })
                .collect(),
            suite_wall_clock: 0.0,
            worst_time: None,
        }
    }

    #[test]
    fn worst_time_per_level() {
        let t = task(vec![0, 0, 1]);
        let out = outcome(&[
            (TestStatus::Pass, Some(0.1)),
            (TestStatus::Pass, Some(0.3)),
            (TestStatus::Pass, Some(0.2)),
        ]);
        let levels = group_by_level(&t, &out);
        assert_eq!(levels[&0], Some(0.3));
        assert_eq!(levels[&1], Some(0.2));
        assert!((runtime(&levels).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn timeout_voids_its_level() {
        let t = task(vec![0, 1]);
        let out = outcome(&[(TestStatus::Pass, Some(0.1)), (TestStatus::Timeout, None)]);
        let levels = group_by_level(&t, &out);
        assert_eq!(levels[&1], None);
        assert_eq!(runtime(&levels), None);
    }

    #[test]
    fn missing_solution_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_solution(dir.path(), "nope"),
            Err(HarnessError::MissingSolution(id)) if id == "nope"
        ));
    }
}
