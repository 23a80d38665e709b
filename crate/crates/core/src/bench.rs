//! Batch driver behind the CLI: run the pipeline over a corpus, evaluate
//! the final solutions, aggregate, and write reports.
//!
//! Pipelines run in parallel over tasks; evaluation runs afterwards, one
//! task at a time, so timed measurements never compete with pipeline work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::Corpus;
use crate::domain::{RunRecord, Task};
use crate::harness::Evaluator;
use crate::metrics::{aggregate, EfficiencyReport, TaskRow};
use crate::pipeline::{persist_run, Pipeline, TaskView};

pub struct BatchOptions {
    pub run_id: String,
    pub workers: usize,
    pub repeats: u32,
    /// Where run records go; `None` keeps them in memory only.
    pub runs_dir: Option<PathBuf>,
    /// Skip the evaluation harness (records only).
    pub skip_eval: bool,
}

#[derive(Debug, Default)]
pub struct BatchResult {
    /// One inner list per repetition, in corpus order.
    pub records: Vec<Vec<RunRecord>>,
    pub reports: Vec<EfficiencyReport>,
    pub mean: Option<EfficiencyReport>,
    /// Environment failures (sandbox, transport, replay store, disk).
    pub infrastructure_failures: Vec<String>,
}

/// Runs `f` over `items` on up to `workers` threads; results keep input
/// order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

pub fn run_pipelines(pipeline: &Pipeline<'_>, tasks: &[Task], run_id: &str, workers: usize) -> Vec<RunRecord> {
    parallel_map(tasks, workers, |t| pipeline.run_task(&TaskView::from(t), run_id))
}

/// Scores each task's solution (`None` = no solution, a failed task).
/// Sandbox errors are returned alongside and the task scores as failed.
pub fn evaluate_all(
    evaluator: &Evaluator<'_>,
    tasks: &[Task],
    solutions: &BTreeMap<String, Option<String>>,
) -> (EfficiencyReport, Vec<String>) {
    let mut rows = Vec::with_capacity(tasks.len());
    let mut errors = Vec::new();
    for task in tasks {
        let code = solutions.get(&task.task_id).and_then(|c| c.as_deref());
        tracing::info!(task = %task.task_id, "evaluating");
        let row = match evaluator.evaluate(task, code) {
            Ok(row) => row,
            Err(e) => {
                errors.push(format!("{}: {e}", task.task_id));
                failed_row(task)
            }
        };
        rows.push(row);
    }
    (aggregate(rows), errors)
}

fn failed_row(task: &Task) -> TaskRow {
    let has_refs = !task.reference_solutions.is_empty();
    TaskRow {
        task_id: task.task_id.clone(),
        difficulty: task.difficulty,
        passed: false,
        solution_runtime: None,
        dps: has_refs.then_some(0.0),
        beyond: has_refs.then_some(0.0),
        eff: task.expert().map(|_| 0.0),
    }
}

pub fn run_batch(
    pipeline: &Pipeline<'_>,
    evaluator: &Evaluator<'_>,
    corpus: &Corpus,
    opts: &BatchOptions,
) -> BatchResult {
    let mut result = BatchResult::default();
    for rep in 0..opts.repeats.max(1) {
        let run_id = if opts.repeats > 1 {
            format!("{}-r{}", opts.run_id, rep + 1)
        } else {
            opts.run_id.clone()
        };
        let records = run_pipelines(pipeline, &corpus.tasks, &run_id, opts.workers);
        for r in &records {
            if r.infrastructure_failure {
                result.infrastructure_failures.push(format!(
                    "{} ({}): {}",
                    r.task_id,
                    run_id,
                    r.failure.as_deref().unwrap_or("")
                ));
            }
            if let Some(dir) = &opts.runs_dir {
                if let Err(e) = persist_run(dir, r) {
                    result
                        .infrastructure_failures
                        .push(format!("cannot write run record for {}: {e}", r.task_id));
                }
            }
        }
        if !opts.skip_eval {
            let solutions = records
                .iter()
                .map(|r| (r.task_id.clone(), r.final_code.clone()))
                .collect();
            let (report, errors) = evaluate_all(evaluator, &corpus.tasks, &solutions);
            result.infrastructure_failures.extend(errors);
            result.reports.push(report);
        }
        result.records.push(records);
    }
    result.mean = EfficiencyReport::mean_of(&result.reports);
    result
}

/// Writes `<name>.json` and `<name>.txt` into `dir`.
pub fn write_report(dir: &Path, name: &str, report: &EfficiencyReport) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(dir.join(format!("{name}.txt")), report.render_table())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..50).collect();
        let out = parallel_map(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 3, |x| *x).is_empty());
    }
}
