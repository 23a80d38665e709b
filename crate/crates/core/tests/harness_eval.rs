mod common;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use effigen_core::bench::evaluate_all;
use effigen_core::domain::SolutionRole;
use effigen_core::harness::Evaluator;
use effigen_core::sandbox::Sandbox;

// functional runs of one test would otherwise compete with the other's timing
static SERIAL: Mutex<()> = Mutex::new(());

#[test]
fn expert_scores_near_one_and_baseline_below_it() {
    let _serial = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let corpus = common::corpus();
    let task = corpus.get("count_inversions").unwrap();
    let sandbox = Sandbox::default().with_workers(2);
    let evaluator = Evaluator::new(&sandbox, 3, Duration::from_secs(10));

    let expert = &task.expert().unwrap().code;
    let row = evaluator.evaluate(task, Some(expert)).unwrap();
    assert!(row.passed);
    let eff = row.eff.unwrap();
    assert!((eff - 1.0).abs() <= 0.15, "{eff}");

    let baseline = task
        .reference_solutions
        .iter()
        .find(|r| r.role == SolutionRole::Baseline)
        .unwrap();
    // with uniform weights the tiny levels favour the quadratic baseline,
    // so weight the large level the way a task caring about scale would
    let mut weighted = task.clone();
    weighted.level_weights = Some(BTreeMap::from([(2, 4.0)]));
    let row = evaluator.evaluate(&weighted, Some(&baseline.code)).unwrap();
    assert!(row.passed);
    assert!(row.eff.unwrap() < 1.0, "{:?}", row.eff);
    assert!(row.beyond.unwrap() < 50.0, "{:?}", row.beyond);
}

#[test]
fn wrong_or_missing_solutions_score_zero_but_count() {
    let _serial = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let mut corpus = common::corpus();
    corpus.retain(&["prime_fib".to_string(), "find_median".to_string()]);
    let sandbox = Sandbox::default().with_workers(2);
    let evaluator = Evaluator::new(&sandbox, 1, Duration::from_secs(10));
    let solutions = BTreeMap::from([
        ("prime_fib".to_string(), Some("def prime_fib(n):\n    return 2\n".to_string())),
        ("find_median".to_string(), None),
    ]);
    let (report, errors) = evaluate_all(&evaluator, &corpus.tasks, &solutions);
    assert!(errors.is_empty());
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| !r.passed && r.eff == Some(0.0) && r.dps == Some(0.0)));
    assert_eq!(report.aggregates.pass_at_1, 0.0);
    assert_eq!(report.aggregates.eff_at_1, Some(0.0));
}
