//! Correctness and efficiency scores.
//!
//! * Pass@1: percent of tasks whose single solution passes every hidden test.
//! * DPS-style: percent of reference runtimes that are slower than or equal
//!   to the solution's runtime.
//! * Beyond-style: percent of reference runtimes strictly slower than the
//!   solution, linearly interpolated between neighbouring distinct reference
//!   runtimes.
//! * eff-style: weighted mean over difficulty levels of
//!   `expert_worst_time / solution_worst_time`.
//!
//! Failed solutions score 0 on every efficiency metric. `docs/METRICS.md`
//! spells out the tie and timeout rules.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Difficulty, LevelIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("runtime distribution for `{0}` is empty")]
    EmptyDistribution(String),
    #[error("runtime distribution for `{0}` has a non-positive value")]
    NonPositiveRuntime(String),
    #[error("solution and expert times cover different levels")]
    LevelMismatch,
    #[error("level weights sum to zero")]
    ZeroWeightSum,
    #[error("level weight for level {0} is negative")]
    NegativeWeight(LevelIndex),
}

/// Percent of tasks passed. An empty slice scores 0.
pub fn pass_at_1(results: &[bool]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    100.0 * results.iter().filter(|&&p| p).count() as f64 / results.len() as f64
}

/// Reference runtimes of one task, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeDistribution {
    pub task_id: String,
    runtimes: Vec<f64>,
}

impl RuntimeDistribution {
    pub fn new(task_id: impl Into<String>, mut runtimes: Vec<f64>) -> Result<Self, MetricError> {
        let task_id = task_id.into();
        if runtimes.is_empty() {
            return Err(MetricError::EmptyDistribution(task_id));
        }
        if runtimes.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(MetricError::NonPositiveRuntime(task_id));
        }
        runtimes.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { task_id, runtimes })
    }

    pub fn runtimes(&self) -> &[f64] {
        &self.runtimes
    }

    pub fn len(&self) -> usize {
        self.runtimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runtimes.is_empty()
    }
}

/// `None` runtime means the solution failed and scores 0.
pub fn dps(solution_runtime: Option<f64>, dist: &RuntimeDistribution) -> f64 {
    let Some(t) = solution_runtime else {
        return 0.0;
    };
    let r = dist.runtimes();
    let faster = r.partition_point(|&x| x < t);
    100.0 * (r.len() - faster) as f64 / r.len() as f64
}

/// `None` runtime means the solution failed and scores 0.
pub fn beyond(solution_runtime: Option<f64>, dist: &RuntimeDistribution) -> f64 {
    let Some(t) = solution_runtime else {
        return 0.0;
    };
    let r = dist.runtimes();
    let n = r.len();
    if t < r[0] {
        return 100.0;
    }
    if t >= r[n - 1] {
        return 0.0;
    }
    // lo <= t < hi, lo and hi neighbouring distinct values
    let hi_start = r.partition_point(|&x| x <= t);
    let hi = r[hi_start];
    let lo = r[hi_start - 1];
    let hi_end = r.partition_point(|&x| x <= hi);
    let above_hi = n - hi_end;
    let mult_hi = hi_end - hi_start;
    let frac = (hi - t) / (hi - lo);
    100.0 * (above_hi as f64 + mult_hi as f64 * frac) / n as f64
}

/// Weighted mean of `expert / solution` worst times per level. A level whose
/// solution time is `None` (timeout) contributes 0. Levels missing from
/// `weights` weigh 1.
pub fn eff(
    level_worst_times: &BTreeMap<LevelIndex, Option<f64>>,
    expert_times: &BTreeMap<LevelIndex, f64>,
    weights: &BTreeMap<LevelIndex, f64>,
) -> Result<f64, MetricError> {
    if level_worst_times.len() != expert_times.len()
        || !level_worst_times.keys().all(|k| expert_times.contains_key(k))
        || level_worst_times.is_empty()
    {
        return Err(MetricError::LevelMismatch);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (level, solution) in level_worst_times {
        let w = weights.get(level).copied().unwrap_or(1.0);
        if w < 0.0 {
            return Err(MetricError::NegativeWeight(*level));
        }
        den += w;
        if let Some(s) = solution {
            if *s > 0.0 {
                num += w * (expert_times[level] / s);
            }
        }
    }
    if den <= 0.0 {
        return Err(MetricError::ZeroWeightSum);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub passed: bool,
    pub solution_runtime: Option<f64>,
    /// `None` when the task has no runtime references.
    pub dps: Option<f64>,
    pub beyond: Option<f64>,
    /// `None` when the task has no expert solution.
    pub eff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub pass_at_1: f64,
    pub dps_norm: Option<f64>,
    pub beyond_at_1: Option<f64>,
    pub eff_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<TaskRow>,
    pub aggregates: Aggregates,
    pub beyond_by_difficulty: BTreeMap<Difficulty, f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Means over tasks. A metric averages only rows where it applies; failed
/// rows carry 0 and count in the denominator.
pub fn aggregate(rows: Vec<TaskRow>) -> EfficiencyReport {
    let passed: Vec<bool> = rows.iter().map(|r| r.passed).collect();
    let aggregates = Aggregates {
        pass_at_1: pass_at_1(&passed),
        dps_norm: mean(rows.iter().filter_map(|r| r.dps)),
        beyond_at_1: mean(rows.iter().filter_map(|r| r.beyond)),
        eff_at_1: mean(rows.iter().filter_map(|r| r.eff)),
    };
    let mut by_difficulty: BTreeMap<Difficulty, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if let Some(b) = r.beyond {
            by_difficulty.entry(r.difficulty).or_default().push(b);
        }
    }
    let beyond_by_difficulty = by_difficulty
        .into_iter()
        .filter_map(|(d, v)| mean(v.into_iter()).map(|m| (d, m)))
        .collect();
    EfficiencyReport {
        rows,
        aggregates,
        beyond_by_difficulty,
    }
}

impl EfficiencyReport {
    /// Element-wise mean of several reports over the same tasks.
    pub fn mean_of(reports: &[EfficiencyReport]) -> Option<EfficiencyReport> {
        let first = reports.first()?;
        let k = reports.len() as f64;
        let opt_mean = |f: &dyn Fn(&EfficiencyReport) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (vals.len() == reports.len()).then(|| vals.iter().sum::<f64>() / k)
        };
        let aggregates = Aggregates {
            pass_at_1: reports.iter().map(|r| r.aggregates.pass_at_1).sum::<f64>() / k,
            dps_norm: opt_mean(&|r| r.aggregates.dps_norm),
            beyond_at_1: opt_mean(&|r| r.aggregates.beyond_at_1),
            eff_at_1: opt_mean(&|r| r.aggregates.eff_at_1),
        };
        let beyond_by_difficulty = first
            .beyond_by_difficulty
            .keys()
            .filter_map(|d| opt_mean(&|r| r.beyond_by_difficulty.get(d).copied()).map(|m| (*d, m)))
            .collect();
        Some(EfficiencyReport {
            rows: first.rows.clone(),
            aggregates,
            beyond_by_difficulty,
        })
    }

    /// Aligned text table: one line per task, then the aggregate line.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let width = self
            .rows
            .iter()
            .map(|r| r.task_id.len())
            .max()
            .unwrap_or(4)
            .max("TOTAL".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>11}  {:>8}  {:>9}  {:>8}  {:>6}",
            "task", "difficulty", "DPS_norm", "Beyond@1", "eff@1", "Pass@1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>11}  {:>8}  {:>9}  {:>8}  {:>6}",
                r.task_id,
                r.difficulty.to_string(),
                fmt(r.dps),
                fmt(r.beyond),
                fmt(r.eff),
                if r.passed { "pass" } else { "fail" }
            );
        }
        let a = &self.aggregates;
        let _ = writeln!(
            out,
            "{:<width$}  {:>11}  {:>8}  {:>9}  {:>8}  {:>6.2}",
            "TOTAL",
            "",
            fmt(a.dps_norm),
            fmt(a.beyond_at_1),
            fmt(a.eff_at_1),
            a.pass_at_1
        );
        if !self.beyond_by_difficulty.is_empty() {
            let parts: Vec<String> = self
                .beyond_by_difficulty
                .iter()
                .map(|(d, v)| format!("{d}={v:.2}"))
                .collect();
            let _ = writeln!(out, "Beyond@1 by difficulty: {}", parts.join(", "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> RuntimeDistribution {
        RuntimeDistribution::new("t", v.to_vec()).unwrap()
    }

    #[test]
    fn pass_ratio() {
        assert_eq!(pass_at_1(&[true, true, true, false]), 75.0);
        assert_eq!(pass_at_1(&[true, true]), 100.0);
        assert_eq!(pass_at_1(&[false, false]), 0.0);
    }

    #[test]
    fn dps_counts_slower_or_equal_references() {
        let d = dist(&[0.020, 0.050, 0.100]);
        assert!((dps(Some(0.060), &d) - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(dps(Some(0.001), &d), 100.0);
        assert_eq!(dps(Some(0.5), &d), 0.0);
        assert_eq!(dps(Some(0.050), &d), 200.0 / 3.0);
        assert_eq!(dps(None, &d), 0.0);
    }

    #[test]
    fn beyond_bounds_and_ties() {
        let d = dist(&[0.1, 0.2]);
        assert_eq!(beyond(Some(0.05), &d), 100.0);
        assert_eq!(beyond(Some(0.3), &d), 0.0);
        assert_eq!(beyond(Some(0.2), &d), 0.0);
        // equal to the fastest: only the slower reference counts
        assert_eq!(beyond(Some(0.1), &d), 50.0);
        assert!((beyond(Some(0.15), &d) - 25.0).abs() < 1e-12);
        assert_eq!(beyond(None, &d), 0.0);
    }

    #[test]
    fn empty_or_bad_distribution_is_rejected() {
        assert_eq!(
            RuntimeDistribution::new("x", vec![]),
            Err(MetricError::EmptyDistribution("x".into()))
        );
        assert!(RuntimeDistribution::new("x", vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn eff_examples() {
        let w = BTreeMap::new();
        let same = BTreeMap::from([(0, Some(0.1)), (1, Some(0.2))]);
        let expert = BTreeMap::from([(0, 0.1), (1, 0.2)]);
        assert!((eff(&same, &expert, &w).unwrap() - 1.0).abs() < 1e-12);

        let fast = BTreeMap::from([(0, Some(0.05))]);
        assert!((eff(&fast, &BTreeMap::from([(0, 0.1)]), &w).unwrap() - 2.0).abs() < 1e-12);

        let timeout = BTreeMap::from([(0, None), (1, Some(0.2))]);
        assert!((eff(&timeout, &expert, &w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eff_errors() {
        let sol = BTreeMap::from([(0, Some(0.1))]);
        let expert = BTreeMap::from([(1, 0.1)]);
        assert_eq!(eff(&sol, &expert, &BTreeMap::new()), Err(MetricError::LevelMismatch));
        let expert = BTreeMap::from([(0, 0.1)]);
        assert_eq!(
            eff(&sol, &expert, &BTreeMap::from([(0, 0.0)])),
            Err(MetricError::ZeroWeightSum)
        );
    }

    fn row(id: &str, passed: bool, dps: f64) -> TaskRow {
        TaskRow {
            task_id: id.into(),
            difficulty: Difficulty::Easy,
            passed,
            solution_runtime: None,
            dps: Some(dps),
            beyond: Some(dps),
            eff: Some(if passed { 1.0 } else { 0.0 }),
        }
    }

    #[test]
    fn aggregate_means() {
        let rep = aggregate(vec![row("a", true, 100.0), row("b", false, 0.0)]);
        assert_eq!(rep.aggregates.dps_norm, Some(50.0));
        assert_eq!(rep.aggregates.pass_at_1, 50.0);
        assert_eq!(rep.aggregates.eff_at_1, Some(0.5));
        assert_eq!(rep.beyond_by_difficulty[&Difficulty::Easy], 50.0);

        let single = aggregate(vec![row("a", true, 70.0)]);
        assert_eq!(single.aggregates.dps_norm, Some(70.0));
        assert_eq!(single.aggregates.pass_at_1, 100.0);
        let table = single.render_table();
        assert!(table.contains("TOTAL"));
        assert!(table.lines().count() >= 3);
    }

    #[test]
    fn mean_of_identical_reports_is_identity() {
        let rep = aggregate(vec![row("a", true, 80.0), row("b", true, 40.0)]);
        let m = EfficiencyReport::mean_of(&[rep.clone(), rep.clone(), rep.clone()]).unwrap();
        assert_eq!(m.aggregates, rep.aggregates);
    }
}
