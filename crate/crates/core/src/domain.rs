//! Domain types shared by every pipeline stage.
//!
//! Values are plain data: they are constructed once, serialized into the run
//! record, and replaced (never mutated in place) as the pipeline advances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type TestId = u32;
pub type CandidateId = u32;
pub type LevelIndex = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Unspecified,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty::Unspecified
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Unspecified => "unspecified",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionRole {
    Expert,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub code: String,
    pub role: SolutionRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_runtimes: Option<BTreeMap<LevelIndex, f64>>,
}

/// A programming task as it appears in a corpus file.
///
/// `hidden_tests` (and the reference solutions) belong to the evaluation
/// harness only. Pipeline stages receive a [`Task`] but must never render
/// those fields into a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub description: String,
    pub entry_point: String,
    #[serde(default)]
    pub difficulty: Difficulty,
    pub hidden_tests: Vec<String>,
    /// Difficulty level of each hidden test, parallel to `hidden_tests`.
    /// Missing means every hidden test is level 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_test_levels: Option<Vec<LevelIndex>>,
    #[serde(default)]
    pub reference_solutions: Vec<ReferenceSolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_weights: Option<BTreeMap<LevelIndex, f64>>,
}

impl Task {
    pub fn expert(&self) -> Option<&ReferenceSolution> {
        self.reference_solutions
            .iter()
            .find(|s| s.role == SolutionRole::Expert)
    }

    pub fn level_of(&self, hidden_index: usize) -> LevelIndex {
        self.hidden_test_levels
            .as_ref()
            .and_then(|l| l.get(hidden_index).copied())
            .unwrap_or(0)
    }

    /// Distinct levels present in the hidden tests, ascending.
    pub fn levels(&self) -> Vec<LevelIndex> {
        let set: BTreeSet<LevelIndex> = (0..self.hidden_tests.len())
            .map(|i| self.level_of(i))
            .collect();
        set.into_iter().collect()
    }

    /// Weight per level; levels without an explicit weight get 1.0.
    pub fn weights(&self) -> BTreeMap<LevelIndex, f64> {
        self.levels()
            .into_iter()
            .map(|l| {
                let w = self
                    .level_weights
                    .as_ref()
                    .and_then(|m| m.get(&l).copied())
                    .unwrap_or(1.0);
                (l, w)
            })
            .collect()
    }
}

/// Checks every [`Task`] invariant that can be checked on a single task.
/// An empty result means the task is well formed.
pub fn validate_task(task: &Task) -> Vec<String> {
    let mut violations = Vec::new();
    if task.task_id.trim().is_empty() {
        violations.push("task_id empty".to_string());
    }
    if task.entry_point.trim().is_empty() {
        violations.push("entry_point empty".to_string());
    }
    let experts = task
        .reference_solutions
        .iter()
        .filter(|s| s.role == SolutionRole::Expert)
        .count();
    if experts > 1 {
        violations.push("multiple expert solutions".to_string());
    }
    for (i, sol) in task.reference_solutions.iter().enumerate() {
        if let Some(rt) = &sol.measured_runtimes {
            if rt.values().any(|&t| !(t > 0.0) || !t.is_finite()) {
                violations.push(format!(
                    "reference_solutions[{i}].measured_runtimes not strictly positive"
                ));
            }
        }
    }
    if let Some(levels) = &task.hidden_test_levels {
        if levels.len() != task.hidden_tests.len() {
            violations.push("hidden_test_levels length differs from hidden_tests".to_string());
        }
    }
    if let Some(weights) = &task.level_weights {
        if weights.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            violations.push("level_weights contains a negative weight".to_string());
        }
    }
    for (i, t) in task.hidden_tests.iter().enumerate() {
        if t.contains('\n') || !t.trim_start().starts_with("assert") {
            violations.push(format!("hidden_tests[{i}] is not a single-line assertion"));
        }
    }
    violations
}

/// The task restated along the four formalization dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormalizedTask {
    pub source_task_id: String,
    pub entry_point: String,
    pub io_conditions: String,
    pub edge_cases: String,
    pub parameter_types: String,
    pub expected_behavior: String,
    /// The original problem statement (signature plus docstring).
    pub statement: String,
}

impl FormalizedTask {
    /// Text substituted for the `task_description` placeholder.
    pub fn task_description(&self) -> String {
        format!(
            "{}\n\nEntry Point Function Name: {}\nInput/Output Conditions: {}\nEdge Cases: {}\nParameter Types: {}\nExpected Behavior: {}",
            self.statement.trim_end(),
            self.entry_point,
            self.io_conditions,
            self.edge_cases,
            self.parameter_types,
            self.expected_behavior
        )
    }

    pub fn is_complete(&self) -> bool {
        [
            &self.io_conditions,
            &self.edge_cases,
            &self.parameter_types,
            &self.expected_behavior,
        ]
        .iter()
        .all(|s| !s.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmPlan {
    pub plan_id: u32,
    pub key_description: String,
    pub complexity: String,
    pub pseudocode: String,
}

impl AlgorithmPlan {
    pub fn render(&self) -> String {
        let mut s = format!("Algorithm {}: {}", self.plan_id, self.key_description.trim());
        if !self.complexity.is_empty() && !self.key_description.contains(&self.complexity) {
            s.push_str(&format!("\nComplexity: {}", self.complexity));
        }
        s.push_str(&format!("\nPseudocode:\n{}", self.pseudocode.trim()));
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionSet {
    pub suggestions: Vec<String>,
    pub source_plan_ids: Vec<u32>,
}

impl SuggestionSet {
    pub fn render(&self) -> String {
        self.suggestions
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

impl TestStatus {
    pub fn is_pass(self) -> bool {
        self == TestStatus::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCandidate {
    pub candidate_id: CandidateId,
    pub code: String,
    pub plan_id: u32,
    pub refinement_generation: u32,
    pub pass_count: u32,
    pub per_test_results: BTreeMap<TestId, TestStatus>,
}

impl CodeCandidate {
    pub fn new(candidate_id: CandidateId, plan_id: u32, code: String) -> Self {
        Self {
            candidate_id,
            code,
            plan_id,
            refinement_generation: 0,
            pass_count: 0,
            per_test_results: BTreeMap::new(),
        }
    }

    /// Number of passing results restricted to `checked`.
    pub fn passes_on(&self, checked: &BTreeSet<TestId>) -> u32 {
        checked
            .iter()
            .filter(|t| self.per_test_results.get(t).is_some_and(|s| s.is_pass()))
            .count() as u32
    }

    /// Returns a copy whose `pass_count` is recomputed over `checked`.
    pub fn scored(mut self, checked: &BTreeSet<TestId>) -> Self {
        self.pass_count = self.passes_on(checked);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestCaseStatus {
    Synthesized,
    Trusted,
    Retained,
    Discarded,
}

impl TestCaseStatus {
    pub fn is_checked(self) -> bool {
        matches!(self, TestCaseStatus::Trusted | TestCaseStatus::Retained)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub test_id: TestId,
    pub input_repr: String,
    pub assertion: String,
    pub status: TestCaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_note: Option<String>,
}

impl TestCase {
    pub fn synthesized(test_id: TestId, input_repr: impl Into<String>) -> Self {
        Self {
            test_id,
            input_repr: input_repr.into(),
            assertion: String::new(),
            status: TestCaseStatus::Synthesized,
            review_note: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Variant1NoLogic,
    Variant2NoCodeOpt,
    Variant3NoRefine,
    NoUniq1,
    NoUniq2,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Variant1NoLogic,
        Variant::Variant2NoCodeOpt,
        Variant::Variant3NoRefine,
        Variant::NoUniq1,
        Variant::NoUniq2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Variant1NoLogic => "variant1_no_logic",
            Variant::Variant2NoCodeOpt => "variant2_no_code_opt",
            Variant::Variant3NoRefine => "variant3_no_refine",
            Variant::NoUniq1 => "no_uniq1",
            Variant::NoUniq2 => "no_uniq2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model_name: String,
    pub num_plans: u32,
    pub num_tests: u32,
    pub refine_iterations: u32,
    pub temperature: f64,
    pub timing_repeats: u32,
    /// Seconds; applies to functional executions.
    pub per_test_timeout: f64,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_name: "default".to_string(),
            num_plans: 5,
            num_tests: 20,
            refine_iterations: 1,
            temperature: 0.0,
            timing_repeats: 3,
            per_test_timeout: 5.0,
            variant: Variant::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_plans < 1 {
            return Err("num_plans must be at least 1".into());
        }
        if self.num_tests < 1 {
            return Err("num_tests must be at least 1".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        if self.timing_repeats < 1 {
            return Err("timing_repeats must be at least 1".into());
        }
        if !(self.per_test_timeout > 0.0) {
            return Err("per_test_timeout must be positive".into());
        }
        Ok(())
    }
}

/// Named stage of the pipeline graph; the ordered list of stages entered is
/// recorded per run and is fixed per [`Variant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Formalize,
    DirectGenerate,
    Explore,
    Suggest,
    Generate,
    SynthesizeTests,
    Verify,
    Refine,
    Select,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Formalize => "formalize",
            Stage::DirectGenerate => "direct_generate",
            Stage::Explore => "explore",
            Stage::Suggest => "suggest",
            Stage::Generate => "generate",
            Stage::SynthesizeTests => "synthesize_tests",
            Stage::Verify => "verify",
            Stage::Refine => "refine",
            Stage::Select => "select",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of a run transcript. Model calls carry the rendered prompt;
/// local steps (execution, forward verification) carry only a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub stage: Stage,
    /// Finer-grained tag, e.g. `formalize_check` or `reverse_review`.
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prompt: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassMatrix {
    pub candidate_ids: Vec<CandidateId>,
    pub test_ids: Vec<TestId>,
    /// Row per candidate, column per test.
    pub grid: Vec<Vec<TestStatus>>,
}

impl PassMatrix {
    pub fn empty() -> Self {
        Self {
            candidate_ids: Vec::new(),
            test_ids: Vec::new(),
            grid: Vec::new(),
        }
    }

    pub fn from_candidates(candidates: &[CodeCandidate], test_ids: &[TestId]) -> Self {
        let grid = candidates
            .iter()
            .map(|c| {
                test_ids
                    .iter()
                    .map(|t| c.per_test_results.get(t).copied().unwrap_or(TestStatus::Error))
                    .collect()
            })
            .collect();
        Self {
            candidate_ids: candidates.iter().map(|c| c.candidate_id).collect(),
            test_ids: test_ids.to_vec(),
            grid,
        }
    }

    pub fn is_rectangular(&self) -> bool {
        self.grid.len() == self.candidate_ids.len()
            && self.grid.iter().all(|row| row.len() == self.test_ids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestHistoryEntry {
    pub test_id: TestId,
    pub status: TestCaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub candidate_id: CandidateId,
    pub generation: u32,
    pub original_pass_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_pass_count: Option<u32>,
    pub kept_refined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub final_candidate_id: CandidateId,
    /// How the winner was chosen: `max_pass_count`, `llm_tie_break`,
    /// `lowest_id`, `llm_fallback` or `llm`.
    pub method: String,
    /// Set when the checked set was empty and selection fell back.
    pub flagged_empty_checked: bool,
}

/// Full transcript of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task_id: String,
    pub config_snapshot: PipelineConfig,
    pub stages: Vec<Stage>,
    pub stage_transcripts: Vec<StageTranscript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formalized: Option<FormalizedTask>,
    pub plans: Vec<AlgorithmPlan>,
    pub suggestions: SuggestionSet,
    pub candidates: Vec<CodeCandidate>,
    pub tests: Vec<TestCase>,
    pub test_history: Vec<TestHistoryEntry>,
    pub pass_matrix: PassMatrix,
    pub checked_test_ids: Vec<TestId>,
    pub refinements: Vec<RefinementRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_candidate_id: Option<CandidateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_code: Option<String>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// The failure came from the environment (sandbox, transport, replay
    /// store) rather than from the model's replies.
    #[serde(default)]
    pub infrastructure_failure: bool,
    pub wall_clock: f64,
}

impl RunRecord {
    pub fn new(run_id: String, task_id: String, config: PipelineConfig) -> Self {
        Self {
            run_id,
            task_id,
            config_snapshot: config,
            stages: Vec::new(),
            stage_transcripts: Vec::new(),
            formalized: None,
            plans: Vec::new(),
            suggestions: SuggestionSet::default(),
            candidates: Vec::new(),
            tests: Vec::new(),
            test_history: Vec::new(),
            pass_matrix: PassMatrix::empty(),
            checked_test_ids: Vec::new(),
            refinements: Vec::new(),
            selection: None,
            final_candidate_id: None,
            final_code: None,
            warnings: Vec::new(),
            failure: None,
            infrastructure_failure: false,
            wall_clock: 0.0,
        }
    }

    /// Copy with the wall clock and per-call latencies zeroed, for
    /// byte-level comparison of replayed runs.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_clock = 0.0;
        for t in &mut r.stage_transcripts {
            t.latency = None;
        }
        r
    }

    pub fn checked_set(&self) -> BTreeSet<TestId> {
        self.checked_test_ids.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task {
            task_id: "prime_fib".into(),
            description: "def prime_fib(n: int) -> int: ...".into(),
            entry_point: "prime_fib".into(),
            difficulty: Difficulty::Easy,
            hidden_tests: vec!["assert prime_fib(1) == 2".into()],
            hidden_test_levels: None,
            reference_solutions: vec![ReferenceSolution {
                code: "def prime_fib(n): return 2".into(),
                role: SolutionRole::Expert,
                measured_runtimes: None,
            }],
            level_weights: None,
        }
    }

    #[test]
    fn well_formed_task_has_no_violations() {
        assert!(validate_task(&task()).is_empty());
    }

    #[test]
    fn empty_entry_point_is_reported() {
        let mut t = task();
        t.entry_point = String::new();
        assert_eq!(validate_task(&t), vec!["entry_point empty".to_string()]);
    }

    #[test]
    fn two_experts_are_reported() {
        let mut t = task();
        let expert = t.reference_solutions[0].clone();
        t.reference_solutions.push(expert);
        assert_eq!(validate_task(&t), vec!["multiple expert solutions".to_string()]);
    }

    #[test]
    fn non_positive_runtime_is_reported() {
        let mut t = task();
        t.reference_solutions[0].measured_runtimes = Some(BTreeMap::from([(0, 0.0)]));
        let v = validate_task(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("measured_runtimes"));
    }

    #[test]
    fn weights_default_to_uniform() {
        let mut t = task();
        t.hidden_tests.push("assert prime_fib(2) == 3".into());
        t.hidden_test_levels = Some(vec![0, 2]);
        assert_eq!(t.weights(), BTreeMap::from([(0, 1.0), (2, 1.0)]));
        t.level_weights = Some(BTreeMap::from([(2, 3.0)]));
        assert_eq!(t.weights(), BTreeMap::from([(0, 1.0), (2, 3.0)]));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
    }

    #[test]
    fn config_defaults_match_experiment_settings() {
        let c = PipelineConfig::default();
        assert_eq!((c.num_plans, c.num_tests, c.refine_iterations), (5, 20, 1));
        assert_eq!(c.temperature, 0.0);
        assert!(c.validate().is_ok());
        let bad = PipelineConfig { num_plans: 0, ..c };
        assert!(bad.validate().is_err());
    }
}
