//! Stage graph and per-task orchestration.
//!
//! Each variant runs a fixed sequence of stages (see [`stage_plan`]). The
//! pipeline only ever sees a [`TaskView`]: the statement and entry point.
//! Hidden tests and reference solutions never reach a prompt.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use regex::Regex;
use thiserror::Error;

use crate::domain::{
    AlgorithmPlan, CandidateId, CodeCandidate, FormalizedTask, PassMatrix, PipelineConfig,
    RefinementRecord, RunRecord, SelectionRecord, Stage, SuggestionSet, Task, TestId, TestStatus,
    Variant,
};
use crate::gateway::ChatModel;
use crate::prompt::{
    extract_complexity, parse_algorithm_blocks, parse_code_blocks, parse_formalization,
    parse_selection, parse_suggestions, parse_verdict, Placeholder, PromptContext, PromptStage,
    TemplateSet,
};
use crate::sandbox::{ExecRequest, Sandbox, SandboxError};
use crate::session::{Session, SessionError};
use crate::testgen::{complete_assertions, synthesize_inputs, TestGenError, TestStore};
use crate::verification::{verify, VerifyError};

/// Stands in for the suggestion list when a variant has none.
pub const NO_SUGGESTIONS: &str = "No implementation suggestions are available.";
/// Stands in for the algorithm description of directly generated code.
pub const DIRECT_CONTEXT: &str = "The algorithm is the one implemented by the code below.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    TestGen(#[from] TestGenError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("no algorithm blocks could be parsed from the exploration reply")]
    NoAlgorithmBlocks,
    #[error("no code candidate defines `{0}`")]
    NoCandidates(String),
}

impl PipelineError {
    /// Errors caused by the environment rather than by model output.
    pub fn is_infrastructure(&self) -> bool {
        use crate::gateway::GatewayError as G;
        let gateway = |e: &SessionError| match e {
            SessionError::Gateway(G::EmptyCompletion { .. }) => false,
            SessionError::Gateway(_) | SessionError::Template(_) => true,
        };
        match self {
            PipelineError::Session(e) => gateway(e),
            PipelineError::TestGen(TestGenError::Session(e)) => gateway(e),
            PipelineError::Verify(VerifyError::Session(e)) => gateway(e),
            PipelineError::Sandbox(_) => true,
            _ => false,
        }
    }
}

/// The part of a task the pipeline may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskView {
    pub task_id: String,
    pub description: String,
    pub entry_point: String,
}

impl From<&Task> for TaskView {
    fn from(t: &Task) -> Self {
        Self {
            task_id: t.task_id.clone(),
            description: t.description.clone(),
            entry_point: t.entry_point.clone(),
        }
    }
}

/// Ordered stages entered by `variant`.
pub fn stage_plan(variant: Variant) -> Vec<Stage> {
    use Stage::*;
    match variant {
        Variant::Full => vec![Formalize, Explore, Suggest, Generate, SynthesizeTests, Verify, Refine, Select],
        Variant::Variant1NoLogic | Variant::NoUniq1 => vec![
            Formalize,
            DirectGenerate,
            Suggest,
            Generate,
            SynthesizeTests,
            Verify,
            Refine,
            Select,
        ],
        Variant::Variant2NoCodeOpt => {
            vec![Formalize, Explore, Generate, SynthesizeTests, Verify, Refine, Select]
        }
        Variant::Variant3NoRefine => vec![Formalize, Explore, Suggest, Generate, Select],
        Variant::NoUniq2 => vec![
            Formalize,
            DirectGenerate,
            SynthesizeTests,
            Verify,
            Refine,
            Explore,
            Suggest,
            Generate,
            Select,
        ],
    }
}

/// True when `code` defines a top-level function named `entry_point`.
pub fn defines(code: &str, entry_point: &str) -> bool {
    static CACHE: Lazy<std::sync::Mutex<BTreeMap<String, Regex>>> = Lazy::new(Default::default);
    let mut cache = CACHE.lock().unwrap();
    let re = cache.entry(entry_point.to_string()).or_insert_with(|| {
        Regex::new(&format!(r"(?m)^def\s+{}\s*\(", regex::escape(entry_point))).unwrap()
    });
    re.is_match(code)
}

fn fenced(code: &str) -> String {
    format!("```python\n{}\n```", code.trim_end())
}

pub struct Pipeline<'a> {
    pub model: &'a dyn ChatModel,
    pub templates: &'a TemplateSet,
    pub sandbox: &'a Sandbox,
    pub config: PipelineConfig,
    /// Break pass-count ties with the selection prompt instead of lowest id.
    pub llm_tie_break: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        model: &'a dyn ChatModel,
        templates: &'a TemplateSet,
        sandbox: &'a Sandbox,
        config: PipelineConfig,
    ) -> Self {
        Self {
            model,
            templates,
            sandbox,
            config,
            llm_tie_break: true,
        }
    }

    /// Runs one task. Stage-fatal errors end the run early; the partial
    /// record carries the error in `failure`.
    pub fn run_task(&self, task: &TaskView, run_id: &str) -> RunRecord {
        let started = Instant::now();
        let mut run = Runner {
            p: self,
            view: task,
            session: Session::new(
                self.model,
                self.templates,
                self.config.model_name.clone(),
                self.config.temperature,
            ),
            record: RunRecord::new(run_id.to_string(), task.task_id.clone(), self.config.clone()),
            store: TestStore::default(),
            contexts: BTreeMap::new(),
        };
        let result = run.drive();
        let Runner {
            session,
            mut record,
            store,
            ..
        } = run;
        if let Err(e) = result {
            tracing::error!(task = %task.task_id, "run failed: {e}");
            record.failure = Some(e.to_string());
            record.infrastructure_failure = e.is_infrastructure();
        }
        let (tests, history) = store.into_parts();
        record.tests = tests;
        record.test_history = history;
        record.stage_transcripts = session.transcripts;
        record.warnings = session.warnings;
        record.wall_clock = started.elapsed().as_secs_f64();
        record
    }
}

struct Runner<'p, 'a> {
    p: &'p Pipeline<'a>,
    view: &'p TaskView,
    session: Session<'a>,
    record: RunRecord,
    store: TestStore,
    /// Algorithm description each candidate was generated from.
    contexts: BTreeMap<CandidateId, String>,
}

impl Runner<'_, '_> {
    fn cfg(&self) -> &PipelineConfig {
        &self.p.config
    }

    fn enter(&mut self, stage: Stage) {
        tracing::info!(task = %self.view.task_id, "stage {stage}");
        self.record.stages.push(stage);
    }

    fn close(&mut self, stage: Stage, summary: String) {
        self.session.note(stage, "summary", summary);
    }

    fn suggestions_text(&self) -> String {
        if self.record.suggestions.suggestions.is_empty() {
            NO_SUGGESTIONS.to_string()
        } else {
            self.record.suggestions.render()
        }
    }

    fn drive(&mut self) -> Result<(), PipelineError> {
        let variant = self.cfg().variant;
        let formal = self.formalize()?;
        match variant {
            Variant::Full | Variant::Variant2NoCodeOpt | Variant::Variant3NoRefine => {
                self.explore(&formal, None)?;
                if variant != Variant::Variant2NoCodeOpt {
                    self.suggest_from_plans()?;
                }
                self.generate_from_plans(&formal, None)?;
                if variant == Variant::Variant3NoRefine {
                    return self.select(&BTreeSet::new(), true);
                }
                let checked = self.tests_and_verify(&formal)?;
                self.refine(&formal, &checked)?;
                self.select(&checked, false)
            }
            Variant::Variant1NoLogic | Variant::NoUniq1 => {
                self.direct_generate(&formal)?;
                self.suggest_from_code()?;
                self.optimize_code(&formal)?;
                let checked = self.tests_and_verify(&formal)?;
                self.refine(&formal, &checked)?;
                self.select(&checked, false)
            }
            Variant::NoUniq2 => {
                self.direct_generate(&formal)?;
                let checked = self.tests_and_verify(&formal)?;
                self.refine(&formal, &checked)?;
                let refined: Vec<String> =
                    self.record.candidates.iter().map(|c| c.code.clone()).collect();
                let mut extra = String::from("Refined solutions:");
                for code in &refined {
                    extra.push('\n');
                    extra.push_str(&fenced(code));
                }
                self.explore(&formal, Some(&extra))?;
                self.suggest_from_plans()?;
                let previous = std::mem::take(&mut self.record.candidates);
                self.generate_from_plans(&formal, Some(&refined))?;
                if self.record.candidates.is_empty() {
                    self.session
                        .warn("no optimized candidate could be generated; keeping refined candidates");
                    self.record.candidates = previous;
                }
                self.select(&checked, false)
            }
        }
    }

    fn formalize(&mut self) -> Result<FormalizedTask, PipelineError> {
        self.enter(Stage::Formalize);
        let mut formal = self.formalize_once(None)?;
        for attempt in 0..2 {
            match self.check_formalization(&formal)? {
                None => break,
                Some(reason) if attempt == 0 => {
                    let note = format!(
                        "A previous analysis was judged inconsistent with the original problem. {reason} Please analyze the problem again."
                    );
                    formal = self.formalize_once(Some(&note))?;
                }
                Some(reason) => self.session.warn(format!(
                    "formalization still judged inconsistent ({reason}); proceeding"
                )),
            }
        }
        self.close(Stage::Formalize, "formalized".to_string());
        self.record.formalized = Some(formal.clone());
        Ok(formal)
    }

    fn formalize_once(&mut self, note: Option<&str>) -> Result<FormalizedTask, PipelineError> {
        let ctx = PromptContext::new()
            .with(Placeholder::NaturalLanguageDescription, self.view.description.clone());
        let mut raw =
            self.session
                .ask_with_note(Stage::Formalize, PromptStage::Formalize, &ctx, note)?;
        let mut draft = parse_formalization(&raw);
        if !draft.is_complete() {
            let combined = match note {
                Some(n) => format!("{n}\n\n{}", crate::session::REPROMPT_NOTE),
                None => crate::session::REPROMPT_NOTE.to_string(),
            };
            raw = self.session.ask_with_note(
                Stage::Formalize,
                PromptStage::Formalize,
                &ctx,
                Some(&combined),
            )?;
            draft = parse_formalization(&raw);
        }
        if !draft.is_complete() {
            self.session
                .warn("formalization reply is missing sections; using the whole reply for them");
            let whole = raw.trim().to_string();
            for field in [
                &mut draft.io_conditions,
                &mut draft.edge_cases,
                &mut draft.parameter_types,
                &mut draft.expected_behavior,
            ] {
                if field.is_empty() {
                    *field = whole.clone();
                }
            }
        }
        if let Some(ep) = &draft.entry_point {
            if ep != &self.view.entry_point {
                self.session.warn(format!(
                    "formalization names entry point `{ep}`; keeping `{}`",
                    self.view.entry_point
                ));
            }
        }
        Ok(FormalizedTask {
            source_task_id: self.view.task_id.clone(),
            entry_point: self.view.entry_point.clone(),
            io_conditions: draft.io_conditions,
            edge_cases: draft.edge_cases,
            parameter_types: draft.parameter_types,
            expected_behavior: draft.expected_behavior,
            statement: self.view.description.clone(),
        })
    }

    /// `None` when consistent, else the stated reason.
    fn check_formalization(&mut self, formal: &FormalizedTask) -> Result<Option<String>, PipelineError> {
        let ctx = PromptContext::new()
            .with(Placeholder::NaturalLanguageDescription, self.view.description.clone())
            .with(Placeholder::TaskDescription, formal.task_description());
        let raw = self
            .session
            .ask(Stage::Formalize, PromptStage::FormalizeCheck, &ctx)?;
        let verdict = match parse_verdict(&raw) {
            Ok(v) => Some(v),
            Err(_) => {
                let raw = self
                    .session
                    .reprompt(Stage::Formalize, PromptStage::FormalizeCheck, &ctx)?;
                parse_verdict(&raw).ok()
            }
        };
        Ok(match verdict {
            Some(v) if !v.consistent => Some(v.reason),
            Some(_) => None,
            None => {
                self.session
                    .warn("formalization check verdict unreadable; treating as consistent");
                None
            }
        })
    }

    fn explore(&mut self, formal: &FormalizedTask, extra: Option<&str>) -> Result<(), PipelineError> {
        self.enter(Stage::Explore);
        let k = self.cfg().num_plans as usize;
        let mut description = formal.task_description();
        if let Some(extra) = extra {
            description.push_str("\n\n");
            description.push_str(extra);
        }
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, description)
            .with(Placeholder::NumPlans, k.to_string());
        let raw = self.session.ask(Stage::Explore, PromptStage::Explore, &ctx)?;
        let mut drafts = parse_algorithm_blocks(&raw, k).unwrap_or_default();
        if drafts.len() < k {
            let raw = self.session.reprompt(Stage::Explore, PromptStage::Explore, &ctx)?;
            let second = parse_algorithm_blocks(&raw, k).unwrap_or_default();
            if second.len() > drafts.len() {
                drafts = second;
            }
            if drafts.is_empty() {
                return Err(PipelineError::NoAlgorithmBlocks);
            }
            if drafts.len() < k {
                self.session
                    .warn(format!("parsed {} of {k} requested algorithm plans", drafts.len()));
            }
        }
        self.record.plans = drafts
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let complexity = if d.complexity.is_empty() {
                    extract_complexity(&d.pseudocode).unwrap_or_else(|| "unspecified".to_string())
                } else {
                    d.complexity
                };
                AlgorithmPlan {
                    plan_id: i as u32 + 1,
                    key_description: d.key_description,
                    complexity,
                    pseudocode: d.pseudocode,
                }
            })
            .collect();
        self.close(Stage::Explore, format!("{} plans", self.record.plans.len()));
        Ok(())
    }

    fn suggest(&mut self, algorithm_description: String, source_plan_ids: Vec<u32>) -> Result<(), PipelineError> {
        self.enter(Stage::Suggest);
        let ctx = PromptContext::new().with(Placeholder::AlgorithmDescription, algorithm_description);
        let raw = self.session.ask(Stage::Suggest, PromptStage::Suggest, &ctx)?;
        let mut items = parse_suggestions(&raw);
        if items.is_empty() {
            let raw = self.session.reprompt(Stage::Suggest, PromptStage::Suggest, &ctx)?;
            items = parse_suggestions(&raw);
        }
        if items.is_empty() {
            self.session.warn("no suggestions could be parsed; continuing without");
        } else if items.len() < 20 {
            self.session
                .warn(format!("only {} suggestions (20 requested)", items.len()));
        }
        self.record.suggestions = SuggestionSet {
            suggestions: items,
            source_plan_ids,
        };
        self.close(
            Stage::Suggest,
            format!("{} suggestions", self.record.suggestions.suggestions.len()),
        );
        Ok(())
    }

    fn suggest_from_plans(&mut self) -> Result<(), PipelineError> {
        let text = self
            .record
            .plans
            .iter()
            .map(AlgorithmPlan::render)
            .collect::<Vec<_>>()
            .join("\n\n");
        let ids = self.record.plans.iter().map(|p| p.plan_id).collect();
        self.suggest(text, ids)
    }

    fn suggest_from_code(&mut self) -> Result<(), PipelineError> {
        let text = self
            .record
            .candidates
            .iter()
            .map(|c| format!("Solution {}:\n{}", c.candidate_id, fenced(&c.code)))
            .collect::<Vec<_>>()
            .join("\n\n");
        let ids = self.record.candidates.iter().map(|c| c.plan_id).collect();
        self.suggest(text, ids)
    }

    fn extract_code(&self, raw: &str) -> Option<String> {
        parse_code_blocks(raw)
            .ok()?
            .into_iter()
            .find(|c| defines(c, &self.view.entry_point))
    }

    /// One generation call, re-prompted once when the reply has no code
    /// block defining the entry point.
    fn generate_one(&mut self, formal: &FormalizedTask, algorithm: &str) -> Result<Option<String>, PipelineError> {
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, formal.task_description())
            .with(Placeholder::AlgorithmDescription, algorithm)
            .with(Placeholder::EfficiencyOptimizationSuggestions, self.suggestions_text());
        let raw = self.session.ask(Stage::Generate, PromptStage::Generate, &ctx)?;
        if let Some(code) = self.extract_code(&raw) {
            return Ok(Some(code));
        }
        let raw = self.session.reprompt(Stage::Generate, PromptStage::Generate, &ctx)?;
        Ok(self.extract_code(&raw))
    }

    /// One candidate per plan; with `reference_code`, plan i is paired with
    /// reference code i (cycling) to optimize.
    fn generate_from_plans(
        &mut self,
        formal: &FormalizedTask,
        reference_code: Option<&[String]>,
    ) -> Result<(), PipelineError> {
        self.enter(Stage::Generate);
        let plans = self.record.plans.clone();
        let mut candidates = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            let mut algorithm = plan.render();
            if let Some(refs) = reference_code.filter(|r| !r.is_empty()) {
                algorithm.push_str("\nReference implementation to optimize:\n");
                algorithm.push_str(&fenced(&refs[i % refs.len()]));
            }
            match self.generate_one(formal, &algorithm)? {
                Some(code) => {
                    self.contexts.insert(plan.plan_id, plan.render());
                    candidates.push(CodeCandidate::new(plan.plan_id, plan.plan_id, code));
                }
                None => self.session.warn(format!(
                    "plan {} dropped: no code defining `{}`",
                    plan.plan_id, self.view.entry_point
                )),
            }
        }
        self.close(Stage::Generate, format!("{} candidates", candidates.len()));
        if candidates.is_empty() && reference_code.is_none() {
            return Err(PipelineError::NoCandidates(self.view.entry_point.clone()));
        }
        self.record.candidates = candidates;
        Ok(())
    }

    fn direct_generate(&mut self, formal: &FormalizedTask) -> Result<(), PipelineError> {
        self.enter(Stage::DirectGenerate);
        let k = self.cfg().num_plans as usize;
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, formal.task_description())
            .with(Placeholder::NumPlans, k.to_string());
        let ep = self.view.entry_point.clone();
        let parse = |raw: &str| -> Vec<String> {
            parse_code_blocks(raw)
                .unwrap_or_default()
                .into_iter()
                .filter(|c| defines(c, &ep))
                .take(k)
                .collect()
        };
        let raw = self
            .session
            .ask(Stage::DirectGenerate, PromptStage::DirectGenerate, &ctx)?;
        let mut codes = parse(&raw);
        if codes.is_empty() {
            let raw = self
                .session
                .reprompt(Stage::DirectGenerate, PromptStage::DirectGenerate, &ctx)?;
            codes = parse(&raw);
        }
        if codes.is_empty() {
            return Err(PipelineError::NoCandidates(ep));
        }
        if codes.len() < k {
            self.session
                .warn(format!("parsed {} of {k} requested direct solutions", codes.len()));
        }
        self.record.candidates = codes
            .into_iter()
            .enumerate()
            .map(|(i, code)| {
                let id = i as u32 + 1;
                self.contexts.insert(id, DIRECT_CONTEXT.to_string());
                CodeCandidate::new(id, id, code)
            })
            .collect();
        self.close(
            Stage::DirectGenerate,
            format!("{} candidates", self.record.candidates.len()),
        );
        Ok(())
    }

    /// Rewrites each directly generated candidate using the suggestions. A
    /// candidate whose rewrite fails keeps its original code.
    fn optimize_code(&mut self, formal: &FormalizedTask) -> Result<(), PipelineError> {
        self.enter(Stage::Generate);
        let mut candidates = std::mem::take(&mut self.record.candidates);
        let mut rewritten = 0;
        for c in &mut candidates {
            let algorithm = format!("Solution to optimize:\n{}", fenced(&c.code));
            match self.generate_one(formal, &algorithm)? {
                Some(code) => {
                    c.code = code;
                    rewritten += 1;
                }
                None => self.session.warn(format!(
                    "candidate {} kept unoptimized: no code defining `{}`",
                    c.candidate_id, self.view.entry_point
                )),
            }
        }
        self.record.candidates = candidates;
        self.close(Stage::Generate, format!("{rewritten} candidates optimized"));
        Ok(())
    }

    fn execute(&self, code: &str, tests: &[(TestId, String)]) -> Result<BTreeMap<TestId, TestStatus>, PipelineError> {
        if tests.is_empty() {
            return Ok(BTreeMap::new());
        }
        let req = ExecRequest::functional(code, tests.iter().map(|(_, a)| a.clone()).collect())
            .with_timeout(Duration::from_secs_f64(self.cfg().per_test_timeout));
        let out = self.p.sandbox.run_functional(&req)?;
        Ok(tests
            .iter()
            .zip(out.per_test)
            .map(|((id, _), o)| (*id, o.status))
            .collect())
    }

    fn tests_and_verify(&mut self, formal: &FormalizedTask) -> Result<BTreeSet<TestId>, PipelineError> {
        self.enter(Stage::SynthesizeTests);
        let n = self.cfg().num_tests as usize;
        let inputs = synthesize_inputs(&mut self.session, formal, n)?;
        let cases = complete_assertions(&mut self.session, formal, inputs)?;
        self.store = TestStore::new(cases);
        self.close(Stage::SynthesizeTests, format!("{} tests", self.store.ids().len()));

        self.enter(Stage::Verify);
        let tests: Vec<(TestId, String)> = self
            .store
            .cases()
            .iter()
            .map(|c| (c.test_id, c.assertion.clone()))
            .collect();
        let mut candidates = std::mem::take(&mut self.record.candidates);
        for c in &mut candidates {
            c.per_test_results = self.execute(&c.code, &tests)?;
        }
        let ids: Vec<TestId> = tests.iter().map(|(id, _)| *id).collect();
        let matrix = PassMatrix::from_candidates(&candidates, &ids);
        let outcome = verify(&mut self.session, &matrix, &mut self.store, formal)?;
        let checked: BTreeSet<TestId> = self.store.checked().iter().map(|c| c.test_id).collect();
        self.record.candidates = candidates.into_iter().map(|c| c.scored(&checked)).collect();
        self.record.pass_matrix = matrix;
        self.record.checked_test_ids = checked.iter().copied().collect();
        self.close(
            Stage::Verify,
            format!(
                "trusted {}, retained {}, discarded {}",
                outcome.trusted.len(),
                outcome.retained.len(),
                outcome.discarded.len()
            ),
        );
        Ok(checked)
    }

    fn checked_tests(&self, checked: &BTreeSet<TestId>) -> Vec<(TestId, String)> {
        self.store
            .cases()
            .iter()
            .filter(|c| checked.contains(&c.test_id))
            .map(|c| (c.test_id, c.assertion.clone()))
            .collect()
    }

    /// Up to `refine_iterations` rounds; each round gives every candidate
    /// failing a checked test one correction call and keeps the better of
    /// the two versions (ties keep the refined one).
    fn refine(&mut self, formal: &FormalizedTask, checked: &BTreeSet<TestId>) -> Result<(), PipelineError> {
        self.enter(Stage::Refine);
        let tests = self.checked_tests(checked);
        let suggestions = self.suggestions_text();
        let mut attempts = 0;
        for generation in 1..=self.cfg().refine_iterations {
            let mut candidates = std::mem::take(&mut self.record.candidates);
            for c in &mut candidates {
                let original = c.passes_on(checked);
                if original as usize >= tests.len() {
                    continue;
                }
                attempts += 1;
                let failing: Vec<&str> = tests
                    .iter()
                    .filter(|(id, _)| !c.per_test_results.get(id).is_some_and(|s| s.is_pass()))
                    .map(|(_, a)| a.as_str())
                    .collect();
                let ctx = PromptContext::new()
                    .with(Placeholder::TaskDescription, formal.task_description())
                    .with(
                        Placeholder::AlgorithmDescription,
                        self.contexts
                            .get(&c.candidate_id)
                            .cloned()
                            .unwrap_or_else(|| DIRECT_CONTEXT.to_string()),
                    )
                    .with(Placeholder::EfficiencyOptimizationSuggestions, suggestions.clone())
                    .with(Placeholder::Code, c.code.clone())
                    .with(Placeholder::TestCase, failing.join("\n"));
                let raw = self.session.ask(Stage::Refine, PromptStage::Refine, &ctx)?;
                let mut rec = RefinementRecord {
                    candidate_id: c.candidate_id,
                    generation,
                    original_pass_count: original,
                    refined_pass_count: None,
                    kept_refined: false,
                    refined_code: None,
                };
                if let Some(code) = self.extract_code(&raw) {
                    let results = self.execute(&code, &tests)?;
                    let refined = results.values().filter(|s| s.is_pass()).count() as u32;
                    rec.refined_pass_count = Some(refined);
                    rec.refined_code = Some(code.clone());
                    if refined >= original {
                        rec.kept_refined = true;
                        c.code = code;
                        c.per_test_results = results;
                        c.refinement_generation = generation;
                    }
                } else {
                    self.session.warn(format!(
                        "refinement of candidate {} produced no usable code; kept unchanged",
                        c.candidate_id
                    ));
                }
                c.pass_count = c.passes_on(checked);
                self.record.refinements.push(rec);
            }
            self.record.candidates = candidates;
        }
        self.close(Stage::Refine, format!("{attempts} refinement calls"));
        Ok(())
    }

    /// Asks the selection prompt to pick among `ids`; falls back to the
    /// lowest id when the reply names none of them.
    fn llm_choose(&mut self, ids: &[CandidateId]) -> Result<CandidateId, PipelineError> {
        let mut listing = String::from("{\n");
        let entries: Vec<String> = ids
            .iter()
            .filter_map(|id| self.record.candidates.iter().find(|c| c.candidate_id == *id))
            .map(|c| {
                format!(
                    "{}:{}",
                    serde_json::to_string(&c.candidate_id.to_string()).unwrap(),
                    serde_json::to_string(&c.code).unwrap()
                )
            })
            .collect();
        listing.push_str(&entries.join(",\n"));
        listing.push_str("\n}");
        let ctx = PromptContext::new().with(Placeholder::CorrectedCodeCandidates, listing);
        let raw = self.session.ask(Stage::Select, PromptStage::Select, &ctx)?;
        let lowest = *ids.iter().min().expect("non-empty");
        Ok(match parse_selection(&raw) {
            Ok(k) if ids.contains(&k) => k,
            _ => {
                self.session
                    .warn(format!("selection reply names no listed candidate; using {lowest}"));
                lowest
            }
        })
    }

    fn select(&mut self, checked: &BTreeSet<TestId>, llm_only: bool) -> Result<(), PipelineError> {
        self.enter(Stage::Select);
        if self.record.candidates.is_empty() {
            return Err(PipelineError::NoCandidates(self.view.entry_point.clone()));
        }
        // candidates that have not run on the checked set yet (optimized
        // ones in the deferred-optimization variant) are executed here
        let tests = self.checked_tests(checked);
        let mut candidates = std::mem::take(&mut self.record.candidates);
        for c in &mut candidates {
            if !tests.is_empty() && !tests.iter().all(|(id, _)| c.per_test_results.contains_key(id)) {
                c.per_test_results = self.execute(&c.code, &tests)?;
            }
            c.pass_count = c.passes_on(checked);
        }
        self.record.candidates = candidates;
        let all: Vec<CandidateId> = self.record.candidates.iter().map(|c| c.candidate_id).collect();
        let (id, method, flagged) = if llm_only {
            (self.llm_choose(&all)?, "llm", false)
        } else if checked.is_empty() {
            self.session
                .warn("checked test set is empty; selecting by prompt over all candidates");
            (self.llm_choose(&all)?, "llm_fallback", true)
        } else {
            let best = self.record.candidates.iter().map(|c| c.pass_count).max().unwrap();
            let tied: Vec<CandidateId> = self
                .record
                .candidates
                .iter()
                .filter(|c| c.pass_count == best)
                .map(|c| c.candidate_id)
                .collect();
            if tied.len() == 1 {
                (tied[0], "max_pass_count", false)
            } else if self.p.llm_tie_break {
                (self.llm_choose(&tied)?, "llm_tie_break", false)
            } else {
                (*tied.iter().min().unwrap(), "lowest_id", false)
            }
        };
        let code = self
            .record
            .candidates
            .iter()
            .find(|c| c.candidate_id == id)
            .map(|c| c.code.clone());
        self.record.selection = Some(SelectionRecord {
            final_candidate_id: id,
            method: method.to_string(),
            flagged_empty_checked: flagged,
        });
        self.record.final_candidate_id = Some(id);
        self.record.final_code = code;
        self.close(Stage::Select, format!("candidate {id} by {method}"));
        Ok(())
    }
}

/// Writes `runs/<run_id>/<task_id>.json` and a readable stage log next to
/// it. Returns the JSON path.
pub fn persist_run(runs_dir: &Path, record: &RunRecord) -> std::io::Result<PathBuf> {
    let dir = runs_dir.join(&record.run_id);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", record.task_id));
    std::fs::write(&path, serde_json::to_string_pretty(record)?)?;
    std::fs::write(dir.join(format!("{}.log", record.task_id)), stage_log(record))?;
    Ok(path)
}

/// One line per transcript: stage, step, latency, first response line.
pub fn stage_log(record: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "run {} task {} variant {}",
        record.run_id, record.task_id, record.config_snapshot.variant
    );
    for t in &record.stage_transcripts {
        let latency = t.latency.map_or_else(|| "local".to_string(), |l| format!("{l:.3}s"));
        let first = t.response.lines().next().unwrap_or("");
        let first: String = first.chars().take(80).collect();
        let _ = writeln!(out, "{:<17} {:<18} {:>8}  {}", t.stage.as_str(), t.step, latency, first);
    }
    for w in &record.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    if let Some(f) = &record.failure {
        let _ = writeln!(out, "failure: {f}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_plan_starts_with_formalize_and_ends_with_select() {
        for v in Variant::ALL {
            let plan = stage_plan(v);
            assert_eq!(plan.first(), Some(&Stage::Formalize));
            assert_eq!(plan.last(), Some(&Stage::Select));
        }
        assert!(!stage_plan(Variant::Variant3NoRefine).contains(&Stage::Verify));
        assert!(!stage_plan(Variant::Variant2NoCodeOpt).contains(&Stage::Suggest));
    }

    #[test]
    fn entry_point_definition_is_detected() {
        assert!(defines("import math\n\ndef prime_fib(n):\n    return n", "prime_fib"));
        assert!(!defines("def prime_fib2(n):\n    return n", "prime_fib"));
        assert!(!defines("    def prime_fib(n): pass", "prime_fib"));
        assert!(!defines("x = prime_fib(3)", "prime_fib"));
    }
}
