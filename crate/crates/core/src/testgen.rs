//! Synthetic test cases: input synthesis, assertion completion, and the
//! status store that tracks each case through verification.

use once_cell::sync::Lazy;
use regex::Regex;
use thiserror::Error;

use crate::domain::{FormalizedTask, Stage, TestCase, TestCaseStatus, TestHistoryEntry, TestId};
use crate::prompt::{parse_assertions, parse_test_inputs, Placeholder, PromptContext, PromptStage};
use crate::session::{Session, SessionError};

#[derive(Debug, Error)]
pub enum TestGenError {
    #[error("no test inputs could be synthesized")]
    NoInputsSynthesized,
    #[error("every assertion completion failed")]
    AllCompletionsFailed,
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("illegal status transition for test {test_id}: {from:?} -> {to:?}")]
    IllegalTransition {
        test_id: TestId,
        from: TestCaseStatus,
        to: TestCaseStatus,
    },
    #[error("unknown test id {0}")]
    UnknownTest(TestId),
}

/// Asks for up to `n` inputs; re-prompts once when fewer than `n` parse and
/// merges both replies. Test ids are assigned 1.. in reply order.
pub fn synthesize_inputs(
    session: &mut Session<'_>,
    formal: &FormalizedTask,
    n: usize,
) -> Result<Vec<TestCase>, TestGenError> {
    let n = n.max(1);
    let ctx = PromptContext::new().with(Placeholder::TaskDescription, formal.task_description());
    let raw = session.ask(Stage::SynthesizeTests, PromptStage::SynthesizeInputs, &ctx)?;
    let mut inputs = parse_test_inputs(&raw);
    if inputs.len() < n {
        let raw = session.reprompt(Stage::SynthesizeTests, PromptStage::SynthesizeInputs, &ctx)?;
        for input in parse_test_inputs(&raw) {
            if !inputs.contains(&input) {
                inputs.push(input);
            }
        }
        if inputs.is_empty() {
            return Err(TestGenError::NoInputsSynthesized);
        }
        if inputs.len() < n {
            session.warn(format!("synthesized {} of {n} requested test inputs", inputs.len()));
        }
    }
    inputs.truncate(n);
    Ok(inputs
        .into_iter()
        .enumerate()
        .map(|(i, input)| TestCase::synthesized(i as TestId + 1, input))
        .collect())
}

/// True when `assertion` calls `entry_point` as a function.
pub fn invokes(assertion: &str, entry_point: &str) -> bool {
    static CACHE: Lazy<std::sync::Mutex<std::collections::HashMap<String, Regex>>> =
        Lazy::new(Default::default);
    let mut cache = CACHE.lock().unwrap();
    let re = cache.entry(entry_point.to_string()).or_insert_with(|| {
        Regex::new(&format!(r"(^|[^A-Za-z0-9_.]){}\s*\(", regex::escape(entry_point))).unwrap()
    });
    re.is_match(assertion)
}

/// Completes each input into a single-line assertion on the entry point.
/// Cases whose reply has no usable assertion are dropped with a warning.
pub fn complete_assertions(
    session: &mut Session<'_>,
    formal: &FormalizedTask,
    cases: Vec<TestCase>,
) -> Result<Vec<TestCase>, TestGenError> {
    let mut out = Vec::with_capacity(cases.len());
    for mut case in cases {
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, formal.task_description())
            .with(Placeholder::InputCase, case.input_repr.clone());
        let raw = session.ask(Stage::SynthesizeTests, PromptStage::CompleteTests, &ctx)?;
        let mut lines = parse_assertions(&raw);
        if lines.is_empty() {
            let raw = session.reprompt(Stage::SynthesizeTests, PromptStage::CompleteTests, &ctx)?;
            lines = parse_assertions(&raw);
        }
        match lines.into_iter().find(|l| invokes(l, &formal.entry_point)) {
            Some(line) => {
                case.assertion = line;
                out.push(case);
            }
            None => session.warn(format!(
                "test {} dropped: completion for input `{}` has no assertion on `{}`",
                case.test_id, case.input_repr, formal.entry_point
            )),
        }
    }
    if out.is_empty() {
        return Err(TestGenError::AllCompletionsFailed);
    }
    Ok(out)
}

/// Ordered test cases plus every status change applied to them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TestStore {
    cases: Vec<TestCase>,
    history: Vec<TestHistoryEntry>,
}

impl TestStore {
    pub fn new(cases: Vec<TestCase>) -> Self {
        let history = cases
            .iter()
            .map(|c| TestHistoryEntry {
                test_id: c.test_id,
                status: c.status,
                note: None,
            })
            .collect();
        Self { cases, history }
    }

    /// Moves a test along `synthesized -> {trusted | retained | discarded}`.
    /// Any other transition is rejected.
    pub fn record_status(
        &mut self,
        test_id: TestId,
        status: TestCaseStatus,
        note: Option<String>,
    ) -> Result<(), StoreError> {
        let case = self
            .cases
            .iter_mut()
            .find(|c| c.test_id == test_id)
            .ok_or(StoreError::UnknownTest(test_id))?;
        if case.status != TestCaseStatus::Synthesized || status == TestCaseStatus::Synthesized {
            return Err(StoreError::IllegalTransition {
                test_id,
                from: case.status,
                to: status,
            });
        }
        case.status = status;
        if note.is_some() {
            case.review_note = note.clone();
        }
        self.history.push(TestHistoryEntry {
            test_id,
            status,
            note,
        });
        Ok(())
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn history(&self) -> &[TestHistoryEntry] {
        &self.history
    }

    pub fn get(&self, test_id: TestId) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.test_id == test_id)
    }

    pub fn ids(&self) -> Vec<TestId> {
        self.cases.iter().map(|c| c.test_id).collect()
    }

    /// Trusted and retained tests, in store order.
    pub fn checked(&self) -> Vec<&TestCase> {
        self.cases.iter().filter(|c| c.status.is_checked()).collect()
    }

    pub fn discarded(&self) -> Vec<&TestCase> {
        self.cases
            .iter()
            .filter(|c| c.status == TestCaseStatus::Discarded)
            .collect()
    }

    pub fn into_parts(self) -> (Vec<TestCase>, Vec<TestHistoryEntry>) {
        (self.cases, self.history)
    }
}
