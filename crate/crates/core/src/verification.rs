//! Bidirectional checking of synthetic tests.
//!
//! Forward: a test every candidate passes is trusted. Reverse: every other
//! test is judged on its own against the formalized task; a "yes" retains
//! it, a "no" (or two unreadable verdicts) discards it. Trusted and retained
//! tests form the checked set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FormalizedTask, PassMatrix, Stage, TestCase, TestCaseStatus, TestId};
use crate::prompt::{parse_verdict, Placeholder, PromptContext, PromptStage};
use crate::session::{Session, SessionError};
use crate::testgen::{StoreError, TestStore};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("pass matrix has no candidates or no tests")]
    EmptyMatrix,
    #[error("pass matrix is not rectangular")]
    NotRectangular,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub test_id: TestId,
    pub assertion: String,
    /// `Some(true)` yes, `Some(false)` no, `None` unparseable twice.
    pub verdict: Option<bool>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub trusted: BTreeSet<TestId>,
    pub retained: BTreeSet<TestId>,
    pub discarded: BTreeSet<TestId>,
    pub review_transcripts: Vec<ReviewRecord>,
}

impl VerificationOutcome {
    /// Pairwise disjoint, and the union equals `all`.
    pub fn is_partition_of(&self, all: &BTreeSet<TestId>) -> bool {
        let disjoint = self.trusted.is_disjoint(&self.retained)
            && self.trusted.is_disjoint(&self.discarded)
            && self.retained.is_disjoint(&self.discarded);
        let union: BTreeSet<TestId> = self
            .trusted
            .iter()
            .chain(&self.retained)
            .chain(&self.discarded)
            .copied()
            .collect();
        disjoint && &union == all
    }
}

/// Splits the tests into (trusted, suspect). Any non-pass cell makes a test
/// suspect.
pub fn forward_verify(m: &PassMatrix) -> Result<(BTreeSet<TestId>, BTreeSet<TestId>), VerifyError> {
    if m.candidate_ids.is_empty() || m.test_ids.is_empty() {
        return Err(VerifyError::EmptyMatrix);
    }
    if !m.is_rectangular() {
        return Err(VerifyError::NotRectangular);
    }
    let mut trusted = BTreeSet::new();
    let mut suspect = BTreeSet::new();
    for (col, &test_id) in m.test_ids.iter().enumerate() {
        if m.grid.iter().all(|row| row[col].is_pass()) {
            trusted.insert(test_id);
        } else {
            suspect.insert(test_id);
        }
    }
    Ok((trusted, suspect))
}

/// Reviews each suspect in `test_id` order with one model call; an
/// unreadable verdict is re-requested once, then counts as a discard.
pub fn reverse_review(
    session: &mut Session<'_>,
    suspects: &[TestCase],
    formal: &FormalizedTask,
) -> Result<(Vec<ReviewRecord>, Vec<ReviewRecord>), VerifyError> {
    let mut ordered: Vec<&TestCase> = suspects.iter().collect();
    ordered.sort_by_key(|t| t.test_id);
    let mut retained = Vec::new();
    let mut discarded = Vec::new();
    for test in ordered {
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, formal.task_description())
            .with(Placeholder::TestCase, test.assertion.clone());
        let raw = session.ask(Stage::Verify, PromptStage::ReverseReview, &ctx)?;
        let verdict = match parse_verdict(&raw) {
            Ok(v) => Some(v),
            Err(_) => {
                let raw = session.reprompt(Stage::Verify, PromptStage::ReverseReview, &ctx)?;
                parse_verdict(&raw).ok()
            }
        };
        let record = ReviewRecord {
            test_id: test.test_id,
            assertion: test.assertion.clone(),
            verdict: verdict.as_ref().map(|v| v.consistent),
            reason: verdict
                .map(|v| v.reason)
                .unwrap_or_else(|| "unparseable verdict".to_string()),
        };
        if record.verdict == Some(true) {
            retained.push(record);
        } else {
            discarded.push(record);
        }
    }
    Ok((retained, discarded))
}

/// Trusted plus retained.
pub fn checked_set(outcome: &VerificationOutcome) -> BTreeSet<TestId> {
    outcome.trusted.union(&outcome.retained).copied().collect()
}

/// Runs both directions and records every decision in `store`.
pub fn verify(
    session: &mut Session<'_>,
    matrix: &PassMatrix,
    store: &mut TestStore,
    formal: &FormalizedTask,
) -> Result<VerificationOutcome, VerifyError> {
    let (trusted, suspect) = forward_verify(matrix)?;
    session.note(
        Stage::Verify,
        "forward_verify",
        format!(
            "trusted: {:?}; suspect: {:?}",
            trusted.iter().collect::<Vec<_>>(),
            suspect.iter().collect::<Vec<_>>()
        ),
    );
    for &id in &trusted {
        store.record_status(id, TestCaseStatus::Trusted, None)?;
    }
    let suspects: Vec<TestCase> = suspect
        .iter()
        .filter_map(|id| store.get(*id).cloned())
        .collect();
    let (kept, dropped) = reverse_review(session, &suspects, formal)?;
    let mut outcome = VerificationOutcome {
        trusted,
        ..Default::default()
    };
    for r in &kept {
        store.record_status(r.test_id, TestCaseStatus::Retained, Some(r.reason.clone()).filter(|s| !s.is_empty()))?;
        outcome.retained.insert(r.test_id);
    }
    for r in &dropped {
        store.record_status(r.test_id, TestCaseStatus::Discarded, Some(r.reason.clone()))?;
        outcome.discarded.insert(r.test_id);
    }
    outcome.review_transcripts = kept.into_iter().chain(dropped).collect();
    outcome.review_transcripts.sort_by_key(|r| r.test_id);
    Ok(outcome)
}
