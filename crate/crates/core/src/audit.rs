//! Post-hoc checks over finished run records: selection optimality, the
//! refinement max-rule, and the hidden-test firewall.

use std::collections::BTreeSet;

use crate::domain::{RunRecord, Task, TestId};

/// The final candidate must have the highest pass count on the checked set.
/// Runs whose selection never looked at pass counts (`llm`, `llm_fallback`)
/// are vacuously fine.
pub fn selection_is_optimal(record: &RunRecord) -> Result<(), String> {
    let Some(selection) = &record.selection else {
        return Ok(());
    };
    if matches!(selection.method.as_str(), "llm" | "llm_fallback") {
        return Ok(());
    }
    let checked: BTreeSet<TestId> = record.checked_test_ids.iter().copied().collect();
    let chosen = record
        .candidates
        .iter()
        .find(|c| c.candidate_id == selection.final_candidate_id)
        .ok_or_else(|| format!("{}: final candidate {} is not listed", record.task_id, selection.final_candidate_id))?;
    let best = chosen.passes_on(&checked);
    for c in &record.candidates {
        let n = c.passes_on(&checked);
        if n > best {
            return Err(format!(
                "{}: candidate {} passes {n} checked tests, the chosen {} only {best}",
                record.task_id, c.candidate_id, chosen.candidate_id
            ));
        }
    }
    Ok(())
}

/// A refinement is kept exactly when it passes at least as many checked
/// tests as the code it replaces.
pub fn refinements_respect_max_rule(record: &RunRecord) -> Result<(), String> {
    for r in &record.refinements {
        let Some(refined) = r.refined_pass_count else {
            if r.kept_refined {
                return Err(format!("{}: candidate {} kept a refinement with no code", record.task_id, r.candidate_id));
            }
            continue;
        };
        if r.kept_refined != (refined >= r.original_pass_count) {
            return Err(format!(
                "{}: candidate {} generation {}: refined {refined} vs original {}, kept = {}",
                record.task_id, r.candidate_id, r.generation, r.original_pass_count, r.kept_refined
            ));
        }
    }
    Ok(())
}

/// Hidden-test assertions found verbatim in any prompt of `record`.
pub fn firewall_leaks(record: &RunRecord, task: &Task) -> Vec<String> {
    let mut leaks = Vec::new();
    for t in &record.stage_transcripts {
        let prompts = [t.system_prompt.as_deref(), t.user_prompt.as_deref()];
        for text in prompts.into_iter().flatten() {
            for hidden in &task.hidden_tests {
                if text.contains(hidden.trim()) {
                    leaks.push(format!("{} / {}: {hidden}", record.task_id, t.step));
                }
            }
        }
    }
    leaks
}
