mod common;

use effigen_core::domain::{
    CodeCandidate, PassMatrix, RunRecord, Task, TestCase, TestCaseStatus, TestStatus,
};
use effigen_core::prompt::{
    extract_complexity, parse_algorithm_blocks, parse_assertions, parse_code_blocks, parse_formalization,
    parse_selection, parse_suggestions, parse_test_inputs, parse_verdict, ParsedBlocks,
};
use proptest::prelude::*;

/// Text biased towards the markers the parsers look for.
fn reply() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("```".to_string()),
        Just("```python\n".to_string()),
        Just("```python2\n".to_string()),
        Just("```algorithm1\n".to_string()),
        Just("{algorithm key description: ".to_string()),
        Just("{pseudo algorithm:\n".to_string()),
        Just("}\n".to_string()),
        Just("O(n log n)".to_string()),
        Just("input: ".to_string()),
        Just("assert f(1) == 2\n".to_string()),
        Just("{\"Yes\":\"NULL\"}".to_string()),
        Just("{\"No\":\"The reason is ".to_string()),
        Just("Edge Cases:".to_string()),
        Just("1. ".to_string()),
        Just("\n".to_string()),
        "[^`]{0,12}",
        "\\PC{0,6}",
    ];
    prop::collection::vec(piece, 0..24).prop_map(|v| v.concat())
}

fn line_text() -> impl Strategy<Value = String> {
    "[a-z0-9 _+*/()=,.-]{1,30}".prop_map(|s| s.trim().to_string()).prop_filter("non-empty", |s| !s.is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn parsers_are_total(raw in reply(), max in 0usize..8) {
        let _ = parse_code_blocks(&raw);
        let _ = parse_algorithm_blocks(&raw, max);
        let _ = parse_test_inputs(&raw);
        let _ = parse_assertions(&raw);
        let _ = parse_verdict(&raw);
        let _ = parse_selection(&raw);
        let _ = parse_suggestions(&raw);
        let _ = parse_formalization(&raw);
        let _ = extract_complexity(&raw);
        let _ = ParsedBlocks::from_raw(&raw);
    }

    #[test]
    fn numbered_code_blocks_come_back_in_label_order(bodies in prop::collection::vec(line_text(), 1..6)) {
        let raw: String = bodies
            .iter()
            .enumerate()
            .rev()
            .map(|(i, b)| format!("Solution {}:\n```python{}\n{b}\n```\n", i + 1, i + 1))
            .collect();
        prop_assert_eq!(parse_code_blocks(&raw).unwrap(), bodies);
    }

    #[test]
    fn algorithm_blocks_round_trip(
        // `..` is the template's placeholder and is skipped on purpose
        items in prop::collection::vec((line_text(), line_text().prop_filter("placeholder", |p| p != "..")), 1..6),
        max in 1usize..8,
    ) {
        let raw = format!(
            "```algorithm1\n{}\n```",
            items
                .iter()
                .map(|(d, p)| format!("{{algorithm key description: {d}}}\n{{pseudo algorithm:\n{p}\n}}"))
                .collect::<Vec<_>>()
                .join("\n\n")
        );
        let drafts = parse_algorithm_blocks(&raw, max).unwrap();
        prop_assert_eq!(drafts.len(), items.len().min(max));
        for (draft, (d, p)) in drafts.iter().zip(&items) {
            prop_assert_eq!(&draft.key_description, d);
            prop_assert_eq!(&draft.pseudocode, p);
        }
    }

    #[test]
    fn inputs_are_deduplicated_in_order(values in prop::collection::vec(line_text(), 0..12)) {
        let raw: String = values.iter().map(|v| format!("input: {v}\n")).collect();
        let mut expected: Vec<String> = Vec::new();
        for v in &values {
            if !expected.contains(v) {
                expected.push(v.clone());
            }
        }
        prop_assert_eq!(parse_test_inputs(&raw), expected);
    }

    #[test]
    fn test_cases_round_trip(id in 1u32..1000, input in ".{0,20}", assertion in ".{0,40}", note in proptest::option::of(".{0,20}")) {
        let case = TestCase {
            test_id: id,
            input_repr: input,
            assertion,
            status: TestCaseStatus::Retained,
            review_note: note,
        };
        let back: TestCase = serde_json::from_str(&serde_json::to_string(&case).unwrap()).unwrap();
        prop_assert_eq!(back, case);
    }

    #[test]
    fn candidates_and_matrices_round_trip(
        rows in prop::collection::vec(prop::collection::vec(0u8..4, 3), 1..4),
        code in ".{0,60}",
    ) {
        let status = |k: u8| [TestStatus::Pass, TestStatus::Fail, TestStatus::Error, TestStatus::Timeout][k as usize];
        let candidates: Vec<CodeCandidate> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut c = CodeCandidate::new(i as u32 + 1, i as u32, code.clone());
                c.per_test_results = row.iter().enumerate().map(|(t, k)| (t as u32 + 1, status(*k))).collect();
                c
            })
            .collect();
        let matrix = PassMatrix::from_candidates(&candidates, &[1, 2, 3]);
        prop_assert!(matrix.is_rectangular());
        let back: PassMatrix = serde_json::from_str(&serde_json::to_string(&matrix).unwrap()).unwrap();
        prop_assert_eq!(back, matrix);
        let back: Vec<CodeCandidate> = serde_json::from_str(&serde_json::to_string(&candidates).unwrap()).unwrap();
        prop_assert_eq!(back, candidates);
    }
}

#[test]
fn corpus_tasks_and_run_records_round_trip() {
    let corpus = common::corpus();
    for task in &corpus.tasks {
        let back: Task = serde_json::from_str(&serde_json::to_string(task).unwrap()).unwrap();
        assert_eq!(&back, task);
    }
    let record = common::replay_runs(effigen_core::domain::Variant::Variant3NoRefine, &["edit_distance"]).remove(0);
    let back: RunRecord = serde_json::from_str(&serde_json::to_string(&record).unwrap()).unwrap();
    assert_eq!(back, record);
}
