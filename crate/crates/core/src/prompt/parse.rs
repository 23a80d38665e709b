//! Parsers for the structured parts of model replies.
//!
//! All parsers are total: arbitrary input yields either a value or one of the
//! declared [`ParseError`]s, never a panic. The accepted grammars are written
//! out in `grammar/` next to this crate.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no code block found")]
    NoCodeBlockFound,
    #[error("no algorithm blocks found")]
    NoAlgorithmBlocks,
    #[error("unparseable verdict")]
    UnparseableVerdict,
    #[error("no selection key found")]
    NoSelectionKey,
}

/// Everything the parsers can pull out of one reply.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedBlocks {
    pub code_blocks: Vec<String>,
    pub algorithm_blocks: Vec<(String, String)>,
    pub input_lines: Vec<String>,
    pub assertion_lines: Vec<String>,
    pub verdict: Option<(bool, String)>,
}

impl ParsedBlocks {
    pub fn from_raw(raw: &str) -> Self {
        Self {
            code_blocks: parse_code_blocks(raw).unwrap_or_default(),
            algorithm_blocks: parse_algorithm_blocks(raw, usize::MAX)
                .unwrap_or_default()
                .into_iter()
                .map(|d| (d.key_description, d.pseudocode))
                .collect(),
            input_lines: parse_test_inputs(raw),
            assertion_lines: parse_assertions(raw),
            verdict: parse_verdict(raw).ok().map(|v| (v.consistent, v.reason)),
        }
    }
}

static FENCE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?m)^[ \t]*```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\r?$").unwrap());

fn code_label(label: &str) -> Option<Option<u32>> {
    let lower = label.to_ascii_lowercase();
    if lower == "py" || lower == "python" {
        return Some(None);
    }
    lower
        .strip_prefix("python")
        .and_then(|n| n.parse::<u32>().ok())
        .map(Some)
}

/// Contents of every fenced block labelled `python`, `py` or `pythonN`.
/// When every block carries a number, blocks are returned in label order.
pub fn parse_code_blocks(raw: &str) -> Result<Vec<String>, ParseError> {
    let fences: Vec<(usize, usize, String)> = FENCE
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).unwrap();
            (m.start(), m.end(), c[1].to_string())
        })
        .collect();
    let mut blocks: Vec<(Option<u32>, String)> = Vec::new();
    let mut i = 0;
    while i < fences.len() {
        let (_, open_end, label) = &fences[i];
        if label.is_empty() {
            // A bare fence here is either a stray closer or an unlabeled
            // block; neither is code.
            i += if i + 1 < fences.len() && fences[i + 1].2.is_empty() { 2 } else { 1 };
            continue;
        }
        // find the closing bare fence
        let close = fences[i + 1..].iter().position(|f| f.2.is_empty());
        let Some(rel) = close else { break };
        let close_idx = i + 1 + rel;
        if let Some(number) = code_label(label) {
            let body = &raw[*open_end..fences[close_idx].0];
            let body = body.trim_start_matches(['\r', '\n']).trim_end();
            if !body.trim().is_empty() {
                blocks.push((number, body.to_string()));
            }
        }
        i = close_idx + 1;
    }
    if blocks.is_empty() {
        return Err(ParseError::NoCodeBlockFound);
    }
    if blocks.iter().all(|(n, _)| n.is_some()) {
        blocks.sort_by_key(|(n, _)| *n);
    }
    Ok(blocks.into_iter().map(|(_, b)| b).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlgorithmDraft {
    pub key_description: String,
    pub complexity: String,
    pub pseudocode: String,
}

static ALGO_MARKER: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)\{?\s*(algorithm key description|pseudo algorithm)\s*:").unwrap()
});
static FENCE_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?m)^[ \t]*```[^\n]*$").unwrap());

fn clean_segment(s: &str) -> String {
    let s = FENCE_LINE.replace_all(s, "");
    let mut s = s.trim();
    s = s.strip_suffix('{').unwrap_or(s).trim_end();
    s = s.strip_suffix('}').unwrap_or(s).trim();
    s.to_string()
}

/// Extracts the first big-O expression, matching nested parentheses.
pub fn extract_complexity(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut search = 0;
    while let Some(pos) = text[search..].find("O(") {
        let start = search + pos;
        let boundary_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let mut depth = 0usize;
        let mut end = None;
        for (off, ch) in text[start + 1..].char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + 1 + off + 1);
                        break;
                    }
                }
                '\n' => break,
                _ => {}
            }
        }
        if let (true, Some(end)) = (boundary_ok, end) {
            return Some(text[start..end].to_string());
        }
        search = start + 2;
    }
    None
}

/// Pairs each `algorithm key description:` with the `pseudo algorithm:`
/// that follows it. Descriptions without a non-empty pseudocode section are
/// skipped (lenient salvage). At most `max` drafts are returned.
pub fn parse_algorithm_blocks(raw: &str, max: usize) -> Result<Vec<AlgorithmDraft>, ParseError> {
    let markers: Vec<(bool, usize, usize)> = ALGO_MARKER
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).unwrap();
            let is_desc = c[1].to_ascii_lowercase().starts_with("algorithm");
            (is_desc, m.start(), m.end())
        })
        .collect();
    let mut drafts = Vec::new();
    for (i, &(is_desc, _, end)) in markers.iter().enumerate() {
        if !is_desc {
            continue;
        }
        let Some(&(next_is_desc, next_start, next_end)) = markers.get(i + 1) else {
            continue;
        };
        if next_is_desc {
            continue;
        }
        let pseudo_stop = markers.get(i + 2).map_or(raw.len(), |m| m.1);
        let description = clean_segment(&raw[end..next_start]);
        let pseudocode = clean_segment(&raw[next_end..pseudo_stop]);
        if description.is_empty() || pseudocode.is_empty() || pseudocode == ".." {
            continue;
        }
        let complexity = extract_complexity(&description).unwrap_or_default();
        drafts.push(AlgorithmDraft {
            key_description: description,
            complexity,
            pseudocode,
        });
        if drafts.len() >= max {
            break;
        }
    }
    if drafts.is_empty() {
        return Err(ParseError::NoAlgorithmBlocks);
    }
    Ok(drafts)
}

/// Lines starting with the literal `input:` prefix, prefix stripped, first
/// occurrence kept.
pub fn parse_test_inputs(raw: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in raw.lines() {
        let Some(rest) = line.trim_start().strip_prefix("input:") else {
            continue;
        };
        let value = rest.trim().to_string();
        if !value.is_empty() && !out.contains(&value) {
            out.push(value);
        }
    }
    out
}

fn brackets_balanced(line: &str) -> bool {
    let mut stack = Vec::new();
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for ch in line.chars() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == q {
                quote = None;
            }
            continue;
        }
        match ch {
            '\'' | '"' => quote = Some(ch),
            '(' | '[' | '{' => stack.push(ch),
            ')' | ']' | '}' => {
                let open = match ch {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if stack.pop() != Some(open) {
                    return false;
                }
            }
            '#' => break,
            _ => {}
        }
    }
    stack.is_empty() && quote.is_none()
}

/// Physical lines that begin with `assert` and form a complete statement on
/// their own; continuation lines and open brackets are rejected.
pub fn parse_assertions(raw: &str) -> Vec<String> {
    raw.lines()
        .map(str::trim)
        .filter(|l| l.starts_with("assert ") || l.starts_with("assert("))
        .filter(|l| !l.ends_with('\\') && brackets_balanced(l))
        .map(|l| l.trim_end_matches('`').trim().to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub consistent: bool,
    pub reason: String,
}

static VERDICT_SHAPE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"(?is)\{\s*["“”']?\s*(yes|no)\s*["“”']?\s*:\s*["“”']?(.*?)["“”']?\s*\}"#).unwrap()
});
static LEADING_TOKEN: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"^[\s"“”'*`{\[(]*(yes|no)\b"#).unwrap());

/// Reads `{"Yes": ...}` / `{"No": "The reason is ..."}`, falling back to a
/// leading Yes/No token.
pub fn parse_verdict(raw: &str) -> Result<Verdict, ParseError> {
    if let Some(c) = VERDICT_SHAPE.captures(raw) {
        let consistent = c[1].eq_ignore_ascii_case("yes");
        let mut reason = c[2].trim().to_string();
        if consistent && reason.eq_ignore_ascii_case("null") {
            reason.clear();
        }
        if let Some(rest) = strip_prefix_ci(&reason, "the reason is") {
            reason = rest.trim_start_matches([':', ',', ' ']).trim().to_string();
        }
        return Ok(Verdict { consistent, reason });
    }
    let lower = raw.to_ascii_lowercase();
    if let Some(c) = LEADING_TOKEN.captures(&lower) {
        let consistent = &c[1] == "yes";
        let token_end = c.get(0).unwrap().end();
        let reason = raw
            .get(token_end..)
            .unwrap_or("")
            .trim_start_matches(|ch: char| !ch.is_alphanumeric())
            .trim()
            .to_string();
        let reason = if consistent { String::new() } else { reason };
        return Ok(Verdict { consistent, reason });
    }
    Err(ParseError::UnparseableVerdict)
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

static TEXT_FENCE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?s)```[ \t]*text[ \t]*\r?\n\s*\{?\s*(\d+)\s*\}?\s*```").unwrap());
static FIRST_INT: Lazy<Regex> = Lazy::new(|| Regex::new(r"\b(\d+)\b").unwrap());

/// Key chosen by the selection prompt: the content of a ```text fence, else
/// the first integer in the reply.
pub fn parse_selection(raw: &str) -> Result<u32, ParseError> {
    let caps = TEXT_FENCE.captures(raw).or_else(|| FIRST_INT.captures(raw));
    caps.and_then(|c| c[1].parse().ok())
        .ok_or(ParseError::NoSelectionKey)
}

static NUMBERED: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*\d+\s*[.)]\s+(.+)$").unwrap());
static BULLET: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*[-*•]\s+(.+)$").unwrap());

/// Numbered list items (`1. ...`), or bullet items when no numbered item is
/// present.
pub fn parse_suggestions(raw: &str) -> Vec<String> {
    let grab = |re: &Regex| -> Vec<String> {
        raw.lines()
            .filter_map(|l| re.captures(l).map(|c| c[1].trim().to_string()))
            .filter(|s| !s.is_empty())
            .collect()
    };
    let numbered = grab(&NUMBERED);
    if numbered.is_empty() {
        grab(&BULLET)
    } else {
        numbered
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FormalizationDraft {
    pub entry_point: Option<String>,
    pub io_conditions: String,
    pub edge_cases: String,
    pub parameter_types: String,
    pub expected_behavior: String,
}

impl FormalizationDraft {
    pub fn is_complete(&self) -> bool {
        !self.io_conditions.is_empty()
            && !self.edge_cases.is_empty()
            && !self.parameter_types.is_empty()
            && !self.expected_behavior.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    EntryPoint,
    Io,
    EdgeAndTypes,
    Edge,
    Types,
    Behavior,
}

const HEADINGS: [(&str, Section); 7] = [
    ("entry point function name", Section::EntryPoint),
    ("entry point", Section::EntryPoint),
    ("input/output conditions", Section::Io),
    ("edge cases and parameter types", Section::EdgeAndTypes),
    ("edge cases", Section::Edge),
    ("parameter types", Section::Types),
    ("expected behavior", Section::Behavior),
];

static IDENT: Lazy<Regex> = Lazy::new(|| Regex::new(r"[A-Za-z_][A-Za-z0-9_]*").unwrap());

fn heading_of(line: &str) -> Option<(Section, String)> {
    let stripped = line
        .trim_start()
        .trim_start_matches(|c: char| c == '#' || c == '*' || c == '-' || c == ' ' || c.is_ascii_digit() || c == '.');
    let lower = stripped.to_ascii_lowercase();
    for (name, section) in HEADINGS {
        if lower.starts_with(name) {
            let rest = &stripped[name.len()..];
            let rest = rest
                .trim_start_matches(|c: char| c == '*' || c == ':' || c == ' ' || c == ')')
                .trim_start_matches(|c: char| c == '(')
                .to_string();
            // "Edge Cases and Parameter Types (Int, String, etc.)" style suffix
            let rest = if rest.to_ascii_lowercase().starts_with("int, string") {
                rest.split_once(':').map(|(_, r)| r.trim().to_string()).unwrap_or_default()
            } else {
                rest
            };
            return Some((section, rest.trim().to_string()));
        }
    }
    None
}

/// Splits a formalization reply into its four dimensions by heading.
pub fn parse_formalization(raw: &str) -> FormalizationDraft {
    let mut sections: Vec<(Section, Vec<String>)> = Vec::new();
    for line in raw.lines() {
        if let Some((section, rest)) = heading_of(line) {
            sections.push((section, if rest.is_empty() { vec![] } else { vec![rest] }));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line.to_string());
        }
    }
    let mut draft = FormalizationDraft::default();
    let join = |lines: &[String]| lines.join("\n").trim().to_string();
    let mut combined = String::new();
    for (section, body) in &sections {
        let text = join(body);
        if text.is_empty() {
            continue;
        }
        match section {
            Section::EntryPoint => {
                let cleaned = text.replace(['`', '*'], "");
                draft.entry_point = IDENT
                    .find_iter(&cleaned)
                    .map(|m| m.as_str().to_string())
                    .find(|w| w.contains('_') || !["The", "the", "Function", "function", "name", "is"].contains(&w.as_str()));
            }
            Section::Io => draft.io_conditions = text,
            Section::EdgeAndTypes => combined = text,
            Section::Edge => draft.edge_cases = text,
            Section::Types => draft.parameter_types = text,
            Section::Behavior => draft.expected_behavior = text,
        }
    }
    if !combined.is_empty() {
        if draft.edge_cases.is_empty() {
            draft.edge_cases = combined.clone();
        }
        if draft.parameter_types.is_empty() {
            draft.parameter_types = combined;
        }
    }
    draft
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_python_block() {
        let raw = "Here:\n```python\ndef f(): return 1\n```\nDone.";
        assert_eq!(parse_code_blocks(raw).unwrap(), vec!["def f(): return 1"]);
    }

    #[test]
    fn numbered_blocks_in_label_order() {
        let mut raw = String::new();
        for n in [3, 1, 5, 2, 4] {
            raw.push_str(&format!("```python{n}\ndef f(): return {n}\n```\n"));
        }
        let blocks = parse_code_blocks(&raw).unwrap();
        assert_eq!(blocks.len(), 5);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b, &format!("def f(): return {}", i + 1));
        }
    }

    #[test]
    fn prose_has_no_code() {
        assert_eq!(parse_code_blocks("just words"), Err(ParseError::NoCodeBlockFound));
        assert_eq!(
            parse_code_blocks("```algorithm1\nstep\n```"),
            Err(ParseError::NoCodeBlockFound)
        );
    }

    #[test]
    fn unclosed_fence_yields_nothing() {
        assert_eq!(parse_code_blocks("```python\ndef f(): pass"), Err(ParseError::NoCodeBlockFound));
    }

    fn algo(desc: &str, pseudo: &str) -> String {
        format!("{{algorithm key description: {desc}}}\n{{pseudo algorithm: {pseudo}}}\n\n")
    }

    #[test]
    fn five_well_formed_algorithm_blocks() {
        let mut raw = String::from("```algorithm1\n");
        for i in 1..=5 {
            raw.push_str(&algo(
                &format!("this algorithm using method {i}, O(n log n) time"),
                &format!("for x in xs:\n    step {i}"),
            ));
        }
        raw.push_str("```");
        let drafts = parse_algorithm_blocks(&raw, 5).unwrap();
        assert_eq!(drafts.len(), 5);
        assert_eq!(drafts[2].complexity, "O(n log n)");
        assert_eq!(drafts[4].pseudocode, "for x in xs:\n    step 5");
        assert_eq!(parse_algorithm_blocks(&raw, 3).unwrap().len(), 3);
    }

    #[test]
    fn malformed_algorithm_blocks_are_salvaged() {
        // block 2: empty pseudocode, block 3: no pseudocode section,
        // block 4: template placeholder left in place
        let raw = [
            algo("uses sieve", "sieve steps"),
            algo("uses recursion", ""),
            "{algorithm key description: lonely description}\n".to_string(),
            algo("uses nothing", ".."),
            algo("uses heap, O(k log n)", "heap steps"),
        ]
        .concat();
        let drafts = parse_algorithm_blocks(&raw, 5).unwrap();
        assert_eq!(drafts.len(), 2);
        assert_eq!(drafts[0].key_description, "uses sieve");
        assert_eq!(drafts[1].complexity, "O(k log n)");
    }

    #[test]
    fn empty_exploration_has_no_blocks() {
        assert_eq!(parse_algorithm_blocks("", 5), Err(ParseError::NoAlgorithmBlocks));
    }

    #[test]
    fn complexity_handles_nesting() {
        assert_eq!(
            extract_complexity("runs in O(n * sqrt(F(n))) overall").as_deref(),
            Some("O(n * sqrt(F(n)))")
        );
        assert_eq!(extract_complexity("NO(x)"), None);
        assert_eq!(extract_complexity("O(n"), None);
    }

    #[test]
    fn inputs_from_appendix_example() {
        let raw = "input: [1]\ninput: [-1, -2, -3, 4, 5]\ninput: [4, 4, 4]\n";
        assert_eq!(
            parse_test_inputs(raw),
            vec!["[1]", "[-1, -2, -3, 4, 5]", "[4, 4, 4]"]
        );
        assert_eq!(parse_test_inputs("input: [1]\ninput: [1]"), vec!["[1]"]);
        assert!(parse_test_inputs("Input [1]\n1. [2]").is_empty());
    }

    #[test]
    fn assertions_are_single_lines() {
        let raw = "Test Case:\nassert find_the_median([1, 3, 2, 5]) == 2.5\n";
        assert_eq!(parse_assertions(raw), vec!["assert find_the_median([1, 3, 2, 5]) == 2.5"]);
        assert_eq!(parse_assertions("assert prime_fib(3) == 5"), vec!["assert prime_fib(3) == 5"]);
        assert!(parse_assertions("assert f(1) == \\\n    2").is_empty());
        assert!(parse_assertions("assert f([1,\n 2]) == 3").is_empty());
        assert_eq!(parse_assertions("assert f(')') == 1"), vec!["assert f(')') == 1"]);
    }

    #[test]
    fn verdict_shapes() {
        let v = parse_verdict(r#"{"Yes":"NULL"}"#).unwrap();
        assert!(v.consistent);
        assert_eq!(v.reason, "");
        let v = parse_verdict(r#"{"No":"The reason is missing edge case"}"#).unwrap();
        assert!(!v.consistent);
        assert_eq!(v.reason, "missing edge case");
        let v = parse_verdict("No. The output for [] is wrong").unwrap();
        assert!(!v.consistent);
        assert_eq!(v.reason, "The output for [] is wrong");
        assert!(parse_verdict("YES").unwrap().consistent);
        assert_eq!(parse_verdict("maybe"), Err(ParseError::UnparseableVerdict));
        assert_eq!(parse_verdict("yesterday"), Err(ParseError::UnparseableVerdict));
    }

    #[test]
    fn selection_key() {
        assert_eq!(parse_selection("OUTPUT:\n```text\n3\n```"), Ok(3));
        assert_eq!(parse_selection("```text\n{2}\n```"), Ok(2));
        assert_eq!(parse_selection("I pick 4."), Ok(4));
        assert_eq!(parse_selection("none"), Err(ParseError::NoSelectionKey));
    }

    #[test]
    fn suggestions_numbered_then_bullets() {
        assert_eq!(parse_suggestions("1. Use pow\n2) Use sets\nnoise"), vec!["Use pow", "Use sets"]);
        assert_eq!(parse_suggestions("- a\n* b"), vec!["a", "b"]);
    }

    #[test]
    fn formalization_sections() {
        let raw = "### Entry Point Function Name\n`prime_fib`\n\n### Input/Output Conditions\nInput: n >= 1. Output: int.\n\n### Edge Cases and Parameter Types (Int, String, etc.)\n- n = 1 returns 2\n- n is Int\n\n### Expected Behavior\nReturns the n-th number that is both a Fibonacci number and a prime number.";
        let d = parse_formalization(raw);
        assert_eq!(d.entry_point.as_deref(), Some("prime_fib"));
        assert_eq!(d.io_conditions, "Input: n >= 1. Output: int.");
        assert!(d.edge_cases.contains("n = 1 returns 2"));
        assert_eq!(d.edge_cases, d.parameter_types);
        assert!(d.expected_behavior.contains("both a Fibonacci number and a prime number"));
        assert!(d.is_complete());
    }

    #[test]
    fn formalization_separate_type_section() {
        let raw = "1. **Entry Point Function Name**: find_the_median\n2. **Input/Output Conditions**: list in, float out\n3. **Edge Cases**: single element\n4. **Parameter Types**: List[int]\n5. **Expected Behavior**: median";
        let d = parse_formalization(raw);
        assert_eq!(d.entry_point.as_deref(), Some("find_the_median"));
        assert_eq!(d.edge_cases, "single element");
        assert_eq!(d.parameter_types, "List[int]");
        assert_eq!(d.expected_behavior, "median");
    }

    #[test]
    fn parsed_blocks_bundle() {
        let raw = "input: 3\nassert prime_fib(3) == 5\n```python\ndef prime_fib(n): pass\n```\n{\"Yes\":\"NULL\"}";
        let p = ParsedBlocks::from_raw(raw);
        assert_eq!(p.input_lines, vec!["3"]);
        assert_eq!(p.assertion_lines, vec!["assert prime_fib(3) == 5"]);
        assert_eq!(p.code_blocks.len(), 1);
        assert_eq!(p.verdict, Some((true, String::new())));
    }
}
