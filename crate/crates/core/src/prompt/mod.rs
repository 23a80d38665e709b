//! Prompt templates and the parsers for the model's structured replies.
//!
//! Templates live as text files under `templates/` (one system and one user
//! file per stage) and are compiled in; [`TemplateSet::load_dir`] swaps in an
//! edited copy. Placeholders use the `{{name}}` syntax and are drawn from a
//! closed set, see [`Placeholder`].

pub mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ChatMessage;

pub use parse::{
    extract_complexity, parse_algorithm_blocks, parse_assertions, parse_code_blocks, parse_formalization,
    parse_selection, parse_suggestions, parse_test_inputs, parse_verdict, AlgorithmDraft,
    FormalizationDraft, ParseError, ParsedBlocks, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Formalize,
    FormalizeCheck,
    Explore,
    Suggest,
    Generate,
    DirectGenerate,
    SynthesizeInputs,
    CompleteTests,
    Refine,
    ReverseReview,
    Select,
}

impl PromptStage {
    pub const ALL: [PromptStage; 11] = [
        PromptStage::Formalize,
        PromptStage::FormalizeCheck,
        PromptStage::Explore,
        PromptStage::Suggest,
        PromptStage::Generate,
        PromptStage::DirectGenerate,
        PromptStage::SynthesizeInputs,
        PromptStage::CompleteTests,
        PromptStage::Refine,
        PromptStage::ReverseReview,
        PromptStage::Select,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStage::Formalize => "formalize",
            PromptStage::FormalizeCheck => "formalize_check",
            PromptStage::Explore => "explore",
            PromptStage::Suggest => "suggest",
            PromptStage::Generate => "generate",
            PromptStage::DirectGenerate => "direct_generate",
            PromptStage::SynthesizeInputs => "synthesize_inputs",
            PromptStage::CompleteTests => "complete_tests",
            PromptStage::Refine => "refine",
            PromptStage::ReverseReview => "reverse_review",
            PromptStage::Select => "select",
        }
    }
}

impl fmt::Display for PromptStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    NaturalLanguageDescription,
    TaskDescription,
    AlgorithmDescription,
    EfficiencyOptimizationSuggestions,
    InputCase,
    TestCase,
    Code,
    CorrectedCodeCandidates,
    NumPlans,
}

impl Placeholder {
    pub const ALL: [Placeholder; 9] = [
        Placeholder::NaturalLanguageDescription,
        Placeholder::TaskDescription,
        Placeholder::AlgorithmDescription,
        Placeholder::EfficiencyOptimizationSuggestions,
        Placeholder::InputCase,
        Placeholder::TestCase,
        Placeholder::Code,
        Placeholder::CorrectedCodeCandidates,
        Placeholder::NumPlans,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placeholder::NaturalLanguageDescription => "natural_language_description",
            Placeholder::TaskDescription => "task_description",
            Placeholder::AlgorithmDescription => "algorithm_description",
            Placeholder::EfficiencyOptimizationSuggestions => "efficiency_optimization_suggestions",
            Placeholder::InputCase => "input_case",
            Placeholder::TestCase => "test_case",
            Placeholder::Code => "code",
            Placeholder::CorrectedCodeCandidates => "corrected_code_candidates",
            Placeholder::NumPlans => "num_plans",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Placeholder::ALL.into_iter().find(|p| p.as_str() == name)
    }
}

/// Values for the placeholders of one render call.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    values: BTreeMap<Placeholder, String>,
}

impl PromptContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: Placeholder, value: impl Into<String>) -> Self {
        self.values.insert(key, value.into());
        self
    }

    pub fn set(&mut self, key: Placeholder, value: impl Into<String>) {
        self.values.insert(key, value.into());
    }

    pub fn get(&self, key: Placeholder) -> Option<&str> {
        self.values.get(&key).map(String::as_str)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing context key `{0}`")]
    MissingContextKey(String),
    #[error("template `{stage}` references unknown placeholder `{name}`")]
    UnknownPlaceholder { stage: String, name: String },
    #[error("cannot read template `{path}`: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: PromptStage,
    pub system_text: String,
    pub user_text: String,
}

static PLACEHOLDER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\{\{([a-z_]+)\}\}").unwrap());

impl PromptTemplate {
    pub fn new(
        stage: PromptStage,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let t = Self {
            stage,
            system_text: system_text.into(),
            user_text: user_text.into(),
        };
        for text in [&t.system_text, &t.user_text] {
            for cap in PLACEHOLDER.captures_iter(text) {
                if Placeholder::from_name(&cap[1]).is_none() {
                    return Err(TemplateError::UnknownPlaceholder {
                        stage: stage.as_str().into(),
                        name: cap[1].to_string(),
                    });
                }
            }
        }
        Ok(t)
    }

    /// Placeholders referenced by either message, in first-use order.
    pub fn placeholders(&self) -> Vec<Placeholder> {
        let mut out = Vec::new();
        for text in [&self.system_text, &self.user_text] {
            for cap in PLACEHOLDER.captures_iter(text) {
                if let Some(p) = Placeholder::from_name(&cap[1]) {
                    if !out.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    /// Substitutes every placeholder in one pass; substituted values are
    /// never re-scanned.
    pub fn render(&self, ctx: &PromptContext) -> Result<Vec<ChatMessage>, TemplateError> {
        for p in self.placeholders() {
            match ctx.get(p) {
                Some(v) if !v.trim().is_empty() => {}
                _ => return Err(TemplateError::MissingContextKey(p.as_str().to_string())),
            }
        }
        let fill = |text: &str| {
            PLACEHOLDER
                .replace_all(text, |cap: &regex::Captures<'_>| {
                    let p = Placeholder::from_name(&cap[1]).expect("validated at construction");
                    ctx.get(p).unwrap_or_default().to_string()
                })
                .trim_end()
                .to_string()
        };
        Ok(vec![
            ChatMessage::system(fill(&self.system_text)),
            ChatMessage::user(fill(&self.user_text)),
        ])
    }
}

/// Returns true when `text` still contains a `{{name}}` marker from the
/// placeholder set.
pub fn has_unresolved_placeholder(text: &str) -> bool {
    PLACEHOLDER
        .captures_iter(text)
        .any(|c| Placeholder::from_name(&c[1]).is_some())
}

macro_rules! builtin {
    ($stage:ident, $name:literal) => {
        (
            PromptStage::$stage,
            include_str!(concat!("../../templates/", $name, ".system.txt")),
            include_str!(concat!("../../templates/", $name, ".user.txt")),
        )
    };
}

const BUILTIN: [(PromptStage, &str, &str); 11] = [
    builtin!(Formalize, "formalize"),
    builtin!(FormalizeCheck, "formalize_check"),
    builtin!(Explore, "explore"),
    builtin!(Suggest, "suggest"),
    builtin!(Generate, "generate"),
    builtin!(DirectGenerate, "direct_generate"),
    builtin!(SynthesizeInputs, "synthesize_inputs"),
    builtin!(CompleteTests, "complete_tests"),
    builtin!(Refine, "refine"),
    builtin!(ReverseReview, "reverse_review"),
    builtin!(Select, "select"),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<PromptStage, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(stage, sys, user)| {
                let t = PromptTemplate::new(*stage, *sys, *user).expect("builtin template is valid");
                (*stage, t)
            })
            .collect();
        Self { templates }
    }

    /// Loads `<stage>.system.txt` / `<stage>.user.txt` from `dir`; stages
    /// without files keep the builtin text.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for stage in PromptStage::ALL {
            let sys = dir.join(format!("{}.system.txt", stage.as_str()));
            let user = dir.join(format!("{}.user.txt", stage.as_str()));
            if !sys.exists() && !user.exists() {
                continue;
            }
            let read = |p: &Path| {
                std::fs::read_to_string(p).map_err(|e| TemplateError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })
            };
            let current = &set.templates[&stage];
            let system_text = if sys.exists() { read(&sys)? } else { current.system_text.clone() };
            let user_text = if user.exists() { read(&user)? } else { current.user_text.clone() };
            set.templates
                .insert(stage, PromptTemplate::new(stage, system_text, user_text)?);
        }
        Ok(set)
    }

    pub fn get(&self, stage: PromptStage) -> &PromptTemplate {
        &self.templates[&stage]
    }

    pub fn render(
        &self,
        stage: PromptStage,
        ctx: &PromptContext,
    ) -> Result<Vec<ChatMessage>, TemplateError> {
        self.get(stage).render(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MEDIAN: &str = "from typing import *\ndef find_the_median(arr: List[int]) -> float:\n    \"\"\"\n    Given an unsorted array of integers `arr`, find the median of the array.\n    \"\"\"";

    #[test]
    fn synthesize_inputs_prompt_mentions_median() {
        let set = TemplateSet::builtin();
        let ctx = PromptContext::new().with(Placeholder::TaskDescription, MEDIAN);
        let msgs = set.render(PromptStage::SynthesizeInputs, &ctx).unwrap();
        assert_eq!(msgs.len(), 2);
        assert!(msgs[1].content.contains("find the median of the array"));
        assert!(msgs[0]
            .content
            .contains("Please output all test cases in a single line, starting with input."));
    }

    #[test]
    fn empty_task_description_is_missing() {
        let set = TemplateSet::builtin();
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, "")
            .with(Placeholder::NumPlans, "5");
        assert_eq!(
            set.render(PromptStage::Explore, &ctx).unwrap_err(),
            TemplateError::MissingContextKey("task_description".into())
        );
    }

    #[test]
    fn explore_prompt_keeps_wording_at_default_count() {
        let set = TemplateSet::builtin();
        let ctx = PromptContext::new()
            .with(Placeholder::TaskDescription, MEDIAN)
            .with(Placeholder::NumPlans, "5");
        let msgs = set.render(PromptStage::Explore, &ctx).unwrap();
        assert!(msgs[0].content.contains("Please design 5 excellent algorithm solutions"));
        assert!(msgs[0].content.contains("PS: DO NOT provide implementation examples!"));
        assert_eq!(msgs, set.render(PromptStage::Explore, &ctx).unwrap());
    }

    #[test]
    fn fixed_appendix_sentences_are_present() {
        let set = TemplateSet::builtin();
        assert!(set.get(PromptStage::Suggest).system_text.contains("Please provide at least 20 suggestions."));
        assert!(set
            .get(PromptStage::CompleteTests)
            .system_text
            .contains("Write one test case as a single-line assert statement."));
        assert!(set.get(PromptStage::Refine).system_text.contains("1. Do not alter the algorithm itself"));
        assert!(set.get(PromptStage::FormalizeCheck).system_text.contains("{\"Yes\":\"NULL\"}"));
    }

    #[test]
    fn unknown_placeholder_is_rejected() {
        let err = PromptTemplate::new(PromptStage::Select, "{{bogus}}", "x").unwrap_err();
        assert!(matches!(err, TemplateError::UnknownPlaceholder { .. }));
    }

    #[test]
    fn every_builtin_renders_without_markers() {
        let set = TemplateSet::builtin();
        let mut ctx = PromptContext::new();
        for p in Placeholder::ALL {
            ctx.set(p, format!("value of {}", p.as_str()));
        }
        for stage in PromptStage::ALL {
            let msgs = set.render(stage, &ctx).unwrap();
            assert_eq!(msgs[0].role, crate::gateway::Role::System);
            for m in msgs {
                assert!(!has_unresolved_placeholder(&m.content), "{stage}");
            }
        }
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let set = TemplateSet::builtin();
        let ctx = PromptContext::new().with(Placeholder::CorrectedCodeCandidates, "{{code}}");
        let msgs = set.render(PromptStage::Select, &ctx).unwrap();
        assert_eq!(msgs[1].content, "{{code}}");
    }

    #[test]
    fn load_dir_overrides_one_stage() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("select.user.txt"), "Pick one:\n{{corrected_code_candidates}}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert!(set.get(PromptStage::Select).user_text.starts_with("Pick one:"));
        assert_eq!(
            set.get(PromptStage::Explore),
            TemplateSet::builtin().get(PromptStage::Explore)
        );
    }
}
