//! A scripted stand-in for a chat model.
//!
//! Each task gets a script (`scripts/<task_id>.json` in a corpus) holding the
//! replies a model would plausibly give at every stage. The model answers
//! from the request tag and the rendered prompt only, so it is stateless and
//! the same request always gets the same reply. It is used to populate the
//! shipped replay store and to exercise the pipeline without a network.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, CorpusError};
use crate::gateway::{ChatModel, ChatRequest, ChatResponse, GatewayError, Provider};
use crate::prompt::{parse_formalization, PromptStage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptPlan {
    pub description: String,
    pub pseudocode: String,
    pub code: String,
    /// Reply to a refinement request for `code`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptCode {
    pub code: String,
    /// Reply when asked to optimize `code`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimized: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub task_id: String,
    pub entry_point: String,
    pub formalization: String,
    /// Reply to the re-formalization after an inconsistent verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formalization_retry: Option<String>,
    /// When set, the first formalization is judged inconsistent for this
    /// reason.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_reason: Option<String>,
    pub plans: Vec<ScriptPlan>,
    pub suggestions: Vec<String>,
    #[serde(default)]
    pub direct: Vec<ScriptCode>,
    pub inputs: Vec<String>,
    /// input → assertion line
    pub assertions: BTreeMap<String, String>,
    /// assertion → reason the reviewer rejects it
    #[serde(default)]
    pub rejected: BTreeMap<String, String>,
    /// Candidate ids in order of preference for the selection prompt.
    #[serde(default)]
    pub preference: Vec<u32>,
}

impl TaskScript {
    fn codes(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        let plans = self
            .plans
            .iter()
            .flat_map(|p| [(p.code.as_str(), p.fixed.as_deref()), (p.fixed.as_deref().unwrap_or(""), None)]);
        let direct = self.direct.iter().flat_map(|d| {
            [
                (d.code.as_str(), d.fixed.as_deref()),
                (d.optimized.as_deref().unwrap_or(""), None),
            ]
        });
        plans.chain(direct).filter(|(c, _)| !c.is_empty())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedModel {
    scripts: Vec<TaskScript>,
}

fn fenced(label: &str, code: &str) -> String {
    format!("```{label}\n{}\n```", code.trim_end())
}

impl ScriptedModel {
    pub fn new(scripts: Vec<TaskScript>) -> Self {
        Self { scripts }
    }

    /// Loads `scripts/<task_id>.json` for every listed task that has one.
    pub fn load(dir: &Path, task_ids: &[String]) -> Result<Self, CorpusError> {
        let mut scripts = Vec::new();
        for id in task_ids {
            let path = dir.join(format!("{id}.json"));
            if path.exists() {
                scripts.push(read_json(&path)?);
            }
        }
        Ok(Self::new(scripts))
    }

    fn script_for(&self, text: &str) -> Option<&TaskScript> {
        // the test-synthesis templates open with a worked example
        let text = text.rsplit_once("END OF EXAMPLES.").map_or(text, |(_, t)| t);
        self.scripts
            .iter()
            .find(|s| text.contains(&format!("def {}(", s.entry_point)))
            .or_else(|| {
                self.scripts
                    .iter()
                    .find(|s| s.plans.iter().any(|p| text.contains(p.description.trim())))
            })
    }

    fn reply(&self, tag: &str, user: &str, system: &str) -> Option<String> {
        let s = self.script_for(user)?;
        let stage = PromptStage::ALL.into_iter().find(|p| p.as_str() == tag)?;
        Some(match stage {
            PromptStage::Formalize => {
                if user.contains("judged inconsistent") {
                    s.formalization_retry.clone().unwrap_or_else(|| s.formalization.clone())
                } else {
                    s.formalization.clone()
                }
            }
            PromptStage::FormalizeCheck => {
                let retried = s
                    .formalization_retry
                    .as_deref()
                    .map(|r| parse_formalization(r).expected_behavior)
                    .is_some_and(|b| !b.is_empty() && user.contains(&b));
                match &s.check_reason {
                    Some(reason) if !retried => format!("{{\"No\":\"The reason is {reason}\"}}"),
                    _ => "{\"Yes\":\"NULL\"}".to_string(),
                }
            }
            PromptStage::Explore => {
                let k = leading_count(system).unwrap_or(s.plans.len());
                let body: Vec<String> = s
                    .plans
                    .iter()
                    .take(k)
                    .map(|p| {
                        format!(
                            "{{algorithm key description: {}}}\n{{pseudo algorithm:\n{}\n}}",
                            p.description.trim(),
                            p.pseudocode.trim_end()
                        )
                    })
                    .collect();
                format!("```algorithm1\n{}\n```", body.join("\n\n"))
            }
            PromptStage::Suggest => s
                .suggestions
                .iter()
                .enumerate()
                .map(|(i, t)| format!("{}. {t}", i + 1))
                .collect::<Vec<_>>()
                .join("\n"),
            PromptStage::Generate => {
                let code = s
                    .plans
                    .iter()
                    .find(|p| user.contains(p.description.trim()))
                    .map(|p| p.code.clone())
                    .or_else(|| {
                        s.direct.iter().find(|d| user.contains(d.code.trim())).map(|d| {
                            d.optimized.clone().unwrap_or_else(|| d.code.clone())
                        })
                    })?;
                fenced("python", &code)
            }
            PromptStage::DirectGenerate => {
                let k = leading_count(system).unwrap_or(s.direct.len());
                s.direct
                    .iter()
                    .take(k)
                    .enumerate()
                    .map(|(i, d)| fenced(&format!("python{}", i + 1), &d.code))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            PromptStage::SynthesizeInputs => s
                .inputs
                .iter()
                .map(|i| format!("input: {i}"))
                .collect::<Vec<_>>()
                .join("\n"),
            PromptStage::CompleteTests => {
                let input = user
                    .lines()
                    .rev()
                    .find_map(|l| l.strip_prefix("input: "))?
                    .trim();
                s.assertions.get(input)?.clone()
            }
            PromptStage::Refine => {
                let (_, code_part) = user.split_once("Code:\n")?;
                let (code, fixed) = s
                    .codes()
                    .filter(|(c, _)| code_part.contains(c.trim()))
                    .max_by_key(|(c, _)| c.len())?;
                fenced("python", fixed.unwrap_or(code))
            }
            PromptStage::ReverseReview => {
                let (_, case) = user.rsplit_once("Test case:\n")?;
                match s.rejected.get(case.trim()) {
                    Some(reason) => format!("{{\"No\":\"The reason is {reason}\"}}"),
                    None => "{\"Yes\":\"NULL\"}".to_string(),
                }
            }
            PromptStage::Select => {
                let listed: Vec<u32> = serde_json::from_str::<BTreeMap<String, String>>(user)
                    .ok()?
                    .keys()
                    .filter_map(|k| k.parse().ok())
                    .collect();
                let pick = s
                    .preference
                    .iter()
                    .find(|id| listed.contains(id))
                    .or_else(|| listed.iter().min())?;
                fenced("text", &pick.to_string())
            }
        })
    }
}

/// First number in "... generate 5 solution codes" / "design 5 excellent".
fn leading_count(system: &str) -> Option<usize> {
    let words: Vec<&str> = system.split_whitespace().collect();
    words.windows(2).find_map(|w| {
        let follows = matches!(w[0], "generate" | "design");
        follows.then(|| w[1].parse().ok()).flatten()
    })
}

impl ChatModel for ScriptedModel {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let user = request.user_text().unwrap_or("");
        let system = request.system_text().unwrap_or("");
        let content = self
            .reply(&request.request_tag, user, system)
            .ok_or_else(|| GatewayError::TransportError {
                attempts: 1,
                message: format!("scripted model has no reply for `{}`", request.request_tag),
            })?;
        Ok(ChatResponse {
            content,
            provider: Provider::Mock,
            cache_hit: false,
            latency: 0.0,
        })
    }
}
