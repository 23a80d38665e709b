//! Per-run access to the model: renders a template, issues the request and
//! appends a transcript entry for every call.

use thiserror::Error;

use crate::domain::{Stage, StageTranscript};
use crate::gateway::{ChatModel, ChatRequest, GatewayError};
use crate::prompt::{PromptContext, PromptStage, TemplateError, TemplateSet};

/// Appended to the user message when a reply must be re-requested because
/// nothing usable could be parsed from it.
pub const REPROMPT_NOTE: &str =
    "Your previous answer could not be parsed. Please follow the required output format exactly.";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub struct Session<'a> {
    model: &'a dyn ChatModel,
    templates: &'a TemplateSet,
    pub model_name: String,
    pub temperature: f64,
    pub transcripts: Vec<StageTranscript>,
    pub warnings: Vec<String>,
}

impl<'a> Session<'a> {
    pub fn new(
        model: &'a dyn ChatModel,
        templates: &'a TemplateSet,
        model_name: impl Into<String>,
        temperature: f64,
    ) -> Self {
        Self {
            model,
            templates,
            model_name: model_name.into(),
            temperature,
            transcripts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn ask(
        &mut self,
        stage: Stage,
        prompt: PromptStage,
        ctx: &PromptContext,
    ) -> Result<String, SessionError> {
        self.ask_with_note(stage, prompt, ctx, None)
    }

    /// Like [`Session::ask`], with `note` appended as a separate paragraph of
    /// the user message.
    pub fn ask_with_note(
        &mut self,
        stage: Stage,
        prompt: PromptStage,
        ctx: &PromptContext,
        note: Option<&str>,
    ) -> Result<String, SessionError> {
        let mut messages = self.templates.render(prompt, ctx)?;
        if let Some(note) = note {
            if let Some(user) = messages.last_mut() {
                user.content.push_str("\n\n");
                user.content.push_str(note);
            }
        }
        let request = ChatRequest {
            model_name: self.model_name.clone(),
            messages,
            temperature: self.temperature,
            request_tag: prompt.as_str().to_string(),
        };
        let response = self.model.complete(&request)?;
        self.transcripts.push(StageTranscript {
            stage,
            step: prompt.as_str().to_string(),
            system_prompt: request.system_text().map(str::to_string),
            user_prompt: request.user_text().map(str::to_string),
            response: response.content.clone(),
            latency: Some(response.latency),
        });
        Ok(response.content)
    }

    pub fn reprompt(
        &mut self,
        stage: Stage,
        prompt: PromptStage,
        ctx: &PromptContext,
    ) -> Result<String, SessionError> {
        self.ask_with_note(stage, prompt, ctx, Some(REPROMPT_NOTE))
    }

    /// Records a local (non-model) step.
    pub fn note(&mut self, stage: Stage, step: &str, summary: impl Into<String>) {
        self.transcripts.push(StageTranscript {
            stage,
            step: step.to_string(),
            system_prompt: None,
            user_prompt: None,
            response: summary.into(),
            latency: None,
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!("{message}");
        self.warnings.push(message);
    }
}
