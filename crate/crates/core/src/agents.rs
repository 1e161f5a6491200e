//! The three agents of the refinement loop.
//!
//! * role-playing: persona + task context -> generated behavior
//! * behavior analysis: generated vs. ground-truth behavior -> divergence report
//! * persona refinement: persona + report -> next persona
//!
//! Each agent is one rendered prompt and one chat call (plus format retries
//! for refinement). No conversation state is carried between calls.

use std::ops::AddAssign;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete_with, BackendError, ChatBackend, ChatDefaults, ChatResponse, RetryPolicy,
    Sleeper, ThreadSleeper,
};
use crate::datasets::instruction_template;
use crate::prompts::{bindings, PromptError, PromptRegistry, TemplateId};
use crate::types::{
    normalize_persona, validate_record, AnalysisMode, BehaviorSample, DivergenceReport,
    PersonaProfile, RawTaskRecord, TaskRecord, Violation,
};

pub const DEFAULT_REFINE_RETRY_LIMIT: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub chat: ChatDefaults,
    pub baa_mode: AnalysisMode,
    /// Extra refinement calls after a reply that does not start with "You are".
    #[serde(default = "default_refine_retry_limit")]
    pub refine_retry_limit: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_refine_retry_limit() -> u32 {
    DEFAULT_REFINE_RETRY_LIMIT
}

impl AgentConfig {
    pub fn new(model_id: impl Into<String>, baa_mode: AnalysisMode) -> Self {
        Self {
            chat: ChatDefaults::new(model_id),
            baa_mode,
            refine_retry_limit: DEFAULT_REFINE_RETRY_LIMIT,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("persona is empty")]
    EmptyPersona,
    #[error("invalid record: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidRecord(Vec<Violation>),
    #[error("behavior belongs to record {got}, expected {expected}")]
    RecordMismatch { expected: String, got: String },
    #[error("empty completion from role-playing agent")]
    EmptyCompletion,
    #[error("empty completion from behavior analysis agent")]
    EmptyAnalysis,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Backend usage accumulated over one or more agent calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub chat_calls: u32,
    pub attempts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    fn from_response(r: &ChatResponse) -> Self {
        Self {
            chat_calls: 1,
            attempts: r.attempts_used,
            prompt_tokens: r.prompt_tokens.unwrap_or(0),
            completion_tokens: r.completion_tokens.unwrap_or(0),
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Self) {
        self.chat_calls += o.chat_calls;
        self.attempts += o.attempts;
        self.prompt_tokens += o.prompt_tokens;
        self.completion_tokens += o.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub persona: PersonaProfile,
    /// Every attempt failed the format check; `persona` is the input.
    pub rejected: bool,
    pub usage: Usage,
}

/// Trims surrounding whitespace and one enclosing code fence, nothing else.
pub fn clean_completion(raw: &str) -> String {
    normalize_persona(raw)
        .map(|p| p.into_string())
        .unwrap_or_default()
}

#[derive(Clone)]
pub struct Agents {
    backend: Arc<dyn ChatBackend>,
    prompts: Arc<PromptRegistry>,
    config: AgentConfig,
    sleeper: Arc<dyn Sleeper>,
}

impl Agents {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        prompts: Arc<PromptRegistry>,
        config: AgentConfig,
    ) -> Self {
        Self {
            backend,
            prompts,
            config,
            sleeper: Arc::new(ThreadSleeper),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptRegistry {
        &self.prompts
    }

    fn call(&self, prompt: String) -> Result<ChatResponse, AgentError> {
        let request = self.config.chat.request(prompt);
        Ok(chat_complete_with(
            self.backend.as_ref(),
            &request,
            &self.config.retry,
            self.sleeper.as_ref(),
        )?)
    }

    pub fn behavior_prompt(
        &self,
        persona: &PersonaProfile,
        record: &TaskRecord,
    ) -> Result<String, AgentError> {
        let b = bindings([
            ("persona", persona.text.as_str()),
            ("content", record.content.as_str()),
        ]);
        Ok(self
            .prompts
            .render(instruction_template(record.scenario), &b)?)
    }

    /// Role-playing agent: `ŷ_t` from `P_t` and the task context.
    pub fn generate_behavior(
        &self,
        persona: &PersonaProfile,
        record: &TaskRecord,
        iteration: u32,
    ) -> Result<(BehaviorSample, Usage), AgentError> {
        if persona.text.as_str().trim().is_empty() {
            return Err(AgentError::EmptyPersona);
        }
        let check = validate_record(&RawTaskRecord::from(record));
        if !check.is_ok() {
            return Err(AgentError::InvalidRecord(check.violations));
        }
        let resp = self.call(self.behavior_prompt(persona, record)?)?;
        let text = clean_completion(&resp.text);
        if text.is_empty() {
            return Err(AgentError::EmptyCompletion);
        }
        let usage = Usage::from_response(&resp);
        Ok((
            BehaviorSample {
                text,
                record_id: record.id.clone(),
                iteration,
                raw_completion: resp.text,
            },
            usage,
        ))
    }

    pub fn analysis_template(&self) -> TemplateId {
        match self.config.baa_mode {
            AnalysisMode::FreeForm => TemplateId::AnalysisFreeForm,
            AnalysisMode::Structured => TemplateId::AnalysisStructured,
            AnalysisMode::NoPersona => TemplateId::AnalysisNoPersona,
        }
    }

    pub fn analysis_prompt(
        &self,
        persona: &PersonaProfile,
        record: &TaskRecord,
        generated: &BehaviorSample,
    ) -> Result<String, AgentError> {
        let mut b = bindings([
            ("content", record.content.as_str()),
            ("generated_response", generated.text.as_str()),
            ("ground_truth", record.ground_truth.as_str()),
        ]);
        if self.config.baa_mode != AnalysisMode::NoPersona {
            b.insert("persona".into(), persona.text.as_str().to_string());
        }
        Ok(self.prompts.render(self.analysis_template(), &b)?)
    }

    /// Behavior analysis agent: divergence report `δ_t`.
    pub fn analyze_divergence(
        &self,
        persona: &PersonaProfile,
        record: &TaskRecord,
        generated: &BehaviorSample,
    ) -> Result<(DivergenceReport, Usage), AgentError> {
        if record.ground_truth.trim().is_empty() {
            return Err(AgentError::InvalidRecord(
                validate_record(&RawTaskRecord::from(record)).violations,
            ));
        }
        if generated.record_id != record.id {
            return Err(AgentError::RecordMismatch {
                expected: record.id.clone(),
                got: generated.record_id.clone(),
            });
        }
        let resp = self.call(self.analysis_prompt(persona, record, generated)?)?;
        let text = resp.text.trim().to_string();
        if text.is_empty() {
            return Err(AgentError::EmptyAnalysis);
        }
        let usage = Usage::from_response(&resp);
        Ok((
            DivergenceReport {
                text,
                mode: self.config.baa_mode,
                record_id: record.id.clone(),
                iteration: generated.iteration,
            },
            usage,
        ))
    }

    pub fn refine_prompt(
        &self,
        persona: &PersonaProfile,
        report: &DivergenceReport,
    ) -> Result<String, AgentError> {
        let b = bindings([
            ("persona", persona.text.as_str()),
            ("analysis", report.text.as_str()),
        ]);
        Ok(self.prompts.render(TemplateId::RefinePersona, &b)?)
    }

    /// Persona refinement agent: `P_{t+1}`. A reply that does not start with
    /// "You are" after normalization is retried up to `refine_retry_limit`
    /// times; if all fail the input persona comes back with `rejected` set.
    pub fn refine_persona(
        &self,
        persona: &PersonaProfile,
        report: &DivergenceReport,
    ) -> Result<RefineOutcome, AgentError> {
        let prompt = self.refine_prompt(persona, report)?;
        let mut usage = Usage::default();
        for attempt in 0..=self.config.refine_retry_limit {
            let resp = self.call(prompt.clone())?;
            usage += Usage::from_response(&resp);
            let next = normalize_persona(&resp.text)
                .ok()
                .and_then(|text| persona.refined(text));
            match next {
                Some(p) => {
                    return Ok(RefineOutcome {
                        persona: p,
                        rejected: false,
                        usage,
                    })
                }
                None => log::debug!(
                    "record {}: refinement attempt {} rejected by format check",
                    report.record_id,
                    attempt + 1
                ),
            }
        }
        log::warn!(
            "record {}: refinement rejected, keeping previous persona",
            report.record_id
        );
        Ok(RefineOutcome {
            persona: persona.clone(),
            rejected: true,
            usage,
        })
    }
}
