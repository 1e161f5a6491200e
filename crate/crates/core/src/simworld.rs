//! Deterministic synthetic targets for exercising the whole loop offline.
//!
//! A target is a hidden set of trait tokens. Ground-truth behavior is the
//! canonical rendering of that set (`"Traits: a, b, c."`). A scripted chat
//! backend plays all three agents by recognizing which prompt template it
//! was given:
//!
//! * instruction prompt: renders the traits listed in the persona;
//! * analysis prompt: reports up to `k` ground-truth traits missing from the
//!   generated behavior (`"missing: b, c"`);
//! * refinement prompt: adds the reported traits to the persona.
//!
//! With `m` traits initially missing the loop therefore converges in exactly
//! `ceil(m / k) + 1` iterations.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{AttemptError, ChatBackend, ChatReply, ChatRequest};
use crate::metrics::tokenize;
use crate::prompts::{PromptRegistry, TemplateId};
use crate::types::{PersonaProfile, Scenario, TaskRecord};

const BEHAVIOR_PREFIX: &str = "Traits:";
const MISSING_PREFIX: &str = "missing:";
const TRAIT_MARKER: &str = " with traits ";
const NONE: &str = "none";
const DEFAULT_DESCRIPTION: &str = "a simulated individual";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("prompt matches no known template")]
    UnrecognizedPrompt,
    #[error("cannot parse behavior {0:?}")]
    MalformedBehavior(String),
    #[error("cannot parse analysis {0:?}")]
    MalformedAnalysis(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("reading target file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing target file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Maximum number of traits the scripted analyst reveals per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReleaseRate {
    Limited(u32),
    Unbounded,
}

impl ReleaseRate {
    fn take(self) -> usize {
        match self {
            ReleaseRate::Limited(k) => k as usize,
            ReleaseRate::Unbounded => usize::MAX,
        }
    }
}

impl fmt::Display for ReleaseRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReleaseRate::Limited(k) => write!(f, "{k}"),
            ReleaseRate::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl Serialize for ReleaseRate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ReleaseRate::Limited(k) => s.serialize_u32(*k),
            ReleaseRate::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for ReleaseRate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u32),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(0) => Err(serde::de::Error::custom("release rate must be positive")),
            Repr::N(k) => Ok(ReleaseRate::Limited(k)),
            Repr::S(s) if s == "unbounded" => Ok(ReleaseRate::Unbounded),
            Repr::S(s) => Err(serde::de::Error::custom(format!("bad release rate {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTarget {
    pub hidden_attrs: BTreeSet<String>,
    pub release_rate: ReleaseRate,
    #[serde(default)]
    pub seed: u64,
}

fn valid_token(t: &str) -> bool {
    !t.is_empty()
        && t != NONE
        && t.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

impl SyntheticTarget {
    pub fn new<I, S>(attrs: I, release_rate: ReleaseRate, seed: u64) -> Result<Self, SimError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let target = Self {
            hidden_attrs: attrs.into_iter().map(Into::into).collect(),
            release_rate,
            seed,
        };
        target.validate()?;
        Ok(target)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.hidden_attrs.is_empty() {
            return Err(SimError::InvalidTarget("hidden_attrs is empty".into()));
        }
        if let Some(bad) = self.hidden_attrs.iter().find(|t| !valid_token(t)) {
            return Err(SimError::InvalidTarget(format!(
                "trait {bad:?} must be lowercase alphanumeric and not \"none\""
            )));
        }
        if self.release_rate == ReleaseRate::Limited(0) {
            return Err(SimError::InvalidTarget(
                "release rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Reads a target from a JSON file such as
    /// `{"hidden_attrs": ["a", "b"], "release_rate": 2, "seed": 0}`.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let target: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        target.validate()?;
        Ok(target)
    }

    pub fn ground_truth(&self) -> String {
        oracle_behavior(&self.hidden_attrs)
    }

    /// A task record whose initial persona covers `initial` traits.
    pub fn task_record<'a>(
        &self,
        id: impl Into<String>,
        scenario: Scenario,
        initial: impl IntoIterator<Item = &'a str>,
    ) -> TaskRecord {
        let covered: BTreeSet<String> = initial.into_iter().map(str::to_string).collect();
        TaskRecord {
            id: id.into(),
            scenario,
            content: "simulated task".into(),
            ground_truth: self.ground_truth(),
            initial_persona: PersonaProfile::initial(&persona_with(DEFAULT_DESCRIPTION, &covered))
                .expect("nonempty"),
        }
    }

    pub fn backend(&self) -> SimWorldBackend {
        SimWorldBackend::new(self.release_rate, self.seed)
    }
}

/// `"Traits: a, b."` with tokens sorted; `"Traits: none."` for the empty set.
pub fn oracle_behavior<S: AsRef<str>>(attrs: impl IntoIterator<Item = S>) -> String {
    let sorted: BTreeSet<String> = attrs.into_iter().map(|s| s.as_ref().to_string()).collect();
    format!("{BEHAVIOR_PREFIX} {}.", join_or_none(&sorted))
}

fn join_or_none(set: &BTreeSet<String>) -> String {
    if set.is_empty() {
        NONE.to_string()
    } else {
        set.iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Inverse of [`oracle_behavior`].
pub fn parse_behavior(text: &str) -> Result<BTreeSet<String>, SimError> {
    let rest = text
        .trim()
        .strip_prefix(BEHAVIOR_PREFIX)
        .ok_or_else(|| SimError::MalformedBehavior(text.to_string()))?;
    let tokens = tokenize(rest).tokens;
    if tokens == [NONE] {
        return Ok(BTreeSet::new());
    }
    Ok(tokens.into_iter().collect())
}

/// Trait tokens listed in a persona's `"... with traits a, b."` clause.
/// Matching is on whole tokens, so `art` is not found in `artist`.
pub fn persona_traits(persona: &str) -> BTreeSet<String> {
    let Some(at) = persona.rfind(TRAIT_MARKER) else {
        return BTreeSet::new();
    };
    let clause = &persona[at + TRAIT_MARKER.len()..];
    let clause = clause.split('.').next().unwrap_or("");
    tokenize(clause)
        .tokens
        .into_iter()
        .filter(|t| valid_token(t))
        .collect()
}

/// `"You are <description> with traits a, b."`, or without the clause when
/// nothing is covered.
pub fn persona_with(description: &str, traits: &BTreeSet<String>) -> String {
    if traits.is_empty() {
        format!("You are {description}.")
    } else {
        format!(
            "You are {description}{TRAIT_MARKER}{}.",
            join_or_none(traits)
        )
    }
}

fn persona_description(persona: &str) -> &str {
    let body = persona
        .trim()
        .strip_prefix("You are ")
        .unwrap_or(persona.trim());
    let body = match body.rfind(TRAIT_MARKER) {
        Some(at) => &body[..at],
        None => body,
    };
    let body = body.trim_end_matches('.').trim();
    if body.is_empty() {
        DEFAULT_DESCRIPTION
    } else {
        body
    }
}

fn parse_missing(analysis: &str) -> Result<BTreeSet<String>, SimError> {
    let rest = analysis
        .trim()
        .strip_prefix(MISSING_PREFIX)
        .ok_or_else(|| SimError::MalformedAnalysis(analysis.to_string()))?;
    let tokens = tokenize(rest).tokens;
    if tokens == [NONE] {
        return Ok(BTreeSet::new());
    }
    Ok(tokens.into_iter().collect())
}

/// Behavior-analysis step: the first `rate` ground-truth traits (sorted)
/// absent from the generated behavior.
pub fn missing_report(
    ground_truth: &str,
    generated: &str,
    rate: ReleaseRate,
) -> Result<String, SimError> {
    let truth = parse_behavior(ground_truth)?;
    let have = parse_behavior(generated)?;
    let missing: BTreeSet<String> = truth.difference(&have).take(rate.take()).cloned().collect();
    Ok(format!("{MISSING_PREFIX} {}", join_or_none(&missing)))
}

/// Refinement step: the persona with the reported traits added.
pub fn refined_persona(persona: &str, analysis: &str) -> Result<String, SimError> {
    let missing = parse_missing(analysis)?;
    let covered = persona_traits(persona);
    let persona = persona.trim();
    if missing.is_subset(&covered) && persona.starts_with("You are") {
        return Ok(persona.to_string());
    }
    let all: BTreeSet<String> = covered.union(&missing).cloned().collect();
    Ok(persona_with(persona_description(persona), &all))
}

/// Plays whichever agent the prompt addresses.
pub fn scripted_chat(
    prompt: &str,
    rate: ReleaseRate,
    registry: &PromptRegistry,
) -> Result<String, SimError> {
    let matched = |ids: &[TemplateId]| {
        ids.iter()
            .find_map(|id| registry.get(*id).match_rendered(prompt))
    };

    if prompt.contains("EXPERT ANALYSIS:") {
        let b = matched(&[TemplateId::RefinePersona]).ok_or(SimError::UnrecognizedPrompt)?;
        return refined_persona(&b["persona"], &b["analysis"]);
    }
    if prompt.contains("EXPECTED RESPONSE:") {
        let b = matched(&[
            TemplateId::AnalysisFreeForm,
            TemplateId::AnalysisStructured,
            TemplateId::AnalysisNoPersona,
        ])
        .ok_or(SimError::UnrecognizedPrompt)?;
        return missing_report(&b["ground_truth"], &b["generated_response"], rate);
    }
    let instructions: Vec<TemplateId> = TemplateId::ALL
        .into_iter()
        .filter(|t| t.is_instruction())
        .collect();
    let b = matched(&instructions).ok_or(SimError::UnrecognizedPrompt)?;
    Ok(oracle_behavior(persona_traits(&b["persona"])))
}

/// Number of loop iterations until convergence: one per batch of revealed
/// traits plus the final no-op that detects identity.
pub fn iterations_to_converge(missing: u32, rate: ReleaseRate) -> u32 {
    if missing == 0 {
        return 1;
    }
    match rate {
        ReleaseRate::Limited(k) => missing.div_ceil(k) + 1,
        ReleaseRate::Unbounded => 2,
    }
}

/// [`scripted_chat`] behind the chat backend interface.
#[derive(Clone)]
pub struct SimWorldBackend {
    rate: ReleaseRate,
    seed: u64,
    registry: Arc<PromptRegistry>,
}

impl SimWorldBackend {
    pub fn new(rate: ReleaseRate, seed: u64) -> Self {
        Self {
            rate,
            seed,
            registry: Arc::new(PromptRegistry::builtin()),
        }
    }

    pub fn with_registry(mut self, registry: Arc<PromptRegistry>) -> Self {
        self.registry = registry;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl ChatBackend for SimWorldBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        let text = scripted_chat(&request.prompt, self.rate, &self.registry)
            .map_err(|e| AttemptError::Permanent(e.to_string()))?;
        Ok(ChatReply {
            prompt_tokens: Some(tokenize(&request.prompt).len() as u64),
            completion_tokens: Some(tokenize(&text).len() as u64),
            text,
        })
    }
}
