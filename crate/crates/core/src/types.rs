//! Domain types shared across the engine: personas, task records, generated
//! behavior, divergence reports and metric vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Required opening of every refined persona.
pub const PERSONA_PREFIX: &str = "You are";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PersonaError {
    #[error("persona text is empty after normalization")]
    EmptyPersona,
}

/// Persona text that has passed [`normalize_persona`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonaText(String);

impl PersonaText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn has_prefix(&self) -> bool {
        self.0.starts_with(PERSONA_PREFIX)
    }

    /// Hex SHA-256 of the normalized bytes.
    pub fn digest(&self) -> String {
        digest_hex(self.0.as_bytes())
    }
}

impl fmt::Display for PersonaText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Strips surrounding whitespace and enclosing code fences.
///
/// A fence pair is an opening line of three backticks (optionally followed by
/// an info string such as `text`) and a closing run of three backticks. The
/// outermost pair is removed and the result re-trimmed until neither applies,
/// which keeps the operation idempotent.
pub fn normalize_persona(raw: &str) -> Result<PersonaText, PersonaError> {
    let mut current = raw.trim();
    while let Some(inner) = strip_fence(current) {
        current = inner.trim();
    }
    if current.is_empty() {
        return Err(PersonaError::EmptyPersona);
    }
    Ok(PersonaText(current.to_string()))
}

fn strip_fence(s: &str) -> Option<&str> {
    const FENCE: &str = "```";
    if s.len() < 2 * FENCE.len() || !s.starts_with(FENCE) || !s.ends_with(FENCE) {
        return None;
    }
    let body = &s[FENCE.len()..s.len() - FENCE.len()];
    match body.find('\n') {
        Some(nl) => {
            let info = &body[..nl];
            let is_info_string = info
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '+' | '.'));
            if is_info_string {
                Some(&body[nl + 1..])
            } else {
                Some(body)
            }
        }
        None => Some(body),
    }
}

/// A persona profile `P_t`: free second-person prose plus provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub text: PersonaText,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_digest: Option<String>,
}

impl PersonaProfile {
    /// Builds an initial persona (`P_0`). Third-person text is accepted with a
    /// warning since curated baselines are sometimes biographies.
    pub fn initial(raw: &str) -> Result<Self, PersonaError> {
        let text = normalize_persona(raw)?;
        if !text.has_prefix() {
            log::warn!("initial persona does not start with {PERSONA_PREFIX:?}");
        }
        Ok(Self {
            text,
            iteration: 0,
            parent_digest: None,
        })
    }

    /// Derives `P_{t+1}` from `self`. Returns `None` unless the normalized
    /// text starts with the required prefix.
    pub fn refined(&self, text: PersonaText) -> Option<Self> {
        if !text.has_prefix() {
            return None;
        }
        Some(Self {
            text,
            iteration: self.iteration + 1,
            parent_digest: Some(self.digest()),
        })
    }

    pub fn digest(&self) -> String {
        self.text.digest()
    }

    /// Convergence identity: byte equality of the normalized text.
    pub fn same_text(&self, other: &PersonaProfile) -> bool {
        self.text == other.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Debate,
    Depression,
    Suicide,
    Interview,
    MovieReview,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Debate,
        Scenario::Depression,
        Scenario::Suicide,
        Scenario::Interview,
        Scenario::MovieReview,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Debate => "debate",
            Scenario::Depression => "depression",
            Scenario::Suicide => "suicide",
            Scenario::Interview => "interview",
            Scenario::MovieReview => "movie_review",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scenario {0:?}")]
pub struct UnknownScenario(pub String);

impl FromStr for Scenario {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

/// One target individual's task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub scenario: Scenario,
    /// Task context `x`, passed verbatim into the instruction prompt.
    pub content: String,
    /// Observed human behavior `y`.
    pub ground_truth: String,
    pub initial_persona: PersonaProfile,
}

/// Unvalidated record as it appears on the wire. Every field is optional so
/// that validation can report all problems at once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTaskRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default)]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_persona: Option<String>,
}

impl From<&TaskRecord> for RawTaskRecord {
    fn from(r: &TaskRecord) -> Self {
        Self {
            id: Some(r.id.clone()),
            scenario: Some(r.scenario.as_str().to_string()),
            content: Some(r.content.clone()),
            ground_truth: Some(r.ground_truth.clone()),
            initial_persona: Some(r.initial_persona.text.as_str().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.record_id, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a raw record against the [`TaskRecord`] invariants.
pub fn validate_record(record: &RawTaskRecord) -> ValidationResult {
    let id = record
        .id
        .clone()
        .unwrap_or_else(|| "<missing id>".to_string());
    let mut result = ValidationResult::default();
    let mut violate = |field: &'static str, message: &str| {
        result.violations.push(Violation {
            record_id: id.clone(),
            field,
            message: message.to_string(),
        })
    };

    if record.id.as_deref().is_none_or(|s| s.trim().is_empty()) {
        violate("id", "id empty");
    }
    match record.scenario.as_deref() {
        None => violate("scenario", "scenario missing"),
        Some(s) if s.parse::<Scenario>().is_err() => violate("scenario", "unknown scenario"),
        Some(_) => {}
    }
    if record
        .content
        .as_deref()
        .is_none_or(|s| s.trim().is_empty())
    {
        violate("content", "content empty");
    }
    if record
        .ground_truth
        .as_deref()
        .is_none_or(|s| s.trim().is_empty())
    {
        violate("ground_truth", "ground_truth empty");
    }
    if let Some(p) = record.initial_persona.as_deref() {
        match normalize_persona(p) {
            Err(_) => violate("initial_persona", "initial_persona empty"),
            Ok(text) if !text.has_prefix() => result.warnings.push(format!(
                "record {id}: initial persona does not start with {PERSONA_PREFIX:?}"
            )),
            Ok(_) => {}
        }
    }
    result
}

/// Generated behavior `ŷ_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSample {
    pub text: String,
    pub record_id: String,
    pub iteration: u32,
    pub raw_completion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    FreeForm,
    Structured,
    NoPersona,
}

impl AnalysisMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnalysisMode::FreeForm => "free_form",
            AnalysisMode::Structured => "structured",
            AnalysisMode::NoPersona => "no_persona",
        }
    }
}

impl fmt::Display for AnalysisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Divergence analysis `δ_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub text: String,
    pub mode: AnalysisMode,
    pub record_id: String,
    pub iteration: u32,
}

/// Similarity of one generated behavior against ground truth. `None` marks a
/// metric that was skipped (no embedding backend, or nothing to embed).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricVector {
    pub rouge_l_f1: f64,
    pub bertscore_f1: Option<f64>,
    pub embedding_similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RougeL,
    BertScore,
    Embedding,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::RougeL,
        MetricKind::BertScore,
        MetricKind::Embedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::RougeL => "rouge_l_f1",
            MetricKind::BertScore => "bertscore_f1",
            MetricKind::Embedding => "embedding_similarity",
        }
    }
}

impl MetricVector {
    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::RougeL => Some(self.rouge_l_f1),
            MetricKind::BertScore => self.bertscore_f1,
            MetricKind::Embedding => self.embedding_similarity,
        }
    }

    pub fn skipped(&self) -> Vec<MetricKind> {
        MetricKind::ALL
            .into_iter()
            .filter(|k| self.get(*k).is_none())
            .collect()
    }
}
