//! Scenario task files.
//!
//! A dataset is a line-delimited JSON file, one record per line:
//!
//! ```text
//! {"id":"d1","scenario":"depression","content":"minimum","ground_truth":"...","initial_persona":"You are ..."}
//! ```
//!
//! `initial_persona` is optional; when absent the scenario's default persona
//! is used.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::prompts::TemplateId;
use crate::types::{
    validate_record, PersonaProfile, RawTaskRecord, Scenario, TaskRecord, Violation,
};

/// Minimum characters per context turn for interview records.
pub const INTERVIEW_MIN_CONTEXT_CHARS: usize = 600;
/// Minimum characters of the interviewee's response.
pub const INTERVIEW_MIN_RESPONSE_CHARS: usize = 50;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    ParseError {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{} validation error(s): {}", .0.len(), summarize(.0))]
    ValidationFailed(Vec<Violation>),
    #[error("{0} is not an instruction template")]
    UnknownTemplate(TemplateId),
}

fn summarize(v: &[Violation]) -> String {
    v.iter()
        .take(5)
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub template_id: TemplateId,
    /// What the record's `content` field must carry.
    pub content_description: &'static str,
    pub default_persona: PersonaProfile,
}

impl ScenarioSpec {
    pub fn for_scenario(scenario: Scenario) -> Self {
        let (template_id, content_description, persona) = match scenario {
            Scenario::Debate => (
                TemplateId::InstrDebate,
                "debate topic and the speaker's position, e.g. \"Topic: ...\\nPosition: for\"",
                include_str!("../templates/personas/debate.txt"),
            ),
            Scenario::Depression => (
                TemplateId::InstrDepression,
                "depression severity label: minimum, mild, moderate or severe",
                include_str!("../templates/personas/depression.txt"),
            ),
            Scenario::Suicide => (
                TemplateId::InstrSuicide,
                "suicide risk label",
                include_str!("../templates/personas/suicide.txt"),
            ),
            Scenario::Interview => (
                TemplateId::InstrInterview,
                "the two preceding conversation turns, one per line",
                include_str!("../templates/personas/interview.txt"),
            ),
            Scenario::MovieReview => (
                TemplateId::InstrMovie,
                "sentiment label (positive/negative), optionally with film details",
                include_str!("../templates/personas/movie_review.txt"),
            ),
        };
        Self {
            scenario,
            template_id,
            content_description,
            default_persona: PersonaProfile::initial(persona).expect("bundled persona is nonempty"),
        }
    }
}

pub fn instruction_template(scenario: Scenario) -> TemplateId {
    ScenarioSpec::for_scenario(scenario).template_id
}

pub fn scenario_of(template: TemplateId) -> Result<Scenario, DatasetError> {
    Scenario::ALL
        .into_iter()
        .find(|s| instruction_template(*s) == template)
        .ok_or(DatasetError::UnknownTemplate(template))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub records: Vec<TaskRecord>,
    pub warnings: Vec<String>,
}

pub fn load_records(path: &Path, spec: &ScenarioSpec) -> Result<Vec<TaskRecord>, DatasetError> {
    load_dataset(path, spec).map(|d| d.records)
}

pub fn load_dataset(path: &Path, spec: &ScenarioSpec) -> Result<DatasetFile, DatasetError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let (records, warnings) = parse_records(BufReader::new(file), spec, &display)?;
    for w in &warnings {
        log::warn!("{display}: {w}");
    }
    Ok(DatasetFile {
        path: path.to_path_buf(),
        records,
        warnings,
    })
}

/// Parses and validates every line; returns all violations at once.
pub fn parse_records<R: BufRead>(
    reader: R,
    spec: &ScenarioSpec,
    source: &str,
) -> Result<(Vec<TaskRecord>, Vec<String>), DatasetError> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut records = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Io {
            path: source.to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTaskRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::ParseError {
                path: source.to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        let mut check = validate_record(&raw);
        let id = raw.id.clone().unwrap_or_default();
        if check.is_ok() && raw.scenario.as_deref() != Some(spec.scenario.as_str()) {
            check.violations.push(Violation {
                record_id: id.clone(),
                field: "scenario",
                message: format!("scenario mismatch: expected {}", spec.scenario),
            });
        }
        if !id.is_empty() && !seen.insert(id.clone()) {
            check.violations.push(Violation {
                record_id: id.clone(),
                field: "id",
                message: "duplicate id".into(),
            });
        }
        warnings.extend(check.warnings);
        if !check.violations.is_empty() {
            violations.extend(check.violations);
            continue;
        }
        let record = into_record(raw, spec);
        if record.scenario == Scenario::Interview {
            warnings.extend(interview_warnings(&record));
        }
        records.push(record);
    }
    if !violations.is_empty() {
        return Err(DatasetError::ValidationFailed(violations));
    }
    Ok((records, warnings))
}

fn into_record(raw: RawTaskRecord, spec: &ScenarioSpec) -> TaskRecord {
    let initial_persona = match raw.initial_persona.as_deref() {
        Some(p) => PersonaProfile::initial(p).expect("validated nonempty"),
        None => spec.default_persona.clone(),
    };
    TaskRecord {
        id: raw.id.expect("validated"),
        scenario: spec.scenario,
        content: raw.content.expect("validated"),
        ground_truth: raw.ground_truth.expect("validated"),
        initial_persona,
    }
}

fn interview_warnings(record: &TaskRecord) -> Vec<String> {
    let mut out = Vec::new();
    let turns: Vec<&str> = record
        .content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let context: Vec<&str> = if turns.len() >= 2 {
        turns[turns.len() - 2..].to_vec()
    } else {
        vec![record.content.as_str()]
    };
    for turn in context {
        let n = turn.chars().count();
        if n < INTERVIEW_MIN_CONTEXT_CHARS {
            out.push(format!(
                "record {}: context turn has {n} chars (< {INTERVIEW_MIN_CONTEXT_CHARS})",
                record.id
            ));
        }
    }
    let n = record.ground_truth.chars().count();
    if n < INTERVIEW_MIN_RESPONSE_CHARS {
        out.push(format!(
            "record {}: response has {n} chars (< {INTERVIEW_MIN_RESPONSE_CHARS})",
            record.id
        ));
    }
    out
}

/// Writes records in the loader's format, always with an explicit
/// `initial_persona`.
pub fn write_records<W: Write>(mut w: W, records: &[TaskRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &RawTaskRecord::from(r))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{bindings, PromptRegistry};
    use proptest::prelude::*;

    fn parse(
        text: &str,
        scenario: Scenario,
    ) -> Result<(Vec<TaskRecord>, Vec<String>), DatasetError> {
        parse_records(
            text.as_bytes(),
            &ScenarioSpec::for_scenario(scenario),
            "test",
        )
    }

    #[test]
    fn default_persona_filled() {
        let line = r#"{"id":"d1","scenario":"depression","content":"minimum","ground_truth":"Feeling a bit down today..."}"#;
        let (recs, _) = parse(line, Scenario::Depression).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(
            recs[0].initial_persona,
            ScenarioSpec::for_scenario(Scenario::Depression).default_persona
        );
        assert_eq!(recs[0].content, "minimum");
    }

    #[test]
    fn explicit_persona_overrides() {
        let line = r#"{"id":"b1","scenario":"debate","content":"Topic: x\nPosition: for","ground_truth":"Ladies and gentlemen","initial_persona":"Dr. Smith is an economist."}"#;
        let (recs, warnings) = parse(line, Scenario::Debate).unwrap();
        assert_eq!(
            recs[0].initial_persona.text.as_str(),
            "Dr. Smith is an economist."
        );
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn missing_content_fails_validation() {
        let line = r#"{"id":"b2","scenario":"debate","ground_truth":"x"}"#;
        match parse(line, Scenario::Debate) {
            Err(DatasetError::ValidationFailed(v)) => {
                assert_eq!(v[0].record_id, "b2");
                assert_eq!(v[0].field, "content");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "\n{\"id\":\"a\",\"scenario\":\"debate\",\"content\":\"c\",\"ground_truth\":\"g\"}\nnot json\n";
        match parse(text, Scenario::Debate) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_mismatched_scenario() {
        let text = concat!(
            r#"{"id":"a","scenario":"debate","content":"c","ground_truth":"g"}"#,
            "\n",
            r#"{"id":"a","scenario":"debate","content":"c","ground_truth":"g"}"#,
            "\n",
            r#"{"id":"b","scenario":"suicide","content":"c","ground_truth":"g"}"#,
            "\n",
        );
        match parse(text, Scenario::Debate) {
            Err(DatasetError::ValidationFailed(v)) => {
                let msgs: Vec<_> = v.iter().map(|x| x.message.as_str()).collect();
                assert_eq!(
                    msgs,
                    vec!["duplicate id", "scenario mismatch: expected debate"]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interview_thresholds_warn() {
        let line = r#"{"id":"i1","scenario":"interview","content":"SPEAKER_00: short\nSPEAKER_01: Wow. Did you know him well or no?","ground_truth":"No."}"#;
        let (recs, warnings) = parse(line, Scenario::Interview).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(warnings.len(), 3);
    }

    #[test]
    fn scenario_of_inverts_mapping() {
        assert_eq!(
            scenario_of(TemplateId::InstrDebate).unwrap(),
            Scenario::Debate
        );
        assert_eq!(
            scenario_of(TemplateId::InstrInterview).unwrap(),
            Scenario::Interview
        );
        assert!(matches!(
            scenario_of(TemplateId::AnalysisFreeForm),
            Err(DatasetError::UnknownTemplate(TemplateId::AnalysisFreeForm))
        ));
        for s in Scenario::ALL {
            assert_eq!(scenario_of(instruction_template(s)).unwrap(), s);
        }
    }

    #[test]
    fn default_personas_are_second_person() {
        for s in Scenario::ALL {
            assert!(
                ScenarioSpec::for_scenario(s)
                    .default_persona
                    .text
                    .has_prefix(),
                "{s}"
            );
        }
    }

    fn arb_line() -> impl Strategy<Value = (String, String, Option<String>)> {
        (
            "[a-z ]{1,20}[a-z]",
            "[A-Za-z .,!]{0,30}[a-z]",
            prop::option::of("You are [a-z ]{1,20}[a-z]"),
        )
    }

    proptest! {
        #[test]
        fn round_trip_is_fixed_point(lines in prop::collection::vec(arb_line(), 1..6), sc in 0usize..5) {
            let scenario = Scenario::ALL[sc];
            let mut text = String::new();
            for (i, (content, gt, persona)) in lines.iter().enumerate() {
                let raw = RawTaskRecord {
                    id: Some(format!("r{i}")),
                    scenario: Some(scenario.as_str().into()),
                    content: Some(content.clone()),
                    ground_truth: Some(gt.clone()),
                    initial_persona: persona.clone(),
                };
                text.push_str(&serde_json::to_string(&raw).unwrap());
                text.push('\n');
            }
            let (first, _) = parse(&text, scenario).unwrap();
            let mut buf = Vec::new();
            write_records(&mut buf, &first).unwrap();
            let (second, _) = parse(std::str::from_utf8(&buf).unwrap(), scenario).unwrap();
            prop_assert_eq!(&first, &second);

            let reg = PromptRegistry::builtin();
            for r in &first {
                let b = bindings([("persona", r.initial_persona.text.as_str()), ("content", r.content.as_str())]);
                prop_assert!(reg.render(instruction_template(r.scenario), &b).is_ok());
            }
        }
    }
}
