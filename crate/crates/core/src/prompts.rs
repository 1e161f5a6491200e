//! Prompt templates for the three agents.
//!
//! Templates are plain UTF-8 files (`templates/<id>.txt`) with brace-wrapped
//! placeholders such as `{persona}`. Rendering is single-pass substitution;
//! every other byte of the template is emitted unchanged, including the
//! original wording's typos. [`TemplateSet::Corrected`] applies a documented
//! list of fixes on top for users who want them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::digest_hex;

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    AnalysisFreeForm,
    AnalysisStructured,
    AnalysisNoPersona,
    RefinePersona,
    InstrDebate,
    InstrDepression,
    InstrSuicide,
    InstrInterview,
    InstrMovie,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::AnalysisFreeForm,
        TemplateId::AnalysisStructured,
        TemplateId::AnalysisNoPersona,
        TemplateId::RefinePersona,
        TemplateId::InstrDebate,
        TemplateId::InstrDepression,
        TemplateId::InstrSuicide,
        TemplateId::InstrInterview,
        TemplateId::InstrMovie,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::AnalysisFreeForm => "analysis_free_form",
            TemplateId::AnalysisStructured => "analysis_structured",
            TemplateId::AnalysisNoPersona => "analysis_no_persona",
            TemplateId::RefinePersona => "refine_persona",
            TemplateId::InstrDebate => "instr_debate",
            TemplateId::InstrDepression => "instr_depression",
            TemplateId::InstrSuicide => "instr_suicide",
            TemplateId::InstrInterview => "instr_interview",
            TemplateId::InstrMovie => "instr_movie",
        }
    }

    pub fn is_instruction(self) -> bool {
        matches!(
            self,
            TemplateId::InstrDebate
                | TemplateId::InstrDepression
                | TemplateId::InstrSuicide
                | TemplateId::InstrInterview
                | TemplateId::InstrMovie
        )
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::AnalysisFreeForm => include_str!("../templates/analysis_free_form.txt"),
            TemplateId::AnalysisStructured => include_str!("../templates/analysis_structured.txt"),
            TemplateId::AnalysisNoPersona => include_str!("../templates/analysis_no_persona.txt"),
            TemplateId::RefinePersona => include_str!("../templates/refine_persona.txt"),
            TemplateId::InstrDebate => include_str!("../templates/instr_debate.txt"),
            TemplateId::InstrDepression => include_str!("../templates/instr_depression.txt"),
            TemplateId::InstrSuicide => include_str!("../templates/instr_suicide.txt"),
            TemplateId::InstrInterview => include_str!("../templates/instr_interview.txt"),
            TemplateId::InstrMovie => include_str!("../templates/instr_movie.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing binding for {{{0}}}")]
    MissingBinding(String),
    #[error("binding {0:?} is not a placeholder of this template")]
    UnknownBinding(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    #[default]
    Verbatim,
    Corrected,
}

/// `(template, wrong, right)` fixes applied by [`TemplateSet::Corrected`].
pub const CORRECTIONS: &[(TemplateId, &str, &str)] = &[
    (
        TemplateId::AnalysisStructured,
        "BACKGROUND INFORMATION\n",
        "BACKGROUND INFORMATION:\n",
    ),
    (
        TemplateId::AnalysisStructured,
        "may leads to",
        "may lead to",
    ),
    (TemplateId::AnalysisNoPersona, "may leads to", "may lead to"),
    (
        TemplateId::AnalysisStructured,
        "immediate outcomes long-term",
        "immediate outcomes to long-term",
    ),
    (
        TemplateId::AnalysisNoPersona,
        "immediate outcomes long-term",
        "immediate outcomes to long-term",
    ),
    (TemplateId::InstrSuicide, "- sever Risk:", "- Severe Risk:"),
    (
        TemplateId::InstrSuicide,
        "no other things.Do not",
        "no other things. Do not",
    ),
    (
        TemplateId::InstrSuicide,
        "consist solely of the refined persona text.",
        "consist solely of the generated post.",
    ),
    (
        TemplateId::InstrDepression,
        "severity,your post",
        "severity, your post",
    ),
    (
        TemplateId::InstrInterview,
        "You are as an interviewee",
        "You are an interviewee",
    ),
    (
        TemplateId::InstrMovie,
        "with following persona",
        "with the following persona",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

fn parse(body: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            lit.push_str(&rest[..open]);
            if !lit.is_empty() {
                out.push(Segment::Literal(std::mem::take(&mut lit)));
            }
            out.push(Segment::Placeholder(after[..name_len].to_string()));
            rest = &after[name_len + 1..];
        } else {
            lit.push_str(&rest[..=open]);
            rest = after;
        }
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse(&body);
        Self { id, body, segments }
    }

    pub fn required_bindings(&self) -> BTreeSet<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.clone()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        digest_hex(self.body.as_bytes())
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, PromptError> {
        let required = self.required_bindings();
        // Report in order of first appearance in the body.
        if let Some(missing) = self.segments.iter().find_map(|s| match s {
            Segment::Placeholder(p) if !bindings.contains_key(p) => Some(p.clone()),
            _ => None,
        }) {
            return Err(PromptError::MissingBinding(missing));
        }
        if let Some(extra) = bindings.keys().find(|k| !required.contains(*k)) {
            return Err(PromptError::UnknownBinding(extra.clone()));
        }
        let mut out = String::with_capacity(
            self.body.len() + bindings.values().map(String::len).sum::<usize>(),
        );
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(p) => out.push_str(&bindings[p]),
            }
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render): recovers the bindings from a
    /// rendered prompt, or `None` if `text` was not produced by this
    /// template. Each value extends to the first occurrence of the literal
    /// that follows it.
    pub fn match_rendered(&self, text: &str) -> Option<Bindings> {
        let mut bindings = Bindings::new();
        let mut rest = text;
        let mut pending: Option<&str> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Literal(l) => {
                    let is_last = i + 1 == self.segments.len();
                    let at = match pending {
                        None if rest.starts_with(l.as_str()) => 0,
                        None => return None,
                        Some(_) if is_last => {
                            if !rest.ends_with(l.as_str()) {
                                return None;
                            }
                            rest.len() - l.len()
                        }
                        Some(_) => rest.find(l.as_str())?,
                    };
                    if let Some(name) = pending.take() {
                        let value = &rest[..at];
                        if let Some(prev) = bindings.get(name) {
                            if prev != value {
                                return None;
                            }
                        }
                        bindings.insert(name.to_string(), value.to_string());
                    }
                    rest = &rest[at + l.len()..];
                }
                Segment::Placeholder(p) => {
                    if pending.is_some() {
                        return None;
                    }
                    pending = Some(p);
                }
            }
        }
        match pending {
            Some(name) => {
                bindings.insert(name.to_string(), rest.to_string());
            }
            None if !rest.is_empty() => return None,
            None => {}
        }
        Some(bindings)
    }
}

/// All nine templates, immutable once loaded.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl PromptRegistry {
    /// Templates compiled into the binary.
    pub fn builtin() -> Self {
        Self::from_bodies(|id| id.builtin_body().to_string())
    }

    pub fn with_set(set: TemplateSet) -> Self {
        match set {
            TemplateSet::Verbatim => Self::builtin(),
            TemplateSet::Corrected => Self::from_bodies(|id| {
                CORRECTIONS
                    .iter()
                    .filter(|(t, _, _)| *t == id)
                    .fold(id.builtin_body().to_string(), |body, (_, wrong, right)| {
                        body.replace(wrong, right)
                    })
            }),
        }
    }

    /// Loads `<dir>/<id>.txt` for every template id.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            let body = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            templates.insert(id, PromptTemplate::new(id, body));
        }
        Ok(Self { templates })
    }

    fn from_bodies(body: impl Fn(TemplateId) -> String) -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| (id, PromptTemplate::new(id, body(id))))
            .collect();
        Self { templates }
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<String, PromptError> {
        self.get(id).render(bindings)
    }

    pub fn placeholder_inventory(&self, id: &str) -> Result<BTreeSet<String>, PromptError> {
        Ok(self.get(id.parse()?).required_bindings())
    }

    pub fn checksums(&self) -> BTreeMap<TemplateId, String> {
        self.templates
            .iter()
            .map(|(id, t)| (*id, t.checksum()))
            .collect()
    }
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Builds a [`Bindings`] map from string pairs.
pub fn bindings<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Bindings {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn checksums_pinned() {
        let expected = [
            (
                TemplateId::AnalysisFreeForm,
                "3f56965afeebfecf431563aa84827be76cb50dc7168dbbe1bebc0a44dc82fc24",
            ),
            (
                TemplateId::AnalysisStructured,
                "490296bc900918fff7426f31c8dd742e3e0f070fc984886123d2bafcff557cfd",
            ),
            (
                TemplateId::AnalysisNoPersona,
                "82cddad8930e39d098fc71bc3d0d89915b263b0b7f17b107112c38f324dd8a4d",
            ),
            (
                TemplateId::RefinePersona,
                "99ff64e63215eb534125d53b92cfc39e83e32429e1ada79ea5ac9c1d3abe5394",
            ),
            (
                TemplateId::InstrDebate,
                "eb7eb2a44015d05c0ab5bca1bcfa6cbbd196f0092f0e9b549ed3639d11aad643",
            ),
            (
                TemplateId::InstrDepression,
                "9a965ceb90d51ae7d3785e8d53c2b0a67d14bb4295dc0dd68325cc34d128c143",
            ),
            (
                TemplateId::InstrSuicide,
                "f77af82d3d638961b6708ab6ffe4d8b8b2b5136bf359ebf2538be27ad4f81a4e",
            ),
            (
                TemplateId::InstrInterview,
                "9e839fec5c72ec0fb2642cb455a5606d9bca6872595291b3c451c7c39b45afe6",
            ),
            (
                TemplateId::InstrMovie,
                "7e4b0bdcd5e7d011f4e063b4f0563f037c5554fe4ba14a932dfa386bc61dbbca",
            ),
        ];
        let reg = PromptRegistry::builtin();
        for (id, sum) in expected {
            assert_eq!(reg.get(id).checksum(), sum, "{id}");
        }
    }

    #[test]
    fn inventories() {
        let reg = PromptRegistry::builtin();
        let analysis = set(&["persona", "content", "generated_response", "ground_truth"]);
        assert_eq!(
            reg.placeholder_inventory("analysis_free_form").unwrap(),
            analysis
        );
        assert_eq!(
            reg.placeholder_inventory("analysis_structured").unwrap(),
            analysis
        );
        assert_eq!(
            reg.placeholder_inventory("analysis_no_persona").unwrap(),
            set(&["content", "generated_response", "ground_truth"])
        );
        assert_eq!(
            reg.placeholder_inventory("refine_persona").unwrap(),
            set(&["persona", "analysis"])
        );
        for id in TemplateId::ALL.into_iter().filter(|t| t.is_instruction()) {
            assert_eq!(
                reg.get(id).required_bindings(),
                set(&["persona", "content"]),
                "{id}"
            );
        }
        assert!(matches!(
            reg.placeholder_inventory("haiku"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn refine_render_contains_format_rule() {
        let out = PromptRegistry::builtin()
            .render(
                TemplateId::RefinePersona,
                &bindings([("persona", "You are X."), ("analysis", "1. Add Y.")]),
            )
            .unwrap();
        assert!(out.contains(
            "\nTHE REFINED PERSONA SHOULD START WITH \"You are\" AND BE WRITTEN IN SECOND-PERSON PERSPECTIVE.\n"
        ));
        assert!(out.contains("CURRENT PERSONA:\nYou are X.\n\nEXPERT ANALYSIS:\n1. Add Y.\n"));
    }

    #[test]
    fn structured_render_lists_dimensions() {
        let b = bindings([
            ("persona", "P"),
            ("content", "C"),
            ("generated_response", "G"),
            ("ground_truth", "T"),
        ]);
        let out = PromptRegistry::builtin()
            .render(TemplateId::AnalysisStructured, &b)
            .unwrap();
        assert!(out.contains("five internal mental states"));
        for (i, dim) in ["Beliefs", "Goals", "Intentions", "Emotions", "Knowledge"]
            .iter()
            .enumerate()
        {
            assert!(out.contains(&format!("\n{}. {dim}:", i + 1)), "{dim}");
        }
        assert!(out.contains("may leads to"));
    }

    #[test]
    fn missing_and_unknown_bindings() {
        let reg = PromptRegistry::builtin();
        match reg.render(TemplateId::AnalysisFreeForm, &Bindings::new()) {
            Err(PromptError::MissingBinding(p)) => assert_eq!(p, "persona"),
            other => panic!("{other:?}"),
        }
        let b = bindings([
            ("persona", "P"),
            ("generated_response", "G"),
            ("ground_truth", "T"),
        ]);
        match reg.render(TemplateId::AnalysisFreeForm, &b) {
            Err(PromptError::MissingBinding(p)) => assert_eq!(p, "content"),
            other => panic!("{other:?}"),
        }
        let b = bindings([("persona", "P"), ("content", "C"), ("extra", "E")]);
        assert!(
            matches!(reg.render(TemplateId::InstrDebate, &b), Err(PromptError::UnknownBinding(e)) if e == "extra")
        );
    }

    #[test]
    fn no_persona_template_has_no_persona_section() {
        let t = PromptRegistry::builtin();
        let body = &t.get(TemplateId::AnalysisNoPersona).body;
        assert!(!body.contains("PERSONA:"));
        assert!(!body.contains("{persona}"));
    }

    #[test]
    fn typos_preserved_and_corrected_set_fixes_them() {
        let verbatim = PromptRegistry::builtin();
        assert!(verbatim
            .get(TemplateId::InstrSuicide)
            .body
            .contains("- sever Risk:"));
        let fixed = PromptRegistry::with_set(TemplateSet::Corrected);
        for (id, wrong, right) in CORRECTIONS {
            assert!(verbatim.get(*id).body.contains(wrong), "{id}: {wrong}");
            assert!(!fixed.get(*id).body.contains(wrong), "{id}: {wrong}");
            assert!(fixed.get(*id).body.contains(right), "{id}: {right}");
            assert_eq!(
                fixed.get(*id).required_bindings(),
                verbatim.get(*id).required_bindings()
            );
        }
    }

    #[test]
    fn literal_braces_are_not_placeholders() {
        let t = PromptTemplate::new(TemplateId::InstrDebate, "a {b} {Not} {} {c_d} {");
        assert_eq!(t.required_bindings(), set(&["b", "c_d"]));
        let out = t.render(&bindings([("b", "1"), ("c_d", "2")])).unwrap();
        assert_eq!(out, "a 1 {Not} {} 2 {");
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = PromptRegistry::builtin();
        let out = t
            .render(
                TemplateId::InstrDebate,
                &bindings([("persona", "{content}"), ("content", "C")]),
            )
            .unwrap();
        assert!(out.contains("persona:\n\n{content}\n\n"));
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let loaded = PromptRegistry::load_dir(&dir).unwrap();
        assert_eq!(loaded.checksums(), PromptRegistry::builtin().checksums());
    }

    fn occurrences(body: &str, name: &str) -> usize {
        body.matches(&format!("{{{name}}}")).count()
    }

    proptest! {
        #[test]
        fn sentinels_recovered(idx in 0usize..9, salt in "[A-Z]{6}") {
            let reg = PromptRegistry::builtin();
            let tpl = reg.get(TemplateId::ALL[idx]);
            let b: Bindings = tpl
                .required_bindings()
                .into_iter()
                .map(|n| { let v = format!("<<{salt}:{n}>>"); (n, v) })
                .collect();
            let out = tpl.render(&b).unwrap();
            for (name, sentinel) in &b {
                prop_assert_eq!(out.matches(sentinel.as_str()).count(), occurrences(&tpl.body, name));
            }
            prop_assert_eq!(tpl.match_rendered(&out), Some(b));
        }

        #[test]
        fn empty_bindings_shrink_by_placeholder_lengths(idx in 0usize..9) {
            let reg = PromptRegistry::builtin();
            let tpl = reg.get(TemplateId::ALL[idx]);
            let names = tpl.required_bindings();
            let b: Bindings = names.iter().map(|n| (n.clone(), String::new())).collect();
            let removed: usize = names.iter().map(|n| occurrences(&tpl.body, n) * (n.len() + 2)).sum();
            prop_assert_eq!(tpl.render(&b).unwrap().len(), tpl.body.len() - removed);
        }
    }
}
