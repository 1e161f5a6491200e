//! C ABI over the persona-refinery engine.
//!
//! Every fallible function returns a [`PrStatus`]; on failure a message is
//! available from [`pr_last_error`] on the same thread. Strings returned
//! through out-parameters are owned by the caller and must be released with
//! [`pr_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use persona_refinery::metrics::{bertscore_f1, cosine, rouge_l_f1, tokenize};
use persona_refinery::prompts::{Bindings, PromptRegistry, TemplateId, TemplateSet};
use persona_refinery::runner::{
    self, aggregate, export_report, ExportFormat, RunError, RunManifest,
};
use persona_refinery::simworld::{scripted_chat, SyntheticTarget};
use persona_refinery::types::{normalize_persona, MetricKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    PromptError = 4,
    MetricError = 5,
    RunError = 6,
    JournalMismatch = 7,
    ReportError = 8,
    SimError = 9,
    Panic = 10,
}

/// Prompt templates, verbatim or corrected.
pub struct PrPromptRegistry {
    inner: PromptRegistry,
}

/// A synthetic target that answers agent prompts.
pub struct PrSimWorld {
    target: SyntheticTarget,
    registry: PromptRegistry,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(PrStatus, String);

impl Fail {
    fn new(status: PrStatus, msg: impl ToString) -> Self {
        Fail(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(PrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(PrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::new(PrStatus::NullArgument, "output pointer is null"));
    }
    let c = CString::new(s)
        .map_err(|_| Fail::new(PrStatus::InvalidArgument, "result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn put_f64(out: *mut f64, v: f64) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::new(PrStatus::NullArgument, "output pointer is null"));
    }
    *out = v;
    Ok(())
}

unsafe fn vectors(
    p: *const f64,
    count: usize,
    dim: usize,
    what: &str,
) -> Result<Vec<Vec<f64>>, Fail> {
    if p.is_null() {
        return Err(Fail::new(PrStatus::NullArgument, format!("{what} is null")));
    }
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Fail::new(PrStatus::InvalidArgument, "vector size overflows"))?;
    let flat = std::slice::from_raw_parts(p, total);
    Ok(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

/// Message for the last failed call on this thread, or NULL. Free with
/// `pr_string_free`.
#[no_mangle]
pub extern "C" fn pr_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |s| s.clone().into_raw())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Returns NULL on failure.
#[no_mangle]
pub extern "C" fn pr_registry_new(corrected: bool) -> *mut PrPromptRegistry {
    let set = if corrected {
        TemplateSet::Corrected
    } else {
        TemplateSet::Verbatim
    };
    catch_unwind(|| {
        Box::into_raw(Box::new(PrPromptRegistry {
            inner: PromptRegistry::with_set(set),
        }))
    })
    .unwrap_or(ptr::null_mut())
}

/// # Safety
/// `registry` must be NULL or come from `pr_registry_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn pr_registry_free(registry: *mut PrPromptRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Renders `template_id` with a JSON object of bindings.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_registry_render(
    registry: *const PrPromptRegistry,
    template_id: *const c_char,
    bindings_json: *const c_char,
    out: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let reg = registry
            .as_ref()
            .ok_or_else(|| Fail::new(PrStatus::NullArgument, "registry is null"))?;
        let id: TemplateId = text(template_id, "template_id")?
            .parse()
            .map_err(|e| Fail::new(PrStatus::PromptError, e))?;
        let bindings: Bindings = serde_json::from_str(text(bindings_json, "bindings_json")?)
            .map_err(|e| Fail::new(PrStatus::InvalidArgument, e))?;
        let rendered = reg
            .inner
            .render(id, &bindings)
            .map_err(|e| Fail::new(PrStatus::PromptError, e))?;
        put_string(out, rendered)
    })
}

/// SHA-256 hex of a template body.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_registry_checksum(
    registry: *const PrPromptRegistry,
    template_id: *const c_char,
    out: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let reg = registry
            .as_ref()
            .ok_or_else(|| Fail::new(PrStatus::NullArgument, "registry is null"))?;
        let id: TemplateId = text(template_id, "template_id")?
            .parse()
            .map_err(|e| Fail::new(PrStatus::PromptError, e))?;
        put_string(out, reg.inner.get(id).checksum())
    })
}

/// # Safety
/// Pointers must be valid; `raw` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_normalize_persona(
    raw: *const c_char,
    out: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let p = normalize_persona(text(raw, "raw")?)
            .map_err(|e| Fail::new(PrStatus::InvalidArgument, e))?;
        put_string(out, p.into_string())
    })
}

/// ROUGE-L F1 of two texts after tokenization.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_rouge_l_f1(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> PrStatus {
    guard(|| {
        let c = tokenize(text(candidate, "candidate")?);
        let r = tokenize(text(reference, "reference")?);
        put_f64(out, rouge_l_f1(&c, &r).f1)
    })
}

/// # Safety
/// `u` and `v` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_cosine(
    u: *const f64,
    v: *const f64,
    len: usize,
    out: *mut f64,
) -> PrStatus {
    guard(|| {
        let u = vectors(u, 1, len, "u")?;
        let v = vectors(v, 1, len, "v")?;
        let c = cosine(&u[0], &v[0]).map_err(|e| Fail::new(PrStatus::MetricError, e))?;
        put_f64(out, c)
    })
}

/// BERTScore F1 of row-major token matrices (`n × dim`).
///
/// # Safety
/// `candidate` must point to `n_candidate * dim` doubles and `reference` to
/// `n_reference * dim`.
#[no_mangle]
pub unsafe extern "C" fn pr_bertscore_f1(
    candidate: *const f64,
    n_candidate: usize,
    reference: *const f64,
    n_reference: usize,
    dim: usize,
    out: *mut f64,
) -> PrStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail::new(PrStatus::InvalidArgument, "dim must be positive"));
        }
        let c = vectors(candidate, n_candidate, dim, "candidate")?;
        let r = vectors(reference, n_reference, dim, "reference")?;
        let s = bertscore_f1(&c, &r).map_err(|e| Fail::new(PrStatus::MetricError, e))?;
        put_f64(out, s.f1)
    })
}

/// Builds a synthetic target from JSON such as
/// `{"hidden_attrs":["a","b"],"release_rate":2,"seed":0}`.
///
/// # Safety
/// Pointers must be valid; `target_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_simworld_new(
    target_json: *const c_char,
    out: *mut *mut PrSimWorld,
) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::new(PrStatus::NullArgument, "output pointer is null"));
        }
        let target: SyntheticTarget = serde_json::from_str(text(target_json, "target_json")?)
            .map_err(|e| Fail::new(PrStatus::InvalidArgument, e))?;
        target
            .validate()
            .map_err(|e| Fail::new(PrStatus::SimError, e))?;
        *out = Box::into_raw(Box::new(PrSimWorld {
            target,
            registry: PromptRegistry::builtin(),
        }));
        Ok(())
    })
}

/// # Safety
/// `sim` must be NULL or come from `pr_simworld_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn pr_simworld_free(sim: *mut PrSimWorld) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// The target's ground-truth behavior.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pr_simworld_ground_truth(
    sim: *const PrSimWorld,
    out: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let sim = sim
            .as_ref()
            .ok_or_else(|| Fail::new(PrStatus::NullArgument, "sim is null"))?;
        put_string(out, sim.target.ground_truth())
    })
}

/// Answers one rendered agent prompt as the scripted target would.
///
/// # Safety
/// Pointers must be valid; `prompt` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_simworld_chat(
    sim: *const PrSimWorld,
    prompt: *const c_char,
    out: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let sim = sim
            .as_ref()
            .ok_or_else(|| Fail::new(PrStatus::NullArgument, "sim is null"))?;
        let reply = scripted_chat(
            text(prompt, "prompt")?,
            sim.target.release_rate,
            &sim.registry,
        )
        .map_err(|e| Fail::new(PrStatus::SimError, e))?;
        put_string(out, reply)
    })
}

/// Runs (or resumes) the manifest at `manifest_path`. On success
/// `summary_json` (may be NULL) receives a JSON run summary.
///
/// # Safety
/// Pointers must be valid; `manifest_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_run_manifest(
    manifest_path: *const c_char,
    resume: bool,
    summary_json: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let manifest = RunManifest::load(Path::new(text(manifest_path, "manifest_path")?))
            .map_err(|e| Fail::new(PrStatus::RunError, e))?;
        let result = if resume {
            runner::resume_run(&manifest)
        } else {
            runner::execute_run(&manifest)
        };
        let summary = result.map_err(|e| match e {
            RunError::JournalMismatch { .. } => Fail::new(PrStatus::JournalMismatch, e),
            other => Fail::new(PrStatus::RunError, other),
        })?;
        if summary_json.is_null() {
            return Ok(());
        }
        let reasons: serde_json::Map<String, serde_json::Value> = summary
            .stop_reasons
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), (*v).into()))
            .collect();
        let json = serde_json::json!({
            "run_id": summary.run_id,
            "records_total": summary.records_total,
            "completed": summary.completed,
            "failed": summary.failed,
            "already_done": summary.already_done,
            "entries_written": summary.entries_written,
            "stop_reasons": reasons,
        });
        put_string(summary_json, json.to_string())
    })
}

/// Aggregates one journal and writes curve and comparison TSV files into
/// `out_dir`. `report_json` (may be NULL) receives the report as JSON.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pr_aggregate(
    journal_path: *const c_char,
    out_dir: *const c_char,
    report_json: *mut *mut c_char,
) -> PrStatus {
    guard(|| {
        let journal = Path::new(text(journal_path, "journal_path")?);
        let out = Path::new(text(out_dir, "out_dir")?);
        let report = aggregate(journal, &MetricKind::ALL)
            .map_err(|e| Fail::new(PrStatus::ReportError, e))?;
        export_report(std::slice::from_ref(&report), out, ExportFormat::Tsv)
            .map_err(|e| Fail::new(PrStatus::ReportError, e))?;
        if report_json.is_null() {
            return Ok(());
        }
        put_string(
            report_json,
            serde_json::to_string(&report).map_err(|e| Fail::new(PrStatus::ReportError, e))?,
        )
    })
}
