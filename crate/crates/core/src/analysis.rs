//! Parsing model output and running per-case analyses.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::Backend;
use crate::dataset::SnapshotCase;
use crate::prompting::{self, DEFAULT_MAX_RETRIES, DEFAULT_TEMPERATURE};
use crate::taxonomy::{parse_category_set, CategorySet, TaxonomyError};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("schema error in field {field:?}: {reason}")]
    SchemaError { field: String, reason: String },
    #[error(transparent)]
    InvalidCategory(#[from] TaxonomyError),
}

impl AnalysisError {
    fn schema(field: &str, reason: impl Into<String>) -> Self {
        AnalysisError::SchemaError {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub categories: CategorySet,
    pub pixel_difference: f64,
    pub semantic_difference: f64,
    pub affected_elements: Vec<String>,
    pub explanation: String,
    #[serde(default)]
    pub parse_warnings: Vec<String>,
}

/// Drops Markdown fence lines so fenced and bare objects scan the same way.
fn strip_fences(raw: &str) -> String {
    raw.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// End index (exclusive) of the balanced object starting at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Returns the first balanced JSON object in `raw`.
pub fn extract_json(raw: &str) -> Result<String, AnalysisError> {
    let text = strip_fences(raw);
    for (start, _) in text.match_indices('{') {
        if let Some(end) = balanced_end(&text, start) {
            let candidate = &text[start..end];
            if serde_json::from_str::<Value>(candidate).is_ok() {
                return Ok(candidate.to_string());
            }
        }
    }
    Err(AnalysisError::NoJsonFound)
}

fn score(object: &Map<String, Value>, field: &str, warnings: &mut Vec<String>) -> Result<f64, AnalysisError> {
    let value = match object.get(field) {
        None | Some(Value::Null) => return Err(AnalysisError::schema(field, "missing")),
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| AnalysisError::schema(field, "not a finite number"))?,
        Some(Value::String(s)) => {
            let parsed: f64 = s
                .trim()
                .parse()
                .map_err(|_| AnalysisError::schema(field, format!("expected a number, got {s:?}")))?;
            if !parsed.is_finite() {
                return Err(AnalysisError::schema(field, "not a finite number"));
            }
            warnings.push(format!("{field} was given as a string"));
            parsed
        }
        Some(other) => return Err(AnalysisError::schema(field, format!("expected a number, got {other}"))),
    };
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        let clamped = value.clamp(0.0, 1.0);
        warnings.push(format!("{field} {value} clamped to {clamped}"));
        Ok(clamped)
    }
}

fn string_list<'a>(object: &'a Map<String, Value>, field: &str) -> Result<Option<Vec<&'a str>>, AnalysisError> {
    match object.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                item.as_str()
                    .ok_or_else(|| AnalysisError::schema(&format!("{field}[{i}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(AnalysisError::schema(field, "expected a list of strings")),
    }
}

/// Extracts and validates an analysis object from raw model output.
pub fn parse_analysis(raw: &str) -> Result<AnalysisResult, AnalysisError> {
    let json = extract_json(raw)?;
    let value: Value = serde_json::from_str(&json).map_err(|_| AnalysisError::NoJsonFound)?;
    let object = value.as_object().ok_or(AnalysisError::NoJsonFound)?;
    let mut warnings = Vec::new();

    let names = string_list(object, "categories")?.ok_or_else(|| AnalysisError::schema("categories", "missing"))?;
    let categories = parse_category_set(&names)?;

    let explanation = match object.get("explanation") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(AnalysisError::schema("explanation", "empty")),
        None | Some(Value::Null) => return Err(AnalysisError::schema("explanation", "missing")),
        Some(_) => return Err(AnalysisError::schema("explanation", "expected a string")),
    };

    let pixel_difference = score(object, "pixel_difference", &mut warnings)?;
    let semantic_difference = score(object, "semantic_difference", &mut warnings)?;

    let affected_elements = match string_list(object, "affected_elements")? {
        Some(items) => {
            let kept: Vec<String> = items
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.to_string())
                .collect();
            if kept.len() != items.len() {
                warnings.push("empty affected_elements entries dropped".into());
            }
            kept
        }
        None => {
            warnings.push("affected_elements missing; using an empty list".into());
            Vec::new()
        }
    };

    Ok(AnalysisResult {
        categories,
        pixel_difference,
        semantic_difference,
        affected_elements,
        explanation,
        parse_warnings: warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    /// Prompt rendering or request assembly.
    Request,
    Backend,
    Parse,
    /// Skipped because an earlier pass produced nothing to act on.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFailure {
    pub stage: FailureStage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Analyzed(AnalysisResult),
    Failed(AnalysisFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnalysis {
    pub case_id: String,
    pub outcome: Outcome,
    /// Pixel difference score computed from the images; absent only when
    /// the images cannot be loaded.
    pub computed_pixel_diff: Option<f64>,
    pub pixel_diff_error: Option<f64>,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ignore_reason: Option<String>,
    pub prompt_hash: Option<String>,
    /// Last raw backend text, kept for failed parses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl CaseAnalysis {
    pub fn result(&self) -> Option<&AnalysisResult> {
        match &self.outcome {
            Outcome::Analyzed(result) => Some(result),
            Outcome::Failed(_) => None,
        }
    }

    pub fn is_analyzed(&self) -> bool {
        self.result().is_some()
    }

    /// Record for a case that was not sent to the backend.
    pub fn skipped(case: &SnapshotCase, reason: impl Into<String>) -> Self {
        let computed = case.pixel_diff().ok();
        Self {
            case_id: case.id.clone(),
            outcome: Outcome::Failed(AnalysisFailure {
                stage: FailureStage::Skipped,
                message: reason.into(),
            }),
            computed_pixel_diff: computed,
            pixel_diff_error: None,
            attempts: 0,
            ignore_reason: None,
            prompt_hash: None,
            raw_response: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub model_name: String,
    pub temperature: f64,
    /// Total backend calls allowed when responses fail to parse.
    pub max_attempts: u32,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            model_name: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_attempts: 1 + DEFAULT_MAX_RETRIES,
        }
    }
}

/// Analyzes one case. Failures are captured in the returned record.
pub fn analyze_case(
    case: &SnapshotCase,
    core_prompt: &str,
    backend: &Backend,
    ignore_reason: Option<&str>,
    options: &AnalyzeOptions,
) -> CaseAnalysis {
    let computed = case.pixel_diff().ok();
    let mut record = CaseAnalysis {
        case_id: case.id.clone(),
        outcome: Outcome::Failed(AnalysisFailure {
            stage: FailureStage::Request,
            message: String::new(),
        }),
        computed_pixel_diff: computed,
        pixel_diff_error: None,
        attempts: 0,
        ignore_reason: ignore_reason.map(str::to_string),
        prompt_hash: None,
        raw_response: None,
    };
    let fail = |record: &mut CaseAnalysis, stage, message: String| {
        record.outcome = Outcome::Failed(AnalysisFailure { stage, message });
    };

    let prompt = match ignore_reason {
        Some(reason) => match prompting::render_ignore_prompt(core_prompt, reason) {
            Ok(p) => p,
            Err(e) => {
                fail(&mut record, FailureStage::Request, e.to_string());
                return record;
            }
        },
        None => core_prompt.to_string(),
    };
    let mut request = match prompting::build_request(case, &prompt, &options.model_name, options.temperature) {
        Ok(r) => r,
        Err(e) => {
            fail(&mut record, FailureStage::Request, e.to_string());
            return record;
        }
    };
    request.max_retries = options.max_attempts.saturating_sub(1);
    record.prompt_hash = Some(request.prompt_hash());

    for attempt in 1..=options.max_attempts.max(1) {
        record.attempts = attempt;
        let response = match backend.analyze(&request) {
            Ok(r) => r,
            Err(e) => {
                fail(&mut record, FailureStage::Backend, e.to_string());
                return record;
            }
        };
        match parse_analysis(&response.text) {
            Ok(result) => {
                record.pixel_diff_error = computed.map(|c| (result.pixel_difference - c).abs());
                record.outcome = Outcome::Analyzed(result);
                record.raw_response = None;
                return record;
            }
            Err(e) => {
                log::warn!("case {}: attempt {attempt}: {e}", case.id);
                fail(&mut record, FailureStage::Parse, e.to_string());
                record.raw_response = Some(response.text);
            }
        }
    }
    record
}

/// Runs `task` over `cases` on up to `concurrency` threads and returns the
/// results ordered by case id.
pub fn run_batch<F>(cases: &[SnapshotCase], concurrency: usize, task: F) -> Vec<CaseAnalysis>
where
    F: Fn(&SnapshotCase) -> CaseAnalysis + Sync,
{
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(cases.len()));
    std::thread::scope(|scope| {
        for _ in 0..concurrency.clamp(1, cases.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(case) = cases.get(i) else { break };
                let analysis = task(case);
                results.lock().unwrap_or_else(|e| e.into_inner()).push(analysis);
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    results
}
