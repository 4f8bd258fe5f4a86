//! Classification metrics, ignore strategies, and report rendering.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{analyze_case, run_batch, AnalyzeOptions, CaseAnalysis, Outcome};
use crate::backend::{Backend, BackendKind};
use crate::dataset::{compute_stats, mean_std, DatasetError, DatasetManifest, DatasetStats, SnapshotCase};
use crate::taxonomy::{Category, CategorySet};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no analyzed cases to aggregate")]
    NoAnalyzedCases,
    #[error("case {case_id:?} has no ignored category")]
    MissingIgnoreDesignation { case_id: String },
    #[error("case {case_id:?} has no ignore designation; set `ignore` in the manifest")]
    IfgtDesignationMissing { case_id: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Default,
    /// Ignore the category found by a first analysis pass.
    Ifa,
    /// Ignore the category designated in the ground truth.
    Ifgt,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Default => "default",
            EvalMode::Ifa => "ifa",
            EvalMode::Ifgt => "ifgt",
        })
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(EvalMode::Default),
            "ifa" => Ok(EvalMode::Ifa),
            "ifgt" => Ok(EvalMode::Ifgt),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Set comparison of one prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetMatch {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub hit: bool,
    pub has_unknown: bool,
    pub label_count: usize,
}

/// Unknown categories never occur in ground truth, so they always land in
/// the false positives.
pub fn match_case(predicted: &CategorySet, ground_truth: &CategorySet) -> SetMatch {
    let tp = predicted.intersection_count(ground_truth);
    SetMatch {
        true_positives: tp,
        false_positives: predicted.len() - tp,
        false_negatives: ground_truth.len() - tp,
        hit: tp >= 1,
        has_unknown: predicted.has_unknown(),
        label_count: predicted.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMatch {
    pub case_id: String,
    pub predicted: CategorySet,
    pub ground_truth: CategorySet,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub hit: bool,
    pub has_unknown: bool,
    /// Size of the prediction before any ignore adjustment.
    pub label_count: usize,
    pub predicted_pixel_diff: f64,
    pub pixel_diff_error: f64,
    pub semantic_difference: f64,
    pub ignored_category: Option<Category>,
    pub complied: Option<bool>,
    /// Set when adjustment emptied the ground truth; such cases count toward
    /// precision only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded_from_recall: bool,
}

impl CaseMatch {
    pub fn new(case_id: impl Into<String>, predicted: CategorySet, ground_truth: CategorySet) -> Self {
        let m = match_case(&predicted, &ground_truth);
        Self {
            case_id: case_id.into(),
            predicted,
            ground_truth,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            false_negatives: m.false_negatives,
            hit: m.hit,
            has_unknown: m.has_unknown,
            label_count: m.label_count,
            predicted_pixel_diff: 0.0,
            pixel_diff_error: 0.0,
            semantic_difference: 0.0,
            ignored_category: None,
            complied: None,
            excluded_from_recall: false,
        }
    }

    pub fn with_ignored(mut self, category: Category) -> Self {
        self.complied = Some(!self.predicted.contains(&category));
        self.ignored_category = Some(category);
        self
    }

    /// Match for an analyzed case; `None` for failed analyses.
    pub fn from_analysis(case: &SnapshotCase, analysis: &CaseAnalysis, ignored: Option<&Category>) -> Option<Self> {
        let result = analysis.result()?;
        let mut m = Self::new(&case.id, result.categories.clone(), case.ground_truth.clone());
        m.predicted_pixel_diff = result.pixel_difference;
        m.pixel_diff_error = analysis.pixel_diff_error.unwrap_or(result.pixel_difference);
        m.semantic_difference = result.semantic_difference;
        Some(match ignored {
            Some(category) => m.with_ignored(category.clone()),
            None => m,
        })
    }

    /// Recomputes the match with the ignored category removed from both sides.
    pub fn adjusted(&self) -> Result<Self, EvalError> {
        let ignored = self
            .ignored_category
            .as_ref()
            .ok_or_else(|| EvalError::MissingIgnoreDesignation {
                case_id: self.case_id.clone(),
            })?;
        let predicted = self.predicted.without(ignored);
        let ground_truth = self.ground_truth.without(ignored);
        let m = match_case(&predicted, &ground_truth);
        Ok(Self {
            excluded_from_recall: ground_truth.is_empty(),
            predicted,
            ground_truth,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            false_negatives: m.false_negatives,
            hit: m.hit,
            has_unknown: m.has_unknown,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub hit_rate_pct: f64,
    pub recall_pct: f64,
    pub precision_pct: f64,
    pub f1_pct: f64,
    pub avg_labels_mean: f64,
    pub avg_labels_std: f64,
    pub unknown_rate_pct: f64,
    pub pixel_pred_mean: f64,
    pub pixel_pred_std: f64,
    pub pixel_error_mean: f64,
    pub pixel_error_std: f64,
    pub semantic_mean: f64,
    pub semantic_std: f64,
    pub ignore_compliance_pct: Option<f64>,
    pub analyzed_count: usize,
    pub failed_count: usize,
    pub hit_count: usize,
    /// Cases counted in the hit-rate and recall denominators.
    pub recall_case_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn pct(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Pools counts over all cases. Failed analyses are passed as a count and
/// stay out of every denominator.
pub fn aggregate(matches: &[CaseMatch], failed_count: usize) -> Result<MetricsSummary, EvalError> {
    if matches.is_empty() {
        return Err(EvalError::NoAnalyzedCases);
    }
    let scored: Vec<&CaseMatch> = matches.iter().filter(|m| !m.excluded_from_recall).collect();
    let tp: usize = matches.iter().map(|m| m.true_positives).sum();
    let fp: usize = matches.iter().map(|m| m.false_positives).sum();
    let fn_: usize = matches.iter().map(|m| m.false_negatives).sum();
    let hits = scored.iter().filter(|m| m.hit).count();
    let recall = pct(tp, tp + fn_);
    let precision = pct(tp, tp + fp);
    let column = |f: fn(&CaseMatch) -> f64| mean_std(&matches.iter().map(f).collect::<Vec<_>>());
    let (avg_labels_mean, avg_labels_std) = column(|m| m.label_count as f64);
    let (pixel_pred_mean, pixel_pred_std) = column(|m| m.predicted_pixel_diff);
    let (pixel_error_mean, pixel_error_std) = column(|m| m.pixel_diff_error);
    let (semantic_mean, semantic_std) = column(|m| m.semantic_difference);
    Ok(MetricsSummary {
        hit_rate_pct: pct(hits, scored.len()),
        recall_pct: recall,
        precision_pct: precision,
        f1_pct: f1(precision, recall),
        avg_labels_mean,
        avg_labels_std,
        unknown_rate_pct: pct(matches.iter().filter(|m| m.has_unknown).count(), matches.len()),
        pixel_pred_mean,
        pixel_pred_std,
        pixel_error_mean,
        pixel_error_std,
        semantic_mean,
        semantic_std,
        ignore_compliance_pct: None,
        analyzed_count: matches.len(),
        failed_count,
        hit_count: hits,
        recall_case_count: scored.len(),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

/// Percentage of cases whose prediction left out the ignored category.
pub fn ignore_compliance(matches: &[CaseMatch]) -> Result<f64, EvalError> {
    if matches.is_empty() {
        return Err(EvalError::NoAnalyzedCases);
    }
    let mut complied = 0;
    for m in matches {
        let ignored = m
            .ignored_category
            .as_ref()
            .ok_or_else(|| EvalError::MissingIgnoreDesignation {
                case_id: m.case_id.clone(),
            })?;
        if !m.predicted.contains(ignored) {
            complied += 1;
        }
    }
    Ok(pct(complied, matches.len()))
}

pub fn adjusted_matches(matches: &[CaseMatch]) -> Result<Vec<CaseMatch>, EvalError> {
    matches.iter().map(CaseMatch::adjusted).collect()
}

/// Metrics after removing each case's ignored category from both sets.
pub fn adjusted_metrics(matches: &[CaseMatch], failed_count: usize) -> Result<MetricsSummary, EvalError> {
    aggregate(&adjusted_matches(matches)?, failed_count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub mode: EvalMode,
    pub core_prompt: String,
    pub prompt_version: String,
    pub analyze: AnalyzeOptions,
    pub concurrency: usize,
    /// In IFGT mode, fall back to the first ground-truth label when a case has
    /// no designation.
    pub ignore_default_first: bool,
    pub timestamp: String,
    pub tool_version: String,
}

impl EvaluateOptions {
    pub fn new(core_prompt: impl Into<String>, prompt_version: impl Into<String>) -> Self {
        Self {
            mode: EvalMode::Default,
            core_prompt: core_prompt.into(),
            prompt_version: prompt_version.into(),
            analyze: AnalyzeOptions::default(),
            concurrency: 2,
            ignore_default_first: false,
            timestamp: String::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub ground_truth: CategorySet,
    pub ignored_category: Option<Category>,
    /// IFA only: the pass that chose the ignored category.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_pass: Option<CaseAnalysis>,
    pub analysis: CaseAnalysis,
    #[serde(rename = "match")]
    pub raw_match: Option<CaseMatch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_match: Option<CaseMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub report_version: u32,
    pub tool_version: String,
    pub timestamp: String,
    pub mode: EvalMode,
    pub backend: BackendKind,
    pub model_name: String,
    pub prompt_version: String,
    pub dataset_name: String,
    pub summary: MetricsSummary,
    /// Ignore modes only: metrics with the ignored category removed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_summary: Option<MetricsSummary>,
    pub dataset_stats: DatasetStats,
    pub per_case: Vec<CaseReport>,
}

fn ifgt_designation(case: &SnapshotCase, default_first: bool) -> Result<Category, EvalError> {
    case.ignore_designation
        .clone()
        .or_else(|| default_first.then(|| case.ground_truth.first().cloned()).flatten())
        .ok_or_else(|| EvalError::IfgtDesignationMissing {
            case_id: case.id.clone(),
        })
}

struct CaseRun {
    first_pass: Option<CaseAnalysis>,
    analysis: CaseAnalysis,
    ignored: Option<Category>,
}

fn run_case(case: &SnapshotCase, backend: &Backend, options: &EvaluateOptions) -> CaseRun {
    let analyze = |reason: Option<&str>| analyze_case(case, &options.core_prompt, backend, reason, &options.analyze);
    match options.mode {
        EvalMode::Default => CaseRun {
            first_pass: None,
            analysis: analyze(None),
            ignored: None,
        },
        EvalMode::Ifgt => {
            let ignored = ifgt_designation(case, options.ignore_default_first).expect("checked before analysis");
            CaseRun {
                first_pass: None,
                analysis: analyze(Some(&ignored.canonical_name())),
                ignored: Some(ignored),
            }
        }
        EvalMode::Ifa => {
            let first = analyze(None);
            let chosen = first.result().and_then(|r| r.categories.first().cloned());
            let analysis = match (&first.outcome, &chosen) {
                (_, Some(category)) => analyze(Some(&category.canonical_name())),
                (Outcome::Analyzed(_), None) => CaseAnalysis::skipped(case, "first pass predicted no categories"),
                (Outcome::Failed(failure), None) => {
                    CaseAnalysis::skipped(case, format!("first pass failed: {}", failure.message))
                }
            };
            CaseRun {
                first_pass: Some(first),
                analysis,
                ignored: chosen,
            }
        }
    }
}

/// Runs every case of `manifest` through `backend` and scores the results.
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    backend: &Backend,
    options: &EvaluateOptions,
) -> Result<EvaluationReport, EvalError> {
    if options.mode == EvalMode::Ifgt {
        for case in &manifest.cases {
            ifgt_designation(case, options.ignore_default_first)?;
        }
    }
    let dataset_stats = compute_stats(manifest)?;

    let runs = std::sync::Mutex::new(std::collections::BTreeMap::new());
    let analyses = run_batch(&manifest.cases, options.concurrency, |case| {
        let run = run_case(case, backend, options);
        let analysis = run.analysis.clone();
        runs.lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(case.id.clone(), run);
        analysis
    });
    let mut runs = runs.into_inner().unwrap_or_else(|e| e.into_inner());
    debug_assert_eq!(analyses.len(), runs.len());

    let mut cases: Vec<&SnapshotCase> = manifest.cases.iter().collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut per_case = Vec::with_capacity(cases.len());
    let mut matches = Vec::new();
    for case in cases {
        let run = runs.remove(&case.id).expect("every case was run");
        let raw_match = CaseMatch::from_analysis(case, &run.analysis, run.ignored.as_ref());
        let adjusted_match = match (&raw_match, options.mode) {
            (Some(m), EvalMode::Ifa | EvalMode::Ifgt) => Some(m.adjusted()?),
            _ => None,
        };
        if let Some(m) = &raw_match {
            matches.push(m.clone());
        }
        per_case.push(CaseReport {
            case_id: case.id.clone(),
            ground_truth: case.ground_truth.clone(),
            ignored_category: run.ignored,
            first_pass: run.first_pass,
            analysis: run.analysis,
            raw_match,
            adjusted_match,
        });
    }
    let failed = per_case.len() - matches.len();
    let mut summary = aggregate(&matches, failed)?;
    let adjusted_summary = match options.mode {
        EvalMode::Default => None,
        EvalMode::Ifa | EvalMode::Ifgt => {
            let compliance = ignore_compliance(&matches)?;
            summary.ignore_compliance_pct = Some(compliance);
            let mut adjusted = adjusted_metrics(&matches, failed)?;
            adjusted.ignore_compliance_pct = Some(compliance);
            Some(adjusted)
        }
    };

    Ok(EvaluationReport {
        report_version: REPORT_VERSION,
        tool_version: options.tool_version.clone(),
        timestamp: options.timestamp.clone(),
        mode: options.mode,
        backend: backend.kind(),
        model_name: match (backend.model_name(), backend.kind()) {
            (Some(name), _) => name.to_string(),
            (None, BackendKind::Heuristic) => "heuristic".to_string(),
            (None, _) => options.analyze.model_name.clone(),
        },
        prompt_version: options.prompt_version.clone(),
        dataset_name: manifest.name.clone(),
        summary,
        adjusted_summary,
        dataset_stats,
        per_case,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
    Junit,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "junit" | "xml" => Ok(ReportFormat::Junit),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderOptions {
    /// Categories a JUnit case may report without failing. Defaults to the
    /// case's ground truth.
    pub allow: Option<CategorySet>,
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat, options: &RenderOptions) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text.into_bytes()
        }
        ReportFormat::Markdown => render_markdown(report).into_bytes(),
        ReportFormat::Junit => render_junit(report, options).into_bytes(),
    }
}

fn mean_pm(mean: f64, std: f64, digits: usize) -> String {
    format!("{mean:.digits$} ± {std:.digits$}")
}

fn summary_rows(s: &MetricsSummary) -> Vec<(&'static str, String)> {
    vec![
        ("Hit Rate (%)", format!("{:.2}", s.hit_rate_pct)),
        ("Recall (%)", format!("{:.2}", s.recall_pct)),
        ("Precision (%)", format!("{:.2}", s.precision_pct)),
        ("F1-Score (%)", format!("{:.2}", s.f1_pct)),
        ("Avg. # label/test", mean_pm(s.avg_labels_mean, s.avg_labels_std, 2)),
        ("Unknown Rate (%)", format!("{:.2}", s.unknown_rate_pct)),
        (
            "IC Rate (%)",
            s.ignore_compliance_pct.map_or("---".to_string(), |v| format!("{v:.2}")),
        ),
        ("Predicted", mean_pm(s.pixel_pred_mean, s.pixel_pred_std, 3)),
        ("Error", mean_pm(s.pixel_error_mean, s.pixel_error_std, 3)),
        ("Semantic Diff.", mean_pm(s.semantic_mean, s.semantic_std, 3)),
        ("Analyzed cases", s.analyzed_count.to_string()),
        ("Failed cases", s.failed_count.to_string()),
    ]
}

fn render_markdown(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report: {}\n", report.dataset_name);
    let _ = writeln!(
        out,
        "- mode: {}\n- backend: {}\n- model: {}\n- prompt: {}\n- generated: {}\n- tool version: {}\n",
        report.mode,
        report.backend,
        if report.model_name.is_empty() { "-" } else { &report.model_name },
        report.prompt_version,
        if report.timestamp.is_empty() { "-" } else { &report.timestamp },
        report.tool_version,
    );
    let raw = summary_rows(&report.summary);
    match &report.adjusted_summary {
        Some(adjusted) => {
            out.push_str("| Metric | Raw | Adjusted |\n|---|---:|---:|\n");
            for ((label, a), (_, b)) in raw.iter().zip(summary_rows(adjusted)) {
                let _ = writeln!(out, "| {label} | {a} | {b} |");
            }
        }
        None => {
            out.push_str("| Metric | Value |\n|---|---:|\n");
            for (label, value) in &raw {
                let _ = writeln!(out, "| {label} | {value} |");
            }
        }
    }
    out.push_str("\nPredicted and Error are pixel difference scores (mean ± std).\n");
    let stats = &report.dataset_stats;
    let _ = writeln!(
        out,
        "Dataset: {} cases, {} ground-truth labels, pixel difference {}.\n",
        stats.case_count,
        stats.total_ground_truth_labels,
        mean_pm(stats.pixel_diff_mean, stats.pixel_diff_std, 3)
    );

    out.push_str("| Case | Ground truth | Ignored | Predicted | Hit | Computed pixel diff. |\n");
    out.push_str("|---|---|---|---|---|---:|\n");
    for case in &report.per_case {
        let predicted = match &case.analysis.outcome {
            Outcome::Analyzed(result) => result.categories.to_string(),
            Outcome::Failed(failure) => format!("failed: {}", escape_cell(&failure.message)),
        };
        let hit = case.raw_match.as_ref().map_or("-", |m| if m.hit { "yes" } else { "no" });
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            escape_cell(&case.case_id),
            case.ground_truth,
            case.ignored_category.as_ref().map_or("-".to_string(), Category::canonical_name),
            predicted,
            hit,
            case.analysis
                .computed_pixel_diff
                .map_or("-".to_string(), |v| format!("{v:.6}")),
        );
    }
    out
}

fn escape_cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && !matches!(c, '\n' | '\t' | '\r') => {}
            c => out.push(c),
        }
    }
    out
}

fn render_junit(report: &EvaluationReport, options: &RenderOptions) -> String {
    let mut body = String::new();
    let (mut failures, mut errors) = (0, 0);
    for case in &report.per_case {
        let _ = write!(
            body,
            "    <testcase classname=\"snaptriage.{}\" name=\"{}\"",
            escape_xml(&report.dataset_name),
            escape_xml(&case.case_id)
        );
        match &case.analysis.outcome {
            Outcome::Failed(failure) => {
                errors += 1;
                let _ = write!(
                    body,
                    ">\n      <error type=\"{}\" message=\"{}\"/>\n    </testcase>\n",
                    escape_xml(&format!("{:?}", failure.stage).to_lowercase()),
                    escape_xml(&failure.message)
                );
            }
            Outcome::Analyzed(result) => {
                let allow = options.allow.as_ref().unwrap_or(&case.ground_truth);
                let disallowed: Vec<String> = result
                    .categories
                    .iter()
                    .filter(|c| !allow.contains(c))
                    .map(Category::canonical_name)
                    .collect();
                if disallowed.is_empty() {
                    body.push_str("/>\n");
                } else {
                    failures += 1;
                    let _ = write!(
                        body,
                        ">\n      <failure type=\"unexpected-category\" message=\"{}\">{}</failure>\n    </testcase>\n",
                        escape_xml(&format!("unexpected categories: {}", disallowed.join(", "))),
                        escape_xml(&result.explanation)
                    );
                }
            }
        }
    }
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<testsuites>\n  <testsuite name=\"{}\" tests=\"{}\" failures=\"{failures}\" errors=\"{errors}\" timestamp=\"{}\">",
        escape_xml(&report.dataset_name),
        report.per_case.len(),
        escape_xml(&report.timestamp)
    );
    out.push_str(&body);
    out.push_str("  </testsuite>\n</testsuites>\n");
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use Category::*;

    fn set(items: &[Category]) -> CategorySet {
        items.iter().cloned().collect()
    }

    fn unknown(tag: &str) -> Category {
        Category::unknown(tag).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn set_matching() {
        let m = match_case(&set(&[ColorChange]), &set(&[ColorChange, TextChange]));
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives, m.hit), (1, 0, 1, true));
        let m = match_case(&set(&[TextChange, unknown("X")]), &set(&[TextChange]));
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 0));
        assert!(m.hit && m.has_unknown);
        let m = match_case(&set(&[]), &set(&[PaddingChange]));
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives, m.hit), (0, 0, 1, false));
    }

    #[test]
    fn three_case_example() {
        let matches = vec![
            CaseMatch::new("a", set(&[ColorChange]), set(&[ColorChange, TextChange])),
            CaseMatch::new("b", set(&[LayoutChange]), set(&[PaddingChange])),
            CaseMatch::new("c", set(&[TextChange, unknown("X")]), set(&[TextChange])),
        ];
        let s = aggregate(&matches, 0).unwrap();
        // Independent arithmetic: 2 hits of 3, tp 2, fn 2, fp 2.
        assert!(close(s.hit_rate_pct, 200.0 / 3.0));
        assert!(close(s.recall_pct, 50.0));
        assert!(close(s.precision_pct, 50.0));
        assert!(close(s.f1_pct, 50.0));
        assert!(close(s.unknown_rate_pct, 100.0 / 3.0));
        assert!(close(s.avg_labels_mean, 4.0 / 3.0));
    }

    #[test]
    fn perfect_single_case() {
        let s = aggregate(&[CaseMatch::new("a", set(&[ColorChange]), set(&[ColorChange]))], 0).unwrap();
        assert_eq!((s.hit_rate_pct, s.recall_pct, s.precision_pct, s.f1_pct), (100.0, 100.0, 100.0, 100.0));
        assert_eq!((s.avg_labels_std, s.pixel_pred_std, s.semantic_std), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_predictions_give_zero_precision() {
        let s = aggregate(&[CaseMatch::new("a", set(&[]), set(&[ColorChange]))], 2).unwrap();
        assert_eq!((s.precision_pct, s.f1_pct, s.failed_count), (0.0, 0.0, 2));
        assert!(matches!(aggregate(&[], 3), Err(EvalError::NoAnalyzedCases)));
    }

    #[test]
    fn compliance() {
        let matches = vec![
            CaseMatch::new("a", set(&[ColorChange, PaddingChange]), set(&[ColorChange])).with_ignored(ColorChange),
            CaseMatch::new("b", set(&[TextChange]), set(&[ColorChange])).with_ignored(ColorChange),
        ];
        assert_eq!(ignore_compliance(&matches).unwrap(), 50.0);
        let empty = vec![CaseMatch::new("a", set(&[]), set(&[ColorChange])).with_ignored(ColorChange)];
        assert_eq!(ignore_compliance(&empty).unwrap(), 100.0);
        let missing = vec![CaseMatch::new("a", set(&[]), set(&[ColorChange]))];
        assert!(matches!(ignore_compliance(&missing), Err(EvalError::MissingIgnoreDesignation { .. })));
        assert!(matches!(adjusted_metrics(&missing, 0), Err(EvalError::MissingIgnoreDesignation { .. })));
    }

    #[test]
    fn adjustment_rules() {
        let a = CaseMatch::new("a", set(&[ColorChange, TextChange]), set(&[ColorChange]))
            .with_ignored(ColorChange)
            .adjusted()
            .unwrap();
        assert_eq!((a.true_positives, a.false_positives, a.false_negatives), (0, 1, 0));
        assert!(a.excluded_from_recall);
        assert_eq!(a.label_count, 2);
        let b = CaseMatch::new("b", set(&[ColorChange]), set(&[ColorChange, PaddingChange]))
            .with_ignored(ColorChange)
            .adjusted()
            .unwrap();
        assert_eq!((b.true_positives, b.false_positives, b.false_negatives), (0, 0, 1));
        assert!(!b.excluded_from_recall);

        let s = aggregate(&[a, b], 0).unwrap();
        assert_eq!(s.recall_case_count, 1);
        assert_eq!((s.hit_rate_pct, s.recall_pct, s.precision_pct), (0.0, 0.0, 0.0));
    }

    fn arb_known() -> impl Strategy<Value = CategorySet> {
        proptest::sample::subsequence(Category::KNOWN.to_vec(), 0..=3).prop_map(|v| v.into_iter().collect())
    }

    fn arb_prediction() -> impl Strategy<Value = CategorySet> {
        (arb_known(), proptest::option::of("[A-Z]{1,4}")).prop_map(|(mut s, tag)| {
            if let Some(tag) = tag {
                s.insert(Category::unknown(tag).unwrap());
            }
            s
        })
    }

    fn arb_ground_truth() -> impl Strategy<Value = CategorySet> {
        proptest::sample::subsequence(Category::KNOWN.to_vec(), 1..=2).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn micro_recall_identity(cases in proptest::collection::vec((arb_prediction(), arb_ground_truth()), 1..20)) {
            let matches: Vec<CaseMatch> = cases
                .iter()
                .enumerate()
                .map(|(i, (p, g))| CaseMatch::new(i.to_string(), p.clone(), g.clone()))
                .collect();
            let s = aggregate(&matches, 0).unwrap();
            let (mut tp, mut gt_total, mut pred_total) = (0usize, 0usize, 0usize);
            for (p, g) in &cases {
                tp += p.iter().filter(|c| g.iter().any(|x| x.canonical_name() == c.canonical_name())).count();
                gt_total += g.len();
                pred_total += p.len();
            }
            prop_assert!(close(s.recall_pct, 100.0 * tp as f64 / gt_total as f64));
            let precision = if pred_total == 0 { 0.0 } else { 100.0 * tp as f64 / pred_total as f64 };
            prop_assert!(close(s.precision_pct, precision));
        }

        #[test]
        fn perfect_prediction_fixpoint(truths in proptest::collection::vec(arb_ground_truth(), 1..20)) {
            let matches: Vec<CaseMatch> = truths
                .iter()
                .enumerate()
                .map(|(i, g)| CaseMatch::new(i.to_string(), g.clone(), g.clone()))
                .collect();
            let s = aggregate(&matches, 0).unwrap();
            prop_assert_eq!(
                (s.hit_rate_pct, s.recall_pct, s.precision_pct, s.f1_pct, s.unknown_rate_pct),
                (100.0, 100.0, 100.0, 100.0, 0.0)
            );
        }

        #[test]
        fn absent_ignore_is_a_no_op(cases in proptest::collection::vec((arb_prediction(), arb_ground_truth()), 1..20)) {
            let ignored = SemanticChange;
            let matches: Vec<CaseMatch> = cases
                .iter()
                .enumerate()
                .map(|(i, (p, g))| {
                    CaseMatch::new(i.to_string(), p.without(&ignored), g.without(&ignored))
                })
                .filter(|m| !m.ground_truth.is_empty())
                .map(|m| m.with_ignored(ignored.clone()))
                .collect();
            prop_assume!(!matches.is_empty());
            prop_assert_eq!(adjusted_metrics(&matches, 1).unwrap(), aggregate(&matches, 1).unwrap());
        }
    }

    fn sample_report() -> EvaluationReport {
        use crate::analysis::{AnalysisFailure, AnalysisResult, FailureStage};
        let analysis = |id: &str, outcome| CaseAnalysis {
            case_id: id.into(),
            outcome,
            computed_pixel_diff: Some(0.05),
            pixel_diff_error: Some(0.01),
            attempts: 1,
            ignore_reason: None,
            prompt_hash: Some("abc".into()),
            raw_response: None,
        };
        let result = AnalysisResult {
            categories: set(&[ColorChange, LayoutChange]),
            pixel_difference: 0.06,
            semantic_difference: 0.2,
            affected_elements: vec!["header".into()],
            explanation: "header <tint> & layout".into(),
            parse_warnings: vec![],
        };
        let ok = |id: &str| analysis(id, Outcome::Analyzed(result.clone()));
        let matches: Vec<CaseMatch> = ["a", "b"]
            .iter()
            .map(|id| CaseMatch::new(*id, result.categories.clone(), set(&[ColorChange])))
            .collect();
        let mut per_case: Vec<CaseReport> = matches
            .iter()
            .map(|m| CaseReport {
                case_id: m.case_id.clone(),
                ground_truth: m.ground_truth.clone(),
                ignored_category: None,
                first_pass: None,
                analysis: ok(&m.case_id),
                raw_match: Some(m.clone()),
                adjusted_match: None,
            })
            .collect();
        per_case.push(CaseReport {
            case_id: "c".into(),
            ground_truth: set(&[TextChange]),
            ignored_category: None,
            first_pass: None,
            analysis: analysis(
                "c",
                Outcome::Failed(AnalysisFailure {
                    stage: FailureStage::Parse,
                    message: "no JSON object found in model output".into(),
                }),
            ),
            raw_match: None,
            adjusted_match: None,
        });
        EvaluationReport {
            report_version: REPORT_VERSION,
            tool_version: "0.0.0".into(),
            timestamp: "2026-01-01T00:00:00Z".into(),
            mode: EvalMode::Default,
            backend: BackendKind::Replay,
            model_name: "gemma3:4b".into(),
            prompt_version: "prompt_v1".into(),
            dataset_name: "demo".into(),
            summary: aggregate(&matches, 1).unwrap(),
            adjusted_summary: None,
            dataset_stats: DatasetStats::from_parts(
                [set(&[ColorChange]), set(&[ColorChange]), set(&[TextChange])].iter(),
                &[0.05, 0.05, 0.05],
            ),
            per_case,
        }
    }

    #[test]
    fn renderings_are_deterministic() {
        let report = sample_report();
        for format in [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Junit] {
            let options = RenderOptions::default();
            assert_eq!(render_report(&report, format, &options), render_report(&report, format, &options));
        }
    }

    #[test]
    fn json_round_trips_with_two_space_indent() {
        let report = sample_report();
        let text = String::from_utf8(render_report(&report, ReportFormat::Json, &RenderOptions::default())).unwrap();
        assert!(text.starts_with("{\n  \"report_version\": 1,"));
        let back: EvaluationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn markdown_mirrors_table_rows() {
        let text = String::from_utf8(render_report(&sample_report(), ReportFormat::Markdown, &RenderOptions::default())).unwrap();
        for row in ["Hit Rate (%)", "Recall (%)", "Precision (%)", "F1-Score (%)", "Avg. # label/test", "Unknown Rate (%)", "Semantic Diff."] {
            assert!(text.contains(&format!("| {row} |")), "{row}");
        }
        assert!(text.contains("| Recall (%) | 100.00 |"));
        assert!(text.contains("| Precision (%) | 50.00 |"));
    }

    #[test]
    fn junit_has_one_testcase_per_case() {
        let text = String::from_utf8(render_report(&sample_report(), ReportFormat::Junit, &RenderOptions::default())).unwrap();
        assert_eq!(text.matches("<testcase ").count(), 3);
        assert_eq!(text.matches("<failure ").count(), 2);
        assert_eq!(text.matches("<error ").count(), 1);
        assert!(text.contains("header &lt;tint&gt; &amp; layout"));
        assert!(text.contains("failures=\"2\" errors=\"1\""));

        let allow = RenderOptions {
            allow: Some(set(&[ColorChange, LayoutChange])),
        };
        let text = String::from_utf8(render_report(&sample_report(), ReportFormat::Junit, &allow)).unwrap();
        assert_eq!(text.matches("<failure ").count(), 0);
    }

    #[test]
    fn mode_and_format_parsing() {
        assert_eq!("IFA".parse::<EvalMode>().unwrap(), EvalMode::Ifa);
        assert!("x".parse::<EvalMode>().is_err());
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    }
}
