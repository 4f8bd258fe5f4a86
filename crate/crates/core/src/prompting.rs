//! Prompt rendering and model request assembly.

use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, SnapshotCase};
use crate::imaging::{self, DiffOptions, ImagingError};
use crate::taxonomy::Category;

pub const PROMPT_V1: &str = include_str!("../prompts/prompt_v1.txt");
pub const PROMPT_V1_VERSION: &str = "prompt_v1";

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

const TAXONOMY_PLACEHOLDER: &str = "{{TAXONOMY}}";
const SCHEMA_PLACEHOLDER: &str = "{{SCHEMA}}";

pub const IGNORE_HEADER: &str = "IGNORE the following aspect of the differences: ";
pub const IGNORE_FOOTER: &str = "This difference is acceptable; focus on other differences that might exist.";

const ESCAPE_HATCH: &str = "- UNKNOWN_<TYPE>: use when a difference fits none of the categories above. \
Replace <TYPE> with a short upper-case name made of letters, digits, and underscores, \
for example UNKNOWN_SHADOW_CHANGE.";

pub const OUTPUT_SCHEMA: &str = r#"{
  "categories": ["CATEGORY_NAME", ...],
  "pixel_difference": <number between 0 and 1>,
  "semantic_difference": <number between 0 and 1>,
  "affected_elements": ["element name", ...],
  "explanation": "<concise description of the differences>"
}"#;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("ignore reason must not be empty")]
    EmptyIgnoreReason,
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    /// Template text with `{{TAXONOMY}}` and `{{SCHEMA}}` placeholders.
    pub template: String,
    pub version: String,
    pub taxonomy_listing: Vec<TaxonomyEntry>,
    pub output_schema_text: String,
    pub extra_instructions: Option<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: PROMPT_V1.to_string(),
            version: PROMPT_V1_VERSION.to_string(),
            taxonomy_listing: Category::KNOWN
                .iter()
                .map(|c| TaxonomyEntry {
                    name: c.canonical_name(),
                    description: c.description().to_string(),
                })
                .collect(),
            output_schema_text: OUTPUT_SCHEMA.to_string(),
            extra_instructions: None,
        }
    }
}

impl PromptConfig {
    /// Uses `template` in place of the shipped prompt, keeping the default
    /// taxonomy and schema.
    pub fn with_template(template: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            template: template.into(),
            version: version.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for category in &Category::KNOWN {
            let name = category.canonical_name();
            let hits = self.taxonomy_listing.iter().filter(|e| e.name == name).count();
            if hits != 1 {
                return Err(PromptError::InvalidConfig(format!(
                    "taxonomy listing has {hits} entries for {name}"
                )));
            }
        }
        if self.taxonomy_listing.len() != Category::KNOWN.len() {
            return Err(PromptError::InvalidConfig(
                "taxonomy listing has entries outside the closed taxonomy".into(),
            ));
        }
        Ok(())
    }
}

pub fn render_taxonomy_listing(entries: &[TaxonomyEntry]) -> String {
    let mut lines: Vec<String> = entries
        .iter()
        .map(|e| format!("- {}: {}", e.name, e.description))
        .collect();
    lines.push(ESCAPE_HATCH.to_string());
    lines.join("\n")
}

/// Renders the core analysis prompt. Templates without placeholders are used
/// verbatim.
pub fn render_core_prompt(config: &PromptConfig) -> String {
    let mut text = config
        .template
        .replace(TAXONOMY_PLACEHOLDER, &render_taxonomy_listing(&config.taxonomy_listing))
        .replace(SCHEMA_PLACEHOLDER, &config.output_schema_text);
    if let Some(extra) = &config.extra_instructions {
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(extra);
    }
    text
}

/// Extends a core prompt with an instruction to disregard one aspect.
pub fn render_ignore_prompt(core_prompt: &str, ignore_reason: &str) -> Result<String, PromptError> {
    if ignore_reason.trim().is_empty() {
        return Err(PromptError::EmptyIgnoreReason);
    }
    Ok(format!("{core_prompt}\n\n{IGNORE_HEADER}{ignore_reason}\n{IGNORE_FOOTER}"))
}

/// Hex SHA-256 of the prompt text, used to key replay fixtures.
pub fn prompt_hash(prompt_text: &str) -> String {
    hex::encode(Sha256::digest(prompt_text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRequest {
    pub case_id: String,
    pub prompt_text: String,
    /// PNG bytes in (reference, failure, diff) order.
    pub images: [Vec<u8>; 3],
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout: Duration,
}

impl AnalysisRequest {
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt_text)
    }
}

pub fn build_request(
    case: &SnapshotCase,
    prompt_text: &str,
    model_name: &str,
    temperature: f64,
) -> Result<AnalysisRequest, PromptError> {
    let wrap = |source: ImagingError| {
        PromptError::Dataset(DatasetError::Image {
            case_id: case.id.clone(),
            source,
        })
    };
    let (reference, failure) = case.load_pair()?;
    imaging::validate_pair(&reference, &failure).map_err(wrap)?;
    let diff = match &case.diff_path {
        Some(path) => imaging::load_image(path).map_err(wrap)?,
        None => imaging::render_diff_image(&reference, &failure, DiffOptions::default()).map_err(wrap)?,
    };
    Ok(AnalysisRequest {
        case_id: case.id.clone(),
        prompt_text: prompt_text.to_string(),
        images: [
            imaging::encode_png(&reference).map_err(wrap)?,
            imaging::encode_png(&failure).map_err(wrap)?,
            imaging::encode_png(&diff).map_err(wrap)?,
        ],
        model_name: model_name.to_string(),
        temperature,
        max_retries: DEFAULT_MAX_RETRIES,
        timeout: DEFAULT_TIMEOUT,
    })
}
