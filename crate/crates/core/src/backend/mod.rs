//! Analyzers that turn an [`AnalysisRequest`] into raw model text.

pub mod heuristic;
mod live;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{self, ImagingError};
use crate::prompting::{AnalysisRequest, DEFAULT_MAX_RETRIES, DEFAULT_TIMEOUT};

pub use heuristic::heuristic_classify;
pub use live::{LiveConfig, DEFAULT_ENDPOINT, DEFAULT_MAX_IN_FLIGHT};

pub const FIXTURE_EXTENSION: &str = "txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
    Heuristic,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Live => "live",
            BackendKind::Replay => "replay",
            BackendKind::Heuristic => "heuristic",
        })
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("case {case_id:?}: transport error after {attempts} attempt(s): {message}")]
    Transport {
        case_id: String,
        attempts: u32,
        message: String,
    },
    #[error("case {case_id:?}: request timed out after {attempts} attempt(s)")]
    Timeout { case_id: String, attempts: u32 },
    #[error("case {case_id:?}: HTTP {status}: {body_excerpt}")]
    HttpStatus {
        case_id: String,
        status: u16,
        body_excerpt: String,
    },
    #[error("case {case_id:?}: unusable response: {message}")]
    InvalidResponse { case_id: String, message: String },
    #[error("case {case_id:?}: no fixture for prompt {prompt_hash} at {}", path.display())]
    FixtureMissing {
        case_id: String,
        prompt_hash: String,
        path: PathBuf,
    },
    #[error("case {case_id:?}: i/o error on {}: {source}", path.display())]
    Io {
        case_id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("case {case_id:?}: {source}")]
    Image {
        case_id: String,
        #[source]
        source: ImagingError,
    },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

impl BackendError {
    pub fn case_id(&self) -> Option<&str> {
        match self {
            BackendError::Transport { case_id, .. }
            | BackendError::Timeout { case_id, .. }
            | BackendError::HttpStatus { case_id, .. }
            | BackendError::InvalidResponse { case_id, .. }
            | BackendError::FixtureMissing { case_id, .. }
            | BackendError::Io { case_id, .. }
            | BackendError::Image { case_id, .. } => Some(case_id),
            BackendError::InvalidConfig(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum BackendConfig {
    Live(LiveConfig),
    Replay { fixture_dir: PathBuf },
    Heuristic,
}

impl BackendConfig {
    pub fn live(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig::Live(LiveConfig {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            timeout: DEFAULT_TIMEOUT,
            max_retries: DEFAULT_MAX_RETRIES,
            bearer_token: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry_backoff: Duration::from_millis(500),
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            BackendConfig::Live(_) => BackendKind::Live,
            BackendConfig::Replay { .. } => BackendKind::Replay,
            BackendConfig::Heuristic => BackendKind::Heuristic,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self {
            BackendConfig::Live(live) => live.validate(),
            BackendConfig::Replay { fixture_dir } if fixture_dir.as_os_str().is_empty() => {
                Err(BackendError::InvalidConfig("replay requires a fixture directory".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_kind: BackendKind,
}

enum Inner {
    Live(live::LiveClient),
    Replay { fixture_dir: PathBuf },
    Heuristic,
}

/// A configured analyzer. Safe to share across threads.
pub struct Backend {
    inner: Inner,
    record_to: Option<PathBuf>,
}

impl Backend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let inner = match config {
            BackendConfig::Live(live) => Inner::Live(live::LiveClient::new(live)?),
            BackendConfig::Replay { fixture_dir } => Inner::Replay { fixture_dir },
            BackendConfig::Heuristic => Inner::Heuristic,
        };
        Ok(Self { inner, record_to: None })
    }

    /// Stores every successful response as a replay fixture under `fixture_dir`.
    pub fn recording(mut self, fixture_dir: impl Into<PathBuf>) -> Self {
        self.record_to = Some(fixture_dir.into());
        self
    }

    pub fn kind(&self) -> BackendKind {
        match self.inner {
            Inner::Live(_) => BackendKind::Live,
            Inner::Replay { .. } => BackendKind::Replay,
            Inner::Heuristic => BackendKind::Heuristic,
        }
    }

    /// Model name reported by the backend, if it talks to a model.
    pub fn model_name(&self) -> Option<&str> {
        match &self.inner {
            Inner::Live(client) => Some(&client.config().model_name),
            _ => None,
        }
    }

    pub fn analyze(&self, request: &AnalysisRequest) -> Result<RawResponse, BackendError> {
        let started = Instant::now();
        let text = match &self.inner {
            Inner::Live(client) => client.send(request)?,
            Inner::Replay { fixture_dir } => read_fixture(fixture_dir, &request.case_id, &request.prompt_hash())?,
            Inner::Heuristic => {
                let decode = |bytes: &[u8]| {
                    imaging::decode_png(bytes).map_err(|reason| BackendError::Image {
                        case_id: request.case_id.clone(),
                        source: ImagingError::DecodeError {
                            path: PathBuf::from("<request>"),
                            reason,
                        },
                    })
                };
                let reference = decode(&request.images[0])?;
                let failure = decode(&request.images[1])?;
                heuristic_classify(&reference, &failure).map_err(|source| BackendError::Image {
                    case_id: request.case_id.clone(),
                    source,
                })?
            }
        };
        let response = RawResponse {
            text,
            latency: started.elapsed(),
            backend_kind: self.kind(),
        };
        if let Some(dir) = &self.record_to {
            record_fixture(dir, &request.case_id, &request.prompt_hash(), &response)?;
        }
        Ok(response)
    }
}

/// Maps a case id to a directory name. Ids that are not plain file names are
/// replaced by a digest.
fn fixture_key(case_id: &str) -> String {
    let plain = !case_id.is_empty()
        && !case_id.starts_with('.')
        && case_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if plain {
        case_id.to_string()
    } else {
        format!("id-{}", &hex::encode(Sha256::digest(case_id.as_bytes()))[..16])
    }
}

pub fn fixture_path(fixture_dir: &Path, case_id: &str, prompt_hash: &str) -> PathBuf {
    fixture_dir
        .join(fixture_key(case_id))
        .join(format!("{}.{FIXTURE_EXTENSION}", fixture_key(prompt_hash)))
}

fn read_fixture(fixture_dir: &Path, case_id: &str, prompt_hash: &str) -> Result<String, BackendError> {
    let path = fixture_path(fixture_dir, case_id, prompt_hash);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(BackendError::FixtureMissing {
            case_id: case_id.to_string(),
            prompt_hash: prompt_hash.to_string(),
            path,
        }),
        Err(source) => Err(BackendError::Io {
            case_id: case_id.to_string(),
            path,
            source,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Created,
    Overwritten,
}

pub fn record_fixture(
    fixture_dir: &Path,
    case_id: &str,
    prompt_hash: &str,
    response: &RawResponse,
) -> Result<RecordOutcome, BackendError> {
    let path = fixture_path(fixture_dir, case_id, prompt_hash);
    let io_err = |path: &Path, source| BackendError::Io {
        case_id: case_id.to_string(),
        path: path.to_path_buf(),
        source,
    };
    let parent = path.parent().expect("fixture path has a parent");
    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let outcome = if path.exists() {
        log::warn!("overwriting fixture {}", path.display());
        RecordOutcome::Overwritten
    } else {
        RecordOutcome::Created
    };
    std::fs::write(&path, &response.text).map_err(|e| io_err(&path, e))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::imaging::RasterImage;

    fn request(case_id: &str, prompt: &str) -> AnalysisRequest {
        let png = imaging::encode_png(&RasterImage::filled(4, 4, [255, 255, 255])).unwrap();
        AnalysisRequest {
            case_id: case_id.into(),
            prompt_text: prompt.into(),
            images: [png.clone(), png.clone(), png],
            model_name: "m".into(),
            temperature: 0.1,
            max_retries: 2,
            timeout: Duration::from_secs(1),
        }
    }

    fn response(text: &str) -> RawResponse {
        RawResponse {
            text: text.into(),
            latency: Duration::ZERO,
            backend_kind: BackendKind::Live,
        }
    }

    #[test]
    fn record_then_replay_is_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("case-001", "prompt");
        let text = "```json\n{\"categories\": []}\n```  \n";
        let outcome = record_fixture(dir.path(), "case-001", &req.prompt_hash(), &response(text)).unwrap();
        assert_eq!(outcome, RecordOutcome::Created);
        let backend = Backend::new(BackendConfig::Replay {
            fixture_dir: dir.path().into(),
        })
        .unwrap();
        for _ in 0..3 {
            let got = backend.analyze(&req).unwrap();
            assert_eq!(got.text, text);
            assert_eq!(got.backend_kind, BackendKind::Replay);
        }
    }

    #[test]
    fn replay_key_includes_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("case-001", "prompt");
        record_fixture(dir.path(), "case-001", &req.prompt_hash(), &response("x")).unwrap();
        let backend = Backend::new(BackendConfig::Replay {
            fixture_dir: dir.path().into(),
        })
        .unwrap();
        let err = backend.analyze(&request("case-001", "other prompt")).unwrap_err();
        assert!(matches!(err, BackendError::FixtureMissing { .. }));
        assert_eq!(err.case_id(), Some("case-001"));
        assert!(matches!(
            backend.analyze(&request("case-002", "prompt")),
            Err(BackendError::FixtureMissing { .. })
        ));
    }

    #[test]
    fn second_record_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        record_fixture(dir.path(), "c", "h", &response("one")).unwrap();
        let outcome = record_fixture(dir.path(), "c", "h", &response("two")).unwrap();
        assert_eq!(outcome, RecordOutcome::Overwritten);
        assert_eq!(read_fixture(dir.path(), "c", "h").unwrap(), "two");
    }

    #[test]
    fn record_into_unwritable_location_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "not a directory").unwrap();
        let err = record_fixture(&blocker, "c", "h", &response("x")).unwrap_err();
        assert!(matches!(err, BackendError::Io { .. }));
    }

    #[test]
    fn unsafe_ids_are_hashed() {
        assert_eq!(fixture_key("case-001"), "case-001");
        let hashed = fixture_key("../escape");
        assert!(hashed.starts_with("id-") && hashed.len() == 19);
        assert_ne!(fixture_key("a/b"), fixture_key("a:b"));
    }

    #[test]
    fn heuristic_identical_images() {
        let backend = Backend::new(BackendConfig::Heuristic).unwrap();
        let got = backend.analyze(&request("c", "ignored")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&got.text).unwrap();
        assert_eq!(value["categories"], serde_json::json!([]));
        assert_eq!(value["pixel_difference"], serde_json::json!(0.0));
    }

    #[test]
    fn recording_wrapper_writes_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("c", "p");
        let backend = Backend::new(BackendConfig::Heuristic).unwrap().recording(dir.path());
        let live = backend.analyze(&req).unwrap();
        let replay = Backend::new(BackendConfig::Replay {
            fixture_dir: dir.path().into(),
        })
        .unwrap();
        assert_eq!(replay.analyze(&req).unwrap().text, live.text);
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::live("", "m").validate().is_err());
        assert!(BackendConfig::live("http://x", "").validate().is_err());
        assert!(BackendConfig::live("not a url", "m").validate().is_err());
        assert!(BackendConfig::live("https://x/api/chat", "m").validate().is_err());
        assert!(BackendConfig::live("http://x/api/chat", "m").validate().is_ok());
        assert!(BackendConfig::Replay {
            fixture_dir: PathBuf::new()
        }
        .validate()
        .is_err());
        assert!(BackendConfig::Heuristic.validate().is_ok());
    }
}
