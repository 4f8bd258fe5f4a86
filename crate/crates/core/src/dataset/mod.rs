//! Labeled snapshot-failure datasets: manifest schema, loading, statistics,
//! and a synthetic case generator.

pub mod font;
pub mod mutation;
pub mod scene;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImagingError};
use crate::taxonomy::{parse_category, Category, CategorySet};

pub use mutation::{apply_mutation, FillPattern, MutationOp, MutationSpec};
pub use synth::{generate_synthetic_dataset, SyntheticConfig, SYNTHESIZABLE};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    ManifestParse { path: String, message: String },
    #[error("cases[{index}].id: duplicate case id {id:?}")]
    DuplicateCaseId { index: usize, id: String },
    #[error("cases[{index}].{field}: invalid ground truth for case {case_id:?}: {reason}")]
    InvalidGroundTruth {
        index: usize,
        case_id: String,
        field: String,
        reason: String,
    },
    #[error("case {case_id:?}: image {} does not exist", path.display())]
    BrokenImagePath { case_id: String, path: PathBuf },
    #[error("case {case_id:?}: {source}")]
    Image {
        case_id: String,
        #[source]
        source: ImagingError,
    },
    #[error("category {0} cannot be synthesized")]
    UnsupportedCategory(Category),
    #[error("invalid mutation: {0}")]
    InvalidMutation(String),
    #[error("invalid generator argument: {0}")]
    InvalidArgument(String),
}

impl DatasetError {
    fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        DatasetError::ManifestParse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// One labeled reference/failure pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotCase {
    pub id: String,
    pub reference_path: PathBuf,
    pub failure_path: PathBuf,
    pub diff_path: Option<PathBuf>,
    pub ground_truth: CategorySet,
    /// Ground-truth label to ignore when evaluating with designated ignores.
    pub ignore_designation: Option<Category>,
    pub metadata: BTreeMap<String, String>,
}

impl SnapshotCase {
    pub fn load_pair(&self) -> Result<(imaging::RasterImage, imaging::RasterImage), DatasetError> {
        let wrap = |source| DatasetError::Image {
            case_id: self.id.clone(),
            source,
        };
        let reference = imaging::load_image(&self.reference_path).map_err(wrap)?;
        let failure = imaging::load_image(&self.failure_path).map_err(wrap)?;
        Ok((reference, failure))
    }

    pub fn pixel_diff(&self) -> Result<f64, DatasetError> {
        let (reference, failure) = self.load_pair()?;
        imaging::pixel_diff_score(&reference, &failure).map_err(|source| DatasetError::Image {
            case_id: self.id.clone(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub version: u32,
    pub cases: Vec<SnapshotCase>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

/// On-disk manifest layout.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    version: u32,
    cases: Vec<CaseEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseEntry {
    id: String,
    reference: String,
    failure: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diff: Option<String>,
    ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ignore: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Check that every referenced image exists.
    pub check_images: bool,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, options: LoadOptions) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = parse_manifest(&text, &root)?;
    if options.check_images {
        for case in &manifest.cases {
            let paths = [Some(&case.reference_path), Some(&case.failure_path), case.diff_path.as_ref()];
            for p in paths.into_iter().flatten() {
                if !p.is_file() {
                    return Err(DatasetError::BrokenImagePath {
                        case_id: case.id.clone(),
                        path: p.clone(),
                    });
                }
            }
        }
    }
    Ok(manifest)
}

/// Parses manifest JSON, resolving relative paths against `root`.
pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ManifestFile = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        DatasetError::parse(if path.is_empty() { "$".into() } else { path }, err.inner().to_string())
    })?;

    if file.version != MANIFEST_VERSION {
        return Err(DatasetError::parse(
            "version",
            format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", file.version),
        ));
    }
    if file.cases.is_empty() {
        return Err(DatasetError::parse("cases", "manifest has no cases"));
    }

    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(file.cases.len());
    for (index, entry) in file.cases.into_iter().enumerate() {
        if entry.id.trim().is_empty() {
            return Err(DatasetError::parse(format!("cases[{index}].id"), "case id is empty"));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(DatasetError::DuplicateCaseId {
                index,
                id: entry.id,
            });
        }
        let bad_truth = |field: String, reason: String| DatasetError::InvalidGroundTruth {
            index,
            case_id: entry.id.clone(),
            field,
            reason,
        };
        if entry.ground_truth.is_empty() {
            return Err(bad_truth("ground_truth".into(), "ground truth is empty".into()));
        }
        let mut ground_truth = CategorySet::new();
        for (i, raw) in entry.ground_truth.iter().enumerate() {
            let category = parse_category(raw)
                .map_err(|e| bad_truth(format!("ground_truth[{i}]"), e.to_string()))?;
            if category.is_unknown() {
                return Err(bad_truth(
                    format!("ground_truth[{i}]"),
                    format!("{category} is not a taxonomy category"),
                ));
            }
            ground_truth.insert(category);
        }
        let ignore_designation = match &entry.ignore {
            None => None,
            Some(raw) => {
                let category = parse_category(raw).map_err(|e| bad_truth("ignore".into(), e.to_string()))?;
                if !ground_truth.contains(&category) {
                    return Err(bad_truth(
                        "ignore".into(),
                        format!("{category} is not among the ground-truth labels"),
                    ));
                }
                Some(category)
            }
        };
        cases.push(SnapshotCase {
            reference_path: root.join(&entry.reference),
            failure_path: root.join(&entry.failure),
            diff_path: entry.diff.as_ref().map(|d| root.join(d)),
            ground_truth,
            ignore_designation,
            metadata: entry.metadata.unwrap_or_default(),
            id: entry.id,
        });
    }

    Ok(DatasetManifest {
        name: file.name,
        version: file.version,
        cases,
        root: root.to_path_buf(),
    })
}

fn relative_string(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

impl DatasetManifest {
    pub fn case(&self, id: &str) -> Option<&SnapshotCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Serializes with paths made relative to `root` where possible.
    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            name: self.name.clone(),
            version: self.version,
            cases: self
                .cases
                .iter()
                .map(|case| CaseEntry {
                    id: case.id.clone(),
                    reference: relative_string(&case.reference_path, &self.root),
                    failure: relative_string(&case.failure_path, &self.root),
                    diff: case.diff_path.as_ref().map(|p| relative_string(p, &self.root)),
                    ground_truth: case.ground_truth.canonical_names(),
                    ignore: case.ignore_designation.as_ref().map(Category::canonical_name),
                    metadata: (!case.metadata.is_empty()).then(|| case.metadata.clone()),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Summary statistics over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub case_count: usize,
    pub category_histogram: BTreeMap<Category, usize>,
    pub pixel_diff_mean: f64,
    /// Population standard deviation.
    pub pixel_diff_std: f64,
    pub total_ground_truth_labels: usize,
}

/// Mean and population standard deviation. Both are 0 for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl DatasetStats {
    /// Builds stats from ground-truth sets and per-case pixel scores.
    pub fn from_parts<'a>(
        ground_truths: impl IntoIterator<Item = &'a CategorySet>,
        pixel_diffs: &[f64],
    ) -> Self {
        let mut category_histogram = BTreeMap::new();
        let mut case_count = 0;
        for set in ground_truths {
            case_count += 1;
            for category in set {
                *category_histogram.entry(category.clone()).or_insert(0) += 1;
            }
        }
        let total_ground_truth_labels = category_histogram.values().sum();
        let (pixel_diff_mean, pixel_diff_std) = mean_std(pixel_diffs);
        Self {
            case_count,
            category_histogram,
            pixel_diff_mean,
            pixel_diff_std,
            total_ground_truth_labels,
        }
    }
}

pub fn compute_stats(manifest: &DatasetManifest) -> Result<DatasetStats, DatasetError> {
    let scores = manifest
        .cases
        .iter()
        .map(SnapshotCase::pixel_diff)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetStats::from_parts(
        manifest.cases.iter().map(|c| &c.ground_truth),
        &scores,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_png, RasterImage};

    const MINIMAL: &str = r#"{
        "name": "mini",
        "version": 1,
        "cases": [
            {"id": "t1", "reference": "a.png", "failure": "b.png", "ground_truth": ["COLOR_CHANGE"]}
        ]
    }"#;

    #[test]
    fn parses_minimal_manifest() {
        let m = parse_manifest(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(m.cases.len(), 1);
        assert_eq!(m.cases[0].reference_path, PathBuf::from("/data/a.png"));
        assert_eq!(m.cases[0].diff_path, None);
        assert_eq!(m.cases[0].ignore_designation, None);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = r#"{"name":"d","version":1,"cases":[
            {"id":"t1","reference":"a.png","failure":"b.png","ground_truth":["TEXT_CHANGE"]},
            {"id":"t1","reference":"a.png","failure":"b.png","ground_truth":["TEXT_CHANGE"]}]}"#;
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateCaseId { index: 1, .. }));
        assert!(err.to_string().starts_with("cases[1].id"));
    }

    #[test]
    fn rejects_unknown_ground_truth() {
        let text = r#"{"name":"d","version":1,"cases":[
            {"id":"t1","reference":"a.png","failure":"b.png","ground_truth":["UNKNOWN_X"]}]}"#;
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidGroundTruth { .. }));

        let empty = r#"{"name":"d","version":1,"cases":[
            {"id":"t1","reference":"a.png","failure":"b.png","ground_truth":[]}]}"#;
        assert!(matches!(
            parse_manifest(empty, Path::new(".")).unwrap_err(),
            DatasetError::InvalidGroundTruth { .. }
        ));
    }

    #[test]
    fn ignore_must_be_a_ground_truth_member() {
        let text = r#"{"name":"d","version":1,"cases":[
            {"id":"t1","reference":"a.png","failure":"b.png","ground_truth":["TEXT_CHANGE"],"ignore":"COLOR_CHANGE"}]}"#;
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("cases[0].ignore"), "{err}");
    }

    #[test]
    fn parse_errors_carry_field_paths() {
        let text = r#"{"name":"d","version":1,"cases":[{"id":"t1","reference":3}]}"#;
        match parse_manifest(text, Path::new(".")).unwrap_err() {
            DatasetError::ManifestParse { path, .. } => assert_eq!(path, "cases[0].reference"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"name":"d","version":2,"cases":[]}"#;
        match parse_manifest(text, Path::new(".")).unwrap_err() {
            DatasetError::ManifestParse { path, .. } => assert_eq!(path, "version"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"name":"d","version":1,"cases":[]}"#;
        assert!(parse_manifest(text, Path::new(".")).is_err());
    }

    #[test]
    fn eager_image_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE_NAME);
        std::fs::write(&path, MINIMAL).unwrap();
        assert!(load_manifest(&path).is_ok());
        let err = load_manifest_with(&path, LoadOptions { check_images: true }).unwrap_err();
        assert!(matches!(err, DatasetError::BrokenImagePath { .. }));
    }

    #[test]
    fn round_trips_through_json() {
        let root = Path::new("/data/set");
        let text = r#"{"name":"d","version":1,"cases":[
            {"id":"t1","reference":"cases/t1/reference.png","failure":"cases/t1/failure.png",
             "diff":"cases/t1/diff.png","ground_truth":["TEXT_CHANGE","COLOR_CHANGE"],
             "ignore":"COLOR_CHANGE","metadata":{"flag":"premium"}}]}"#;
        let m = parse_manifest(text, root).unwrap();
        let again = parse_manifest(&m.to_json(), root).unwrap();
        assert_eq!(m, again);
        assert!(m.to_json().contains("\"cases/t1/reference.png\""));
    }

    fn write_case(dir: &Path, id: &str, a: &RasterImage, b: &RasterImage) -> CaseEntry {
        save_png(a, &dir.join(format!("{id}_a.png"))).unwrap();
        save_png(b, &dir.join(format!("{id}_b.png"))).unwrap();
        CaseEntry {
            id: id.into(),
            reference: format!("{id}_a.png"),
            failure: format!("{id}_b.png"),
            diff: None,
            ground_truth: vec!["COLOR_CHANGE".into()],
            ignore: None,
            metadata: None,
        }
    }

    #[test]
    fn stats_over_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let black = RasterImage::filled(4, 4, [0; 3]);
        let white = RasterImage::filled(4, 4, [255; 3]);
        let file = ManifestFile {
            name: "s".into(),
            version: 1,
            cases: vec![
                write_case(dir.path(), "same", &black, &black),
                write_case(dir.path(), "flip", &black, &white),
            ],
        };
        let path = dir.path().join(MANIFEST_FILE_NAME);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let stats = compute_stats(&load_manifest(&path).unwrap()).unwrap();
        assert_eq!(stats.case_count, 2);
        assert_eq!(stats.pixel_diff_mean, 0.5);
        assert_eq!(stats.pixel_diff_std, 0.5);
        assert_eq!(stats.total_ground_truth_labels, 2);
    }

    #[test]
    fn stats_single_identical_case() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::filled(3, 3, [40; 3]);
        let file = ManifestFile {
            name: "s".into(),
            version: 1,
            cases: vec![write_case(dir.path(), "only", &img, &img)],
        };
        let path = dir.path().join(MANIFEST_FILE_NAME);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let stats = compute_stats(&load_manifest(&path).unwrap()).unwrap();
        assert_eq!((stats.pixel_diff_mean, stats.pixel_diff_std), (0.0, 0.0));
    }

    #[test]
    fn histogram_totals_match_label_counts() {
        let counts = [
            (Category::ColorChange, 5),
            (Category::PaddingChange, 3),
            (Category::ContentChange, 3),
            (Category::LayoutChange, 3),
            (Category::TextChange, 2),
            (Category::AnimationPhase, 2),
            (Category::AnimationChange, 1),
        ];
        // 17 cases: 15 single-label plus 2 dual-label cases carrying the extra labels.
        let mut labels: Vec<Category> = counts
            .iter()
            .flat_map(|(c, n)| std::iter::repeat(c.clone()).take(*n))
            .collect();
        let mut sets = Vec::new();
        for _ in 0..2 {
            let a = labels.remove(0);
            let b = labels.pop().unwrap();
            sets.push([a, b].into_iter().collect::<CategorySet>());
        }
        sets.extend(labels.into_iter().map(|c| std::iter::once(c).collect::<CategorySet>()));
        assert_eq!(sets.len(), 17);
        let stats = DatasetStats::from_parts(&sets, &[0.0; 17]);
        assert_eq!(stats.total_ground_truth_labels, 19);
        assert_eq!(stats.category_histogram[&Category::ColorChange], 5);
    }

    #[test]
    fn stats_with_broken_image_names_case() {
        let text = r#"{"name":"d","version":1,"cases":[
            {"id":"ghost","reference":"nope.png","failure":"nope.png","ground_truth":["TEXT_CHANGE"]}]}"#;
        let m = parse_manifest(text, Path::new("/nonexistent")).unwrap();
        let err = compute_stats(&m).unwrap_err();
        assert!(matches!(err, DatasetError::Image { ref case_id, .. } if case_id == "ghost"));
    }
}
