//! Failure categories and their wire representation.
//!
//! Eight closed categories describe the usual reasons a snapshot changes. A
//! model may also invent a category of its own, spelled `UNKNOWN_<TAG>`; those
//! are carried as [`Category::Unknown`] with the tag preserved.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tag used when a model answers with a bare `UNKNOWN`.
pub const UNSPECIFIED_TAG: &str = "UNSPECIFIED";

const UNKNOWN_PREFIX: &str = "UNKNOWN_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("invalid category {raw:?}")]
    InvalidCategory { raw: String },
    #[error("invalid category {raw:?} at index {index}")]
    InvalidCategoryAt { index: usize, raw: String },
}

/// Free-form name of a category the model invented. Always matches `[A-Z0-9_]+`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnknownTag(String);

impl UnknownTag {
    pub fn new(tag: impl Into<String>) -> Result<Self, TaxonomyError> {
        let tag = tag.into();
        let valid = !tag.is_empty()
            && tag
                .bytes()
                .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_');
        if valid {
            Ok(Self(tag))
        } else {
            Err(TaxonomyError::InvalidCategory {
                raw: format!("{UNKNOWN_PREFIX}{tag}"),
            })
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A single failure category.
///
/// Variant order is the taxonomy order and drives `Ord`, so histograms and
/// listings come out in the same sequence everywhere.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    ColorChange,
    PaddingChange,
    ContentChange,
    LayoutChange,
    TextChange,
    AnimationPhase,
    AnimationChange,
    SemanticChange,
    Unknown(UnknownTag),
}

impl Category {
    /// The eight closed categories, in taxonomy order.
    pub const KNOWN: [Category; 8] = [
        Category::ColorChange,
        Category::PaddingChange,
        Category::ContentChange,
        Category::LayoutChange,
        Category::TextChange,
        Category::AnimationPhase,
        Category::AnimationChange,
        Category::SemanticChange,
    ];

    pub fn unknown(tag: impl Into<String>) -> Result<Self, TaxonomyError> {
        UnknownTag::new(tag).map(Category::Unknown)
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Category::Unknown(_))
    }

    pub fn unknown_tag(&self) -> Option<&str> {
        match self {
            Category::Unknown(tag) => Some(tag.as_str()),
            _ => None,
        }
    }

    /// Canonical wire name, e.g. `COLOR_CHANGE` or `UNKNOWN_SHADOW_CHANGE`.
    pub fn canonical_name(&self) -> String {
        match self {
            Category::Unknown(tag) => format!("{UNKNOWN_PREFIX}{}", tag.as_str()),
            known => known.known_name().unwrap_or_default().to_string(),
        }
    }

    fn known_name(&self) -> Option<&'static str> {
        Some(match self {
            Category::ColorChange => "COLOR_CHANGE",
            Category::PaddingChange => "PADDING_CHANGE",
            Category::ContentChange => "CONTENT_CHANGE",
            Category::LayoutChange => "LAYOUT_CHANGE",
            Category::TextChange => "TEXT_CHANGE",
            Category::AnimationPhase => "ANIMATION_PHASE",
            Category::AnimationChange => "ANIMATION_CHANGE",
            Category::SemanticChange => "SEMANTIC_CHANGE",
            Category::Unknown(_) => return None,
        })
    }

    /// One-line description used in the analysis prompt.
    pub fn description(&self) -> &'static str {
        match self {
            Category::ColorChange => "Different color values due to styling updates.",
            Category::PaddingChange => "Change in margins/spacing; layout shifts.",
            Category::ContentChange => "Different content (e.g. image) with changed meaning.",
            Category::LayoutChange => "Components repositioned/resized, changing structure.",
            Category::TextChange => "Text string changed, altering displayed message meaning.",
            Category::AnimationPhase => "Snapshot taken mid-animation, showing intermediate state.",
            Category::AnimationChange => "Change in animation duration/timing alters output.",
            Category::SemanticChange => {
                "Behavior changed (toggle on/off) without layout/text change."
            }
            Category::Unknown(_) => "Change not from above categories; T names new reason.",
        }
    }
}

/// Parses a wire string into a category.
///
/// Input is trimmed and uppercased first. A bare `UNKNOWN` becomes
/// `UNKNOWN_UNSPECIFIED`.
pub fn parse_category(raw: &str) -> Result<Category, TaxonomyError> {
    let normalized = raw.trim().to_ascii_uppercase();
    let invalid = || TaxonomyError::InvalidCategory {
        raw: raw.to_string(),
    };
    if normalized.is_empty() {
        return Err(invalid());
    }
    if let Some(known) = Category::KNOWN
        .iter()
        .find(|c| c.known_name() == Some(normalized.as_str()))
    {
        return Ok(known.clone());
    }
    if normalized == "UNKNOWN" {
        return Category::unknown(UNSPECIFIED_TAG);
    }
    match normalized.strip_prefix(UNKNOWN_PREFIX) {
        Some(tag) => Category::unknown(tag).map_err(|_| invalid()),
        None => Err(invalid()),
    }
}

impl FromStr for Category {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_category(s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Unknown(tag) => write!(f, "{UNKNOWN_PREFIX}{}", tag.as_str()),
            known => f.write_str(known.known_name().unwrap_or_default()),
        }
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_category(&raw).map_err(serde::de::Error::custom)
    }
}

/// Ordered, duplicate-free collection of categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategorySet {
    members: Vec<Category>,
}

impl CategorySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `category` unless already present. Returns whether it was added.
    pub fn insert(&mut self, category: Category) -> bool {
        if self.contains(&category) {
            false
        } else {
            self.members.push(category);
            true
        }
    }

    pub fn contains(&self, category: &Category) -> bool {
        self.members.contains(category)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn first(&self) -> Option<&Category> {
        self.members.first()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Category> {
        self.members.iter()
    }

    pub fn has_unknown(&self) -> bool {
        self.members.iter().any(Category::is_unknown)
    }

    /// Copy of the set with `category` removed.
    pub fn without(&self, category: &Category) -> CategorySet {
        CategorySet {
            members: self
                .members
                .iter()
                .filter(|c| *c != category)
                .cloned()
                .collect(),
        }
    }

    pub fn intersection_count(&self, other: &CategorySet) -> usize {
        self.members.iter().filter(|c| other.contains(c)).count()
    }

    pub fn canonical_names(&self) -> Vec<String> {
        self.members.iter().map(Category::canonical_name).collect()
    }
}

impl FromIterator<Category> for CategorySet {
    fn from_iter<I: IntoIterator<Item = Category>>(iter: I) -> Self {
        let mut set = CategorySet::new();
        for category in iter {
            set.insert(category);
        }
        set
    }
}

impl<'a> IntoIterator for &'a CategorySet {
    type Item = &'a Category;
    type IntoIter = std::slice::Iter<'a, Category>;

    fn into_iter(self) -> Self::IntoIter {
        self.members.iter()
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_names().join(","))
    }
}

impl Serialize for CategorySet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.members.iter())
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raws = Vec::<String>::deserialize(deserializer)?;
        parse_category_set(&raws).map_err(serde::de::Error::custom)
    }
}

/// Parses every element, dropping later duplicates and keeping source order.
pub fn parse_category_set<S: AsRef<str>>(raws: &[S]) -> Result<CategorySet, TaxonomyError> {
    let mut set = CategorySet::new();
    for (index, raw) in raws.iter().enumerate() {
        let category = parse_category(raw.as_ref()).map_err(|_| TaxonomyError::InvalidCategoryAt {
            index,
            raw: raw.as_ref().to_string(),
        })?;
        set.insert(category);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_known_names() {
        assert_eq!(parse_category("COLOR_CHANGE").unwrap(), Category::ColorChange);
        assert_eq!(parse_category("color_change").unwrap(), Category::ColorChange);
        assert_eq!(
            parse_category("  semantic_change\n").unwrap(),
            Category::SemanticChange
        );
    }

    #[test]
    fn parses_unknowns() {
        let c = parse_category("UNKNOWN_SHADOW_CHANGE").unwrap();
        assert_eq!(c.unknown_tag(), Some("SHADOW_CHANGE"));
        assert_eq!(c.canonical_name(), "UNKNOWN_SHADOW_CHANGE");

        let bare = parse_category("unknown").unwrap();
        assert_eq!(bare.unknown_tag(), Some(UNSPECIFIED_TAG));
    }

    #[test]
    fn rejects_garbage() {
        for raw in ["", "   ", "bogus!", "UNKNOWN_", "UNKNOWN_SHADOW CHANGE", "COLOR"] {
            assert!(
                matches!(parse_category(raw), Err(TaxonomyError::InvalidCategory { .. })),
                "{raw:?} should be rejected"
            );
        }
    }

    #[test]
    fn set_dedups_and_keeps_order() {
        let set = parse_category_set(&["TEXT_CHANGE", "TEXT_CHANGE"]).unwrap();
        assert_eq!(set.canonical_names(), vec!["TEXT_CHANGE"]);

        let set = parse_category_set(&["LAYOUT_CHANGE", "COLOR_CHANGE"]).unwrap();
        assert_eq!(set.canonical_names(), vec!["LAYOUT_CHANGE", "COLOR_CHANGE"]);

        let set = parse_category_set(&["UNKNOWN", "unknown_unspecified"]).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn set_reports_offending_index() {
        let err = parse_category_set(&["PADDING_CHANGE", "bogus!"]).unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::InvalidCategoryAt {
                index: 1,
                raw: "bogus!".into()
            }
        );
    }

    #[test]
    fn unknown_detection() {
        let set = parse_category_set(&["TEXT_CHANGE"]).unwrap();
        assert!(!set.has_unknown());
        let set = parse_category_set(&["TEXT_CHANGE", "UNKNOWN_X"]).unwrap();
        assert!(set.has_unknown());
    }

    #[test]
    fn serde_uses_canonical_strings() {
        let set = parse_category_set(&["color_change", "UNKNOWN_GLOW"]).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"["COLOR_CHANGE","UNKNOWN_GLOW"]"#);
        let back: CategorySet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    fn any_category() -> impl Strategy<Value = Category> {
        prop_oneof![
            (0usize..8).prop_map(|i| Category::KNOWN[i].clone()),
            "[A-Z0-9_]{1,12}".prop_map(|tag| Category::unknown(tag).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn canonical_round_trip(c in any_category()) {
            prop_assert_eq!(parse_category(&c.canonical_name()).unwrap(), c);
        }

        #[test]
        fn dedup_is_idempotent(cs in proptest::collection::vec(any_category(), 0..10)) {
            let names: Vec<String> = cs.iter().map(Category::canonical_name).collect();
            let once = parse_category_set(&names).unwrap();
            let twice = parse_category_set(&once.canonical_names()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
