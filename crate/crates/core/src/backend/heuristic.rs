//! Image-only classifier for offline runs.
//!
//! Changed pixels are split into swapped component pairs and horizontal bands;
//! each band is tested, in order, for an exact translation, a translation of
//! the foreground silhouette with a colour change, a consistent colour
//! relabeling, and a two-colour ink change. Anything else is a content change.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde_json::json;

use crate::imaging::{self, ImagingError, RasterImage, Rect, Rgb};
use crate::taxonomy::{Category, CategorySet};

/// Largest displacement searched by the translation tests.
pub const MAX_SHIFT: i32 = 11;
/// Rows without changes that still join two changed rows into one band.
const BAND_GAP: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub category: Category,
    pub region: Rect,
    pub detail: String,
}

struct Changes<'a> {
    reference: &'a RasterImage,
    failure: &'a RasterImage,
    mask: Vec<bool>,
    background: Rgb,
}

impl<'a> Changes<'a> {
    fn new(reference: &'a RasterImage, failure: &'a RasterImage) -> Self {
        let mask = reference
            .pixels()
            .chunks_exact(3)
            .zip(failure.pixels().chunks_exact(3))
            .map(|(r, f)| r != f)
            .collect();
        Self {
            reference,
            failure,
            mask,
            background: mode_color(reference),
        }
    }

    fn width(&self) -> u32 {
        self.reference.width()
    }

    fn height(&self) -> u32 {
        self.reference.height()
    }

    fn changed(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width() + x) as usize]
    }

    fn reference_at(&self, x: i64, y: i64) -> Option<Rgb> {
        (x >= 0 && y >= 0 && x < i64::from(self.width()) && y < i64::from(self.height()))
            .then(|| self.reference.get(x as u32, y as u32))
    }

    /// Bounding boxes of 8-connected changed regions, in scan order.
    fn components(&self) -> Vec<Rect> {
        let (w, h) = (self.width(), self.height());
        let mut seen = vec![false; self.mask.len()];
        let mut out = Vec::new();
        for start in 0..self.mask.len() {
            if !self.mask[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i as u32 % w, i as u32 / w);
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                        if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                            continue;
                        }
                        let j = (ny as u32 * w + nx as u32) as usize;
                        if self.mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
            out.push(Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
        out
    }

    fn free_of_background(&self, image: &RasterImage, rect: Rect) -> bool {
        pixels_in(rect).all(|(x, y)| image.get(x, y) != self.background)
    }

    fn is_swap(&self, a: Rect, b: Rect) -> bool {
        a.width == b.width
            && a.height == b.height
            && self.free_of_background(self.reference, a)
            && self.free_of_background(self.reference, b)
            && self.failure.crop(a) == self.reference.crop(b)
            && self.failure.crop(b) == self.reference.crop(a)
    }

    fn shifts() -> Vec<(i32, i32)> {
        let mut shifts: Vec<(i32, i32)> = (-MAX_SHIFT..=MAX_SHIFT)
            .flat_map(|dy| (-MAX_SHIFT..=MAX_SHIFT).map(move |dx| (dx, dy)))
            .filter(|&s| s != (0, 0))
            .collect();
        shifts.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dy, dx));
        shifts
    }

    fn find_translation(&self, band: Rect) -> Option<(i32, i32)> {
        Self::shifts().into_iter().find(|&(dx, dy)| {
            pixels_in(band).all(|(x, y)| {
                self.reference_at(i64::from(x) - i64::from(dx), i64::from(y) - i64::from(dy))
                    == Some(self.failure.get(x, y))
            })
        })
    }

    fn find_silhouette_translation(&self, band: Rect) -> Option<(i32, i32)> {
        let bg = self.background;
        if !pixels_in(band).any(|(x, y)| self.reference.get(x, y) != bg) {
            return None;
        }
        Self::shifts().into_iter().find(|&(dx, dy)| {
            pixels_in(band).all(|(x, y)| {
                match self.reference_at(i64::from(x) - i64::from(dx), i64::from(y) - i64::from(dy)) {
                    Some(r) => (r != bg) == (self.failure.get(x, y) != bg),
                    None => false,
                }
            })
        })
    }

    /// Whether reference colours map one-to-one onto failure colours.
    fn is_relabel(&self, band: Rect) -> bool {
        let window = expand(band, 1, self.width(), self.height());
        let mut forward: HashMap<Rgb, Rgb> = HashMap::new();
        let mut backward: HashMap<Rgb, Rgb> = HashMap::new();
        for (x, y) in pixels_in(window) {
            let (r, f) = (self.reference.get(x, y), self.failure.get(x, y));
            if *forward.entry(r).or_insert(f) != f || *backward.entry(f).or_insert(r) != r {
                return false;
            }
        }
        true
    }

    /// Whether the changed pixels only toggle between the background and a
    /// single ink colour.
    fn is_ink_change(&self, band: Rect) -> bool {
        let mut colors = Vec::new();
        for (x, y) in pixels_in(band).filter(|&(x, y)| self.changed(x, y)) {
            for c in [self.reference.get(x, y), self.failure.get(x, y)] {
                if !colors.contains(&c) {
                    colors.push(c);
                    if colors.len() > 2 {
                        return false;
                    }
                }
            }
        }
        colors.len() == 2 && colors.contains(&self.background)
    }

    fn classify_band(&self, band: Rect) -> Finding {
        let (category, detail) = if let Some((dx, dy)) = self.find_translation(band) {
            (
                Category::PaddingChange,
                format!("content moved by ({dx}, {dy}) px without other changes"),
            )
        } else if let Some((dx, dy)) = self.find_silhouette_translation(band) {
            (
                Category::AnimationPhase,
                format!("element moved by ({dx}, {dy}) px and its colour changed, as in a different animation frame"),
            )
        } else if self.is_relabel(band) {
            (Category::ColorChange, "element colours changed with identical geometry".to_string())
        } else if self.is_ink_change(band) {
            (Category::TextChange, "glyph shapes changed in a single ink colour".to_string())
        } else {
            (Category::ContentChange, "element contents were replaced".to_string())
        };
        Finding {
            category,
            region: band,
            detail,
        }
    }
}

fn pixels_in(rect: Rect) -> impl Iterator<Item = (u32, u32)> {
    (rect.y..rect.bottom()).flat_map(move |y| (rect.x..rect.right()).map(move |x| (x, y)))
}

fn expand(rect: Rect, by: u32, width: u32, height: u32) -> Rect {
    let x = rect.x.saturating_sub(by);
    let y = rect.y.saturating_sub(by);
    let right = (rect.right() + by).min(width);
    let bottom = (rect.bottom() + by).min(height);
    Rect::new(x, y, right - x, bottom - y)
}

/// Most frequent colour; ties go to the smallest colour value.
fn mode_color(image: &RasterImage) -> Rgb {
    let mut counts: BTreeMap<Rgb, usize> = BTreeMap::new();
    for px in image.pixels().chunks_exact(3) {
        *counts.entry([px[0], px[1], px[2]]).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or([255, 255, 255])
}

/// Locates and labels every changed region.
pub fn classify_regions(reference: &RasterImage, failure: &RasterImage) -> Result<Vec<Finding>, ImagingError> {
    imaging::validate_pair(reference, failure)?;
    let changes = Changes::new(reference, failure);
    let mut remaining = changes.mask.clone();
    let mut findings = Vec::new();

    let components = changes.components();
    let mut paired = vec![false; components.len()];
    for i in 0..components.len() {
        for j in i + 1..components.len() {
            if paired[i] || paired[j] || !changes.is_swap(components[i], components[j]) {
                continue;
            }
            paired[i] = true;
            paired[j] = true;
            for rect in [components[i], components[j]] {
                for (x, y) in pixels_in(rect) {
                    remaining[(y * changes.width() + x) as usize] = false;
                }
            }
            findings.push(Finding {
                category: Category::LayoutChange,
                region: components[i],
                detail: format!(
                    "elements at ({}, {}) and ({}, {}) swapped positions",
                    components[i].x, components[i].y, components[j].x, components[j].y
                ),
            });
        }
    }

    let width = changes.width() as usize;
    let row_span = |y: u32| {
        let row = &remaining[y as usize * width..(y as usize + 1) * width];
        let first = row.iter().position(|&c| c)?;
        let last = row.iter().rposition(|&c| c)?;
        Some((first as u32, last as u32))
    };
    let mut band: Option<(u32, u32, u32, u32)> = None;
    let mut last_row = 0;
    for y in 0..changes.height() {
        let Some((x0, x1)) = row_span(y) else { continue };
        band = match band {
            Some((bx0, by0, bx1, _)) if y - last_row <= BAND_GAP + 1 => Some((bx0.min(x0), by0, bx1.max(x1), y)),
            Some((bx0, by0, bx1, by1)) => {
                findings.push(changes.classify_band(Rect::new(bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1)));
                Some((x0, y, x1, y))
            }
            None => Some((x0, y, x1, y)),
        };
        last_row = y;
    }
    if let Some((x0, y0, x1, y1)) = band {
        findings.push(changes.classify_band(Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1)));
    }
    findings.sort_by_key(|f| (f.region.y, f.region.x));
    Ok(findings)
}

/// Classifies an image pair and renders the result in the analysis schema.
pub fn heuristic_classify(reference: &RasterImage, failure: &RasterImage) -> Result<String, ImagingError> {
    let findings = classify_regions(reference, failure)?;
    let score = imaging::pixel_diff_score(reference, failure)?;
    let changed = reference
        .pixels()
        .chunks_exact(3)
        .zip(failure.pixels().chunks_exact(3))
        .filter(|(r, f)| r != f)
        .count();
    let fraction = changed as f64 / f64::from(reference.width() * reference.height());
    let categories: CategorySet = findings.iter().map(|f| f.category.clone()).collect();
    let elements: Vec<String> = findings
        .iter()
        .map(|f| {
            format!(
                "region at ({}, {}) size {}x{}",
                f.region.x, f.region.y, f.region.width, f.region.height
            )
        })
        .collect();
    let explanation = if findings.is_empty() {
        "The snapshots are pixel-identical.".to_string()
    } else {
        findings
            .iter()
            .map(|f| format!("{}: {}.", f.category, f.detail))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let value = json!({
        "categories": categories.canonical_names(),
        "pixel_difference": score,
        "semantic_difference": fraction,
        "affected_elements": elements,
        "explanation": explanation,
    });
    Ok(serde_json::to_string_pretty(&value).expect("json value serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synthesize_case, SYNTHESIZABLE};

    fn predicted(reference: &RasterImage, failure: &RasterImage) -> CategorySet {
        classify_regions(reference, failure)
            .unwrap()
            .into_iter()
            .map(|f| f.category)
            .collect()
    }

    #[test]
    fn identical_images_have_no_findings() {
        let image = RasterImage::filled(8, 8, [10, 20, 30]);
        let json: serde_json::Value = serde_json::from_str(&heuristic_classify(&image, &image).unwrap()).unwrap();
        assert_eq!(json["categories"], json!([]));
        assert_eq!(json["pixel_difference"], json!(0.0));
    }

    #[test]
    fn recognizes_single_generated_mutations() {
        let mut misses = Vec::new();
        for seed in 0..30u64 {
            for category in &SYNTHESIZABLE {
                let case = synthesize_case(seed, std::slice::from_ref(category)).unwrap();
                let got = predicted(&case.reference, &case.failure);
                if got != case.ground_truth() {
                    misses.push(format!("seed {seed}: {category} -> {got}"));
                }
            }
        }
        assert!(misses.is_empty(), "{misses:#?}");
    }

    #[test]
    fn recognizes_generated_pairs() {
        let mut misses = Vec::new();
        for seed in 0..6u64 {
            for a in &SYNTHESIZABLE {
                for b in SYNTHESIZABLE.iter().filter(|b| *b != a) {
                    let case = synthesize_case(seed, &[a.clone(), b.clone()]).unwrap();
                    let got = predicted(&case.reference, &case.failure);
                    if got.intersection_count(&case.ground_truth()) != 2 || got.len() != 2 {
                        misses.push(format!("seed {seed}: {a}+{b} -> {got}"));
                    }
                }
            }
        }
        assert!(misses.is_empty(), "{misses:#?}");
    }

    #[test]
    fn score_is_exact_and_output_deterministic() {
        let case = synthesize_case(3, &[Category::ColorChange]).unwrap();
        let a = heuristic_classify(&case.reference, &case.failure).unwrap();
        assert_eq!(a, heuristic_classify(&case.reference, &case.failure).unwrap());
        let json: serde_json::Value = serde_json::from_str(&a).unwrap();
        let exact = imaging::pixel_diff_score(&case.reference, &case.failure).unwrap();
        assert_eq!(json["pixel_difference"].as_f64().unwrap(), exact);
        assert_eq!(json["categories"], json!(["COLOR_CHANGE"]));
    }

    #[test]
    fn eight_pixel_shift_is_padding() {
        let mut reference = RasterImage::filled(60, 30, [250, 250, 250]);
        reference.fill_rect(Rect::new(10, 10, 20, 10), [20, 90, 200]);
        let mut failure = RasterImage::filled(60, 30, [250, 250, 250]);
        failure.fill_rect(Rect::new(18, 10, 20, 10), [20, 90, 200]);
        let got = predicted(&reference, &failure);
        assert!(got.contains(&Category::PaddingChange), "{got}");
    }

    #[test]
    fn mismatched_dimensions_fail() {
        let a = RasterImage::filled(4, 4, [0, 0, 0]);
        let b = RasterImage::filled(4, 5, [0, 0, 0]);
        assert!(matches!(heuristic_classify(&a, &b), Err(ImagingError::DimensionMismatch { .. })));
    }
}
