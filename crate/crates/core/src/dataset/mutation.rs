//! Raster-level mutation operators, one per synthesizable category.

use serde::{Deserialize, Serialize};

use super::font;
use crate::imaging::{RasterImage, Rect, Rgb};
use crate::taxonomy::Category;

use super::DatasetError;

/// Two-colour fill used by content replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillPattern {
    Checker { cell: u32, colors: [Rgb; 2] },
    Stripes { width: u32, colors: [Rgb; 2] },
}

impl FillPattern {
    /// Colour at local coordinates `(x, y)`; `phase` offsets the pattern.
    pub fn color_at(&self, x: u32, y: u32, phase: u64) -> Rgb {
        match *self {
            FillPattern::Checker { cell, colors } => {
                let parity = (u64::from(x / cell) + u64::from(y / cell) + phase % 2) % 2;
                colors[parity as usize]
            }
            FillPattern::Stripes { width, colors } => {
                let period = 2 * u64::from(width);
                let band = (u64::from(x) + phase % period) / u64::from(width) % 2;
                colors[band as usize]
            }
        }
    }

    fn cell_size(&self) -> u32 {
        match *self {
            FillPattern::Checker { cell, .. } => cell,
            FillPattern::Stripes { width, .. } => width,
        }
    }
}

/// Category-specific parameters of a mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MutationOp {
    /// Adds a signed delta to every channel in the region (saturating).
    Recolor { delta: [i16; 3] },
    /// Moves the region's content; the vacated area becomes `background`.
    Shift { dx: i32, dy: i32, background: Rgb },
    /// Clears the region to `background` and draws `text` at its origin.
    Retext {
        text: String,
        color: Rgb,
        background: Rgb,
        scale: u32,
    },
    /// Replaces the region with a fill pattern, offset by the spec seed.
    Refill { pattern: FillPattern },
    /// Exchanges the region's content with an equally sized `other` region.
    Swap { other: Rect },
    /// Shows the region's content part-way through an entrance animation:
    /// displaced by `(1 - progress) * start_offset` and faded in from
    /// `background` with opacity `progress`.
    Interpolate {
        start_offset: (i32, i32),
        progress: f64,
        background: Rgb,
    },
}

/// One mutation to apply to a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub op: MutationOp,
    /// Target region; `None` means the whole image.
    pub region: Option<Rect>,
    pub seed: u64,
}

impl MutationSpec {
    pub fn category(&self) -> Category {
        match self.op {
            MutationOp::Recolor { .. } => Category::ColorChange,
            MutationOp::Shift { .. } => Category::PaddingChange,
            MutationOp::Retext { .. } => Category::TextChange,
            MutationOp::Refill { .. } => Category::ContentChange,
            MutationOp::Swap { .. } => Category::LayoutChange,
            MutationOp::Interpolate { .. } => Category::AnimationPhase,
        }
    }
}

/// Channel value `progress` of the way from `from` to `to`, rounded half away
/// from zero.
pub fn lerp_channel(from: u8, to: u8, progress: f64) -> u8 {
    let value = f64::from(from) + progress * (f64::from(to) - f64::from(from));
    value.round().clamp(0.0, 255.0) as u8
}

pub fn lerp_color(from: Rgb, to: Rgb, progress: f64) -> Rgb {
    [
        lerp_channel(from[0], to[0], progress),
        lerp_channel(from[1], to[1], progress),
        lerp_channel(from[2], to[2], progress),
    ]
}

/// Displacement of an interpolated element at `progress`.
pub fn interpolated_offset(start_offset: (i32, i32), progress: f64) -> (i32, i32) {
    let remaining = 1.0 - progress;
    (
        (f64::from(start_offset.0) * remaining).round() as i32,
        (f64::from(start_offset.1) * remaining).round() as i32,
    )
}

fn invalid(msg: impl Into<String>) -> DatasetError {
    DatasetError::InvalidMutation(msg.into())
}

fn checked_translate(rect: Rect, dx: i32, dy: i32, width: u32, height: u32) -> Result<Rect, DatasetError> {
    rect.translated(dx, dy)
        .filter(|moved| moved.fits_within(width, height))
        .ok_or_else(|| invalid(format!("region {rect:?} moved by ({dx}, {dy}) leaves the scene")))
}

/// Applies `spec` to `scene` and returns the mutated copy.
pub fn apply_mutation(scene: &RasterImage, spec: &MutationSpec) -> Result<RasterImage, DatasetError> {
    let (width, height) = scene.dimensions();
    let region = spec.region.unwrap_or(Rect::new(0, 0, width, height));
    if !region.fits_within(width, height) {
        return Err(invalid(format!(
            "region {region:?} outside {width}x{height} scene"
        )));
    }
    let mut out = scene.clone();
    match &spec.op {
        MutationOp::Recolor { delta } => {
            if delta.iter().all(|&d| d == 0) {
                return Err(invalid("recolor delta is zero"));
            }
            if delta.iter().any(|d| d.unsigned_abs() > 255) {
                return Err(invalid("recolor delta exceeds 255"));
            }
            for y in region.y..region.bottom() {
                for x in region.x..region.right() {
                    let px = scene.get(x, y);
                    let shifted = std::array::from_fn(|c| {
                        (i16::from(px[c]) + delta[c]).clamp(0, 255) as u8
                    });
                    out.set(x, y, shifted);
                }
            }
        }
        MutationOp::Shift { dx, dy, background } => {
            if *dx == 0 && *dy == 0 {
                return Err(invalid("shift is zero"));
            }
            let target = checked_translate(region, *dx, *dy, width, height)?;
            let content = scene.crop(region);
            out.fill_rect(region, *background);
            out.blit(&content, target.x, target.y);
        }
        MutationOp::Retext {
            text,
            color,
            background,
            scale,
        } => {
            if *scale == 0 {
                return Err(invalid("text scale is zero"));
            }
            if text.is_empty() {
                return Err(invalid("replacement text is empty"));
            }
            if let Some(bad) = text.chars().find(|&c| !font::is_supported(c)) {
                return Err(invalid(format!("no glyph for {bad:?}")));
            }
            let text_w = font::text_width(text, *scale);
            let text_h = font::text_height(*scale);
            if text_w > region.width || text_h > region.height {
                return Err(invalid(format!(
                    "text {text:?} ({text_w}x{text_h}) does not fit region {region:?}"
                )));
            }
            let mask = font::text_mask(text, *scale).expect("glyphs checked above");
            out.fill_rect(region, *background);
            for ty in 0..text_h {
                for tx in 0..text_w {
                    if mask[(ty * text_w + tx) as usize] {
                        out.set(region.x + tx, region.y + ty, *color);
                    }
                }
            }
        }
        MutationOp::Refill { pattern } => {
            if pattern.cell_size() == 0 {
                return Err(invalid("pattern cell size is zero"));
            }
            for y in 0..region.height {
                for x in 0..region.width {
                    out.set(region.x + x, region.y + y, pattern.color_at(x, y, spec.seed));
                }
            }
        }
        MutationOp::Swap { other } => {
            if !other.fits_within(width, height) {
                return Err(invalid(format!("swap target {other:?} outside scene")));
            }
            if (other.width, other.height) != (region.width, region.height) {
                return Err(invalid("swap regions differ in size"));
            }
            if region.overlap_area(other) > 0 {
                return Err(invalid("swap regions overlap"));
            }
            let a = scene.crop(region);
            let b = scene.crop(*other);
            out.blit(&b, region.x, region.y);
            out.blit(&a, other.x, other.y);
        }
        MutationOp::Interpolate {
            start_offset,
            progress,
            background,
        } => {
            if !(*progress > 0.0 && *progress < 1.0) {
                return Err(invalid(format!("progress {progress} outside (0, 1)")));
            }
            let (dx, dy) = interpolated_offset(*start_offset, *progress);
            if dx == 0 && dy == 0 {
                return Err(invalid("interpolated position equals the rest position"));
            }
            let target = checked_translate(region, dx, dy, width, height)?;
            let content = scene.crop(region);
            out.fill_rect(region, *background);
            for y in 0..region.height {
                for x in 0..region.width {
                    let faded = lerp_color(*background, content.get(x, y), *progress);
                    out.set(target.x + x, target.y + y, faded);
                }
            }
        }
    }
    Ok(out)
}
