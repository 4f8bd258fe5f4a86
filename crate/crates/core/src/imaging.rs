//! Raster images, PNG I/O, diff rendering, and the pixel difference score.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("cannot decode {}: {reason}", path.display())]
    DecodeError { path: PathBuf, reason: String },
    #[error("dimension mismatch: reference is {}x{}, failure is {}x{}", .reference.0, .reference.1, .failure.0, .failure.1)]
    DimensionMismatch {
        reference: (u32, u32),
        failure: (u32, u32),
    },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("cannot encode png: {0}")]
    EncodeError(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Rgb = [u8; 3];

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width > 0 && self.height > 0 && self.right() <= width && self.bottom() <= height
    }

    /// Number of pixels shared with `other`.
    pub fn overlap_area(&self, other: &Rect) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        u64::from(w) * u64::from(h)
    }

    /// Moves the rectangle by a signed offset, or `None` if it would leave the
    /// non-negative quadrant.
    pub fn translated(&self, dx: i32, dy: i32) -> Option<Rect> {
        let x = i64::from(self.x) + i64::from(dx);
        let y = i64::from(self.y) + i64::from(dy);
        if x < 0 || y < 0 {
            return None;
        }
        Some(Rect::new(x as u32, y as u32, self.width, self.height))
    }
}

/// 8-bit RGB image stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "empty dimensions {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::InvalidRaster(format!(
                "expected {expected} bytes for {width}x{height}, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Uniformly filled image. Panics on zero dimensions.
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let pixels = color
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, color: Rgb) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Fills `rect`, clipped to the image.
    pub fn fill_rect(&mut self, rect: Rect, color: Rgb) {
        for y in rect.y..rect.bottom().min(self.height) {
            for x in rect.x..rect.right().min(self.width) {
                self.set(x, y, color);
            }
        }
    }

    /// Copies the pixels under `rect`. `rect` must lie within the image.
    pub fn crop(&self, rect: Rect) -> RasterImage {
        let mut pixels = Vec::with_capacity(rect.area() as usize * 3);
        for y in rect.y..rect.bottom() {
            let start = self.offset(rect.x, y);
            let end = start + rect.width as usize * 3;
            pixels.extend_from_slice(&self.pixels[start..end]);
        }
        RasterImage {
            width: rect.width,
            height: rect.height,
            pixels,
        }
    }

    /// Writes `patch` with its top-left corner at `(x, y)`, clipped to the image.
    pub fn blit(&mut self, patch: &RasterImage, x: u32, y: u32) {
        for py in 0..patch.height {
            for px in 0..patch.width {
                let (tx, ty) = (x + px, y + py);
                if tx < self.width && ty < self.height {
                    self.set(tx, ty, patch.get(px, py));
                }
            }
        }
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length is checked at construction")
    }

    pub fn from_rgb_image(image: RgbImage) -> Self {
        let (width, height) = image.dimensions();
        Self {
            width,
            height,
            pixels: image.into_raw(),
        }
    }
}

/// Composites a decoded image over opaque white and drops alpha.
fn flatten_over_white(decoded: DynamicImage) -> RasterImage {
    let rgba = decoded.to_rgba8();
    let (width, height) = rgba.dimensions();
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for px in rgba.pixels() {
        let alpha = u32::from(px.0[3]);
        for &channel in &px.0[..3] {
            let blended = (u32::from(channel) * alpha + 255 * (255 - alpha) + 127) / 255;
            pixels.push(blended as u8);
        }
    }
    RasterImage {
        width,
        height,
        pixels,
    }
}

/// Decodes PNG bytes into an 8-bit RGB raster.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, String> {
    let decoded =
        image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let raster = flatten_over_white(decoded);
    if raster.width == 0 || raster.height == 0 {
        return Err("image has zero size".into());
    }
    Ok(raster)
}

/// Loads a PNG file as 8-bit RGB. Alpha is composited over white; grayscale is
/// expanded to three channels.
pub fn load_image(path: &Path) -> Result<RasterImage, ImagingError> {
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ImagingError::FileNotFound(path.to_path_buf())
        } else {
            ImagingError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    decode_png(&bytes).map_err(|reason| ImagingError::DecodeError {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn encode_png(image: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    image
        .to_rgb_image()
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::EncodeError(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(image: &RasterImage, path: &Path) -> Result<(), ImagingError> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn validate_pair(reference: &RasterImage, failure: &RasterImage) -> Result<(), ImagingError> {
    if reference.dimensions() == failure.dimensions() {
        Ok(())
    } else {
        Err(ImagingError::DimensionMismatch {
            reference: reference.dimensions(),
            failure: failure.dimensions(),
        })
    }
}

/// Normalized pixel difference: the mean of `|R - F| / 255` over every channel
/// value of every pixel. 0 for identical images, 1 for black against white.
pub fn pixel_diff_score(reference: &RasterImage, failure: &RasterImage) -> Result<f64, ImagingError> {
    validate_pair(reference, failure)?;
    let total: u64 = reference
        .pixels
        .iter()
        .zip(&failure.pixels)
        .map(|(&r, &f)| u64::from(r.abs_diff(f)))
        .sum();
    Ok(total as f64 / (255.0 * reference.pixels.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    /// Per-channel absolute difference.
    #[default]
    Absolute,
    /// Changed pixels in red over a dimmed grayscale of the reference.
    Highlight,
}

/// Default highlight threshold on the max channel difference (out of 255).
pub const DEFAULT_HIGHLIGHT_THRESHOLD: u8 = 16;

pub const HIGHLIGHT_COLOR: Rgb = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffOptions {
    pub mode: DiffMode,
    /// A pixel is highlighted when its max channel difference exceeds this.
    pub threshold: u8,
}

impl Default for DiffOptions {
    fn default() -> Self {
        Self {
            mode: DiffMode::Absolute,
            threshold: DEFAULT_HIGHLIGHT_THRESHOLD,
        }
    }
}

impl DiffOptions {
    pub fn with_mode(mode: DiffMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

fn half_luma(color: Rgb) -> u8 {
    let luma = 0.299 * f64::from(color[0]) + 0.587 * f64::from(color[1]) + 0.114 * f64::from(color[2]);
    (luma / 2.0).round() as u8
}

pub fn render_diff_image(
    reference: &RasterImage,
    failure: &RasterImage,
    options: DiffOptions,
) -> Result<RasterImage, ImagingError> {
    validate_pair(reference, failure)?;
    let pixels = match options.mode {
        DiffMode::Absolute => reference
            .pixels
            .iter()
            .zip(&failure.pixels)
            .map(|(&r, &f)| r.abs_diff(f))
            .collect(),
        DiffMode::Highlight => {
            let mut out = Vec::with_capacity(reference.pixels.len());
            for (r, f) in reference
                .pixels
                .chunks_exact(3)
                .zip(failure.pixels.chunks_exact(3))
            {
                let max_diff = r.iter().zip(f).map(|(&a, &b)| a.abs_diff(b)).max().unwrap_or(0);
                if max_diff > options.threshold {
                    out.extend_from_slice(&HIGHLIGHT_COLOR);
                } else {
                    let gray = half_luma([r[0], r[1], r[2]]);
                    out.extend_from_slice(&[gray, gray, gray]);
                }
            }
            out
        }
    };
    Ok(RasterImage {
        width: reference.width,
        height: reference.height,
        pixels,
    })
}

/// Absolute diff image together with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArtifact {
    pub diff_image: RasterImage,
    pub score: f64,
}

impl DiffArtifact {
    pub fn compute(reference: &RasterImage, failure: &RasterImage) -> Result<Self, ImagingError> {
        Ok(Self {
            diff_image: render_diff_image(reference, failure, DiffOptions::default())?,
            score: pixel_diff_score(reference, failure)?,
        })
    }
}
