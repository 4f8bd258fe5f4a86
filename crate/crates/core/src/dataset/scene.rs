//! Procedural UI scenes: a header bar, cards, block-glyph text lines, a row of
//! icon squares, and a small animated indicator, all flat-shaded on a uniform
//! background.

use serde::{Deserialize, Serialize};

use super::font;
use crate::imaging::{RasterImage, Rect, Rgb};

pub const SCENE_WIDTH: u32 = 180;
pub const SCENE_HEIGHT: u32 = 240;

pub const HEADER_HEIGHT: u32 = 28;
pub const FIRST_ROW_Y: u32 = 40;
pub const ROW_GAP: u32 = 12;

pub const CARD_X: u32 = 20;
pub const CARD_WIDTH: u32 = 140;
pub const CARD_HEIGHT: u32 = 32;

pub const TEXT_X: u32 = 16;
pub const TEXT_SCALE: u32 = 2;
pub const TEXT_MAX_CHARS: usize = 12;

pub const ICON_COUNT: u32 = 4;
pub const ICON_SIZE: u32 = 20;
pub const ICON_X: u32 = 20;
pub const ICON_PITCH: u32 = 40;

pub const SPRITE_SIZE: u32 = 12;
/// Horizontal extent the indicator may occupy.
pub const SPRITE_TRACK: (u32, u32) = (16, 164);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fill {
    Solid { color: Rgb },
    Text { text: String, color: Rgb, scale: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    /// Bounding box. For text this is the full line box, wider than the ink.
    pub rect: Rect,
    pub fill: Fill,
}

impl Component {
    pub fn solid_color(&self) -> Option<Rgb> {
        match self.fill {
            Fill::Solid { color } => Some(color),
            Fill::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Header,
    Card,
    Text,
    Icons,
    Sprite,
}

/// A horizontal band of the scene and the components it holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub kind: RowKind,
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub background: Rgb,
    pub components: Vec<Component>,
    pub rows: Vec<Row>,
}

impl Scene {
    pub fn new(background: Rgb) -> Self {
        Self {
            width: SCENE_WIDTH,
            height: SCENE_HEIGHT,
            background,
            components: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Appends a row and returns the component indices it received.
    pub fn push_row(&mut self, kind: RowKind, components: Vec<Component>) -> Vec<usize> {
        let start = self.components.len();
        self.components.extend(components);
        let indices: Vec<usize> = (start..self.components.len()).collect();
        self.rows.push(Row {
            kind,
            components: indices.clone(),
        });
        indices
    }

    pub fn colors(&self) -> Vec<Rgb> {
        let mut colors = vec![self.background];
        for component in &self.components {
            colors.push(match &component.fill {
                Fill::Solid { color } => *color,
                Fill::Text { color, .. } => *color,
            });
        }
        colors
    }

    pub fn render(&self) -> RasterImage {
        let mut image = RasterImage::filled(self.width, self.height, self.background);
        for component in &self.components {
            draw_component(&mut image, component);
        }
        image
    }
}

fn draw_component(image: &mut RasterImage, component: &Component) {
    match &component.fill {
        Fill::Solid { color } => image.fill_rect(component.rect, *color),
        Fill::Text { text, color, scale } => {
            let Some(mask) = font::text_mask(text, *scale) else {
                return;
            };
            let w = font::text_width(text, *scale);
            let h = font::text_height(*scale);
            for y in 0..h.min(component.rect.height) {
                for x in 0..w.min(component.rect.width) {
                    if mask[(y * w + x) as usize] {
                        let (px, py) = (component.rect.x + x, component.rect.y + y);
                        if px < image.width() && py < image.height() {
                            image.set(px, py, *color);
                        }
                    }
                }
            }
        }
    }
}

/// Ink mask of a text fill padded to `width × height`.
pub fn padded_text_mask(text: &str, scale: u32, width: u32, height: u32) -> Vec<bool> {
    let mut out = vec![false; (width * height) as usize];
    if let Some(mask) = font::text_mask(text, scale) {
        let w = font::text_width(text, scale);
        let h = font::text_height(scale);
        for y in 0..h.min(height) {
            for x in 0..w.min(width) {
                out[(y * width + x) as usize] = mask[(y * w + x) as usize];
            }
        }
    }
    out
}

pub fn text_line_rect(y: u32) -> Rect {
    Rect::new(
        TEXT_X,
        y,
        font::text_width(&"W".repeat(TEXT_MAX_CHARS), TEXT_SCALE),
        font::text_height(TEXT_SCALE),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_components_in_place() {
        let mut scene = Scene::new([250, 250, 250]);
        scene.push_row(
            RowKind::Header,
            vec![Component {
                name: "header".into(),
                rect: Rect::new(0, 0, SCENE_WIDTH, HEADER_HEIGHT),
                fill: Fill::Solid { color: [30, 60, 90] },
            }],
        );
        scene.push_row(
            RowKind::Text,
            vec![Component {
                name: "text".into(),
                rect: text_line_rect(FIRST_ROW_Y),
                fill: Fill::Text {
                    text: "I".into(),
                    color: [0, 0, 0],
                    scale: TEXT_SCALE,
                },
            }],
        );
        let image = scene.render();
        assert_eq!(image.dimensions(), (SCENE_WIDTH, SCENE_HEIGHT));
        assert_eq!(image.get(5, 5), [30, 60, 90]);
        assert_eq!(image.get(5, 35), [250, 250, 250]);
        let ink = (0..SCENE_HEIGHT)
            .flat_map(|y| (0..SCENE_WIDTH).map(move |x| (x, y)))
            .filter(|&(x, y)| image.get(x, y) == [0, 0, 0])
            .count();
        assert_eq!(ink, 11 * 4);
        assert_eq!(text_line_rect(0).width, 144);
    }
}
