//! Synthetic dataset generator.
//!
//! Each case renders a randomized UI scene as the reference, then applies one
//! or two mutations to produce the failure. Mutated components never overlap,
//! so every mutation's contribution to the channel-difference sum is known in
//! closed form from the scene model. That sum is recorded per case as
//! `expected_pixel_diff` metadata.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mutation::{interpolated_offset, lerp_color, FillPattern, MutationOp, MutationSpec};
use super::scene::*;
use super::{apply_mutation, DatasetError, DatasetManifest, SnapshotCase, MANIFEST_FILE_NAME, MANIFEST_VERSION};
use crate::imaging::{self, DiffOptions, RasterImage, Rect, Rgb};
use crate::taxonomy::{Category, CategorySet};

/// Categories the generator can produce.
pub const SYNTHESIZABLE: [Category; 6] = [
    Category::ColorChange,
    Category::PaddingChange,
    Category::ContentChange,
    Category::LayoutChange,
    Category::TextChange,
    Category::AnimationPhase,
];

pub const EXPECTED_PIXEL_DIFF_KEY: &str = "expected_pixel_diff";

const BACKGROUNDS: [Rgb; 4] = [
    [246, 246, 246],
    [240, 244, 250],
    [250, 248, 240],
    [255, 255, 255],
];

const WORDS: [&str; 20] = [
    "WELCOME BACK",
    "SIGN IN",
    "CHECKOUT",
    "PREMIUM",
    "SETTINGS",
    "UPGRADE NOW",
    "TRY FREE",
    "PROFILE",
    "CART 3",
    "ORDERS",
    "SAVE 20",
    "LOG OUT",
    "NEW ITEMS",
    "FAVORITES",
    "HELP",
    "NOTIFY ME",
    "DARK MODE",
    "INBOX 12",
    "TOTAL 48",
    "CONTINUE",
];

const PROGRESS_STEPS: [f64; 5] = [0.25, 0.4, 0.5, 0.6, 0.75];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub count: usize,
    pub categories: Vec<Category>,
    pub seed: u64,
    /// Fraction of cases (rounded to a whole count) that carry two labels.
    pub multi_label_fraction: f64,
    pub name: Option<String>,
}

impl SyntheticConfig {
    pub fn new(count: usize, categories: Vec<Category>, seed: u64, multi_label_fraction: f64) -> Self {
        Self {
            count,
            categories,
            seed,
            multi_label_fraction,
            name: None,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.count == 0 {
            return Err(DatasetError::InvalidArgument("count must be positive".into()));
        }
        if self.categories.is_empty() {
            return Err(DatasetError::InvalidArgument("no categories given".into()));
        }
        if let Some(bad) = self.categories.iter().find(|c| !SYNTHESIZABLE.contains(c)) {
            return Err(DatasetError::UnsupportedCategory(bad.clone()));
        }
        if !(0.0..=1.0).contains(&self.multi_label_fraction) {
            return Err(DatasetError::InvalidArgument(format!(
                "multi-label fraction {} outside [0, 1]",
                self.multi_label_fraction
            )));
        }
        Ok(())
    }
}

/// A mutation together with its analytic footprint.
#[derive(Debug, Clone)]
pub struct PlannedMutation {
    pub spec: MutationSpec,
    pub target: String,
    /// Rectangles that bound every pixel the mutation may change.
    pub footprint: Vec<Rect>,
    /// Closed-form sum of `|R - F|` over all channels.
    pub channel_diff_sum: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub scene: Scene,
    pub reference: RasterImage,
    pub failure: RasterImage,
    pub mutations: Vec<PlannedMutation>,
}

impl SyntheticCase {
    pub fn ground_truth(&self) -> CategorySet {
        self.mutations.iter().map(|m| m.spec.category()).collect()
    }

    /// Pixel difference score predicted from the mutation footprints.
    pub fn expected_pixel_diff(&self) -> f64 {
        let total: u64 = self.mutations.iter().map(|m| m.channel_diff_sum).sum();
        total as f64 / (255.0 * f64::from(self.scene.width * self.scene.height * 3))
    }
}

fn max_channel_gap(a: Rgb, b: Rgb) -> u8 {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

fn channel_sum(a: Rgb, b: Rgb) -> u64 {
    (0..3).map(|i| u64::from(a[i].abs_diff(b[i]))).sum()
}

/// Picks colours that stay visually distinct from the background and from
/// each other.
struct Palette {
    background: Rgb,
    used: Vec<Rgb>,
}

impl Palette {
    const MIN_BACKGROUND_GAP: u8 = 70;
    const MIN_PEER_GAP: u8 = 30;

    fn new(background: Rgb) -> Self {
        Self {
            background,
            used: Vec::new(),
        }
    }

    fn acceptable(&self, color: Rgb) -> bool {
        max_channel_gap(color, self.background) >= Self::MIN_BACKGROUND_GAP
            && self.used.iter().all(|&u| max_channel_gap(u, color) >= Self::MIN_PEER_GAP)
    }

    fn pick(&mut self, rng: &mut ChaCha8Rng, max_channel: u8) -> Rgb {
        loop {
            let color = [
                rng.random_range(0..=max_channel),
                rng.random_range(0..=max_channel),
                rng.random_range(0..=max_channel),
            ];
            if self.acceptable(color) {
                self.used.push(color);
                return color;
            }
        }
    }
}

fn solid(name: String, rect: Rect, color: Rgb) -> Component {
    Component {
        name,
        rect,
        fill: Fill::Solid { color },
    }
}

fn build_scene(rng: &mut ChaCha8Rng) -> Scene {
    let background = *BACKGROUNDS.choose(rng).expect("non-empty");
    let mut palette = Palette::new(background);
    let mut scene = Scene::new(background);

    let header = palette.pick(rng, 255);
    scene.push_row(
        RowKind::Header,
        vec![solid("header".into(), Rect::new(0, 0, SCENE_WIDTH, HEADER_HEIGHT), header)],
    );

    let mut kinds = [
        RowKind::Card,
        RowKind::Card,
        RowKind::Text,
        RowKind::Text,
        RowKind::Icons,
        RowKind::Sprite,
    ];
    kinds.shuffle(rng);

    let mut words = WORDS.to_vec();
    words.shuffle(rng);
    let mut words = words.into_iter();

    let (mut cards, mut texts) = (0, 0);
    let mut y = FIRST_ROW_Y;
    for kind in kinds {
        let height = match kind {
            RowKind::Card => {
                cards += 1;
                let color = palette.pick(rng, 255);
                scene.push_row(
                    kind,
                    vec![solid(
                        format!("card{cards}"),
                        Rect::new(CARD_X, y, CARD_WIDTH, CARD_HEIGHT),
                        color,
                    )],
                );
                CARD_HEIGHT
            }
            RowKind::Text => {
                texts += 1;
                let color = palette.pick(rng, 90);
                let rect = text_line_rect(y);
                scene.push_row(
                    kind,
                    vec![Component {
                        name: format!("text{texts}"),
                        rect,
                        fill: Fill::Text {
                            text: words.next().expect("enough words").to_string(),
                            color,
                            scale: TEXT_SCALE,
                        },
                    }],
                );
                rect.height
            }
            RowKind::Icons => {
                let icons = (0..ICON_COUNT)
                    .map(|i| {
                        let color = palette.pick(rng, 255);
                        solid(
                            format!("icon{}", i + 1),
                            Rect::new(ICON_X + i * ICON_PITCH, y, ICON_SIZE, ICON_SIZE),
                            color,
                        )
                    })
                    .collect();
                scene.push_row(kind, icons);
                ICON_SIZE
            }
            RowKind::Sprite => {
                let color = palette.pick(rng, 255);
                let min_x = SPRITE_TRACK.0 + SPRITE_SIZE;
                let max_x = SPRITE_TRACK.1 - 2 * SPRITE_SIZE;
                let x = rng.random_range(min_x..=max_x);
                scene.push_row(
                    kind,
                    vec![solid(
                        "indicator".into(),
                        Rect::new(x, y, SPRITE_SIZE, SPRITE_SIZE),
                        color,
                    )],
                );
                SPRITE_SIZE
            }
            RowKind::Header => unreachable!("header is placed separately"),
        };
        y += height + ROW_GAP;
    }
    scene
}

/// Count of positions where two equally sized masks differ.
fn mask_xor_count(a: &[bool], b: &[bool]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

fn union_rect(a: Rect, b: Rect) -> Rect {
    let x = a.x.min(b.x);
    let y = a.y.min(b.y);
    Rect::new(x, y, a.right().max(b.right()) - x, a.bottom().max(b.bottom()) - y)
}

/// Ink mask of a text component after shifting by `dx`, sampled over `domain`.
fn shifted_text_mask(text: &str, scale: u32, line: Rect, dx: i32, domain: Rect) -> Vec<bool> {
    let ink = padded_text_mask(text, scale, line.width, line.height);
    let mut out = Vec::with_capacity(domain.area() as usize);
    for y in domain.y..domain.bottom() {
        for x in domain.x..domain.right() {
            let sx = i64::from(x) - i64::from(dx) - i64::from(line.x);
            let sy = i64::from(y) - i64::from(line.y);
            let lit = sx >= 0
                && sy >= 0
                && sx < i64::from(line.width)
                && sy < i64::from(line.height)
                && ink[(sy as u32 * line.width + sx as u32) as usize];
            out.push(lit);
        }
    }
    out
}

struct Planner<'a> {
    scene: &'a Scene,
    used_rows: Vec<bool>,
}

impl<'a> Planner<'a> {
    fn new(scene: &'a Scene) -> Self {
        Self {
            scene,
            used_rows: vec![false; scene.rows.len()],
        }
    }

    fn free_rows(&self, kinds: &[RowKind]) -> Vec<usize> {
        (0..self.scene.rows.len())
            .filter(|&r| !self.used_rows[r] && kinds.contains(&self.scene.rows[r].kind))
            .collect()
    }

    /// Takes a free row of one of `kinds` and returns one of its components.
    fn take_component(&mut self, kinds: &[RowKind], rng: &mut ChaCha8Rng) -> Option<usize> {
        let row = *self.free_rows(kinds).choose(rng)?;
        self.used_rows[row] = true;
        self.scene.rows[row].components.choose(rng).copied()
    }

    fn plan(&mut self, category: &Category, rng: &mut ChaCha8Rng) -> Result<PlannedMutation, DatasetError> {
        let seed = rng.random::<u64>();
        let bg = self.scene.background;
        let none_left = || DatasetError::InvalidArgument(format!("scene has no free target for {category}"));
        match category {
            Category::ColorChange => {
                let idx = self
                    .take_component(&[RowKind::Header, RowKind::Card, RowKind::Icons], rng)
                    .ok_or_else(none_left)?;
                let component = &self.scene.components[idx];
                let color = component.solid_color().expect("solid target");
                let others: Vec<Rgb> = self.scene.colors().into_iter().filter(|&c| c != color).collect();
                let delta = loop {
                    let mut delta = [0i16; 3];
                    let channels = rng.random_range(1..=3);
                    let mut order = [0usize, 1, 2];
                    order.shuffle(rng);
                    for &ch in &order[..channels] {
                        let magnitude: i16 = rng.random_range(40..=90);
                        let value = i16::from(color[ch]);
                        delta[ch] = if value + magnitude <= 255 { magnitude } else { -magnitude };
                    }
                    let recolored: Rgb = std::array::from_fn(|i| (i16::from(color[i]) + delta[i]) as u8);
                    if max_channel_gap(recolored, bg) >= 40
                        && others.iter().all(|&o| max_channel_gap(o, recolored) >= 24)
                    {
                        break delta;
                    }
                };
                let abs_sum: u64 = delta.iter().map(|d| u64::from(d.unsigned_abs())).sum();
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Recolor { delta },
                        region: Some(component.rect),
                        seed,
                    },
                    target: component.name.clone(),
                    footprint: vec![component.rect],
                    channel_diff_sum: component.rect.area() * abs_sum,
                })
            }
            Category::PaddingChange => {
                let idx = self
                    .take_component(&[RowKind::Card, RowKind::Text, RowKind::Icons], rng)
                    .ok_or_else(none_left)?;
                let component = &self.scene.components[idx];
                let magnitude: i32 = rng.random_range(4..=10);
                let dx = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                let rect = component.rect;
                let moved = rect.translated(dx, 0).expect("margins exceed the shift");
                let domain = union_rect(rect, moved);
                let channel_diff_sum = match &component.fill {
                    Fill::Solid { color } => {
                        2 * u64::from(dx.unsigned_abs()) * u64::from(rect.height) * channel_sum(*color, bg)
                    }
                    Fill::Text { text, color, scale } => {
                        let before = shifted_text_mask(text, *scale, rect, 0, domain);
                        let after = shifted_text_mask(text, *scale, rect, dx, domain);
                        mask_xor_count(&before, &after) * channel_sum(*color, bg)
                    }
                };
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Shift { dx, dy: 0, background: bg },
                        region: Some(rect),
                        seed,
                    },
                    target: component.name.clone(),
                    footprint: vec![domain],
                    channel_diff_sum,
                })
            }
            Category::LayoutChange => {
                let icon_rows = self.free_rows(&[RowKind::Icons]);
                let card_rows = self.free_rows(&[RowKind::Card]);
                let mut options = Vec::new();
                if let Some(&row) = icon_rows.first() {
                    options.push(vec![row]);
                }
                if card_rows.len() >= 2 {
                    options.push(card_rows[..2].to_vec());
                }
                let rows = options.choose(rng).ok_or_else(none_left)?.clone();
                for &r in &rows {
                    self.used_rows[r] = true;
                }
                let (a, b) = if rows.len() == 1 {
                    let mut icons = self.scene.rows[rows[0]].components.clone();
                    icons.shuffle(rng);
                    (icons[0], icons[1])
                } else {
                    (self.scene.rows[rows[0]].components[0], self.scene.rows[rows[1]].components[0])
                };
                let (first, second) = (&self.scene.components[a], &self.scene.components[b]);
                let gap = channel_sum(
                    first.solid_color().expect("solid"),
                    second.solid_color().expect("solid"),
                );
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Swap { other: second.rect },
                        region: Some(first.rect),
                        seed,
                    },
                    target: format!("{}<->{}", first.name, second.name),
                    footprint: vec![first.rect, second.rect],
                    channel_diff_sum: 2 * first.rect.area() * gap,
                })
            }
            Category::TextChange => {
                let idx = self.take_component(&[RowKind::Text], rng).ok_or_else(none_left)?;
                let component = &self.scene.components[idx];
                let Fill::Text { text, color, scale } = &component.fill else {
                    unreachable!("text rows hold text components")
                };
                let rect = component.rect;
                let old_mask = padded_text_mask(text, *scale, rect.width, rect.height);
                let (replacement, flipped) = loop {
                    let candidate = *WORDS.choose(rng).expect("non-empty");
                    let new_mask = padded_text_mask(candidate, *scale, rect.width, rect.height);
                    let flipped = mask_xor_count(&old_mask, &new_mask);
                    if candidate != text && flipped > 0 {
                        break (candidate.to_string(), flipped);
                    }
                };
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Retext {
                            text: replacement,
                            color: *color,
                            background: bg,
                            scale: *scale,
                        },
                        region: Some(rect),
                        seed,
                    },
                    target: component.name.clone(),
                    footprint: vec![rect],
                    channel_diff_sum: flipped * channel_sum(*color, bg),
                })
            }
            Category::ContentChange => {
                let idx = self
                    .take_component(&[RowKind::Card, RowKind::Icons], rng)
                    .ok_or_else(none_left)?;
                let component = &self.scene.components[idx];
                let color = component.solid_color().expect("solid target");
                let mut palette = Palette::new(bg);
                palette.used = self.scene.colors();
                let colors = [palette.pick(rng, 255), palette.pick(rng, 255)];
                let pattern = if rng.random_bool(0.5) {
                    FillPattern::Checker {
                        cell: rng.random_range(2..=5),
                        colors,
                    }
                } else {
                    FillPattern::Stripes {
                        width: rng.random_range(2..=6),
                        colors,
                    }
                };
                let rect = component.rect;
                let channel_diff_sum = (0..rect.height)
                    .flat_map(|y| (0..rect.width).map(move |x| (x, y)))
                    .map(|(x, y)| channel_sum(pattern.color_at(x, y, seed), color))
                    .sum();
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Refill { pattern },
                        region: Some(rect),
                        seed,
                    },
                    target: component.name.clone(),
                    footprint: vec![rect],
                    channel_diff_sum,
                })
            }
            Category::AnimationPhase => {
                let idx = self.take_component(&[RowKind::Sprite], rng).ok_or_else(none_left)?;
                let component = &self.scene.components[idx];
                let color = component.solid_color().expect("solid indicator");
                let rect = component.rect;
                let (start_offset, progress, moved) = loop {
                    let progress = *PROGRESS_STEPS.choose(rng).expect("non-empty");
                    let magnitude: i32 = rng.random_range(3..=10);
                    let signed = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                    let start = (f64::from(signed) / (1.0 - progress)).round() as i32;
                    let (dx, _) = interpolated_offset((start, 0), progress);
                    let Some(moved) = rect.translated(dx, 0) else { continue };
                    if (3..=10).contains(&dx.abs())
                        && moved.x >= SPRITE_TRACK.0
                        && moved.right() <= SPRITE_TRACK.1
                    {
                        break ((start, 0), progress, moved);
                    }
                };
                let faded = lerp_color(bg, color, progress);
                let area = rect.area();
                let overlap = rect.overlap_area(&moved);
                let channel_diff_sum = (area - overlap) * (channel_sum(color, bg) + channel_sum(faded, bg))
                    + overlap * channel_sum(color, faded);
                Ok(PlannedMutation {
                    spec: MutationSpec {
                        op: MutationOp::Interpolate {
                            start_offset,
                            progress,
                            background: bg,
                        },
                        region: Some(rect),
                        seed,
                    },
                    target: component.name.clone(),
                    footprint: vec![union_rect(rect, moved)],
                    channel_diff_sum,
                })
            }
            other => Err(DatasetError::UnsupportedCategory(other.clone())),
        }
    }
}

/// Builds one synthetic case in memory.
pub fn synthesize_case(seed: u64, categories: &[Category]) -> Result<SyntheticCase, DatasetError> {
    if let Some(bad) = categories.iter().find(|c| !SYNTHESIZABLE.contains(c)) {
        return Err(DatasetError::UnsupportedCategory((*bad).clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = build_scene(&mut rng);
    let reference = scene.render();
    let mut planner = Planner::new(&scene);
    let mut mutations = Vec::new();
    for category in categories {
        mutations.push(planner.plan(category, &mut rng)?);
    }
    let mut failure = reference.clone();
    for m in &mutations {
        failure = apply_mutation(&failure, &m.spec)?;
    }
    Ok(SyntheticCase {
        scene,
        reference,
        failure,
        mutations,
    })
}

fn format_rect(r: &Rect) -> String {
    format!("{},{},{},{}", r.x, r.y, r.width, r.height)
}

fn create_dir(path: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates `config.count` cases under `out_dir` and writes `manifest.json`.
///
/// Output is a pure function of the config: re-running with the same
/// arguments rewrites byte-identical files.
pub fn generate_synthetic_dataset(out_dir: &Path, config: &SyntheticConfig) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let multi_count = if config.categories.len() >= 2 {
        ((config.count as f64) * config.multi_label_fraction).round() as usize
    } else {
        0
    };
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut rng);
    let mut multi = vec![false; config.count];
    for &i in &order[..multi_count.min(config.count)] {
        multi[i] = true;
    }

    create_dir(out_dir)?;
    let width = config.count.to_string().len().max(3);
    let mut cases = Vec::with_capacity(config.count);
    for (i, &dual) in multi.iter().enumerate() {
        let primary = config.categories[i % config.categories.len()].clone();
        let mut labels = vec![primary.clone()];
        if dual {
            let others: Vec<&Category> = config.categories.iter().filter(|c| **c != primary).collect();
            labels.push((*others.choose(&mut rng).expect("at least two categories")).clone());
        }
        let case_seed = rng.random::<u64>();
        let case = synthesize_case(case_seed, &labels)?;

        let id = format!("case-{:0width$}", i + 1);
        let case_dir = out_dir.join("cases").join(&id);
        create_dir(&case_dir)?;
        let wrap = |source| DatasetError::Image {
            case_id: id.clone(),
            source,
        };
        let diff = imaging::render_diff_image(&case.reference, &case.failure, DiffOptions::default()).map_err(wrap)?;
        let reference_path = case_dir.join("reference.png");
        let failure_path = case_dir.join("failure.png");
        let diff_path = case_dir.join("diff.png");
        imaging::save_png(&case.reference, &reference_path).map_err(wrap)?;
        imaging::save_png(&case.failure, &failure_path).map_err(wrap)?;
        imaging::save_png(&diff, &diff_path).map_err(wrap)?;

        let mut metadata = BTreeMap::new();
        metadata.insert("generator".to_string(), "synthetic-v1".to_string());
        metadata.insert("seed".to_string(), case_seed.to_string());
        metadata.insert(EXPECTED_PIXEL_DIFF_KEY.to_string(), case.expected_pixel_diff().to_string());
        let description: Vec<String> = case
            .mutations
            .iter()
            .map(|m| format!("{} on {}", m.spec.category(), m.target))
            .collect();
        metadata.insert("description".to_string(), description.join("; "));
        for (k, m) in case.mutations.iter().enumerate() {
            let rects: Vec<String> = m.footprint.iter().map(format_rect).collect();
            metadata.insert(format!("footprint.{k}"), rects.join(";"));
            metadata.insert(format!("mutation.{k}"), serde_json::to_string(&m.spec).expect("spec serializes"));
        }

        let ground_truth = case.ground_truth();
        cases.push(SnapshotCase {
            ignore_designation: ground_truth.first().cloned(),
            ground_truth,
            reference_path,
            failure_path,
            diff_path: Some(diff_path),
            metadata,
            id,
        });
    }

    let manifest = DatasetManifest {
        name: config
            .name
            .clone()
            .unwrap_or_else(|| format!("synthetic-seed{}", config.seed)),
        version: MANIFEST_VERSION,
        cases,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE_NAME))?;
    Ok(manifest)
}

/// Parses a `footprint.N` metadata value back into rectangles.
pub fn parse_footprint(value: &str) -> Option<Vec<Rect>> {
    value
        .split(';')
        .map(|part| {
            let nums: Vec<u32> = part.split(',').map(|n| n.trim().parse().ok()).collect::<Option<_>>()?;
            match nums[..] {
                [x, y, w, h] => Some(Rect::new(x, y, w, h)),
                _ => None,
            }
        })
        .collect()
}
