//! Procedural miniature product-on-background dataset.
//!
//! A record holds the composited target (background, soft shadow, product),
//! the product alone on neutral gray, its exact mask, the background alone
//! (no product, no shadow) and the background class that plays the role of
//! the text prompt.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ImageRaster, Mask};
use crate::error::{Error, Result};
use crate::imageio;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 8;
pub const SHADOW_OPACITY: f32 = 0.4;
/// Mid gray, `0.5` rounded to the 8-bit grid.
pub const NEUTRAL_GRAY: f32 = 128.0 / 255.0;
pub const MIN_RADIUS: u32 = 4;
pub const MAX_RADIUS: u32 = 7;
/// Products are placed so their bounding box lies within this centered
/// fraction of the frame.
pub const PLACEMENT_FRACTION: f32 = 0.6;

/// Product palette. Saturated colors kept far (in RGB distance) from every
/// background hue family and from the neutral gray.
pub const PRODUCT_COLORS: [[f32; 3]; 6] = [
    [230.0 / 255.0, 25.0 / 255.0, 25.0 / 255.0],
    [25.0 / 255.0, 205.0 / 255.0, 25.0 / 255.0],
    [25.0 / 255.0, 50.0 / 255.0, 230.0 / 255.0],
    [240.0 / 255.0, 230.0 / 255.0, 25.0 / 255.0],
    [230.0 / 255.0, 25.0 / 255.0, 215.0 / 255.0],
    [25.0 / 255.0, 215.0 / 255.0, 230.0 / 255.0],
];

/// Background class id standing in for a text prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptLabel(u8);

impl PromptLabel {
    pub const NAMES: [&'static str; NUM_CLASSES] = [
        "vertical-gradient",
        "horizontal-gradient",
        "stripes",
        "checker",
        "solid-warm",
        "solid-cool",
        "radial-gradient",
        "noise-texture",
    ];

    pub fn new(id: usize) -> Result<Self> {
        if id >= NUM_CLASSES {
            return Err(Error::Value(format!(
                "class id {id} outside [0, {NUM_CLASSES})"
            )));
        }
        Ok(Self(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.id()]
    }

    pub fn all() -> impl Iterator<Item = PromptLabel> {
        (0..NUM_CLASSES).map(|i| PromptLabel(i as u8))
    }
}

impl fmt::Display for PromptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductShape {
    Disc,
    Square,
    Triangle,
}

impl ProductShape {
    pub const ALL: [ProductShape; 3] = [ProductShape::Disc, ProductShape::Square, ProductShape::Triangle];

    /// Horizontal and vertical half extents for a given radius.
    pub fn half_extents(self, radius: u32) -> (f32, f32) {
        let r = radius as f32;
        match self {
            ProductShape::Disc => (0.9 * r, 0.9 * r),
            ProductShape::Square => (0.77 * r, 0.77 * r),
            ProductShape::Triangle => (1.06 * r, 1.14 * r),
        }
    }

    /// Whether a point offset `(dx, dy)` from the shape center is covered.
    /// Triangles point up: the apex sits at `-half_h`, the base at `+half_h`.
    pub fn contains(self, radius: u32, dx: f32, dy: f32) -> bool {
        let (hw, hh) = self.half_extents(radius);
        match self {
            ProductShape::Disc => dx * dx + dy * dy <= hw * hw,
            ProductShape::Square => dx.abs() <= hw && dy.abs() <= hh,
            ProductShape::Triangle => {
                if dy < -hh || dy > hh {
                    return false;
                }
                let t = (dy + hh) / (2.0 * hh);
                dx.abs() <= hw * t
            }
        }
    }
}

/// Per-sample variation of a background class. The canonical rendering of
/// a class uses [`BackgroundStyle::canonical`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStyle {
    /// Additive RGB tint.
    pub tint: [f32; 3],
    /// Phase in `[0, 1)`, used for stripe/checker offsets and palette choice.
    pub phase: f32,
    /// Secondary position parameter in `[-1, 1]` (radial center, gradient bias).
    pub offset: f32,
    /// Seed for the noise texture.
    pub noise_seed: u64,
}

impl BackgroundStyle {
    pub fn canonical() -> Self {
        Self {
            tint: [0.0; 3],
            phase: 0.0,
            offset: 0.0,
            noise_seed: 0,
        }
    }

    fn draw(label: PromptLabel, rng: &mut ChaCha8Rng) -> Self {
        // Solid classes keep their tint under half a histogram bin, and the
        // two-color patterns stay close to it. Smooth classes get a larger
        // tint: a reference shifted by a few cells still carries it, unlike
        // gradient position.
        let (shared_amp, channel_amp) = match label.id() {
            2..=5 => (0.04, 0.015),
            _ => (0.08, 0.04),
        };
        let mut tint = [0.0; 3];
        let shared: f32 = rng.gen_range(-shared_amp..shared_amp);
        for t in &mut tint {
            *t = shared + rng.gen_range(-channel_amp..channel_amp);
        }
        Self {
            tint,
            phase: rng.gen_range(0.0..1.0),
            offset: rng.gen_range(-1.0..1.0),
            noise_seed: rng.gen(),
        }
    }
}

fn q(v: f32) -> f32 {
    imageio::quantize(v) as f32 / 255.0
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Renders a background of the given class. Every value is quantized to a
/// multiple of 1/255 so PNG storage is lossless.
pub fn render_background(label: PromptLabel, style: &BackgroundStyle, size: usize) -> ImageRaster {
    let mut img = ImageRaster::filled(size, size, [0.0; 3]);
    let denom = (size.max(2) - 1) as f32;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
    for y in 0..size {
        for x in 0..size {
            let u = x as f32 / denom;
            let v = y as f32 / denom;
            let base = match label.id() {
                0 => {
                    let t = (v + 0.25 * style.offset).clamp(0.0, 1.0);
                    lerp3([0.45, 0.55, 0.80], [0.18, 0.22, 0.42], t)
                }
                1 => {
                    let t = (u + 0.25 * style.offset).clamp(0.0, 1.0);
                    lerp3([0.28, 0.45, 0.32], [0.62, 0.78, 0.58], t)
                }
                2 => {
                    let period = 8.0;
                    let shift = style.phase * period;
                    let band = (((y as f32 + shift) / (period / 2.0)).floor() as i64).rem_euclid(2);
                    if band == 0 {
                        [0.78, 0.58, 0.38]
                    } else {
                        [0.52, 0.34, 0.22]
                    }
                }
                3 => {
                    let cell = 8.0;
                    // Small shifts only: block-mean features blur a checker
                    // shifted by a fraction of a cell.
                    let shift = style.phase * 2.0;
                    let cx = ((x as f32 + shift) / cell).floor() as i64;
                    let cy = ((y as f32 + shift) / cell).floor() as i64;
                    if (cx + cy).rem_euclid(2) == 0 {
                        [0.58, 0.46, 0.68]
                    } else {
                        [0.34, 0.24, 0.44]
                    }
                }
                // Solid colors sit at histogram-bin centers and the tint stays
                // under half a bin, so styling never moves them across bins.
                4 => [0.8125, 0.6875, 0.5625],
                5 => [0.1875, 0.3125, 0.4375],
                6 => {
                    let cx = 0.5 + 0.15 * style.offset;
                    let cy = 0.5 + 0.15 * (style.phase * 2.0 - 1.0);
                    let d = (((u - cx) * (u - cx) + (v - cy) * (v - cy)).sqrt() / 0.7).min(1.0);
                    lerp3([0.86, 0.66, 0.70], [0.50, 0.30, 0.40], d)
                }
                _ => {
                    let n: f32 = if style.noise_seed == 0 {
                        // Canonical texture: deterministic hash pattern.
                        (((x * 7 + y * 13) % 11) as f32 / 10.0 - 0.5) * 0.2
                    } else {
                        noise_rng.gen_range(-0.1..0.1)
                    };
                    [0.60 + n, 0.60 + n, 0.58 + n]
                }
            };
            let rgb = [
                q(base[0] + style.tint[0]),
                q(base[1] + style.tint[1]),
                q(base[2] + style.tint[2]),
            ];
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

/// Canonical rendering of a class, used by the prompt probe.
pub fn canonical_background(label: PromptLabel, size: usize) -> ImageRaster {
    render_background(label, &BackgroundStyle::canonical(), size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub target: ImageRaster,
    pub foreground: ImageRaster,
    pub mask: Mask,
    pub reference: ImageRaster,
    pub prompt: PromptLabel,
    pub color_index: usize,
    pub shape: ProductShape,
    pub radius: u32,
    /// Product center, in pixel-corner coordinates.
    pub center: (i32, i32),
    /// Pixels darkened by the shadow (alpha > 0), before the product is painted.
    pub shadow: Mask,
}

impl Sample {
    pub fn product_color(&self) -> [f32; 3] {
        PRODUCT_COLORS[self.color_index]
    }

    /// Union of product mask and shadow footprint.
    pub fn altered_region(&self) -> Mask {
        let data = self
            .mask
            .data
            .iter()
            .zip(&self.shadow.data)
            .map(|(&m, &s)| if m > 0.5 || s > 0.5 { 1.0 } else { 0.0 })
            .collect();
        Mask {
            height: self.mask.height,
            width: self.mask.width,
            data,
        }
    }
}

/// Shadow alpha in `[0, SHADOW_OPACITY]` for a half-height ellipse centered
/// at the product's base.
fn shadow_alpha(dx: f32, dy: f32, semi_x: f32, semi_y: f32) -> f32 {
    let d = ((dx / semi_x).powi(2) + (dy / semi_y).powi(2)).sqrt();
    let soft = if d <= 0.5 {
        1.0
    } else if d < 1.0 {
        (1.0 - d) / 0.5
    } else {
        0.0
    };
    SHADOW_OPACITY * soft
}

fn shadow_geometry(shape: ProductShape, radius: u32, center: (i32, i32)) -> (f32, f32, f32) {
    let (hw, hh) = shape.half_extents(radius);
    let semi_x = hw * 1.1;
    (semi_x, semi_x / 2.0, center.1 as f32 + hh)
}

/// Pixels with nonzero shadow alpha for a product placement.
pub fn shadow_footprint(shape: ProductShape, radius: u32, center: (i32, i32), size: usize) -> Mask {
    let (semi_x, semi_y, base_y) = shadow_geometry(shape, radius, center);
    let mut m = Mask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - center.0 as f32;
            let dy = y as f32 + 0.5 - base_y;
            m.set(y, x, shadow_alpha(dx, dy, semi_x, semi_y) > 0.0);
        }
    }
    m
}

/// Deterministic record for `(seed, class)`.
pub fn make_sample_with_class(seed: u64, prompt: PromptLabel, size: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let color_index = rng.gen_range(0..PRODUCT_COLORS.len());
    let shape = ProductShape::ALL[rng.gen_range(0..3)];
    let radius = rng.gen_range(MIN_RADIUS..=MAX_RADIUS);
    let (hw, hh) = shape.half_extents(radius);
    let lo = size as f32 * (1.0 - PLACEMENT_FRACTION) / 2.0;
    let hi = size as f32 - lo;
    let range = |half: f32| ((lo + half).ceil() as i32, (hi - half).floor() as i32);
    let (x0, x1) = range(hw);
    let (y0, y1) = range(hh);
    let cx = rng.gen_range(x0..=x1.max(x0));
    let cy = rng.gen_range(y0..=y1.max(y0));
    let style = BackgroundStyle::draw(prompt, &mut rng);

    let reference = render_background(prompt, &style, size);
    let color = PRODUCT_COLORS[color_index];
    let mut target = reference.clone();
    let mut foreground = ImageRaster::filled(size, size, [NEUTRAL_GRAY; 3]);
    let mut mask = Mask::zeros(size, size);
    let mut shadow = Mask::zeros(size, size);

    let (semi_x, semi_y, base_y) = shadow_geometry(shape, radius, (cx, cy));
    for y in 0..size {
        for x in 0..size {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let a = shadow_alpha(px - cx as f32, py - base_y, semi_x, semi_y);
            if a > 0.0 {
                let bg = target.pixel(y, x);
                let k = 1.0 - a;
                target.set_pixel(y, x, [q(bg[0] * k), q(bg[1] * k), q(bg[2] * k)]);
                shadow.set(y, x, true);
            }
            if shape.contains(radius, px - cx as f32, py - cy as f32) {
                target.set_pixel(y, x, color);
                foreground.set_pixel(y, x, color);
                mask.set(y, x, true);
            }
        }
    }

    Sample {
        seed,
        target,
        foreground,
        mask,
        reference,
        prompt,
        color_index,
        shape,
        radius,
        center: (cx, cy),
        shadow,
    }
}

/// Deterministic record for `seed`; the class is drawn uniformly from the seed.
pub fn make_sample(seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = rng.gen_range(0..NUM_CLASSES);
    make_sample_with_class(seed, PromptLabel(class as u8), IMAGE_SIZE)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub class: PromptLabel,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.tsv";

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.index, e.class.id(), e.seed))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: expected index<TAB>class<TAB>seed", lineno + 1));
            let mut parts = line.split('\t');
            let index = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let class: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let seed = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                index,
                class: PromptLabel::new(class)?,
                seed,
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct RecordMeta {
    class: usize,
    seed: u64,
    color_index: usize,
    product_color: [u8; 3],
    shape: ProductShape,
    radius: u32,
    center: [i32; 2],
}

pub fn record_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("rec_{index}"))
}

/// Seeds and classes of an `n`-record dataset. Classes are dealt from
/// shuffled decks holding each class once, so every block of eight records
/// covers all classes.
pub fn dataset_plan(n: usize, seed: u64) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deck: Vec<usize> = Vec::new();
    (0..n)
        .map(|index| {
            if deck.is_empty() {
                deck = (0..NUM_CLASSES).collect();
                deck.shuffle(&mut rng);
            }
            let class = deck.pop().expect("refilled deck");
            ManifestEntry {
                index,
                class: PromptLabel(class as u8),
                seed: rng.gen(),
            }
        })
        .collect()
}

/// Generates the records of a plan in memory.
pub fn generate(n: usize, seed: u64) -> Vec<Sample> {
    dataset_plan(n, seed)
        .iter()
        .map(|e| make_sample_with_class(e.seed, e.class, IMAGE_SIZE))
        .collect()
}

fn write_record(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imageio::save_image(&sample.target, &dir.join("target.png"))?;
    imageio::save_image(&sample.foreground, &dir.join("foreground.png"))?;
    imageio::save_mask(&sample.mask, &dir.join("mask.png"))?;
    imageio::save_image(&sample.reference, &dir.join("reference.png"))?;
    let color = sample.product_color().map(imageio::quantize);
    let meta = RecordMeta {
        class: sample.prompt.id(),
        seed: sample.seed,
        color_index: sample.color_index,
        product_color: color,
        shape: sample.shape,
        radius: sample.radius,
        center: [sample.center.0, sample.center.1],
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes `n` records plus the manifest under `out`.
pub fn write_dataset(n: usize, out: &Path, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = dataset_plan(n, seed);
    for e in &entries {
        let sample = make_sample_with_class(e.seed, e.class, IMAGE_SIZE);
        write_record(&record_dir(out, e.index), &sample)?;
    }
    let manifest = Manifest { entries };
    let path = out.join(Manifest::FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(manifest.to_text().as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one record directory. The shadow footprint is not stored; it is
/// recomputed from the product geometry in `meta.json`.
pub fn load_record(dir: &Path) -> Result<Sample> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RecordMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let target = imageio::load_image(&dir.join("target.png"))?;
    let foreground = imageio::load_image(&dir.join("foreground.png"))?;
    let mask = imageio::load_mask(&dir.join("mask.png"))?;
    let reference = imageio::load_image(&dir.join("reference.png"))?;
    if meta.color_index >= PRODUCT_COLORS.len() {
        return Err(Error::format(&meta_path, "color index out of range"));
    }
    let shadow = shadow_footprint(
        meta.shape,
        meta.radius,
        (meta.center[0], meta.center[1]),
        mask.height,
    );
    Ok(Sample {
        seed: meta.seed,
        target,
        foreground,
        mask,
        reference,
        prompt: PromptLabel::new(meta.class)?,
        color_index: meta.color_index,
        shape: meta.shape,
        radius: meta.radius,
        center: (meta.center[0], meta.center[1]),
        shadow,
    })
}

/// Loads every record listed in the manifest under `root`, in manifest order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let path = root.join(Manifest::FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::parse(&text, &path)?;
    manifest
        .entries
        .iter()
        .map(|e| load_record(&record_dir(root, e.index)))
        .collect()
}
