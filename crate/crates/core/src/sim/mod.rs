//! Synthetic GUI screens, episodes and corpora.

mod corpus;
mod episode;

pub use corpus::{
    encode_corpus, generate_corpus, label_counts, read_corpus, write_corpus, Corpus, CorpusManifest, CorpusRecord,
    PixelStore, ScreenRecord, StepRecord, TemplateMix, CORPUS_VERSION,
};
pub use episode::{generate_episode, goal_text, Episode, Step, TaskTemplate, TYPE_WORDS};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::Point;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Icon,
    Button,
    TextField,
    Label,
}

impl ElementKind {
    pub fn word(self) -> &'static str {
        match self {
            ElementKind::Icon => "icon",
            ElementKind::Button => "button",
            ElementKind::TextField => "field",
            ElementKind::Label => "label",
        }
    }
}

/// Fixed glyph table: glyph id → (caption, kind, fill colour).
pub const GLYPHS: [(&str, ElementKind, [u8; 3]); 10] = [
    ("mail", ElementKind::Icon, [230, 40, 40]),
    ("phone", ElementKind::Icon, [40, 200, 60]),
    ("camera", ElementKind::Icon, [50, 90, 240]),
    ("music", ElementKind::Icon, [240, 220, 30]),
    ("maps", ElementKind::Icon, [210, 60, 220]),
    ("clock", ElementKind::Icon, [30, 220, 220]),
    ("send", ElementKind::Button, [250, 140, 20]),
    ("menu", ElementKind::Button, [150, 100, 50]),
    ("search", ElementKind::TextField, [250, 250, 250]),
    ("title", ElementKind::Label, [120, 120, 130]),
];

/// Glyphs that can be the target of a tap goal.
pub const TAPPABLE: std::ops::Range<u8> = 0..8;
pub const SEARCH_GLYPH: u8 = 8;
pub const BACKGROUND: [u8; 3] = [16, 16, 24];

pub fn glyph_caption(glyph: u8) -> &'static str {
    GLYPHS[glyph as usize].0
}

pub fn glyph_kind(glyph: u8) -> ElementKind {
    GLYPHS[glyph as usize].1
}

pub fn glyph_color(glyph: u8) -> [u8; 3] {
    GLYPHS[glyph as usize].2
}

/// Darker border shade for buttons, fields and labels.
pub fn border_color(glyph: u8) -> [u8; 3] {
    let c = glyph_color(glyph);
    match glyph_kind(glyph) {
        ElementKind::Icon => c,
        _ => [c[0] / 2, c[1] / 2, c[2] / 2],
    }
}

/// Pixel-space box, half-open: `x0 <= x < x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn intersects(&self, o: &PixelBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UiElement {
    pub id: u32,
    pub kind: ElementKind,
    pub bbox: PixelBox,
    pub glyph: u8,
    pub caption: String,
}

impl UiElement {
    /// Normalized `(x0, y0, x1, y1)`.
    pub fn normalized_bbox(&self, width: u32, height: u32) -> (f64, f64, f64, f64) {
        let b = self.bbox;
        (
            b.x0 as f64 / width as f64,
            b.y0 as f64 / height as f64,
            b.x1 as f64 / width as f64,
            b.y1 as f64 / height as f64,
        )
    }

    pub fn center(&self, width: u32, height: u32) -> Point {
        let b = self.bbox;
        let cx = (b.x0 + b.x1) as f64 / 2.0 / width as f64;
        let cy = (b.y0 + b.y1) as f64 / 2.0 / height as f64;
        Point::new(cx, cy).expect("center inside the screen")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub width: u32,
    pub height: u32,
    pub min_elements: usize,
    pub max_elements: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Element origins are multiples of this many pixels.
    pub snap: u32,
    pub max_retries: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self::for_size(64, 64)
    }
}

impl ScreenConfig {
    /// Element sizes scale with the screen: between 1/8+2 and 1/4 of the width.
    pub fn for_size(width: u32, height: u32) -> Self {
        let base = width.min(height);
        Self {
            width,
            height,
            min_elements: 3,
            max_elements: 5,
            min_size: base / 8 + 2,
            max_size: base / 4,
            snap: 2,
            max_retries: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.min_elements) || !(self.min_elements..=12).contains(&self.max_elements) {
            return Err(Error::Config(format!(
                "element count range {}..={} must lie within 1..=12",
                self.min_elements, self.max_elements
            )));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return Err(Error::Config("invalid element size range".into()));
        }
        if self.snap == 0 {
            return Err(Error::Config("snap must be positive".into()));
        }
        Ok(())
    }
}

/// Height × width × 3 RGB bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pixels {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Pixels {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// SHA-256 over dimensions and bytes, lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Screen {
    pub width: u32,
    pub height: u32,
    pub elements: Vec<UiElement>,
    pub pixels: Pixels,
}

impl Screen {
    pub fn new(width: u32, height: u32, elements: Vec<UiElement>) -> Self {
        let pixels = render_pixels(width, height, &elements);
        Self {
            width,
            height,
            elements,
            pixels,
        }
    }

    pub fn find_glyph(&self, glyph: u8) -> Option<&UiElement> {
        self.elements.iter().find(|e| e.glyph == glyph)
    }

    pub fn find_caption(&self, caption: &str) -> Option<&UiElement> {
        self.elements.iter().find(|e| e.caption == caption)
    }
}

/// Paints elements over a uniform background: border ring in the border
/// shade, interior in the glyph colour.
pub fn render_pixels(width: u32, height: u32, elements: &[UiElement]) -> Pixels {
    let mut px = Pixels::filled(width, height, BACKGROUND);
    for e in elements {
        let b = e.bbox;
        let (fill, border) = (glyph_color(e.glyph), border_color(e.glyph));
        for y in b.y0..b.y1.min(height) {
            for x in b.x0..b.x1.min(width) {
                let edge = x == b.x0 || y == b.y0 || x + 1 == b.x1 || y + 1 == b.y1;
                px.set(x, y, if edge { border } else { fill });
            }
        }
    }
    px
}

/// Places a random number of non-overlapping elements by rejection sampling.
///
/// `required` glyphs are always placed; `excluded` glyphs never are. The
/// remaining glyphs are drawn without replacement so every glyph appears at
/// most once per screen.
pub fn generate_screen_with(rng: &mut CounterRng, cfg: &ScreenConfig, required: &[u8], excluded: &[u8]) -> Result<Screen> {
    cfg.validate()?;
    let count = rng.range_inclusive(cfg.min_elements as u64, cfg.max_elements as u64) as usize;
    let count = count.max(required.len());
    let mut pool: Vec<u8> = (0..GLYPHS.len() as u8)
        .filter(|g| !required.contains(g) && !excluded.contains(g))
        .collect();
    rng.shuffle(&mut pool);
    let mut glyphs: Vec<u8> = required.to_vec();
    glyphs.extend(pool.into_iter().take(count - required.len()));
    if glyphs.len() < count {
        return Err(Error::Config("not enough distinct glyphs for the requested element count".into()));
    }

    let mut elements: Vec<UiElement> = Vec::with_capacity(count);
    for (id, &glyph) in glyphs.iter().enumerate() {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let w = rng.range_inclusive(cfg.min_size as u64, cfg.max_size as u64) as u32;
            let h = rng.range_inclusive(cfg.min_size as u64, cfg.max_size as u64) as u32;
            let x0 = rng.range_inclusive(0, ((cfg.width - w) / cfg.snap) as u64) as u32 * cfg.snap;
            let y0 = rng.range_inclusive(0, ((cfg.height - h) / cfg.snap) as u64) as u32 * cfg.snap;
            let bbox = PixelBox {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            if elements.iter().all(|e| !e.bbox.intersects(&bbox)) {
                elements.push(UiElement {
                    id: id as u32,
                    kind: glyph_kind(glyph),
                    bbox,
                    glyph,
                    caption: glyph_caption(glyph).to_string(),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place element {} of {count} after {} tries; configuration too dense",
                id + 1,
                cfg.max_retries
            )));
        }
    }
    Ok(Screen::new(cfg.width, cfg.height, elements))
}

/// Seeded screen with no glyph constraints.
pub fn generate_screen(seed: u64, cfg: &ScreenConfig) -> Result<Screen> {
    generate_screen_with(&mut CounterRng::new(seed), cfg, &[], &[])
}
