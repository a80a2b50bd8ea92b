//! Procedural garment dataset.
//!
//! Each sample pairs a one-channel flat sketch, a caption and a three-channel
//! target render of the same silhouette. The sketch carries hints for color
//! (fill gray level) and fabric (faint fill texture); in conflict samples the
//! caption and target use a different color or fabric than those hints.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::sha256_hex;
use crate::rng::Rng;

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&x| x == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

word_enum!(Silhouette {
    Tshirt => "tshirt",
    Hoodie => "hoodie",
    Pants => "pants",
    Skirt => "skirt",
});

word_enum!(Color {
    Red => "red",
    Blue => "blue",
    Green => "green",
    Purple => "purple",
    Pink => "pink",
    Orange => "orange",
    Brown => "brown",
    Black => "black",
});

word_enum!(Fabric {
    Denim => "denim",
    Silk => "silk",
    Corduroy => "corduroy",
    Gingham => "gingham",
    Tweed => "tweed",
    Seersucker => "seersucker",
    Mesh => "mesh",
    Canvas => "canvas",
});

word_enum!(Component {
    Pocket => "pocket",
    Hood => "hood",
    Collar => "collar",
    Buttons => "buttons",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Twill,
    Checker,
    Speckle,
    Smooth,
    Rib,
    DotGrid,
    Crosshatch,
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.12, 0.12],
            Color::Blue => [0.12, 0.25, 0.85],
            Color::Green => [0.12, 0.60, 0.20],
            Color::Purple => [0.50, 0.15, 0.65],
            Color::Pink => [0.95, 0.45, 0.70],
            Color::Orange => [0.95, 0.50, 0.10],
            Color::Brown => [0.50, 0.30, 0.12],
            Color::Black => [0.10, 0.10, 0.10],
        }
    }

    /// Fill level used to hint this color in a one-channel sketch.
    pub fn sketch_gray(self) -> f64 {
        0.30 + 0.06 * self.index() as f64
    }
}

impl Fabric {
    pub fn texture(self) -> Texture {
        match self {
            Fabric::Denim => Texture::Twill,
            Fabric::Silk => Texture::Smooth,
            Fabric::Corduroy => Texture::Rib,
            Fabric::Gingham => Texture::Checker,
            Fabric::Tweed => Texture::Speckle,
            Fabric::Seersucker => Texture::Stripes,
            Fabric::Mesh => Texture::DotGrid,
            Fabric::Canvas => Texture::Crosshatch,
        }
    }

    /// Variant terms that normalize to this fabric.
    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            Fabric::Denim => &["jeans", "jean"],
            Fabric::Silk => &["satin", "silky"],
            Fabric::Corduroy => &["cord", "cords"],
            Fabric::Gingham => &["plaid", "checked"],
            Fabric::Tweed => &["wool", "woolen"],
            Fabric::Seersucker => &["striped", "pinstripe"],
            Fabric::Mesh => &["netting", "net"],
            Fabric::Canvas => &["duck", "sailcloth"],
        }
    }
}

/// Garment nouns recognized by prompts besides the silhouette names.
pub const GARMENT_NOUNS: &[&str] = &[
    "tshirt", "hoodie", "pants", "skirt", "top", "shirt", "tee", "jacket", "trousers", "dress",
    "coat", "sweater", "shorts", "blouse",
];

const FILLER_WORDS: &[&str] = &["a", "an", "the", "with", "and", "made", "of", "in"];

/// Every word of the caption grammar plus aliases and garment nouns.
pub fn grammar_words() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    for f in Fabric::ALL {
        words.insert(f.name().to_string());
        words.extend(f.aliases().iter().map(|a| a.to_string()));
    }
    words.extend(GARMENT_NOUNS.iter().map(|w| w.to_string()));
    words.extend(Component::ALL.iter().map(|c| c.name().to_string()));
    words.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
    words.into_iter().collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabric: Option<Fabric>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub silhouette: Silhouette,
    /// Color hinted by the sketch.
    pub color: Color,
    /// Fabric hinted by the sketch.
    pub fabric: Fabric,
    pub components: BTreeSet<Component>,
    /// Caption/target attributes that override the sketch hints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict: Option<Conflict>,
}

impl GarmentSpec {
    pub fn new(silhouette: Silhouette, color: Color, fabric: Fabric) -> Self {
        Self {
            silhouette,
            color,
            fabric,
            components: BTreeSet::new(),
            conflict: None,
        }
    }

    pub fn with_components(mut self, c: &[Component]) -> Self {
        self.components.extend(c.iter().copied());
        self
    }

    /// Color named by the caption and rendered in the target.
    pub fn text_color(&self) -> Color {
        self.conflict.as_ref().and_then(|c| c.color).unwrap_or(self.color)
    }

    pub fn text_fabric(&self) -> Fabric {
        self.conflict.as_ref().and_then(|c| c.fabric).unwrap_or(self.fabric)
    }

    pub fn is_conflict(&self) -> bool {
        self.conflict
            .as_ref()
            .is_some_and(|c| c.color.is_some() || c.fabric.is_some())
    }

    /// This garment as seen through its caption alone: text attributes, no hints.
    pub fn text_view(&self) -> GarmentSpec {
        GarmentSpec {
            silhouette: self.silhouette,
            color: self.text_color(),
            fabric: self.text_fabric(),
            components: self.components.clone(),
            conflict: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.conflict {
            if c.color == Some(self.color) || c.fabric == Some(self.fabric) {
                return Err(Error::Invalid(
                    "conflict override must differ from the sketch hint".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn caption(&self) -> String {
        let mut s = format!(
            "{} {} {}",
            self.text_color(),
            self.text_fabric(),
            self.silhouette
        );
        if !self.components.is_empty() {
            let parts: Vec<&str> = self.components.iter().map(|c| c.name()).collect();
            s.push_str(" with ");
            s.push_str(&parts.join(" and "));
        }
        s
    }
}

/// Inverse of [`GarmentSpec::caption`]; the result never carries a conflict.
pub fn parse_caption(caption: &str) -> Result<GarmentSpec> {
    let bad = || Error::Invalid(format!("not a grammar caption: `{caption}`"));
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() < 3 {
        return Err(bad());
    }
    let color = Color::from_name(words[0]).ok_or_else(bad)?;
    let fabric = Fabric::from_name(words[1]).ok_or_else(bad)?;
    let silhouette = Silhouette::from_name(words[2]).ok_or_else(bad)?;
    let mut spec = GarmentSpec::new(silhouette, color, fabric);
    match words.get(3) {
        None => {}
        Some(&"with") => {
            let rest = &words[4..];
            if rest.is_empty() {
                return Err(bad());
            }
            for (i, w) in rest.iter().enumerate() {
                if i % 2 == 1 {
                    if *w != "and" {
                        return Err(bad());
                    }
                } else {
                    spec.components.insert(Component::from_name(w).ok_or_else(bad)?);
                }
            }
            if rest.len().is_multiple_of(2) {
                return Err(bad());
            }
        }
        Some(_) => return Err(bad()),
    }
    Ok(spec)
}

/// Texture modulation in [-1, 1] at pixel `(x, y)`.
struct TextureField {
    texture: Texture,
    px: usize,
    py: usize,
    size: usize,
    noise: Vec<f64>,
}

impl TextureField {
    fn new(texture: Texture, size: usize, rng: &mut Rng) -> Self {
        let px = rng.below(4);
        let py = rng.below(4);
        let noise = (0..size * size)
            .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        Self {
            texture,
            px,
            py,
            size,
            noise,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let (xs, ys) = (x + self.px, y + self.py);
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        match self.texture {
            Texture::Stripes => sign((ys / 2) % 2 == 0),
            Texture::Twill => sign(((xs + y) / 2).is_multiple_of(2)),
            Texture::Checker => sign((xs / 4 + ys / 4) % 2 == 0),
            Texture::Speckle => self.noise[y * self.size + x],
            Texture::Smooth => {
                0.6 * (2.0 * std::f64::consts::PI * (xs + y) as f64 / self.size as f64).sin()
            }
            Texture::Rib => {
                if xs % 3 == 0 {
                    1.0
                } else {
                    -0.5
                }
            }
            Texture::DotGrid => {
                if xs % 4 == 0 && ys % 4 == 0 {
                    1.0
                } else {
                    -0.3
                }
            }
            Texture::Crosshatch => {
                if (xs + y).is_multiple_of(4) || (xs + 4 * self.size - y).is_multiple_of(4) {
                    1.0
                } else {
                    -0.4
                }
            }
        }
    }
}

/// Boolean pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set pixels with a 4-neighbour outside the mask (or on the border).
    pub fn boundary(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                out.set(x, y, edge);
            }
        }
        out
    }

    /// Mask minus its boundary.
    pub fn eroded(&self) -> Mask {
        let b = self.boundary();
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&b.bits).map(|(&m, &e)| m && !e).collect(),
        }
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

struct Canvas {
    size: usize,
}

impl Canvas {
    /// Pixel centres in unit coordinates.
    fn unit(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.size as f64
    }

    fn fill_rect(&self, m: &mut Mask, x0: f64, x1: f64, y0: f64, y1: f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = (self.unit(x), self.unit(y));
                if u >= x0 && u <= x1 && v >= y0 && v <= y1 {
                    m.set(x, y, true);
                }
            }
        }
    }

    fn fill_ellipse(&self, m: &mut Mask, cx: f64, cy: f64, rx: f64, ry: f64, value: bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = ((self.unit(x) - cx) / rx, (self.unit(y) - cy) / ry);
                if u * u + v * v <= 1.0 {
                    m.set(x, y, value);
                }
            }
        }
    }

    fn fill_trapezoid(&self, m: &mut Mask, y0: f64, y1: f64, top: (f64, f64), bottom: (f64, f64)) {
        for y in 0..self.size {
            let v = self.unit(y);
            if v < y0 || v > y1 {
                continue;
            }
            let t = (v - y0) / (y1 - y0);
            let lo = top.0 + t * (bottom.0 - top.0);
            let hi = top.1 + t * (bottom.1 - top.1);
            for x in 0..self.size {
                let u = self.unit(x);
                if u >= lo && u <= hi {
                    m.set(x, y, true);
                }
            }
        }
    }

    fn pixel(&self, u: f64) -> usize {
        ((u * self.size as f64) as usize).min(self.size - 1)
    }

    fn line(&self, m: &mut Mask, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) {
        let steps = (2 * self.size) as f64;
        for i in 0..=2 * self.size {
            let t = i as f64 / steps;
            m.set(self.pixel(x0 + t * (x1 - x0)), self.pixel(y0 + t * (y1 - y0)), true);
        }
    }

    fn dot(&self, m: &mut Mask, x: f64, y: f64) {
        m.set(self.pixel(x), self.pixel(y), true);
    }
}

fn silhouette_mask(s: Silhouette, size: usize, rng: &mut Rng) -> Mask {
    let c = Canvas { size };
    let mut m = Mask::new(size, size);
    let j = |rng: &mut Rng| rng.uniform_in(-0.03, 0.03);
    let (dx, dw, dh) = (j(rng), j(rng), j(rng));
    let (l, r) = (0.30 + dx - dw, 0.70 + dx + dw);
    match s {
        Silhouette::Tshirt => {
            c.fill_rect(&mut m, l, r, 0.25, 0.88 + dh);
            c.fill_rect(&mut m, l - 0.15, l, 0.25, 0.42 + dh);
            c.fill_rect(&mut m, r, r + 0.15, 0.25, 0.42 + dh);
            c.fill_ellipse(&mut m, 0.5 + dx, 0.24, 0.08, 0.06, false);
        }
        Silhouette::Hoodie => {
            c.fill_rect(&mut m, l, r, 0.30, 0.88 + dh);
            c.fill_rect(&mut m, l - 0.14, l, 0.30, 0.84 + dh);
            c.fill_rect(&mut m, r, r + 0.14, 0.30, 0.84 + dh);
            c.fill_ellipse(&mut m, 0.5 + dx, 0.24, 0.13, 0.11, true);
        }
        Silhouette::Pants => {
            c.fill_rect(&mut m, l, r, 0.12, 0.30);
            c.fill_rect(&mut m, l, 0.48 + dx, 0.30, 0.92 + dh);
            c.fill_rect(&mut m, 0.52 + dx, r, 0.30, 0.92 + dh);
        }
        Silhouette::Skirt => {
            c.fill_trapezoid(&mut m, 0.22, 0.86 + dh, (l + 0.05, r - 0.05), (l - 0.12, r + 0.12));
        }
    }
    m
}

fn component_lines(spec: &GarmentSpec, size: usize, mask: &Mask) -> Mask {
    let c = Canvas { size };
    let mut lines = Mask::new(size, size);
    let bottoms = matches!(spec.silhouette, Silhouette::Pants | Silhouette::Skirt);
    for comp in &spec.components {
        match comp {
            Component::Pocket => {
                let (x0, y0) = if bottoms { (0.34, 0.36) } else { (0.54, 0.56) };
                let (x1, y1) = (x0 + 0.12, y0 + 0.12);
                c.line(&mut lines, (x0, y0), (x1, y0));
                c.line(&mut lines, (x0, y0), (x0, y1));
                c.line(&mut lines, (x1, y0), (x1, y1));
                c.line(&mut lines, (x0, y1), (x1, y1));
            }
            Component::Hood => {
                c.line(&mut lines, (0.38, 0.36), (0.62, 0.36));
                c.dot(&mut lines, 0.45, 0.42);
                c.dot(&mut lines, 0.55, 0.42);
            }
            Component::Collar => {
                c.line(&mut lines, (0.40, 0.32), (0.50, 0.42));
                c.line(&mut lines, (0.60, 0.32), (0.50, 0.42));
            }
            Component::Buttons => {
                for y in [0.48, 0.60, 0.72] {
                    c.dot(&mut lines, 0.5, y);
                }
            }
        }
    }
    for (b, &m) in lines.bits.iter_mut().zip(&mask.bits) {
        *b &= m;
    }
    lines
}

pub const SKETCH_BACKGROUND: f64 = 1.0;
pub const SKETCH_LINE: f64 = 0.08;
const SKETCH_TEXTURE_AMPLITUDE: f64 = 0.06;
const TARGET_TEXTURE_AMPLITUDE: f64 = 0.10;
const TARGET_DETAIL_FACTOR: f64 = 0.75;
const SWATCH_BASE: f64 = 0.5;
const SWATCH_AMPLITUDE: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sketch: Image,
    pub target: Image,
    pub caption: String,
    pub spec: GarmentSpec,
    pub mask: Mask,
}

/// Render a sample; deterministic in `(spec, size, rng seed)`.
pub fn render_sample(spec: &GarmentSpec, size: usize, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::Invalid(format!("image size {size} must be a multiple of 8, at least 16")));
    }
    let mask = silhouette_mask(spec.silhouette, size, rng);
    let details = component_lines(spec, size, &mask);
    let outline = mask.boundary();
    let hint_tex = TextureField::new(spec.fabric.texture(), size, rng);
    let text_tex = TextureField::new(spec.text_fabric().texture(), size, rng);
    let gray = spec.color.sketch_gray();
    let rgb = spec.text_color().rgb();

    let mut sketch = Image::filled(size, size, &[SKETCH_BACKGROUND]);
    let mut target = Image::filled(size, size, &[1.0, 1.0, 1.0]);
    for y in 0..size {
        for x in 0..size {
            if !mask.get(x, y) {
                continue;
            }
            let s = if outline.get(x, y) || details.get(x, y) {
                SKETCH_LINE
            } else {
                gray + SKETCH_TEXTURE_AMPLITUDE * hint_tex.at(x, y)
            };
            sketch.set(x, y, &[s]);

            let m = TARGET_TEXTURE_AMPLITUDE * text_tex.at(x, y);
            let f = if details.get(x, y) { TARGET_DETAIL_FACTOR } else { 1.0 };
            let px = rgb.map(|c| ((c + m) * f).clamp(0.0, 1.0));
            target.set(x, y, &px);
        }
    }
    Ok(Sample {
        sketch: sketch.quantized(),
        target: target.quantized(),
        caption: spec.caption(),
        spec: spec.clone(),
        mask,
    })
}

/// Texture-only image of a fabric on a neutral base.
pub fn render_fabric_swatch(fabric: &str, size: usize, rng: &mut Rng) -> Result<Image> {
    let fabric = Fabric::from_name(fabric).ok_or_else(|| Error::UnknownFabric(fabric.to_string()))?;
    let tex = TextureField::new(fabric.texture(), size, rng);
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let v = (SWATCH_BASE + SWATCH_AMPLITUDE * tex.at(x, y)).clamp(0.0, 1.0);
            img.set(x, y, &[v, v, v]);
        }
    }
    Ok(img.quantized())
}

/// Seed used for sample `index` of a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    crate::rng::derive_seed(seed, index as u64)
}

pub fn random_spec(rng: &mut Rng, conflict_fraction: f64) -> GarmentSpec {
    let pick = |rng: &mut Rng, n: usize| rng.below(n);
    let silhouette = Silhouette::ALL[pick(rng, Silhouette::ALL.len())];
    let color = Color::ALL[pick(rng, Color::ALL.len())];
    let fabric = Fabric::ALL[pick(rng, Fabric::ALL.len())];
    let mut spec = GarmentSpec::new(silhouette, color, fabric);
    for &c in Component::ALL {
        if rng.uniform() < 0.5 {
            spec.components.insert(c);
        }
    }
    if rng.uniform() < conflict_fraction {
        let other = |rng: &mut Rng, n: usize, base: usize| (base + 1 + rng.below(n - 1)) % n;
        let color = Color::ALL[other(rng, Color::ALL.len(), color.index())];
        let fabric = if rng.uniform() < 0.5 {
            Some(Fabric::ALL[other(rng, Fabric::ALL.len(), fabric.index())])
        } else {
            None
        };
        spec.conflict = Some(Conflict {
            color: Some(color),
            fabric,
        });
    }
    spec
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub spec: GarmentSpec,
    pub caption: String,
    pub sketch: String,
    pub target: String,
    pub sketch_sha256: String,
    pub target_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One JSON record per line.
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn manifest_hash(&self) -> String {
        sha256_hex(self.manifest_text().as_bytes())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, r) in self.samples.iter().zip(&self.records) {
            s.sketch.save(&dir.join(&r.sketch))?;
            s.target.save(&dir.join(&r.target))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest_text()).map_err(|e| Error::io(&path, e))
    }

    /// Read a dataset written by [`Dataset::save`], verifying content hashes.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.clone(),
                line: i + 1,
                msg,
            };
            let r: SampleRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let read = |name: &str, hash: &str| -> Result<Image> {
                let p = dir.join(name);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if sha256_hex(&bytes) != hash {
                    return Err(parse_err(format!("content hash mismatch for {name}")));
                }
                Image::from_pnm(&bytes, &p)
            };
            let sketch = read(&r.sketch, &r.sketch_sha256)?;
            let target = read(&r.target, &r.target_sha256)?;
            let mask = foreground_from_sketch(&sketch);
            samples.push(Sample {
                sketch,
                target,
                caption: r.caption.clone(),
                spec: r.spec.clone(),
                mask,
            });
            records.push(r);
        }
        if samples.is_empty() {
            return Err(Error::Invalid(format!("{} lists no samples", path.display())));
        }
        Ok(Dataset { samples, records })
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Non-background pixels of a rendered sketch.
pub fn foreground_from_sketch(sketch: &Image) -> Mask {
    let mut m = Mask::new(sketch.width, sketch.height);
    for (b, &v) in m.bits.iter_mut().zip(&sketch.data) {
        *b = v < SKETCH_BACKGROUND;
    }
    m
}

/// `n` samples with attributes drawn uniformly; a `conflict_fraction` share
/// of them override the sketch hints in caption and target.
pub fn gen_dataset(n: usize, seed: u64, conflict_fraction: f64, size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&conflict_fraction) {
        return Err(Error::Invalid(format!("conflict fraction {conflict_fraction} outside [0, 1]")));
    }
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let s = sample_seed(seed, index);
        let mut rng = Rng::new(s);
        let spec = random_spec(&mut rng, conflict_fraction);
        let sample = render_sample(&spec, size, &mut rng)?;
        let sketch = format!("sketch_{index:05}.pgm");
        let target = format!("target_{index:05}.ppm");
        records.push(SampleRecord {
            index,
            seed: s,
            spec,
            caption: sample.caption.clone(),
            sketch_sha256: sha256_hex(&sample.sketch.to_pnm()?),
            target_sha256: sha256_hex(&sample.target.to_pnm()?),
            sketch,
            target,
        });
        samples.push(sample);
    }
    Ok(Dataset { samples, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<GarmentSpec> {
        let mut out = Vec::new();
        for &s in Silhouette::ALL {
            for &c in Color::ALL {
                for &f in Fabric::ALL {
                    for bits in 0..16u32 {
                        let comps: Vec<_> = Component::ALL
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| bits & (1 << i) != 0)
                            .map(|(_, &c)| c)
                            .collect();
                        out.push(GarmentSpec::new(s, c, f).with_components(&comps));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn caption_round_trip_over_full_grammar() {
        for spec in all_specs() {
            assert_eq!(parse_caption(&spec.caption()).unwrap(), spec);
        }
    }

    #[test]
    fn caption_format() {
        let spec = GarmentSpec::new(Silhouette::Hoodie, Color::Red, Fabric::Denim)
            .with_components(&[Component::Buttons, Component::Pocket]);
        assert_eq!(spec.caption(), "red denim hoodie with pocket and buttons");
        assert_eq!(
            GarmentSpec::new(Silhouette::Skirt, Color::Black, Fabric::Silk).caption(),
            "black silk skirt"
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        for bad in ["", "red denim", "red denim hoodie with", "red denim hoodie and pocket", "red denim hoodie with pocket pocket"] {
            assert!(parse_caption(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = GarmentSpec::new(Silhouette::Tshirt, Color::Blue, Fabric::Tweed)
            .with_components(&[Component::Collar]);
        let a = render_sample(&spec, 32, &mut Rng::new(7)).unwrap();
        let b = render_sample(&spec, 32, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sketch_and_target_share_silhouette() {
        for spec in all_specs().iter().step_by(7) {
            let s = render_sample(spec, 32, &mut Rng::new(3)).unwrap();
            let sketch_fg = foreground_from_sketch(&s.sketch);
            assert_eq!(sketch_fg, s.mask);
            let mut target_fg = Mask::new(32, 32);
            for y in 0..32 {
                for x in 0..32 {
                    target_fg.set(x, y, s.target.pixel(x, y) != [1.0, 1.0, 1.0]);
                }
            }
            assert_eq!(target_fg, s.mask, "{}", spec.caption());
        }
    }

    #[test]
    fn conflict_wiring() {
        let mut spec = GarmentSpec::new(Silhouette::Tshirt, Color::Red, Fabric::Silk);
        spec.conflict = Some(Conflict {
            color: Some(Color::Blue),
            fabric: None,
        });
        let s = render_sample(&spec, 32, &mut Rng::new(1)).unwrap();
        assert!(s.caption.starts_with("blue "));
        // silk is smooth, so the interior is close to the flat color
        let (x, y) = (16, 20);
        assert!(s.mask.get(x, y));
        let px = s.target.pixel(x, y);
        let blue = Color::Blue.rgb();
        assert!((0..3).all(|c| (px[c] - blue[c]).abs() < 0.11), "{px:?}");
        let g = s.sketch.pixel(x, y)[0];
        assert!((g - Color::Red.sketch_gray()).abs() < 0.07);
        assert_eq!(parse_caption(&s.caption).unwrap(), spec.text_view());
    }

    #[test]
    fn conflict_must_differ() {
        let mut spec = GarmentSpec::new(Silhouette::Tshirt, Color::Red, Fabric::Silk);
        spec.conflict = Some(Conflict {
            color: Some(Color::Red),
            fabric: None,
        });
        assert!(render_sample(&spec, 32, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = gen_dataset(1, 5, 0.5, 32).unwrap();
        let b = gen_dataset(1, 5, 0.5, 32).unwrap();
        assert_eq!(a.manifest_hash(), b.manifest_hash());
        assert_ne!(a.manifest_hash(), gen_dataset(1, 6, 0.5, 32).unwrap().manifest_hash());
    }

    #[test]
    fn zero_conflict_fraction() {
        let d = gen_dataset(200, 2, 0.0, 16).unwrap();
        assert!(d.records.iter().all(|r| r.spec.conflict.is_none()));
        let d = gen_dataset(50, 2, 1.0, 16).unwrap();
        assert!(d.records.iter().all(|r| r.spec.is_conflict()));
    }

    #[test]
    fn rejects_empty_dataset() {
        assert!(gen_dataset(0, 1, 0.0, 32).is_err());
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let n = 10_000;
        let mut rng = Rng::new(99);
        let specs: Vec<_> = (0..n).map(|_| random_spec(&mut rng, 0.5)).collect();
        let check = |counts: Vec<usize>| {
            let k = counts.len() as f64;
            for c in counts {
                let f = c as f64 / n as f64;
                assert!((f - 1.0 / k).abs() <= 0.03, "freq {f} vs {}", 1.0 / k);
            }
        };
        let mut sil = vec![0; 4];
        let mut col = vec![0; 8];
        let mut fab = vec![0; 8];
        let mut comp = vec![[0usize; 2]; 4];
        for s in &specs {
            sil[s.silhouette.index()] += 1;
            col[s.text_color().index()] += 1;
            fab[s.fabric.index()] += 1;
            for (i, c) in Component::ALL.iter().enumerate() {
                comp[i][s.components.contains(c) as usize] += 1;
            }
        }
        check(sil);
        check(col);
        check(fab);
        for c in comp {
            check(c.to_vec());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(3, 4, 0.5, 32).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.records, d.records);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.sketch, b.sketch);
            assert_eq!(a.target, b.target);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(1, 4, 0.0, 32).unwrap();
        d.save(dir.path()).unwrap();
        let p = dir.path().join(&d.records[0].target);
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn swatches_are_distinct_and_deterministic() {
        let imgs: Vec<_> = Fabric::ALL
            .iter()
            .map(|f| render_fabric_swatch(f.name(), 32, &mut Rng::new(1)).unwrap())
            .collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert!(imgs[i].l2_distance(&imgs[j]) > 0.0);
            }
        }
        assert_eq!(imgs[0], render_fabric_swatch("denim", 32, &mut Rng::new(1)).unwrap());
        assert!(matches!(
            render_fabric_swatch("chambray", 32, &mut Rng::new(1)),
            Err(Error::UnknownFabric(_))
        ));
    }

    #[test]
    fn denim_is_diagonal_twill() {
        assert_eq!(Fabric::Denim.texture(), Texture::Twill);
        let img = render_fabric_swatch("denim", 16, &mut Rng::new(2)).unwrap();
        // constant along anti-diagonal steps of the band pattern: (x+1, y-1) keeps x+y
        for y in 1..16 {
            for x in 0..15 {
                assert_eq!(img.pixel(x, y), img.pixel(x + 1, y - 1));
            }
        }
    }
}
