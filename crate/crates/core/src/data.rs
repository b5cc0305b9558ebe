//! Procedural image-caption corpus: attribute-combination shapes rendered
//! at 32x32, compositional captions over the closed vocabulary, held-out
//! attribute combinations packaged as concept sets, and image file I/O.
//!
//! Rendering quantizes to 8-bit at the source, so images survive PNG
//! round trips bit-exactly and training tensors are exactly the stored
//! bytes divided by 255.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{IMG_CHANNELS, IMG_SIZE};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{sample_template, TemplateMode, Vocabulary};

pub const PIXELS_PER_IMAGE: usize = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
/// Largest concept set the sweep supports.
pub const MAX_CONCEPT_IMAGES: usize = 25;
/// Default number of renderings per held-out concept.
pub const CONCEPT_SET_SIZE: usize = 5;
/// Name of the metadata file inside a concept directory.
pub const DESCRIPTOR_FILE: &str = "descriptor.txt";

// ---------------------------------------------------------------------------
// Attributes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Background {
    Dark,
    Light,
    Gray,
    Tan,
}

pub const ALL_SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];
pub const ALL_COLORS: [ColorName; 8] = [
    ColorName::Red,
    ColorName::Green,
    ColorName::Blue,
    ColorName::Yellow,
    ColorName::Purple,
    ColorName::Orange,
    ColorName::Cyan,
    ColorName::Pink,
];
pub const ALL_TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Dots];
pub const ALL_BACKGROUNDS: [Background; 4] = [
    Background::Dark,
    Background::Light,
    Background::Gray,
    Background::Tan,
];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

impl ColorName {
    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
            ColorName::Orange => "orange",
            ColorName::Cyan => "cyan",
            ColorName::Pink => "pink",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.86, 0.20, 0.18],
            ColorName::Green => [0.22, 0.69, 0.25],
            ColorName::Blue => [0.25, 0.45, 0.87],
            ColorName::Yellow => [0.94, 0.85, 0.21],
            ColorName::Purple => [0.58, 0.31, 0.73],
            ColorName::Orange => [0.95, 0.55, 0.15],
            ColorName::Cyan => [0.20, 0.80, 0.82],
            ColorName::Pink => [0.95, 0.58, 0.75],
        }
    }
}

impl Texture {
    pub fn word(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "striped",
            Texture::Dots => "dotted",
        }
    }
}

impl Background {
    pub fn word(self) -> &'static str {
        match self {
            Background::Dark => "dark",
            Background::Light => "light",
            Background::Gray => "gray",
            Background::Tan => "tan",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Background::Dark => [0.10, 0.10, 0.12],
            Background::Light => [0.93, 0.93, 0.90],
            Background::Gray => [0.50, 0.50, 0.52],
            Background::Tan => [0.82, 0.71, 0.55],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AttributeSpec {
    pub shape: Shape,
    pub color: ColorName,
    pub texture: Texture,
    pub background: Background,
}

impl AttributeSpec {
    /// Full attribute description, e.g.
    /// "a striped red circle on a dark background".
    pub fn description(&self) -> String {
        format!(
            "a {} {} {} on a {} background",
            self.texture.word(),
            self.color.word(),
            self.shape.word(),
            self.background.word()
        )
    }

    /// The slot text used when wrapping the description in a template.
    pub fn slot_phrase(&self) -> String {
        format!(
            "{} {} {} on a {} background",
            self.texture.word(),
            self.color.word(),
            self.shape.word(),
            self.background.word()
        )
    }
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render a spec to planar 8-bit RGB (channel-major, `3 * 32 * 32` bytes).
/// Position and size jitter are drawn from the rng; everything else is a
/// pure function of the spec.
pub fn render(spec: &AttributeSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = IMG_SIZE as i32;
    let cx = n / 2 + rng.gen_range(-3..=3);
    let cy = n / 2 + rng.gen_range(-3..=3);
    let r = rng.gen_range(8..=11) as f32;
    let bg = spec.background.rgb();
    let fg = spec.color.rgb();
    let dim = [fg[0] * 0.55, fg[1] * 0.55, fg[2] * 0.55];

    let inside = |x: i32, y: i32| -> bool {
        let dx = (x - cx) as f32;
        let dy = (y - cy) as f32;
        match spec.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
            Shape::Triangle => {
                // upward triangle: apex at cy - r, base at cy + r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Star => {
                let d = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let spike = (5.0 * (theta - std::f32::consts::FRAC_PI_2)).cos().max(0.0);
                let reach = r * (0.42 + 0.58 * spike.powi(4));
                d <= reach
            }
        }
    };

    let mut planes = vec![0u8; PIXELS_PER_IMAGE];
    for y in 0..n {
        for x in 0..n {
            let rgb = if inside(x, y) {
                match spec.texture {
                    Texture::Solid => fg,
                    Texture::Stripes => {
                        if (y / 3) % 2 == 0 {
                            fg
                        } else {
                            dim
                        }
                    }
                    Texture::Dots => {
                        if x % 4 < 2 && y % 4 < 2 {
                            dim
                        } else {
                            fg
                        }
                    }
                }
            } else {
                bg
            };
            for (c, &v) in rgb.iter().enumerate() {
                planes[c * (IMG_SIZE * IMG_SIZE) + (y as usize) * IMG_SIZE + x as usize] =
                    quantize(v);
            }
        }
    }
    planes
}

/// Stack planar 8-bit images into an [N, 3, 32, 32] tensor scaled to [0, 1].
pub fn to_tensor(images: &[Vec<u8>]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("to_tensor: no images"));
    }
    let mut data = Vec::with_capacity(images.len() * PIXELS_PER_IMAGE);
    for (i, img) in images.iter().enumerate() {
        if img.len() != PIXELS_PER_IMAGE {
            return Err(Error::invalid(format!(
                "image {i} has {} bytes, want {PIXELS_PER_IMAGE}",
                img.len()
            )));
        }
        data.extend(img.iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::from_vec(&[images.len(), IMG_CHANNELS, IMG_SIZE, IMG_SIZE], data, false)
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub pixels: Vec<u8>,
    pub caption: String,
    pub spec: AttributeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptSource {
    Generated,
    Ingested,
}

#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub images: Vec<Vec<u8>>,
    pub descriptor: String,
    pub source: ConceptSource,
    pub spec: Option<AttributeSpec>,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images_tensor(&self) -> Result<Tensor> {
        to_tensor(&self.images)
    }

    /// Shrink to the first `n` images (for the set-size sweep).
    pub fn take(&self, n: usize) -> Result<ConceptSet> {
        if n == 0 || n > self.images.len() {
            return Err(Error::Corpus(format!(
                "cannot take {n} images from a set of {}",
                self.images.len()
            )));
        }
        Ok(ConceptSet {
            images: self.images[..n].to_vec(),
            descriptor: self.descriptor.clone(),
            source: self.source,
            spec: self.spec,
        })
    }
}

/// Inverse of [`to_tensor`]: split an [N, 3, 32, 32] tensor into planar
/// 8-bit images, clamping to [0, 1] and rounding.
pub fn from_tensor(t: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != IMG_CHANNELS || s[2] != IMG_SIZE || s[3] != IMG_SIZE {
        return Err(Error::ShapeMismatch {
            op: "from_tensor",
            detail: format!("{s:?} vs [N, 3, {IMG_SIZE}, {IMG_SIZE}]"),
        });
    }
    let data = t.to_vec();
    Ok(data
        .chunks_exact(PIXELS_PER_IMAGE)
        .map(|img| {
            img.iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect()
        })
        .collect())
}

/// Render `n` fresh views of one attribute combination — the concept
/// pool the set-size sweep subsamples with [`ConceptSet::take`].
pub fn render_concept_pool(spec: &AttributeSpec, n: usize, seed: u64) -> Result<ConceptSet> {
    if n == 0 || n > MAX_CONCEPT_IMAGES {
        return Err(Error::Corpus(format!(
            "concept pool size {n} outside 1..={MAX_CONCEPT_IMAGES}"
        )));
    }
    let images = (0..n)
        .map(|j| render(spec, &mut rng::stream(seed, "concept-pool", j as u64)))
        .collect();
    Ok(ConceptSet {
        images,
        descriptor: spec.shape.word().to_string(),
        source: ConceptSource::Generated,
        spec: Some(*spec),
    })
}

/// Default held-out combinations: one per shape, chosen so every
/// individual attribute still appears in training data.
pub fn default_holdout() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec {
            shape: Shape::Circle,
            color: ColorName::Red,
            texture: Texture::Stripes,
            background: Background::Dark,
        },
        AttributeSpec {
            shape: Shape::Square,
            color: ColorName::Blue,
            texture: Texture::Dots,
            background: Background::Light,
        },
        AttributeSpec {
            shape: Shape::Triangle,
            color: ColorName::Yellow,
            texture: Texture::Solid,
            background: Background::Gray,
        },
        AttributeSpec {
            shape: Shape::Star,
            color: ColorName::Purple,
            texture: Texture::Stripes,
            background: Background::Tan,
        },
    ]
}

fn draw_spec(rng: &mut ChaCha8Rng) -> AttributeSpec {
    AttributeSpec {
        shape: ALL_SHAPES[rng.gen_range(0..ALL_SHAPES.len())],
        color: ALL_COLORS[rng.gen_range(0..ALL_COLORS.len())],
        texture: ALL_TEXTURES[rng.gen_range(0..ALL_TEXTURES.len())],
        background: ALL_BACKGROUNDS[rng.gen_range(0..ALL_BACKGROUNDS.len())],
    }
}

/// Generate `n_pairs` captioned training images plus one 5-image concept
/// set per held-out combination. Held-out combinations never appear in
/// the training pairs. Captions mix the bare description, object-template
/// wraps of it, and style phrasings, all over the closed vocabulary.
pub fn generate_corpus(
    seed: u64,
    n_pairs: usize,
    holdout: &[AttributeSpec],
) -> Result<(Vec<CaptionedImage>, Vec<ConceptSet>)> {
    if n_pairs == 0 {
        return Err(Error::Corpus("n_pairs must be >= 1".into()));
    }
    let mut sorted = holdout.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Corpus(format!(
                "holdout combination listed twice: {}",
                w[0].description()
            )));
        }
    }
    let total_combos = ALL_SHAPES.len() * ALL_COLORS.len() * ALL_TEXTURES.len() * ALL_BACKGROUNDS.len();
    if holdout.len() >= total_combos {
        return Err(Error::Corpus("holdout covers every attribute combination".into()));
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let mut r = rng::stream(seed, "corpus-pair", i as u64);
        let spec = loop {
            let s = draw_spec(&mut r);
            if !holdout.contains(&s) {
                break s;
            }
        };
        let pixels = render(&spec, &mut r);
        let style_roll: f64 = r.gen();
        let caption = if style_roll < 0.50 {
            spec.description()
        } else if style_roll < 0.90 {
            sample_template(TemplateMode::Object, &spec.slot_phrase(), &mut r)
        } else {
            // style phrasing describes texture+color as "the style"
            sample_template(
                TemplateMode::Style,
                &format!("{} {}", spec.texture.word(), spec.color.word()),
                &mut r,
            )
        };
        pairs.push(CaptionedImage { pixels, caption, spec });
    }

    let mut concepts = Vec::with_capacity(holdout.len());
    for (k, spec) in holdout.iter().enumerate() {
        let mut images = Vec::with_capacity(CONCEPT_SET_SIZE);
        for j in 0..CONCEPT_SET_SIZE {
            let mut r = rng::stream(seed, "holdout-render", (k * CONCEPT_SET_SIZE + j) as u64);
            images.push(render(spec, &mut r));
        }
        concepts.push(ConceptSet {
            images,
            descriptor: spec.shape.word().to_string(),
            source: ConceptSource::Generated,
            spec: Some(*spec),
        });
    }

    // zero caption overlap with any held-out full description
    let banned: Vec<String> = holdout.iter().map(|s| s.description()).collect();
    for p in &pairs {
        if banned.contains(&p.caption) {
            return Err(Error::Corpus(format!(
                "training caption collides with held-out description: {}",
                p.caption
            )));
        }
    }
    Ok((pairs, concepts))
}

/// Every caption must tokenize without unknown tokens.
pub fn audit_captions(pairs: &[CaptionedImage], vocab: &Vocabulary) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        let ids = vocab.tokenize(&p.caption);
        if ids.is_empty() {
            return Err(Error::Corpus(format!("caption {i} tokenizes to nothing")));
        }
        if ids.contains(&crate::text::UNK_ID) {
            return Err(Error::Corpus(format!(
                "caption {i} contains a word outside the vocabulary: {:?}",
                p.caption
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Write a planar 8-bit RGB image as PNG with key/value text metadata.
pub fn write_png(path: &Path, pixels: &[u8], metadata: &[(&str, &str)]) -> Result<()> {
    if pixels.len() != PIXELS_PER_IMAGE {
        return Err(Error::invalid(format!(
            "write_png: {} bytes, want {PIXELS_PER_IMAGE}",
            pixels.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let w = std::io::BufWriter::new(file);
    let mut enc = png::Encoder::new(w, IMG_SIZE as u32, IMG_SIZE as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in metadata {
        enc.add_text_chunk((*k).to_string(), (*v).to_string())
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("metadata chunk: {e}"),
            })?;
    }
    let mut writer = enc.write_header().map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    // planar -> interleaved rows
    let plane = IMG_SIZE * IMG_SIZE;
    let mut rows = vec![0u8; plane * 3];
    for i in 0..plane {
        rows[i * 3] = pixels[i];
        rows[i * 3 + 1] = pixels[plane + i];
        rows[i * 3 + 2] = pixels[2 * plane + i];
    }
    writer.write_image_data(&rows).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Read any supported image, center-crop to square, resize to 32x32, and
/// return planar 8-bit RGB.
pub fn read_image_normalized(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("not a decodable image: {e}"),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width(), rgb.height());
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
    let resized = image::imageops::resize(
        &cropped,
        IMG_SIZE as u32,
        IMG_SIZE as u32,
        image::imageops::FilterType::Triangle,
    );
    let plane = IMG_SIZE * IMG_SIZE;
    let mut planes = vec![0u8; PIXELS_PER_IMAGE];
    for (i, px) in resized.pixels().enumerate() {
        planes[i] = px[0];
        planes[plane + i] = px[1];
        planes[2 * plane + i] = px[2];
    }
    Ok(planes)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Load a concept directory: 1-25 images, all decodable, resized and
/// normalized. `descriptor` overrides the directory's descriptor file;
/// exactly one of the two must provide the word. Any unreadable image
/// fails the whole load (no partial sets).
pub fn load_concept_set(dir: &Path, descriptor: Option<&str>) -> Result<ConceptSet> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<std::path::PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let p = entry.path();
        if !p.is_file() {
            continue;
        }
        if p.file_name().and_then(|n| n.to_str()) == Some(DESCRIPTOR_FILE) {
            continue;
        }
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_lowercase())
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            return Err(Error::Corpus(format!(
                "concept directory holds a non-image file: {}",
                p.display()
            )));
        }
        files.push(p);
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Corpus(format!("no images in {}", dir.display())));
    }
    if files.len() > MAX_CONCEPT_IMAGES {
        return Err(Error::Corpus(format!(
            "{} images in {} exceeds the maximum of {MAX_CONCEPT_IMAGES}",
            files.len(),
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        images.push(read_image_normalized(f)?);
    }
    let descriptor = match descriptor {
        Some(d) => d.to_string(),
        None => {
            let p = dir.join(DESCRIPTOR_FILE);
            std::fs::read_to_string(&p)
                .map_err(|e| Error::io(p.display().to_string(), e))?
                .trim()
                .to_string()
        }
    };
    if descriptor.is_empty() {
        return Err(Error::Corpus("empty concept descriptor".into()));
    }
    Ok(ConceptSet {
        images,
        descriptor,
        source: ConceptSource::Ingested,
        spec: None,
    })
}

/// Write a concept set as a directory of PNGs plus the descriptor file.
pub fn save_concept_set(set: &ConceptSet, dir: &Path, metadata: &[(&str, &str)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, img) in set.images.iter().enumerate() {
        write_png(&dir.join(format!("{i:02}.png")), img, metadata)?;
    }
    let p = dir.join(DESCRIPTOR_FILE);
    std::fs::write(&p, format!("{}\n", set.descriptor))
        .map_err(|e| Error::io(p.display().to_string(), e))
}
