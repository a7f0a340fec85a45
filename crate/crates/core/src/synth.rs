//! Procedurally rendered categories made of colored parts, with exact
//! per-part masks and an optional watermark shortcut.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use deal_tensor::Tensor;
use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{build_caption, CategoryConcepts, ConceptSet};
use crate::error::{DealError, Result};
use crate::seed::mix;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const WATERMARK_SIZE: usize = 4;

const JITTER: i64 = 2;
const COLOR_JITTER: f64 = 0.05;
const BACKGROUND_NOISE: f64 = 0.1;
const WATERMARK_VALUE: f32 = 1.0;

pub const IMAGES_FILE: &str = "images.bin";
pub const MASKS_FILE: &str = "masks.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Disk,
    Bar,
    Ring,
}

impl Shape {
    /// Whether cell `(y, x)` of a `size×size` box belongs to the shape.
    fn covers(self, y: usize, x: usize, size: usize) -> bool {
        let c = (size as f64 - 1.0) / 2.0;
        let r = size as f64 / 2.0;
        let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        match self {
            Shape::Square => true,
            Shape::Disk => d2 <= r * r,
            Shape::Bar => y >= size / 4 && y < size / 4 + size / 2,
            Shape::Ring => d2 <= r * r && d2 > (r / 2.0).powi(2),
        }
    }
}

/// Quadrant anchor of a part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::TopLeft, Slot::TopRight, Slot::BottomLeft, Slot::BottomRight];

    /// Default center of a part.
    fn center(self) -> (i64, i64) {
        match self {
            Slot::TopLeft => (8, 8),
            Slot::TopRight => (8, 24),
            Slot::BottomLeft => (24, 8),
            Slot::BottomRight => (22, 22),
        }
    }

    /// Half-open row and column range a part must stay inside. The
    /// bottom-right slot stops short of the watermark corner.
    fn bounds(self) -> ((i64, i64), (i64, i64)) {
        let s = IMAGE_SIZE as i64;
        let h = s / 2;
        let reserved = s - WATERMARK_SIZE as i64;
        match self {
            Slot::TopLeft => ((0, h), (0, h)),
            Slot::TopRight => ((0, h), (h, s)),
            Slot::BottomLeft => ((h, s), (0, h)),
            Slot::BottomRight => ((h, reserved), (h, reserved)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    /// Concept string naming the part.
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    pub slot: Slot,
    /// Side of the bounding box in pixels.
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Watermark {
    pub train_probability: f64,
    pub test_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub parts: Vec<PartSpec>,
    pub spurious: Option<Watermark>,
}

impl CategorySpec {
    pub fn concepts(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]` planar, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub category_index: usize,
    pub caption: String,
    /// One `H×W` mask of `{0, 1}` per part, in concept order.
    pub masks: Vec<Vec<u8>>,
    pub watermark_present: bool,
}

impl SyntheticSample {
    pub fn image_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&v| f64::from(v)).collect();
        Tensor::new(data, &[CHANNELS, IMAGE_SIZE, IMAGE_SIZE]).expect("image buffer has the fixed size")
    }
}

const PART_OPTIONS: [[(&str, Shape, [f64; 3]); 2]; 4] = [
    [
        ("red square", Shape::Square, [0.9, 0.15, 0.15]),
        ("green disk", Shape::Disk, [0.15, 0.8, 0.2]),
    ],
    [
        ("blue ring", Shape::Ring, [0.2, 0.3, 0.95]),
        ("yellow bar", Shape::Bar, [0.95, 0.9, 0.15]),
    ],
    [
        ("magenta bar", Shape::Bar, [0.9, 0.2, 0.85]),
        ("cyan ring", Shape::Ring, [0.15, 0.85, 0.9]),
    ],
    [
        ("orange disk", Shape::Disk, [0.95, 0.55, 0.1]),
        ("purple square", Shape::Square, [0.55, 0.2, 0.8]),
    ],
];

const CATEGORY_NAMES: [&str; 8] = ["kestrel", "lynx", "otter", "heron", "marten", "ibis", "stoat", "plover"];

/// Eight categories, one part per quadrant. Each quadrant has two part
/// options, and categories use the eight even-parity option patterns, so any
/// two categories differ in at least two parts and every part is shared by
/// four categories.
pub fn default_taxonomy() -> (Vec<CategorySpec>, ConceptSet) {
    let patterns = (0u8..16).filter(|p| p.count_ones() % 2 == 0);
    let specs: Vec<CategorySpec> = patterns
        .zip(CATEGORY_NAMES)
        .map(|(pattern, name)| CategorySpec {
            name: name.to_string(),
            parts: Slot::ALL
                .iter()
                .enumerate()
                .map(|(i, &slot)| {
                    let (part, shape, color) = PART_OPTIONS[i][usize::from((pattern >> i) & 1)];
                    PartSpec {
                        name: part.to_string(),
                        shape,
                        color,
                        slot,
                        size: 8,
                    }
                })
                .collect(),
            spurious: None,
        })
        .collect();
    let concepts = concept_set(&specs).expect("default taxonomy is valid");
    (specs, concepts)
}

pub fn concept_set(specs: &[CategorySpec]) -> Result<ConceptSet> {
    ConceptSet::new(
        specs
            .iter()
            .map(|s| CategoryConcepts {
                name: s.name.clone(),
                concepts: s.concepts(),
            })
            .collect(),
    )
}

pub fn validate_specs(specs: &[CategorySpec]) -> Result<()> {
    for spec in specs {
        let bad = |msg: String| DealError::ConceptValidation {
            category: spec.name.clone(),
            msg,
        };
        if spec.parts.is_empty() {
            return Err(bad("needs at least one part".into()));
        }
        for (i, p) in spec.parts.iter().enumerate() {
            if spec.parts[..i].iter().any(|q| q.slot == p.slot) {
                return Err(bad(format!("slot {:?} used twice", p.slot)));
            }
            let ((r0, r1), (c0, c1)) = p.slot.bounds();
            if p.size == 0 || p.size as i64 > (r1 - r0).min(c1 - c0) {
                return Err(bad(format!("part {:?} of size {} does not fit its slot", p.name, p.size)));
            }
        }
        if let Some(w) = spec.spurious {
            for prob in [w.train_probability, w.test_probability] {
                if !(0.0..=1.0).contains(&prob) {
                    return Err(bad(format!("watermark probability {prob} outside [0, 1]")));
                }
            }
        }
    }
    Ok(())
}

/// Stamps the corner watermark on `category_name` with the given per-split
/// probabilities.
pub fn inject_spurious(
    specs: &[CategorySpec],
    category_name: &str,
    train_probability: f64,
    test_probability: f64,
) -> Result<Vec<CategorySpec>> {
    let mut out = specs.to_vec();
    let spec = out
        .iter_mut()
        .find(|s| s.name == category_name)
        .ok_or_else(|| DealError::UnknownCategory(category_name.to_string()))?;
    spec.spurious = Some(Watermark {
        train_probability,
        test_probability,
    });
    validate_specs(&out)?;
    Ok(out)
}

/// Renders sample `index` of category `category`; identical to the
/// corresponding element of [`generate`].
pub fn render_sample(specs: &[CategorySpec], category: usize, index: usize, split: Split, seed: u64) -> Result<SyntheticSample> {
    let spec = specs
        .get(category)
        .ok_or_else(|| DealError::UnknownCategory(format!("#{category}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, category as u64, index as u64, split.tag()]));
    let n = IMAGE_SIZE * IMAGE_SIZE;

    let probability = spec.spurious.map_or(0.0, |w| match split {
        Split::Train => w.train_probability,
        Split::Test => w.test_probability,
    });
    let watermark_present = rng.random_bool(probability);

    let mut image: Vec<f32> = (0..CHANNELS * n)
        .map(|_| (rng.random::<f64>() * BACKGROUND_NOISE) as f32)
        .collect();
    let mut masks = Vec::with_capacity(spec.parts.len());
    for part in &spec.parts {
        let dy = rng.random_range(-JITTER..=JITTER);
        let dx = rng.random_range(-JITTER..=JITTER);
        let color: Vec<f64> = part
            .color
            .iter()
            .map(|&c| (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
            .collect();
        let size = part.size as i64;
        let ((r0, r1), (c0, c1)) = part.slot.bounds();
        let (cy, cx) = part.slot.center();
        let top = (cy - size / 2 + dy).clamp(r0, r1 - size) as usize;
        let left = (cx - size / 2 + dx).clamp(c0, c1 - size) as usize;
        let mut mask = vec![0u8; n];
        for y in 0..part.size {
            for x in 0..part.size {
                if part.shape.covers(y, x, part.size) {
                    let at = (top + y) * IMAGE_SIZE + left + x;
                    mask[at] = 1;
                    for (ch, &c) in color.iter().enumerate() {
                        image[ch * n + at] = c as f32;
                    }
                }
            }
        }
        masks.push(mask);
    }
    if watermark_present {
        let start = IMAGE_SIZE - WATERMARK_SIZE;
        for ch in 0..CHANNELS {
            for y in start..IMAGE_SIZE {
                for x in start..IMAGE_SIZE {
                    image[ch * n + y * IMAGE_SIZE + x] = WATERMARK_VALUE;
                }
            }
        }
    }
    Ok(SyntheticSample {
        image,
        category_index: category,
        caption: build_caption(&spec.name, &spec.concepts())?,
        masks,
        watermark_present,
    })
}

/// `count_per_category` samples of every category, grouped by category.
pub fn generate(specs: &[CategorySpec], count_per_category: usize, split: Split, seed: u64) -> Result<Vec<SyntheticSample>> {
    validate_specs(specs)?;
    if count_per_category == 0 {
        return Err(DealError::Config("count_per_category must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(specs.len() * count_per_category);
    for category in 0..specs.len() {
        for index in 0..count_per_category {
            out.push(render_sample(specs, category, index, split, seed)?);
        }
    }
    Ok(out)
}

/// Samples together with the category names their indices refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub samples: Vec<SyntheticSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    max_masks: usize,
    categories: Vec<String>,
    samples: Vec<ManifestEntry>,
    images_fnv1a64: u64,
    masks_fnv1a64: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    category: usize,
    caption: String,
    masks: usize,
    watermark: bool,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let max_masks = dataset.samples.iter().map(|s| s.masks.len()).max().unwrap_or(0);
    let mut images = Vec::with_capacity(dataset.samples.len() * CHANNELS * n * 4);
    let mut masks = Vec::with_capacity(dataset.samples.len() * max_masks * n);
    for s in &dataset.samples {
        if s.category_index >= dataset.categories.len() {
            return Err(DealError::Dataset(format!("category index {} has no name", s.category_index)));
        }
        for v in &s.image {
            images.extend_from_slice(&v.to_le_bytes());
        }
        for m in &s.masks {
            masks.extend_from_slice(m);
        }
        masks.resize(masks.len() + (max_masks - s.masks.len()) * n, 0);
    }
    let manifest = Manifest {
        count: dataset.samples.len(),
        channels: CHANNELS,
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        max_masks,
        categories: dataset.categories.clone(),
        samples: dataset
            .samples
            .iter()
            .map(|s| ManifestEntry {
                category: s.category_index,
                caption: s.caption.clone(),
                masks: s.masks.len(),
                watermark: s.watermark_present,
            })
            .collect(),
        images_fnv1a64: fnv1a64(&images),
        masks_fnv1a64: fnv1a64(&masks),
    };
    fs::create_dir_all(dir).map_err(DealError::io(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(DealError::io(path))
    };
    write(IMAGES_FILE, &images)?;
    write(MASKS_FILE, &masks)?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(MANIFEST_FILE, text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(DealError::io(path))
    };
    let manifest_bytes = read(MANIFEST_FILE)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| DealError::Dataset(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let images = read(IMAGES_FILE)?;
    let masks = read(MASKS_FILE)?;
    for (file, bytes, expected) in [
        (IMAGES_FILE, &images, manifest.images_fnv1a64),
        (MASKS_FILE, &masks, manifest.masks_fnv1a64),
    ] {
        let actual = fnv1a64(bytes);
        if actual != expected {
            return Err(DealError::Checksum {
                file: file.to_string(),
                expected,
                actual,
            });
        }
    }
    if (manifest.channels, manifest.height, manifest.width) != (CHANNELS, IMAGE_SIZE, IMAGE_SIZE) {
        return Err(DealError::Dataset(format!(
            "unsupported image shape {}x{}x{}",
            manifest.channels, manifest.height, manifest.width
        )));
    }
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let image_len = CHANNELS * n;
    let mask_len = manifest.max_masks * n;
    if manifest.samples.len() != manifest.count
        || images.len() != manifest.count * image_len * 4
        || masks.len() != manifest.count * mask_len
    {
        return Err(DealError::Dataset("binary sizes disagree with the manifest".into()));
    }
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.category >= manifest.categories.len() || e.masks > manifest.max_masks {
                return Err(DealError::Dataset(format!("sample {i} has an invalid category or mask count")));
            }
            let image = images[i * image_len * 4..(i + 1) * image_len * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let block = &masks[i * mask_len..(i + 1) * mask_len];
            Ok(SyntheticSample {
                image,
                category_index: e.category,
                caption: e.caption.clone(),
                masks: block.chunks_exact(n).take(e.masks).map(<[u8]>::to_vec).collect(),
                watermark_present: e.watermark,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        categories: manifest.categories,
        samples,
    })
}
