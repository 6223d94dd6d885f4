//! Synthetic multi-object scenes with ground-truth masks and attributes,
//! an on-disk dataset format, and the augmentation pipeline.
//!
//! Scenes are flat 2-d colored shapes on a gray background: 2 sizes x
//! 8 colors x 2 textures x 3 shapes = 96 attribute combinations.

mod augment;
mod dataset;

pub use augment::{augment, eval_view, normalize_inplace, replay_label_map, resize_bilinear, AugmentConfig, AugmentedPair, CropBox, JitterConfig};
pub use dataset::{generate_split_dataset, load_dataset, save_dataset, Dataset, Split, StoredSample};

use crate::error::{Result, SlotError};
use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Solid,
    Striped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SIZES: [Size; 2] = [Size::Small, Size::Large];
pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Magenta,
    Color::Cyan,
    Color::Orange,
    Color::Purple,
];
pub const TEXTURES: [Texture; 2] = [Texture::Solid, Texture::Striped];
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

/// Number of (size, color, texture, shape) combinations, and therefore of
/// binary VQA questions.
pub const NUM_QUESTIONS: usize = SIZES.len() * COLORS.len() * TEXTURES.len() * SHAPES.len();

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.1],
            Color::Blue => [0.15, 0.25, 1.0],
            Color::Yellow => [1.0, 0.95, 0.1],
            Color::Magenta => [1.0, 0.1, 0.9],
            Color::Cyan => [0.1, 0.9, 0.95],
            Color::Orange => [1.0, 0.55, 0.05],
            Color::Purple => [0.55, 0.1, 0.95],
        }
    }
}

macro_rules! enum_strings {
    ($ty:ty, $( $variant:path => $name:literal ),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $( $variant => $name, )+ }
            }
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $( $name => Ok($variant), )+
                    other => Err(SlotError::Validation(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

enum_strings!(Size, Size::Small => "small", Size::Large => "large");
enum_strings!(
    Color,
    Color::Red => "red",
    Color::Green => "green",
    Color::Blue => "blue",
    Color::Yellow => "yellow",
    Color::Magenta => "magenta",
    Color::Cyan => "cyan",
    Color::Orange => "orange",
    Color::Purple => "purple",
);
enum_strings!(Texture, Texture::Solid => "solid", Texture::Striped => "striped");
enum_strings!(
    Shape,
    Shape::Circle => "circle",
    Shape::Square => "square",
    Shape::Triangle => "triangle",
);

/// One object's ground-truth attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectAttributes {
    pub size: Size,
    pub color: Color,
    pub texture: Texture,
    pub shape: Shape,
}

impl ObjectAttributes {
    /// Index of the VQA question asking about exactly this combination,
    /// lexicographic over (size, color, texture, shape).
    pub fn question_index(&self) -> usize {
        let si = SIZES.iter().position(|&s| s == self.size).unwrap();
        let ci = COLORS.iter().position(|&c| c == self.color).unwrap();
        let ti = TEXTURES.iter().position(|&t| t == self.texture).unwrap();
        let hi = SHAPES.iter().position(|&h| h == self.shape).unwrap();
        ((si * COLORS.len() + ci) * TEXTURES.len() + ti) * SHAPES.len() + hi
    }
}

/// A scene: image, per-object masks encoded as a label map, and attributes.
///
/// `label_map` holds one integer per pixel: 0 for background, i for object
/// i-1 (occlusion already resolved, topmost object wins). Every pixel
/// therefore belongs to exactly one mask, background included.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    /// H x W x 3, values in [0, 1] quantized to the 8-bit grid.
    pub image: Array3<f64>,
    pub label_map: Array2<u16>,
    pub attributes: Vec<ObjectAttributes>,
}

impl SceneSample {
    pub fn num_objects(&self) -> usize {
        self.attributes.len()
    }

    /// Visible-pixel binary masks, one per object (background excluded).
    pub fn object_masks(&self) -> Vec<Array2<bool>> {
        (0..self.attributes.len())
            .map(|i| self.label_map.mapv(|l| l as usize == i + 1))
            .collect()
    }

    pub fn background_mask(&self) -> Array2<bool> {
        self.label_map.mapv(|l| l == 0)
    }

    pub fn validate(&self, num_queries: usize) -> Result<()> {
        let max_label = self.label_map.iter().copied().max().unwrap_or(0) as usize;
        if max_label != self.attributes.len() && !(max_label == 0 && self.attributes.is_empty()) {
            // an object fully occluded would lose its label; the generator
            // forbids that via the overlap bound
            if max_label > self.attributes.len() {
                return Err(SlotError::Validation(format!(
                    "sample {}: {} mask labels but {} attribute tuples",
                    self.id,
                    max_label,
                    self.attributes.len()
                )));
            }
        }
        if num_queries > 0 && self.attributes.len() > num_queries - 1 {
            return Err(SlotError::Validation(format!(
                "sample {}: {} objects exceeds num_queries - 1 = {}",
                self.id,
                self.attributes.len(),
                num_queries - 1
            )));
        }
        Ok(())
    }
}

/// Generator settings: canvas, object-count range, and placement bounds.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Maximum pairwise overlap as a fraction of either object's area.
    pub max_overlap: f64,
    pub max_retries: usize,
    pub background: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            canvas_size: 64,
            min_objects: 2,
            max_objects: 6,
            max_overlap: 0.25,
            max_retries: 200,
            background: 0.5,
        }
    }
}

impl GeneratorSpec {
    fn half_extent(&self, size: Size) -> f64 {
        let s = self.canvas_size as f64;
        match size {
            Size::Small => s * 0.09,
            Size::Large => s * 0.14,
        }
    }
}

fn shape_mask(shape: Shape, cx: f64, cy: f64, r: f64, side: usize) -> Array2<bool> {
    Array2::from_shape_fn((side, side), |(y, x)| {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match shape {
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            Shape::Triangle => {
                // upward triangle with vertices (cx, cy-r), (cx±r, cy+r)
                let u = (py - (cy - r)) / (2.0 * r);
                if !(0.0..=1.0).contains(&u) {
                    false
                } else {
                    (px - cx).abs() <= u * r
                }
            }
        }
    })
}

const STRIPE_WIDTH: usize = 2;
const STRIPE_DIM: f64 = 0.65;

/// Deterministically generate one scene. Objects are placed with bounded
/// pairwise overlap; placement failure after the retry budget is an error
/// naming the seed.
pub fn generate_scene(rng_seed: u64, spec: &GeneratorSpec) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let side = spec.canvas_size;
    let n_objects = if spec.max_objects == spec.min_objects {
        spec.min_objects
    } else {
        rng.gen_range(spec.min_objects..=spec.max_objects)
    };

    let mut placed: Vec<(ObjectAttributes, Array2<bool>)> = Vec::new();
    for _ in 0..n_objects {
        let mut ok = false;
        for _retry in 0..spec.max_retries {
            let attrs = ObjectAttributes {
                size: SIZES[rng.gen_range(0..SIZES.len())],
                color: COLORS[rng.gen_range(0..COLORS.len())],
                texture: TEXTURES[rng.gen_range(0..TEXTURES.len())],
                shape: SHAPES[rng.gen_range(0..SHAPES.len())],
            };
            let r = spec.half_extent(attrs.size);
            let cx = rng.gen_range(r..side as f64 - r);
            let cy = rng.gen_range(r..side as f64 - r);
            let mask = shape_mask(attrs.shape, cx, cy, r, side);
            let area = mask.iter().filter(|&&m| m).count();
            if area == 0 {
                continue;
            }
            let acceptable = placed.iter().all(|(_, other)| {
                let other_area = other.iter().filter(|&&m| m).count();
                let inter = mask
                    .iter()
                    .zip(other.iter())
                    .filter(|(&a, &b)| a && b)
                    .count();
                (inter as f64) < spec.max_overlap * (area.min(other_area) as f64)
            });
            if acceptable {
                placed.push((attrs, mask));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SlotError::Placement {
                seed: rng_seed,
                retries: spec.max_retries,
            });
        }
    }

    let mut image = Array3::from_elem((side, side, 3), spec.background);
    let mut label_map = Array2::<u16>::zeros((side, side));
    for (idx, (attrs, mask)) in placed.iter().enumerate() {
        let base = attrs.color.rgb();
        for ((y, x), &inside) in mask.indexed_iter() {
            if !inside {
                continue;
            }
            let dim = attrs.texture == Texture::Striped && (y / STRIPE_WIDTH) % 2 == 1;
            for c in 0..3 {
                image[[y, x, c]] = if dim { base[c] * STRIPE_DIM } else { base[c] };
            }
            label_map[[y, x]] = (idx + 1) as u16;
        }
    }
    // quantize to the 8-bit grid so disk round-trips are exact
    image.mapv_inplace(|v| (v * 255.0).round() / 255.0);

    Ok(SceneSample {
        id: rng_seed,
        image,
        label_map,
        attributes: placed.into_iter().map(|(a, _)| a).collect(),
    })
}

/// 96-bit VQA label vector: bit q is set iff some object matches all four
/// attributes of question q.
pub fn vqa_labels(attributes: &[ObjectAttributes]) -> Vec<bool> {
    let mut bits = vec![false; NUM_QUESTIONS];
    for a in attributes {
        bits[a.question_index()] = true;
    }
    bits
}
