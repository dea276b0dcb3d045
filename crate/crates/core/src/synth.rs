//! Synthetic detection world: shape x fill-pattern classes rendered on a
//! grayscale canvas with exact box annotations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxcywh;
use crate::model::ConfigError;
use crate::rng::{rng_for, stream, DetRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
}

pub const SHAPES: [ShapeKind; 5] =
    [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Diamond, ShapeKind::Cross];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Striped,
}

const SOLID_LEVEL: u8 = 180;
const STRIPE_HIGH: u8 = 255;
const STRIPE_LOW: u8 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub shape: ShapeKind,
    pub pattern: Pattern,
}

impl ClassSpec {
    pub fn name(&self) -> String {
        let shape = match self.shape {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
        };
        let pattern = match self.pattern {
            Pattern::Solid => "solid",
            Pattern::Striped => "striped",
        };
        format!("{shape}-{pattern}")
    }
}

/// Class `i < 5` is the solid shape `i`; class `5 + i` is its striped twin.
pub fn catalog() -> Vec<ClassSpec> {
    let mut out = Vec::with_capacity(10);
    for pattern in [Pattern::Solid, Pattern::Striped] {
        for shape in SHAPES {
            out.push(ClassSpec { id: out.len(), shape, pattern });
        }
    }
    out
}

/// Striped square, circle and triangle: each has a solid base twin.
pub const DEFAULT_NOVEL: [usize; 3] = [5, 6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub canvas: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_classes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { canvas: 64, min_size: 10, max_size: 20, min_objects: 1, max_objects: 5, n_classes: 10 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_classes == 0 || self.n_classes > 10 {
            return Err(ConfigError::new("world.n_classes", "must be between 1 and 10"));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(ConfigError::new("world.min_size", "need 3 <= min_size <= max_size"));
        }
        if self.max_size + 2 > self.canvas {
            return Err(ConfigError::new("world.max_size", "objects must fit inside the canvas with a margin"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(ConfigError::new("world.min_objects", "need 1 <= min_objects <= max_objects"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn blank(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `[H, W, 1]` with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, 1], data)
    }
}

/// Pixel extent `[x0, y0, x1, y1)` plus the same box normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub pixel_box: [usize; 4],
    pub bbox: BoxCxcywh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub world: WorldConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn inside(shape: ShapeKind, dx: usize, dy: usize, w: usize, h: usize) -> bool {
    let u = (dx as f64 + 0.5) / w as f64 - 0.5;
    let v = (dy as f64 + 0.5) / h as f64 - 0.5;
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => u * u + v * v <= 0.25,
        // Apex at the top, base on the bottom row.
        ShapeKind::Triangle => u.abs() <= ((dy + 1) as f64 / h as f64) * 0.5,
        ShapeKind::Diamond => u.abs() + v.abs() <= 0.5 + 0.5 / w.min(h) as f64,
        ShapeKind::Cross => u.abs() <= 1.0 / 6.0 || v.abs() <= 1.0 / 6.0,
    }
}

fn level(pattern: Pattern, dy: usize) -> u8 {
    match pattern {
        Pattern::Solid => SOLID_LEVEL,
        Pattern::Striped => {
            if (dy / 2).is_multiple_of(2) {
                STRIPE_HIGH
            } else {
                STRIPE_LOW
            }
        }
    }
}

/// Draws one object into `image` at `(x0, y0)` and returns its painted
/// pixel extent.
fn draw(image: &mut Image, class: &ClassSpec, x0: usize, y0: usize, w: usize, h: usize) -> [usize; 4] {
    let mut ext = [usize::MAX, usize::MAX, 0, 0];
    for dy in 0..h {
        for dx in 0..w {
            if inside(class.shape, dx, dy, w, h) {
                let (x, y) = (x0 + dx, y0 + dy);
                image.pixels[y * image.width + x] = level(class.pattern, dy);
                ext[0] = ext[0].min(x);
                ext[1] = ext[1].min(y);
                ext[2] = ext[2].max(x + 1);
                ext[3] = ext[3].max(y + 1);
            }
        }
    }
    ext
}

fn overlaps(a: &[usize; 4], b: &[usize; 4], margin: usize) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

const PLACEMENT_ATTEMPTS: usize = 50;

/// Renders one image. Objects never touch; an object that cannot be placed
/// after repeated attempts is dropped, but the first always fits.
pub fn render_sample(world: &WorldConfig, rng: &mut DetRng) -> Sample {
    let classes = catalog();
    let mut image = Image::blank(world.canvas, world.canvas);
    let n = rng.gen_range(world.min_objects..=world.max_objects);
    let mut placed: Vec<[usize; 4]> = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for _ in 0..n {
        let class = classes[rng.gen_range(0..world.n_classes)];
        let w = rng.gen_range(world.min_size..=world.max_size);
        let h = rng.gen_range(world.min_size..=world.max_size);
        let mut spot = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x0 = rng.gen_range(1..=world.canvas - w - 1);
            let y0 = rng.gen_range(1..=world.canvas - h - 1);
            let cand = [x0, y0, x0 + w, y0 + h];
            if placed.iter().all(|p| !overlaps(p, &cand, 1)) {
                spot = Some(cand);
                break;
            }
        }
        let Some(cand) = spot else { continue };
        placed.push(cand);
        let ext = draw(&mut image, &class, cand[0], cand[1], w, h);
        let c = world.canvas as f64;
        let bbox = BoxCxcywh::from_xyxy(ext[0] as f64 / c, ext[1] as f64 / c, ext[2] as f64 / c, ext[3] as f64 / c);
        annotations.push(Annotation { class_id: class.id, pixel_box: ext, bbox });
    }
    Sample { image, annotations }
}

pub fn generate_dataset(world: &WorldConfig, n_train: usize, n_test: usize, seed: u64) -> Dataset {
    let split = |stream_id: u64, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(seed, stream_id, i as u64);
                render_sample(world, &mut rng)
            })
            .collect()
    };
    Dataset {
        world: *world,
        seed,
        train: split(stream::TRAIN_IMAGES, n_train),
        test: split(stream::TEST_IMAGES, n_test),
    }
}
