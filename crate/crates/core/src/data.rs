//! Seeded synthetic scenes of circles, rectangles and triangles on noisy
//! backgrounds.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{BBox, BinaryMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;
/// Instances whose visible area falls below this are redrawn.
pub const MIN_VISIBLE: usize = 16;
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Rectangle, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Shape> {
        Shape::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub label: Shape,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// 3×H×W, standardized with [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub image: Tensor<f32>,
    /// H×W×3 interleaved 8-bit color.
    pub rgb: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

/// Geometry of one drawn shape, tested at pixel centers.
enum Figure {
    Circle { cx: f32, cy: f32, r: f32 },
    Rect { x1: f32, y1: f32, x2: f32, y2: f32 },
    Tri([(f32, f32); 3]),
}

impl Figure {
    fn random(shape: Shape, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Figure {
        let side = h.min(w) as f32;
        let (lo, hi) = (0.19 * side, 0.47 * side);
        let sw = rng.random_range(lo..hi);
        let sh = match shape {
            Shape::Circle => sw,
            _ => rng.random_range(lo..hi),
        };
        // Centers may sit near the border; clipped shapes stay valid instances.
        let x1 = rng.random_range(-0.2 * sw..w as f32 - 0.8 * sw);
        let y1 = rng.random_range(-0.2 * sh..h as f32 - 0.8 * sh);
        match shape {
            Shape::Circle => Figure::Circle {
                cx: x1 + sw / 2.0,
                cy: y1 + sw / 2.0,
                r: sw / 2.0,
            },
            Shape::Rectangle => Figure::Rect {
                x1,
                y1,
                x2: x1 + sw,
                y2: y1 + sh,
            },
            Shape::Triangle => {
                let apex = x1 + rng.random_range(0.2..0.8) * sw;
                Figure::Tri([(apex, y1), (x1, y1 + sh), (x1 + sw, y1 + sh)])
            }
        }
    }

    fn contains(&self, px: f32, py: f32) -> bool {
        match *self {
            Figure::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Figure::Rect { x1, y1, x2, y2 } => px >= x1 && px < x2 && py >= y1 && py < y2,
            Figure::Tri([a, b, c]) => {
                let cross = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, self.contains(x as f32 + 0.5, y as f32 + 0.5));
            }
        }
        m
    }
}

/// Pixels whose centers lie within `r` of `(cx, cy)`.
pub fn circle_mask(height: usize, width: usize, cx: f32, cy: f32, r: f32) -> BinaryMask {
    Figure::Circle { cx, cy, r }.rasterize(height, width)
}

/// Draws one scene. Later shapes occlude earlier ones; a shape that would
/// leave any instance with fewer than [`MIN_VISIBLE`] visible pixels is
/// redrawn, up to [`MAX_ATTEMPTS`] times per instance.
pub fn generate_sample(seed: u64, height: usize, width: usize, max_instances: usize) -> Result<SceneSample> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        return Err(Error::Invalid(format!(
            "image size {height}x{width} must be a positive multiple of 32"
        )));
    }
    if max_instances == 0 {
        return Err(Error::Invalid("max_instances must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=max_instances);

    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let tilt: [f32; 2] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let mut pixels = vec![0f32; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let ramp = tilt[0] * x as f32 / width as f32 + tilt[1] * y as f32 / height as f32;
            for (c, &b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.08..0.08);
                pixels[(y * width + x) * 3 + c] = b + ramp + noise;
            }
        }
    }

    let mut instances: Vec<(Shape, BinaryMask)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let shape = Shape::ALL[rng.random_range(0..3)];
            let fig = Figure::random(shape, height, width, &mut rng);
            let full = fig.rasterize(height, width);
            if full.area() < MIN_VISIBLE {
                continue;
            }
            let survivors: Vec<usize> = instances
                .iter()
                .map(|(_, m)| {
                    m.data
                        .iter()
                        .zip(&full.data)
                        .filter(|(&a, &b)| a != 0 && b == 0)
                        .count()
                })
                .collect();
            if survivors.iter().any(|&n| n < MIN_VISIBLE) {
                continue;
            }
            for (_, m) in instances.iter_mut() {
                for (a, &b) in m.data.iter_mut().zip(&full.data) {
                    if b != 0 {
                        *a = 0;
                    }
                }
            }
            let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45..1.0));
            for (i, &on) in full.data.iter().enumerate() {
                if on != 0 {
                    for c in 0..3 {
                        pixels[i * 3 + c] = color[c] + rng.random_range(-0.05..0.05);
                    }
                }
            }
            instances.push((shape, full));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "seed {seed}: no valid placement after {MAX_ATTEMPTS} attempts"
            )));
        }
    }

    let rgb: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut image = Tensor::zeros(vec![3, height, width]);
    let plane = height * width;
    for (i, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            image.data_mut()[c * plane + i] = (px[c] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    let instances = instances
        .into_iter()
        .map(|(label, mask)| Instance {
            label,
            bbox: mask.tight_box().expect("visible area checked"),
            mask,
        })
        .collect();
    Ok(SceneSample {
        seed,
        image,
        rgb,
        height,
        width,
        instances,
    })
}

/// Converts interleaved 8-bit color into a standardized 3×H×W tensor.
pub fn standardize(rgb: &[u8], height: usize, width: usize) -> Result<Tensor<f32>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Invalid(format!(
            "{} bytes for a {height}x{width} RGB image",
            rgb.len()
        )));
    }
    let plane = height * width;
    Ok(Tensor::from_fn(vec![3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        (rgb[p * 3 + c] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD
    }))
}
