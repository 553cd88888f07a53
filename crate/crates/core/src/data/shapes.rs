//! Procedural shapes: one grayscale image per item, class = shape kind.

use std::f64::consts::TAU;

use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Bar,
];

pub const MIN_IMAGE_SIZE: usize = 8;

const NOISE: f64 = 0.08;

impl ShapeKind {
    /// Membership test in the shape's unit frame.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.75,
            ShapeKind::Triangle => {
                let s = 3f64.sqrt();
                v >= -0.5 && s * u + v <= 1.0 && -s * u + v <= 1.0
            }
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.25,
        }
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    background: f64,
    foreground: f64,
}

fn render(kind: ShapeKind, p: &Placement, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let (sin, cos) = (-p.angle).sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut covered = 0u32;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = (x as f64 + ox - p.cx) / p.radius;
                let dy = (y as f64 + oy - p.cy) / p.radius;
                let u = cos * dx - sin * dy;
                let v = sin * dx + cos * dy;
                covered += kind.contains(u, v) as u32;
            }
            let cover = covered as f64 / 4.0;
            let noise = rng.gen_range(-NOISE..=NOISE);
            let v = p.background + (p.foreground - p.background) * cover + noise;
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Generates `count` images of `image_size`², labels drawn uniformly from
/// the first `num_classes` shape kinds. Fully determined by `seed`.
pub fn gen_shapes_dataset(
    seed: u64,
    count: usize,
    num_classes: usize,
    image_size: usize,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > SHAPE_KINDS.len() {
        return Err(Error::InvalidClasses(num_classes));
    }
    if count < num_classes {
        return Err(Error::InvalidConfig(format!(
            "count {count} smaller than number of classes {num_classes}"
        )));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidConfig(format!(
            "image size {image_size} below minimum {MIN_IMAGE_SIZE}"
        )));
    }
    let size = image_size as f64;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, &[i as u64]);
        let label = r.gen_range(0..num_classes);
        let radius = r.gen_range(0.22..0.38) * size;
        let placement = Placement {
            cx: r.gen_range(radius..=size - radius),
            cy: r.gen_range(radius..=size - radius),
            radius,
            angle: r.gen_range(0.0..TAU),
            background: r.gen_range(0.0..0.35),
            foreground: r.gen_range(0.6..1.0),
        };
        let data = render(SHAPE_KINDS[label], &placement, image_size, &mut r);
        images.push(Tensor::new(vec![1, image_size, image_size], data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, num_classes, [1, image_size, image_size])
}
