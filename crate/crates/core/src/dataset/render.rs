use rand::Rng;

use super::{sample_rng, DatasetSpec, Domain, Image, Instance};
use crate::boxes::{iou, BoundingBox};

pub const FOG_COLOR: [f64; 3] = [0.8, 0.8, 0.8];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Diamond,
    Shape::Ring,
];

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.80, 0.85],
];

pub const MAX_CLASSES: usize = SHAPES.len();

const MAX_OVERLAP: f64 = 0.3;
const MAX_INSTANCES: usize = 5;

pub fn shape_name(class_id: usize) -> &'static str {
    match SHAPES[class_id % SHAPES.len()] {
        Shape::Circle => "circle",
        Shape::Square => "square",
        Shape::Triangle => "triangle",
        Shape::Cross => "cross",
        Shape::Diamond => "diamond",
        Shape::Ring => "ring",
    }
}

/// Renders scene `index` of `domain` without any domain shift.
///
/// The first instance of scene `i` has class `i mod C`, so every class is
/// represented in at least `floor(n / C)` scenes of any split.
pub fn render_scene(spec: &DatasetSpec, domain: Domain, index: u64) -> (Image, Vec<Instance>) {
    let mut rng = sample_rng(spec.rng_seed, domain, index);
    let size = spec.image_size;
    let sz = size as f64;
    let mut image = background(&mut rng, size);

    let wanted = rng.random_range(1..=MAX_INSTANCES);
    let mut instances: Vec<Instance> = Vec::with_capacity(wanted);
    for k in 0..wanted {
        let class_id = if k == 0 {
            (index % spec.num_classes as u64) as usize
        } else {
            rng.random_range(0..spec.num_classes)
        };
        let mut placed = None;
        for _ in 0..50 {
            let extent = rng.random_range(0.19 * sz..=0.41 * sz).round();
            let x0 = rng.random_range(0.0..=(sz - extent)).round();
            let y0 = rng.random_range(0.0..=(sz - extent)).round();
            let bbox = BoundingBox::from_corners_unchecked(x0, y0, x0 + extent, y0 + extent);
            if instances.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_OVERLAP) {
                placed = Some(bbox);
                break;
            }
        }
        let Some(bbox) = placed else { break };
        let mut color = PALETTE[class_id % PALETTE.len()];
        for ch in &mut color {
            *ch = (*ch + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0);
        }
        draw(&mut image, SHAPES[class_id % SHAPES.len()], &bbox, color);
        instances.push(Instance { bbox, class_id });
    }
    quantize(&mut image);
    (image, instances)
}

fn background<R: Rng>(rng: &mut R, size: usize) -> Image {
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for c in 0..3 {
        a[c] = rng.random_range(0.05..0.6);
        b[c] = rng.random_range(0.05..0.6);
    }
    let gradient = rng.random_bool(0.5);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let grain = rng.random_range(0.0..0.05);
    let phase: u64 = rng.random();
    let mut img = Image::zeros((size, size, 3));
    let sz = size as f64;
    for y in 0..size {
        for x in 0..size {
            let t = if gradient {
                let u = ((x as f64 + 0.5) / sz - 0.5) * dx + ((y as f64 + 0.5) / sz - 0.5) * dy;
                (u + 0.5).clamp(0.0, 1.0)
            } else {
                0.0
            };
            for c in 0..3 {
                let n = grain * hash_noise(x as u64, y as u64, phase.wrapping_add(c as u64));
                img[[y, x, c]] = ((1.0 - t) * a[c] + t * b[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn draw(img: &mut Image, shape: Shape, b: &BoundingBox, color: [f64; 3]) {
    let (cx, cy) = b.center();
    let half = 0.5 * b.width();
    let y0 = b.y_min.floor().max(0.0) as usize;
    let y1 = (b.y_max.ceil() as usize).min(img.shape()[0]);
    let x0 = b.x_min.floor().max(0.0) as usize;
    let x1 = (b.x_max.ceil() as usize).min(img.shape()[1]);
    for y in y0..y1 {
        for x in x0..x1 {
            // normalized offsets in [-1, 1]
            let u = (x as f64 + 0.5 - cx) / half;
            let v = (y as f64 + 0.5 - cy) / half;
            let inside = match shape {
                Shape::Circle => u * u + v * v <= 1.0,
                Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
                Shape::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
                Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
                Shape::Diamond => u.abs() + v.abs() <= 1.0,
                Shape::Ring => {
                    let r = u * u + v * v;
                    (0.36..=1.0).contains(&r)
                }
            };
            if inside {
                for c in 0..3 {
                    img[[y, x, c]] = color[c];
                }
            }
        }
    }
}

/// Rounds every channel to 8-bit levels so images survive a PNG round trip
/// unchanged.
pub fn quantize(img: &mut Image) {
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Deterministic per-pixel noise in `[-1, 1]`.
pub fn hash_noise(x: u64, y: u64, c: u64) -> f64 {
    let mut h = x
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(y.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(c.wrapping_mul(0x1656_67B1_9E37_79F9));
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}
