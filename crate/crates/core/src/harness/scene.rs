//! Seeded desk scenes: a coloured target disk inside the arm's workspace,
//! a tinted background and a few rectangular distractors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kinematics::{self, L1, L2};
use super::ppm::RgbImage;
use crate::error::Result;

pub const IMAGE_SIZE: usize = 64;
/// Workspace units to pixels. The arm base sits at the bottom-centre of
/// the image.
pub const PIXELS_PER_UNIT: f64 = 44.0;
/// Targets are drawn from this sub-annulus, `φ` measured from straight up.
pub const TARGET_RADIUS: (f64, f64) = (0.85, 1.30);
pub const TARGET_HALF_ANGLE: f64 = 0.45;
/// Disk radii in pixels.
pub const DISK_RADII: [f64; 3] = [3.0, 4.5, 6.0];
pub const ACTION_DIM: usize = 6;
/// Entries of the action holding the grasp-closure profile.
pub const GRASP_DIMS: [usize; 4] = [2, 3, 4, 5];
/// Largest fraction of the disk a distractor may cover.
pub const MAX_OCCLUSION: f64 = 0.25;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub seed: u64,
    /// Target position in workspace units.
    pub target: [f64; 2],
    /// Disk radius in pixels.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub image: RgbImage,
    pub action: Vec<f64>,
    pub meta: DemoMeta,
}

/// `q3..q6` as fixed functions of the disk radius.
pub fn grasp_profile(radius: f64) -> [f64; 4] {
    [0.25 * radius - 0.5, 1.2 - 0.15 * radius, 0.1 * radius, 0.3 + 0.05 * radius]
}

pub fn workspace_to_pixel(x: f64, y: f64) -> (f64, f64) {
    (
        IMAGE_SIZE as f64 / 2.0 + PIXELS_PER_UNIT * x,
        IMAGE_SIZE as f64 - PIXELS_PER_UNIT * y,
    )
}

pub fn action_for(x: f64, y: f64, radius: f64) -> Result<Vec<f64>> {
    let (q1, q2) = kinematics::inverse(x, y)?;
    let mut a = vec![q1, q2];
    a.extend_from_slice(&grasp_profile(radius));
    Ok(a)
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    color: [f64; 3],
}

fn color_gap(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Fraction of the 4x4 sub-samples of pixel `(px, py)` inside the disk.
fn coverage(px: usize, py: usize, cx: f64, cy: f64, r: f64) -> f64 {
    let mut inside = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                inside += 1;
            }
        }
    }
    inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn disk_bounds(c: f64, r: f64) -> std::ops::Range<usize> {
    let lo = (c - r - 1.0).floor().max(0.0) as usize;
    let hi = ((c + r + 1.0).ceil() as usize).min(IMAGE_SIZE);
    lo..hi
}

fn occlusion(rect: &Rect, cx: f64, cy: f64, r: f64) -> f64 {
    let mut covered = 0.0;
    for py in rect.y0..rect.y1 {
        for px in rect.x0..rect.x1 {
            covered += coverage(px, py, cx, cy, r);
        }
    }
    covered / (std::f64::consts::PI * r * r)
}

/// Samples a target uniformly by area from the sub-annulus; anything
/// outside the arm's reach is redrawn.
fn sample_target(rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let (r0, r1) = TARGET_RADIUS;
        let r = rng.gen_range(r0 * r0..r1 * r1).sqrt();
        let phi = std::f64::consts::FRAC_PI_2 + rng.gen_range(-TARGET_HALF_ANGLE..TARGET_HALF_ANGLE);
        let (x, y) = (r * phi.cos(), r * phi.sin());
        let d = (x * x + y * y).sqrt();
        if d > (L1 - L2).abs() && d < L1 + L2 {
            return (x, y);
        }
    }
}

pub fn generate_demo(seed: u64) -> Result<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grey: f64 = rng.gen_range(0.25..0.75);
    let background: [f64; 3] = std::array::from_fn(|_| (grey + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
    let (x, y) = sample_target(&mut rng);
    let radius = DISK_RADII[rng.gen_range(0..DISK_RADII.len())];
    let target_color = loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen::<f64>());
        if color_gap(&c, &background) >= 0.6 {
            break c;
        }
    };
    let (cx, cy) = workspace_to_pixel(x, y);

    let mut rects = Vec::new();
    let count = rng.gen_range(0..=3);
    for _ in 0..count {
        for _attempt in 0..20 {
            let w = rng.gen_range(3..=10);
            let h = rng.gen_range(3..=10);
            let x0 = rng.gen_range(0..=IMAGE_SIZE - w);
            let y0 = rng.gen_range(0..=IMAGE_SIZE - h);
            let color: [f64; 3] = std::array::from_fn(|_| rng.gen::<f64>());
            let rect = Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
                color,
            };
            if occlusion(&rect, cx, cy, radius) <= MAX_OCCLUSION && color_gap(&color, &background) >= 0.3 {
                rects.push(rect);
                break;
            }
        }
    }

    let mut canvas = vec![background; IMAGE_SIZE * IMAGE_SIZE];
    for rect in &rects {
        for py in rect.y0..rect.y1 {
            for px in rect.x0..rect.x1 {
                canvas[py * IMAGE_SIZE + px] = rect.color;
            }
        }
    }
    for py in disk_bounds(cy, radius) {
        for px in disk_bounds(cx, radius) {
            let a = coverage(px, py, cx, cy, radius);
            if a > 0.0 {
                let under = canvas[py * IMAGE_SIZE + px];
                canvas[py * IMAGE_SIZE + px] = std::array::from_fn(|c| a * target_color[c] + (1.0 - a) * under[c]);
            }
        }
    }
    let mut image = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    for (dst, rgb) in image.pixels.chunks_exact_mut(3).zip(&canvas) {
        for c in 0..3 {
            dst[c] = (rgb[c] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Demonstration {
        image,
        action: action_for(x, y, radius)?,
        meta: DemoMeta {
            seed,
            target: [x, y],
            radius,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fk_of_every_action_hits_the_target() {
        for seed in 0..10_000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = sample_target(&mut rng);
            let a = action_for(x, y, 3.0).unwrap();
            let (fx, fy) = kinematics::forward(a[0], a[1]);
            assert!((fx - x).abs() <= 1e-9 && (fy - y).abs() <= 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn demos_are_deterministic_and_in_frame() {
        let a = generate_demo(42).unwrap();
        let b = generate_demo(42).unwrap();
        assert_eq!(a, b);
        assert_ne!(generate_demo(43).unwrap().image, a.image);
        for seed in 0..200 {
            let d = generate_demo(seed).unwrap();
            let (cx, cy) = workspace_to_pixel(d.meta.target[0], d.meta.target[1]);
            let r = d.meta.radius;
            assert!(cx - r >= 0.0 && cx + r <= IMAGE_SIZE as f64 && cy - r >= 0.0 && cy + r <= IMAGE_SIZE as f64);
            assert_eq!(d.action.len(), ACTION_DIM);
        }
    }
}
