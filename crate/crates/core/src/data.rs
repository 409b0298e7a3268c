//! Procedural "colored shapes" images used as the real training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor3;

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

const PALETTE: [[f32; 3]; 5] = [
    [0.90, 0.25, 0.20],
    [0.25, 0.80, 0.30],
    [0.25, 0.40, 0.90],
    [0.95, 0.85, 0.25],
    [0.20, 0.80, 0.85],
];

fn inside(kind: ShapeKind, cx: f32, cy: f32, r: f32, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        ShapeKind::Triangle => {
            // apex up, base at cy + r/2
            let t = (dy + r) / (1.5 * r);
            dy >= -r && dy <= 0.5 * r && dx.abs() <= t * r * 0.95
        }
    }
}

/// Draws one image: a dark vertical-gradient background with one filled
/// shape, 2×2 supersampled.
pub fn draw_shape(rng: &mut ChaCha8Rng) -> Tensor3 {
    let n = IMAGE_SIZE;
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Disk,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    };
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let color: Vec<f32> = base
        .iter()
        .map(|c| (c + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0))
        .collect();
    let bg_top = rng.random_range(0.05f32..0.25);
    let bg_bottom = rng.random_range(0.05f32..0.25);
    let r = rng.random_range(5.0f32..11.0);
    let cx = rng.random_range(r..n as f32 - r);
    let cy = rng.random_range(r..n as f32 - r);

    let mut img = Tensor3::zeros(3, n, n);
    for y in 0..n {
        let bg = bg_top + (bg_bottom - bg_top) * y as f32 / (n - 1) as f32;
        for x in 0..n {
            let mut cover = 0.0f32;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(kind, cx, cy, r, x as f32 + sx, y as f32 + sy) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                img.channel_mut(c)[y * n + x] = bg * (1.0 - cover) + color[c] * cover;
            }
        }
    }
    img
}

/// `count` seeded shape images.
pub fn shapes_dataset(count: usize, seed: u64) -> Vec<Tensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_shape(&mut rng)).collect()
}

/// Uniform-noise images of the dataset resolution, useful as a worst-case
/// FID reference.
pub fn noise_images(count: usize, seed: u64) -> Vec<Tensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = (0..3 * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random::<f32>()).collect();
            Tensor3::from_vec(3, IMAGE_SIZE, IMAGE_SIZE, data).expect("sized buffer")
        })
        .collect()
}
