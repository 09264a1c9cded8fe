//! Procedural CIFAR-shaped dataset: one bright class-specific shape placed at
//! a random position over a dim noisy background.
//!
//! Class evidence lives only inside the shape, so a good explanation should
//! concentrate on it. Used for smoke runs and tests when the real datasets are
//! not on disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, LabeledImage, Split};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 10;

fn inside(class: usize, u: f32, v: f32) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    match class {
        0 => true,
        1 => r2 < 0.25,
        2 => (0.1..0.25).contains(&r2),
        3 => du.abs() < 0.17 || dv.abs() < 0.17,
        4 => (u - v).abs() < 0.15 || (u + v - 1.0).abs() < 0.15,
        5 => ((u * 4.0) as usize) % 2 == 0,
        6 => ((v * 4.0) as usize) % 2 == 0,
        7 => dv.abs() < u / 2.0,
        8 => (((u * 2.0) as usize) + ((v * 2.0) as usize)) % 2 == 0,
        _ => !(0.2..0.8).contains(&u) || !(0.2..0.8).contains(&v),
    }
}

/// One `(3, size, size)` image of `class`, fully determined by `seed`.
pub fn render(class: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for ch in 0..3 {
        let base: f32 = rng.random_range(0.05..0.35);
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = (base + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
        }
    }
    let min_side = (size * 31 / 100).max(3).min(size);
    let side = rng.random_range(min_side..=(size * 44 / 100).clamp(min_side, size));
    let top = rng.random_range(0..=size - side);
    let left = rng.random_range(0..=size - side);
    let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    for y in top..top + side {
        for x in left..left + side {
            let u = (y - top) as f32 / side as f32 + 0.5 / side as f32;
            let v = (x - left) as f32 / side as f32 + 0.5 / side as f32;
            if inside(class, u, v) {
                for (ch, &c) in color.iter().enumerate() {
                    data[ch * plane + y * size + x] = c;
                }
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("synthetic image shape")
}

/// `n` images with balanced labels `i % num_classes`.
pub fn generate(n: usize, num_classes: usize, size: usize, seed: u64, split: Split) -> DatasetSplit {
    assert!((1..=MAX_CLASSES).contains(&num_classes), "1..=10 synthetic classes");
    let images = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let image_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64)
                .rotate_left(17);
            LabeledImage {
                label,
                pixels: render(label, size, image_seed),
            }
        })
        .collect();
    DatasetSplit {
        images,
        split,
        num_classes,
    }
}
