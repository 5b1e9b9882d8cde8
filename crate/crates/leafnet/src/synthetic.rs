//! Procedurally generated desk-scale datasets for tests and CI.
//!
//! Each class gets a distinct color and grating signature; individual
//! images vary by seeded phase jitter and noise, so the classes are
//! separable but not trivially constant.

use crate::error::{Error, Result};
use crate::image::{PixelImage, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::manifest::{DatasetManifest, Origin, Sample};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Minimum images per class: 5 support images plus at least one query.
pub const MIN_PER_CLASS: usize = 6;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_image(class: usize, sub_seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    // Golden-angle hues keep neighbouring class colors far apart.
    let base = hsv_to_rgb(class as f32 * 137.5, 0.65, 0.75);
    let angle = class as f32 * 0.7;
    let freq = 2.0 + 3.0 * class as f32;
    let (dx, dy) = (angle.cos(), angle.sin());
    let phase: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
    let mut data = Array3::<f32>::zeros((IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE));
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let u = (x as f32 * dx + y as f32 * dy) / IMAGE_SIZE as f32;
            let grating = 0.5 + 0.5 * (std::f32::consts::TAU * freq * u + phase).sin();
            let shade = 0.55 + 0.45 * grating;
            for c in 0..IMAGE_CHANNELS {
                let noise: f32 = rng.gen::<f32>() * 0.10 - 0.05;
                data[[c, y, x]] = (base[c] * shade + noise).clamp(0.0, 1.0);
            }
        }
    }
    PixelImage::new(data).expect("synthetic image satisfies invariants")
}

/// Generates a synthetic dataset with the given per-class counts, writing
/// PNG files under `out_dir/class_<k>/`. Byte-identical for a fixed seed.
pub fn generate_with_counts(
    counts: &[usize],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if counts.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            counts.len()
        )));
    }
    if let Some(&n) = counts.iter().find(|&&n| n < MIN_PER_CLASS) {
        return Err(Error::Config(format!(
            "each class needs at least {MIN_PER_CLASS} samples (5 support + 1 query), got {n}"
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        let name = format!("class_{class:02}");
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir)?;
        for idx in 0..n {
            let sub_seed: u64 = master.gen();
            let img = render_image(class, sub_seed);
            let path = dir.join(format!("img_{idx:04}.png"));
            img.save_png(&path)?;
            samples.push(Sample {
                path,
                class,
                origin: Origin::Original,
            });
        }
        classes.push(name);
    }
    DatasetManifest::new(classes, samples, seed)
}

/// Uniform synthetic dataset: `classes` classes with `per_class` images each.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_with_counts(&vec![per_class; classes], seed, out_dir)
}
