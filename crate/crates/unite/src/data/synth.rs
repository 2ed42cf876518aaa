//! Synthetic class-conditional shape dataset.
//!
//! Ten geometric families rendered at 32×32 grayscale with per-sample
//! position/scale/intensity jitter, values in [−1, 1]. Generation is a pure
//! function of (class, rng stream), so the whole dataset is reproducible
//! from a seed.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UniteError};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "disk", "ring", "cross", "bar-h", "bar-v", "triangle", "checker", "dot-grid", "l-corner",
    "frame",
];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    /// Max absolute center offset in pixels.
    pub jitter_pos: f32,
    /// Scale drawn from [1−jitter_scale, 1+jitter_scale].
    pub jitter_scale: f32,
    /// Foreground intensity range.
    pub intensity_lo: f32,
    pub intensity_hi: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 32,
            channels: 1,
            jitter_pos: 2.5,
            jitter_scale: 0.15,
            intensity_lo: 0.55,
            intensity_hi: 1.0,
        }
    }
}

/// Membership test for each shape family in centered, scale-normalized
/// pixel coordinates (the nominal canvas is 32×32).
fn inside(class: usize, u: f32, v: f32) -> bool {
    match class {
        // disk
        0 => u * u + v * v <= 49.0,
        // ring
        1 => {
            let r2 = u * u + v * v;
            (20.25..=64.0).contains(&r2)
        }
        // cross
        2 => (u.abs() <= 2.0 && v.abs() <= 10.0) || (v.abs() <= 2.0 && u.abs() <= 10.0),
        // bar-h
        3 => v.abs() <= 2.5 && u.abs() <= 11.0,
        // bar-v
        4 => u.abs() <= 2.5 && v.abs() <= 11.0,
        // triangle (apex up)
        5 => (-7.0..=7.0).contains(&v) && u.abs() <= (v + 7.0) * 0.6,
        // checker
        6 => {
            u.abs() <= 12.0
                && v.abs() <= 12.0
                && ((((u + 16.0) / 4.0).floor() + ((v + 16.0) / 4.0).floor()) as i64) % 2 == 0
        }
        // dot-grid
        7 => {
            let centers = [-12.0f32, -4.0, 4.0, 12.0];
            centers.iter().any(|&cu| {
                centers
                    .iter()
                    .any(|&cv| (u - cu).powi(2) + (v - cv).powi(2) <= 3.24)
            })
        }
        // l-corner
        8 => {
            ((-9.0..=-4.0).contains(&u) && (-9.0..=9.0).contains(&v))
                || ((4.0..=9.0).contains(&v) && (-9.0..=9.0).contains(&u))
        }
        // frame
        9 => {
            let m = u.abs().max(v.abs());
            (7.0..=10.0).contains(&m)
        }
        _ => unreachable!(),
    }
}

/// Render one sample. Deterministic given (class, stream state).
pub fn generate_sample(spec: &SyntheticSpec, class: usize, rng: &mut RngStream) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(UniteError::Index(format!(
            "class {class} out of range ({NUM_CLASSES} classes)"
        )));
    }
    let n = spec.image_size;
    let dx = rng.uniform_in(-spec.jitter_pos, spec.jitter_pos);
    let dy = rng.uniform_in(-spec.jitter_pos, spec.jitter_pos);
    let scale = rng.uniform_in(1.0 - spec.jitter_scale, 1.0 + spec.jitter_scale)
        * (n as f32 / 32.0);
    let fg = rng.uniform_in(spec.intensity_lo, spec.intensity_hi);
    let bg = -1.0f32;

    let c = (n as f32 - 1.0) / 2.0;
    let mut data = vec![bg; spec.channels * n * n];
    for r in 0..n {
        for col in 0..n {
            let u = (col as f32 - c - dx) / scale;
            let v = (r as f32 - c - dy) / scale;
            if inside(class, u, v) {
                for ch in 0..spec.channels {
                    data[ch * n * n + r * n + col] = fg;
                }
            }
        }
    }
    Ok(Tensor::new(vec![spec.channels, n, n], data))
}

/// Materialized image set with labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

fn mix_seed(seed: u64, salt: u64, i: u64) -> u64 {
    // splitmix64 over (seed, salt, index)
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15) ^ i.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Dataset {
    /// Classes cycle 0..10 so every prefix is near-balanced.
    pub fn build(spec: &SyntheticSpec, seed: u64, salt: u64, n: usize) -> Result<Dataset> {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % NUM_CLASSES;
            let mut rng = RngStream::from_seed(mix_seed(seed, salt, i as u64));
            images.push(generate_sample(spec, class, &mut rng)?);
            labels.push(class);
        }
        Ok(Dataset { spec: *spec, images, labels })
    }

    pub fn train(spec: &SyntheticSpec, seed: u64, n: usize) -> Result<Dataset> {
        Dataset::build(spec, seed, 0x7261696e, n)
    }

    pub fn heldout(spec: &SyntheticSpec, seed: u64, n: usize) -> Result<Dataset> {
        Dataset::build(spec, seed, 0x68656c64, n)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Draw `batch` indices from the data stream.
    pub fn draw_batch(&self, batch: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..batch).map(|_| rng.index(self.len())).collect()
    }

    /// Stack images at `idx` into `[B, C*H*W]`-equivalent flat rows.
    pub fn gather(&self, idx: &[usize]) -> (Vec<&Tensor>, Vec<usize>) {
        let imgs = idx.iter().map(|&i| &self.images[i]).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (imgs, labels)
    }
}
