//! Deterministic synthetic classification set: each class pairs a distinct
//! base color with a distinct geometric pattern, plus seeded noise.

use crate::rng::Prng;

pub struct Sample {
    /// `[size * size * 3]` row-major RGB in [0, 1].
    pub pixels: Vec<f64>,
    pub label: usize,
}

pub struct SyntheticDataset {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Class base color: evenly spaced hues at full saturation.
fn class_color(k: usize, classes: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / classes as f64;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Geometric mask in [0, 1] for pattern id `k` at pixel (r, c); patterns cycle
/// through stripes, checkerboards, disks, and diagonals with class-dependent
/// scale.
fn pattern(k: usize, r: usize, c: usize, size: usize) -> f64 {
    let period = 2 + k / 4;
    let on = match k % 4 {
        0 => (r / period) % 2 == 0,                       // horizontal stripes
        1 => ((r / period) + (c / period)) % 2 == 0,      // checkerboard
        2 => {
            let (dr, dc) = (r as f64 - size as f64 / 2.0, c as f64 - size as f64 / 2.0);
            (dr * dr + dc * dc).sqrt() < size as f64 / 3.0 // centered disk
        }
        _ => ((r + c) / period) % 2 == 0,                 // diagonal stripes
    };
    if on {
        1.0
    } else {
        0.25
    }
}

impl SyntheticDataset {
    pub fn generate(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        assert!(classes >= 1 && per_class >= 1 && size >= 4);
        let mut samples = Vec::with_capacity(classes * per_class);
        for k in 0..classes {
            let color = class_color(k, classes);
            for i in 0..per_class {
                // one independent stream per (class, index): sample content
                // never depends on generation order
                let mut rng = Prng::seed_from(seed ^ ((k as u64) << 32) ^ i as u64);
                let mut pixels = Vec::with_capacity(size * size * 3);
                for r in 0..size {
                    for c in 0..size {
                        let p = pattern(k, r, c, size);
                        for ch in 0..3 {
                            let v = color[ch] * p + 0.05 * rng.normal();
                            pixels.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                samples.push(Sample { pixels, label: k });
            }
        }
        SyntheticDataset { classes, per_class, size, seed, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
