//! Seeded synthetic data: Gaussian-blob images whose ground truth is a
//! fixation density over the blob centers, so training and acceptance runs
//! need no external datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, Sample};
use crate::data::{density_from_fixations, fixation_map_from_set, Fixation, FixationSet};
use crate::tensor::Tensor;

/// Generates `n` blob images of the given size. Every quantity is drawn from
/// a stream derived from (seed, index), so regeneration is reproducible.
pub fn synthetic_dataset(n: usize, width: usize, height: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| synthetic_sample(i, width, height, derive_seed(seed, i as u64)))
        .collect()
}

fn synthetic_sample(index: usize, width: usize, height: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.gen_range(1..=3usize);
    let margin_x = width as f64 * 0.2;
    let margin_y = height as f64 * 0.2;

    struct Blob {
        x: f64,
        y: f64,
        sigma: f64,
        color: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            x: rng.gen_range(margin_x..width as f64 - margin_x),
            y: rng.gen_range(margin_y..height as f64 - margin_y),
            sigma: rng.gen_range(width as f64 / 10.0..width as f64 / 5.0),
            color: [
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
            ],
        })
        .collect();

    // Blob intensities over a faint diagonal ramp so no region is constant.
    let mut image = Tensor::zeros(&[3, height, width]);
    for c in 0..3 {
        for row in 0..height {
            for col in 0..width {
                let mut v = 0.05 * (row + col) as f64 / (width + height) as f64;
                for b in &blobs {
                    let d2 = (col as f64 - b.x).powi(2) + (row as f64 - b.y).powi(2);
                    v += b.color[c] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                image.set3(c, row, col, v);
            }
        }
    }
    let max = image.data().iter().cloned().fold(0.0, f64::max);
    let image = image.map(|v| (v / max).clamp(0.0, 1.0));

    // A handful of observers fixating near each blob center.
    let scatter = width as f64 / 16.0;
    let mut points = Vec::new();
    for (bi, b) in blobs.iter().enumerate() {
        let count = rng.gen_range(3..=6usize);
        for _ in 0..count {
            points.push(Fixation {
                x: (b.x + rng.gen_range(-scatter..scatter)).clamp(0.0, (width - 1) as f64),
                y: (b.y + rng.gen_range(-scatter..scatter)).clamp(0.0, (height - 1) as f64),
                observer: bi as u32,
            });
        }
    }
    let fixations = FixationSet::new(points);
    let sigma = (width as f64 / 16.0).max(1.0);
    let gt_map = density_from_fixations(&fixations, width, height, sigma)
        .expect("blob fixations are never empty");
    let gt_fix = fixation_map_from_set(&fixations, width, height)
        .expect("blob fixations are never empty");

    Sample {
        name: format!("synth{index:03}"),
        image,
        gt_map,
        gt_fix,
        fixations,
    }
}
