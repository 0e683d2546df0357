//! Synthetic image corpora and small helpers shared by the acceptance runs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Piecewise-smooth test image: a tilted gradient, a few soft-edged discs and
/// rectangles and a low-frequency texture, clipped to `[0, 1]`.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let base = rng.gen_range(0.3..0.7);
    let mut img = Array2::from_shape_fn((h, w), |(i, j)| {
        base + gx * (j as f64 / w as f64 - 0.5) + gy * (i as f64 / h as f64 - 0.5)
    });
    for _ in 0..rng.gen_range(2..5) {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(4.0..(h.min(w) as f64 / 3.0));
        let level = rng.gen_range(-0.35..0.35);
        img.indexed_iter_mut().for_each(|((i, j), v)| {
            let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
            *v += level / (1.0 + ((d - r) * 1.5).exp());
        });
    }
    for _ in 0..rng.gen_range(1..3) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (hh, ww) = (rng.gen_range(4..h / 2), rng.gen_range(4..w / 2));
        let level = rng.gen_range(-0.3..0.3);
        for i in y0..(y0 + hh).min(h) {
            for j in x0..(x0 + ww).min(w) {
                img[[i, j]] += level;
            }
        }
    }
    let (fx, fy, amp) = (
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.0..0.08),
    );
    img.indexed_iter_mut().for_each(|((i, j), v)| {
        *v = (*v + amp * (fx * j as f64).sin() * (fy * i as f64).cos()).clamp(0.0, 1.0);
    });
    img
}

/// `count` images with seeds `first_seed..first_seed + count`.
pub fn corpus(count: usize, h: usize, w: usize, first_seed: u64) -> Vec<Array2<f64>> {
    (0..count as u64)
        .map(|k| synthetic_image(h, w, first_seed + k))
        .collect()
}
