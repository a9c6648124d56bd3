//! Seeded procedural source textures. Any directory of frames works as
//! a synthesis source; these provide self-contained sources for smoke
//! runs and tests without shipping a dataset.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::image::{Image, ImageSequence};

/// A smooth random texture: a sum of low-frequency sinusoids, rescaled
/// into `[0.05, 0.95]`.
pub fn texture(seed: u64, channels: usize, height: usize, width: usize) -> Image {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut img = Array3::zeros((channels, height, width));
    for c in 0..channels {
        let mut waves = Vec::new();
        for _ in 0..8 {
            waves.push((
                rng.gen_range(0.01..0.25),
                rng.gen_range(0.01..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..1.0),
            ));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for (fx, fy, phase, amp) in &waves {
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                img[[c, y, x]] = v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = (hi - lo).max(1e-9);
        for y in 0..height {
            for x in 0..width {
                img[[c, y, x]] = 0.05 + 0.9 * (img[[c, y, x]] - lo) / span;
            }
        }
    }
    img
}

/// A static source sequence: `frames` copies of one texture. Scene
/// motion is synthesized downstream by homographies and crop walks.
pub fn sequence(seed: u64, frames: usize, channels: usize, height: usize, width: usize) -> ImageSequence {
    let base = texture(seed, channels, height, width);
    ImageSequence::new(vec![base; frames]).expect("uniform procedural frames")
}

/// A fence-like obstruction: a slanted grid of bars with soft edges.
/// Returns the obstruction color image and its alpha matte.
pub fn fence_pattern(seed: u64, height: usize, width: usize) -> (Image, crate::image::Mask) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spacing = rng.gen_range(24.0..48.0);
    let thickness = rng.gen_range(0.08..0.18);
    let angle: f64 = rng.gen_range(-0.3..0.3);
    let (sin, cos) = angle.sin_cos();
    let tone = rng.gen_range(0.15..0.4);

    let mut alpha = ndarray::Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let u = (cos * x as f64 - sin * y as f64) / spacing;
            let v = (sin * x as f64 + cos * y as f64) / spacing;
            let du = (u - u.round()).abs();
            let dv = (v - v.round()).abs();
            let d = du.min(dv);
            // Soft-edged bar profile.
            let a = ((thickness - d) / 0.02).clamp(0.0, 1.0);
            alpha[[y, x]] = a;
        }
    }
    let mut img = texture(seed ^ 0x5eed, 3, height, width);
    img.mapv_inplace(|v| v * tone);
    (img, alpha)
}

/// Adherent raindrops: scattered soft blobs.
pub fn raindrop_pattern(seed: u64, height: usize, width: usize) -> (Image, crate::image::Mask) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let count: usize = rng.gen_range(20..60);
    let mut alpha = ndarray::Array2::zeros((height, width));
    for _ in 0..count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let r = rng.gen_range(3.0..12.0);
        let y0 = ((cy - 3.0 * r).max(0.0)) as usize;
        let y1 = ((cy + 3.0 * r).min(height as f64 - 1.0)) as usize;
        let x0 = ((cx - 3.0 * r).max(0.0)) as usize;
        let x1 = ((cx + 3.0 * r).min(width as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = (-d2 / (2.0 * r * r)).exp();
                alpha[[y, x]] = f64::min(alpha[[y, x]] + a, 1.0);
            }
        }
    }
    let mut img = texture(seed ^ 0xd20b, 3, height, width);
    // Drops read bright and washed out.
    img.mapv_inplace(|v| 0.5 + 0.5 * v);
    (img, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_seeded_and_bounded() {
        let (img, alpha) = fence_pattern(3, 32, 48);
        assert_eq!(img.shape(), &[3, 32, 48]);
        assert!(alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(alpha.iter().any(|&a| a > 0.5));
        let (img2, alpha2) = fence_pattern(3, 32, 48);
        assert_eq!(img, img2);
        assert_eq!(alpha, alpha2);
        let (_, drops) = raindrop_pattern(4, 32, 48);
        assert!(drops.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn texture_is_seeded_and_in_range() {
        let a = texture(5, 3, 16, 20);
        let b = texture(5, 3, 16, 20);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = texture(6, 3, 16, 20);
        assert_ne!(a, c);
    }
}
