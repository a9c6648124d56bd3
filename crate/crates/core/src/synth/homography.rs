//! Plane projective transforms for the synthetic-motion pipeline.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major 3x3 projective transform mapping source coordinates to
/// destination coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.0;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return Err(Error::InvalidArgument("singular homography".into()));
        }
        let inv = |r: usize, c: usize| {
            let (r1, r2) = match r {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c1, c2) = match c {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            // Transposed cofactor.
            sign * (m[c1][r1] * m[c2][r2] - m[c1][r2] * m[c2][r1]) / det
        };
        Ok(Homography([
            [inv(0, 0), inv(0, 1), inv(0, 2)],
            [inv(1, 0), inv(1, 1), inv(1, 2)],
            [inv(2, 0), inv(2, 1), inv(2, 2)],
        ]))
    }
}

/// Solves the 8-DOF system mapping four source points onto four
/// destination points (Gaussian elimination with partial pivoting).
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Forward elimination.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::InvalidArgument(
                "degenerate point configuration for homography".into(),
            ));
        }
        a.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            for k in col..9 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    // Back substitution.
    let mut h = [0.0f64; 8];
    for col in (0..8).rev() {
        let mut acc = a[col][8];
        for k in col + 1..8 {
            acc -= a[col][k] * h[k];
        }
        h[col] = acc / a[col][col];
    }
    Ok(Homography([
        [h[0], h[1], h[2]],
        [h[3], h[4], h[5]],
        [h[6], h[7], 1.0],
    ]))
}

/// Padding for samples falling outside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Clamp to the nearest edge pixel.
    Replicate,
    Zero,
}

/// Renders the transformed image by inverse mapping with bilinear
/// sampling: `out(p) = src(H^-1 p)`.
pub fn warp_homography(img: &Image, h: &Homography, padding: Padding) -> Result<Image> {
    let inv = h.inverse()?;
    let (c, ih, iw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((c, ih, iw));
    for y in 0..ih {
        for x in 0..iw {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for ch in 0..c {
                out[[ch, y, x]] = sample(img, ch, sx, sy, padding);
            }
        }
    }
    Ok(out)
}

fn sample(img: &Image, ch: usize, x: f64, y: f64, padding: Padding) -> f64 {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let (xx, yy) = (x0 + dx, y0 + dy);
            let v = match padding {
                Padding::Replicate => {
                    let cx = xx.clamp(0, w - 1) as usize;
                    let cy = yy.clamp(0, h - 1) as usize;
                    img[[ch, cy, cx]]
                }
                Padding::Zero => {
                    if xx < 0 || yy < 0 || xx >= w || yy >= h {
                        0.0
                    } else {
                        img[[ch, yy as usize, xx as usize]]
                    }
                }
            };
            acc += wgt * v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn four_point_solve_roundtrips() {
        let src = [(0.0, 0.0), (99.0, 0.0), (99.0, 59.0), (0.0, 59.0)];
        let dst = [(2.0, -1.0), (97.5, 3.0), (101.0, 55.0), (-3.0, 62.0)];
        let h = homography_from_points(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(dst.iter()) {
            let (u, v) = h.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-8);
            assert!((v - d.1).abs() < 1e-8);
        }
        let inv = h.inverse().unwrap();
        for (s, d) in src.iter().zip(dst.iter()) {
            let (u, v) = inv.apply(d.0, d.1);
            assert!((u - s.0).abs() < 1e-8);
            assert!((v - s.1).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_warp_preserves_image() {
        let img = Array3::from_shape_fn((1, 6, 7), |(_, y, x)| (x + y * 7) as f64 / 41.0);
        let out = warp_homography(&img, &Homography::identity(), Padding::Replicate).unwrap();
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_homography_shifts_content() {
        let img = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (x + y * 8) as f64 / 63.0);
        let h = Homography([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let out = warp_homography(&img, &h, Padding::Zero).unwrap();
        // Content moves right by 2: out(x) = img(x - 2).
        for y in 0..8 {
            for x in 2..8 {
                assert!((out[[0, y, x]] - img[[0, y, x - 2]]).abs() < 1e-12);
            }
        }
    }
}
