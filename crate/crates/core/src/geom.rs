//! Geometric primitives: backward bilinear warping, visibility masks,
//! resolution pyramids, flow resampling, and spatial gradients.
//!
//! Conventions used throughout the crate:
//! - Warping is backward sampling: `out(p) = img(p + flow(p))`, so a flow
//!   field stored on frame A's pixel grid that points at the matching
//!   positions in frame B turns `warp(img_b, flow)` into frame A's view.
//! - Samples falling outside the image use zero padding; validity is
//!   tracked separately by [`visibility_mask`].
//! - Pyramids are indexed coarsest-first: level 0 is the smallest scale,
//!   the last level is the original image.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::{spatial, FlowField, Image, Mask};

/// Bilinear sample with zero padding outside `[0, w-1] x [0, h-1]`.
#[inline]
fn sample_zero(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            let yy = y0 + dy;
            let wgt = wx * wy;
            if wgt != 0.0 && xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                acc += wgt * plane[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

/// Backward-warps `img` by `flow`: `out(p) = img(p + flow(p))` with
/// bilinear sampling and zero padding.
pub fn warp_bilinear(img: &Image, flow: &FlowField) -> Result<Image> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if flow.shape() != [2, h, w] {
        return Err(Error::ShapeMismatch {
            context: "warp_bilinear",
            expected: format!("[2, {h}, {w}]"),
            actual: format!("{:?}", flow.shape()),
        });
    }
    let mut out = Array3::zeros((c, h, w));
    let src = img.as_slice().expect("contiguous image");
    let fl = flow.as_slice().expect("contiguous flow");
    let dst = out.as_slice_mut().expect("contiguous output");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dplane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = fl[y * w + x];
                let v = fl[h * w + y * w + x];
                dplane[y * w + x] = sample_zero(plane, h, w, x as f64 + u, y as f64 + v);
            }
        }
    }
    Ok(out)
}

/// Marks pixels whose warped sampling location stays inside the image:
/// `mask(p) = 1` iff `p + flow(p)` lies within `[0, w-1] x [0, h-1]`.
pub fn visibility_mask(flow: &FlowField) -> Mask {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow[[0, y, x]];
            let sy = y as f64 + flow[[1, y, x]];
            if sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64 {
                mask[[y, x]] = 1.0;
            }
        }
    }
    mask
}

/// Precomputed 1-D resampling taps: output index i blends input taps
/// `lo[i]` and `hi[i]` with weights `w_lo[i]` and `1 - w_lo[i]`.
pub(crate) struct ResampleAxis {
    pub(crate) lo: Vec<usize>,
    pub(crate) hi: Vec<usize>,
    pub(crate) w_lo: Vec<f64>,
}

impl ResampleAxis {
    /// Half-pixel-centre bilinear mapping from `n_out` onto `n_in` samples.
    pub(crate) fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_lo = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let s0 = src.floor();
            let frac = src - s0;
            let i0 = (s0 as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = (s0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
            lo.push(i0);
            hi.push(i1);
            w_lo.push(1.0 - frac);
        }
        Self { lo, hi, w_lo }
    }
}

/// Bilinear resize of a `[C, H, W]` array to the given spatial size.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let ax = ResampleAxis::new(w, new_w);
    let ay = ResampleAxis::new(h, new_h);
    let mut out = Array3::zeros((c, new_h, new_w));
    for ch in 0..c {
        for y in 0..new_h {
            let (y0, y1, wy) = (ay.lo[y], ay.hi[y], ay.w_lo[y]);
            for x in 0..new_w {
                let (x0, x1, wx) = (ax.lo[x], ax.hi[x], ax.w_lo[x]);
                let top = wx * img[[ch, y0, x0]] + (1.0 - wx) * img[[ch, y0, x1]];
                let bot = wx * img[[ch, y1, x0]] + (1.0 - wx) * img[[ch, y1, x1]];
                out[[ch, y, x]] = wy * top + (1.0 - wy) * bot;
            }
        }
    }
    out
}

/// Doubles the spatial size of a flow field and rescales the displacement
/// values so they stay in pixels of the new resolution.
pub fn upsample_flow_2x(flow: &FlowField) -> FlowField {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let mut up = resize_bilinear(flow, 2 * h, 2 * w);
    up.mapv_inplace(|v| v * 2.0);
    up
}

/// Resizes a flow field to an arbitrary spatial size, scaling u by the
/// horizontal ratio and v by the vertical ratio.
pub fn resize_flow(flow: &FlowField, new_h: usize, new_w: usize) -> FlowField {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let mut out = resize_bilinear(flow, new_h, new_w);
    let sx = new_w as f64 / w as f64;
    let sy = new_h as f64 / h as f64;
    for y in 0..new_h {
        for x in 0..new_w {
            out[[0, y, x]] *= sx;
            out[[1, y, x]] *= sy;
        }
    }
    out
}

/// Halves both spatial dimensions by averaging 2x2 blocks; odd trailing
/// rows/columns are dropped.
pub fn downsample_half(img: &Image) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (nh, nw) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, nh, nw));
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                out[[ch, y, x]] = 0.25
                    * (img[[ch, 2 * y, 2 * x]]
                        + img[[ch, 2 * y, 2 * x + 1]]
                        + img[[ch, 2 * y + 1, 2 * x]]
                        + img[[ch, 2 * y + 1, 2 * x + 1]]);
            }
        }
    }
    out
}

/// Builds an `levels + 1` pyramid by repeated 2x downsampling.
/// Index 0 is the coarsest scale; index `levels` is the original image.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    let (h, w) = spatial(img);
    if levels < 1 {
        return Err(Error::InvalidArgument(
            "pyramid needs at least one halving".into(),
        ));
    }
    if h < (1 << levels) || w < (1 << levels) {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            levels,
        });
    }
    let mut pyr = vec![img.clone()];
    for _ in 0..levels {
        let next = downsample_half(pyr.last().unwrap());
        pyr.push(next);
    }
    pyr.reverse();
    Ok(pyr)
}

/// Forward-difference spatial gradients `(gx, gy)`; the last column of
/// `gx` and last row of `gy` are zero.
pub fn spatial_gradient(img: &Image) -> (Image, Image) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut gx = Array3::zeros((c, h, w));
    let mut gy = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    gx[[ch, y, x]] = img[[ch, y, x + 1]] - img[[ch, y, x]];
                }
                if y + 1 < h {
                    gy[[ch, y, x]] = img[[ch, y + 1, x]] - img[[ch, y, x]];
                }
            }
        }
    }
    (gx, gy)
}

/// Constant flow field `(u, v)` at the given size.
pub fn constant_flow(h: usize, w: usize, u: f64, v: f64) -> FlowField {
    let mut f = Array3::zeros((2, h, w));
    f.slice_mut(ndarray::s![0, .., ..]).fill(u);
    f.slice_mut(ndarray::s![1, .., ..]).fill(v);
    f
}
