//! Deterministic, seeded generation of synthetic training/evaluation
//! sequences: reflection blends (background plus blurred, attenuated
//! reflection) and fence/raindrop composites (background plus
//! alpha-matted obstruction), with per-frame homography motion,
//! random-walk cropping, and photometric corruption.
//!
//! Every sample owns one RNG derived from its seed, split into named
//! sub-streams per augmentation so adding an augmentation never
//! perturbs earlier draws. Ground-truth layers are stored before the
//! corruption stage. The blend is `clip(B + kappa * blur(R))` with the
//! attenuation `kappa` recorded in the manifest.

pub mod homography;
pub mod procedural;

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{jpeg_roundtrip, read_image, write_png, Image, ImageSequence, Mask};
use homography::{homography_from_points, warp_homography, Homography, Padding};

/// Which composite the generator produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    Reflection,
    Fence,
    Raindrop,
}

impl SynthTask {
    pub fn is_obstruction(&self) -> bool {
        matches!(self, SynthTask::Fence | SynthTask::Raindrop)
    }
}

/// Declarative description of one synthetic sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Fixed frame count in `[2, 7]`, or `None` to sample it.
    pub num_frames: Option<usize>,
    pub crop_width: usize,
    pub crop_height: usize,
    /// Bound on each random-walk crop step, per axis, in pixels.
    pub motion_range: i64,
    /// Odd Gaussian kernel sizes for the reflection blur.
    pub blur_kernel_range: (usize, usize),
    pub blur_sigma_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub jpeg_quality_range: (u8, u8),
    pub vignette_kernel_range: (usize, usize),
    /// Maximum corner displacement of the per-frame homographies.
    pub homography_perturbation: f64,
    pub color_jitter: bool,
    pub noise: bool,
    pub jpeg: bool,
    pub vignette: bool,
    pub task: SynthTask,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: None,
            crop_width: 320,
            crop_height: 192,
            motion_range: 40,
            blur_kernel_range: (3, 17),
            blur_sigma_range: (0.8, 2.9),
            noise_sigma_range: (0.0, 0.02),
            jpeg_quality_range: (50, 100),
            vignette_kernel_range: (300, 1000),
            homography_perturbation: 8.0,
            color_jitter: true,
            noise: true,
            jpeg: true,
            vignette: true,
            task: SynthTask::Reflection,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if let Some(t) = self.num_frames {
            if !(2..=7).contains(&t) {
                return fail(format!("num_frames {t} outside [2, 7]"));
            }
        }
        if self.crop_width < 8 || self.crop_height < 8 {
            return fail("crop smaller than 8x8".into());
        }
        if !(0..=40).contains(&self.motion_range) {
            return fail(format!("motion_range {} outside [0, 40]", self.motion_range));
        }
        let (k0, k1) = self.blur_kernel_range;
        if k0 % 2 == 0 || k1 % 2 == 0 || k0 < 3 || k1 > 17 || k0 > k1 {
            return fail(format!("blur kernel range [{k0}, {k1}] invalid (odd, within [3, 17])"));
        }
        let (s0, s1) = self.blur_sigma_range;
        if !(0.8..=2.9).contains(&s0) || !(0.8..=2.9).contains(&s1) || s0 > s1 {
            return fail(format!("blur sigma range [{s0}, {s1}] outside [0.8, 2.9]"));
        }
        let (n0, n1) = self.noise_sigma_range;
        if !(0.0..=0.02).contains(&n0) || !(0.0..=0.02).contains(&n1) || n0 > n1 {
            return fail(format!("noise sigma range [{n0}, {n1}] outside [0, 0.02]"));
        }
        let (q0, q1) = self.jpeg_quality_range;
        if q0 < 50 || q1 > 100 || q0 > q1 {
            return fail(format!("jpeg quality range [{q0}, {q1}] outside [50, 100]"));
        }
        let (v0, v1) = self.vignette_kernel_range;
        if v0 < 300 || v1 > 1000 || v0 > v1 {
            return fail(format!("vignette kernel range [{v0}, {v1}] outside [300, 1000]"));
        }
        if self.homography_perturbation < 0.0 {
            return fail("negative homography perturbation".into());
        }
        Ok(())
    }
}

/// Color jitter draw, shared across all frames of one layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JitterParams {
    pub hue_shift: f64,
    pub saturation: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl JitterParams {
    fn identity() -> Self {
        Self {
            hue_shift: 0.0,
            saturation: 1.0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    fn sample(rng: &mut ChaCha20Rng) -> Self {
        Self {
            hue_shift: rng.gen_range(-0.05..=0.05),
            saturation: rng.gen_range(0.8..=1.2),
            brightness: rng.gen_range(0.8..=1.2),
            contrast: rng.gen_range(0.8..=1.2),
        }
    }
}

/// Per-frame motion of one layer: a projective jitter plus a crop
/// offset from a bounded random walk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionPath {
    pub homographies: Vec<Homography>,
    pub offsets: Vec<(i64, i64)>,
}

/// Record of every sampled value; together with the spec this fully
/// reproduces the sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub spec: SynthSpec,
    pub num_frames: usize,
    /// Formula used for the reflection composite.
    pub blend: String,
    pub attenuation: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: Option<u8>,
    pub vignette_kernel: Option<usize>,
    pub vignette_sigma: Option<f64>,
    pub jitter_background: JitterParams,
    pub jitter_obstruction: JitterParams,
    pub path_background: MotionPath,
    pub path_obstruction: MotionPath,
}

/// A generated sample: corrupted inputs plus pre-corruption layers.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub frames: ImageSequence,
    pub gt_background: ImageSequence,
    /// Reflection layers, or premultiplied obstruction `A * F`.
    pub gt_obstruction: ImageSequence,
    /// Alpha maps for fence/raindrop samples.
    pub gt_alpha: Option<ImageSequence>,
    pub manifest: SampleManifest,
}

/// One RNG stream per (seed, purpose) pair.
fn substream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta < 1e-12 {
        0.0
    } else if (max - r).abs() < 1e-12 {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if (max - g).abs() < 1e-12 {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max < 1e-12 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Hue/saturation act on 3-channel images; brightness/contrast on any.
fn apply_jitter(img: &Image, p: &JitterParams) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    if c == 3 {
        for y in 0..h {
            for x in 0..w {
                let (hh, ss, vv) = rgb_to_hsv(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                let (r, g, b) =
                    hsv_to_rgb(hh + p.hue_shift, (ss * p.saturation).clamp(0.0, 1.0), vv);
                out[[0, y, x]] = r;
                out[[1, y, x]] = g;
                out[[2, y, x]] = b;
            }
        }
    }
    out.mapv_inplace(|v| (((v * p.brightness) - 0.5) * p.contrast + 0.5).clamp(0.0, 1.0));
    out
}

fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let c = (kernel / 2) as f64;
    let mut taps: Vec<f64> = (0..kernel)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let taps = gaussian_taps(kernel, sigma);
    let r = kernel as isize / 2;
    let mut rows = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += t * img[[ch, y, sx]];
                }
                rows[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += t * rows[[ch, sy, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Multiplies by a centered Gaussian falloff whose sigma follows the
/// usual kernel-size rule `0.3 * ((k - 1) * 0.5 - 1) + 0.8`.
fn apply_vignette(img: &mut Image, kernel: usize) -> f64 {
    let sigma = 0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let falloff = (-d2 / (2.0 * sigma * sigma)).exp();
            for ch in 0..c {
                img[[ch, y, x]] *= falloff;
            }
        }
    }
    sigma
}

fn odd_in_range(rng: &mut ChaCha20Rng, lo: usize, hi: usize) -> usize {
    let choices: Vec<usize> = (lo..=hi).filter(|k| k % 2 == 1).collect();
    choices[rng.gen_range(0..choices.len())]
}

/// Per-frame homographies with bounded corner perturbation plus a
/// bounded random-walk of crop offsets.
pub fn random_homography_path(
    spec: &SynthSpec,
    source_height: usize,
    source_width: usize,
    num_frames: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MotionPath> {
    spec.validate()?;
    if source_width < spec.crop_width || source_height < spec.crop_height {
        return Err(Error::InvalidArgument(format!(
            "source {source_width}x{source_height} smaller than crop {}x{}",
            spec.crop_width, spec.crop_height
        )));
    }
    let mut homographies = Vec::with_capacity(num_frames);
    let p = spec.homography_perturbation;
    for _ in 0..num_frames {
        if p == 0.0 {
            homographies.push(Homography::identity());
            continue;
        }
        let (w1, h1) = (source_width as f64 - 1.0, source_height as f64 - 1.0);
        let src = [(0.0, 0.0), (w1, 0.0), (w1, h1), (0.0, h1)];
        let mut dst = src;
        for corner in dst.iter_mut() {
            corner.0 += rng.gen_range(-p..=p);
            corner.1 += rng.gen_range(-p..=p);
        }
        homographies.push(homography_from_points(&src, &dst)?);
    }

    // Keep crops away from warped borders when there is slack for it.
    let margin_x = (p.ceil() as i64).min(((source_width - spec.crop_width) / 2) as i64);
    let margin_y = (p.ceil() as i64).min(((source_height - spec.crop_height) / 2) as i64);
    let max_x = (source_width - spec.crop_width) as i64 - margin_x;
    let max_y = (source_height - spec.crop_height) as i64 - margin_y;
    let clamp = |v: i64, lo: i64, hi: i64| v.clamp(lo, hi.max(lo));

    let mut offsets = Vec::with_capacity(num_frames);
    let mut x = if margin_x >= max_x {
        margin_x
    } else {
        rng.gen_range(margin_x..=max_x)
    };
    let mut y = if margin_y >= max_y {
        margin_y
    } else {
        rng.gen_range(margin_y..=max_y)
    };
    for _ in 0..num_frames {
        offsets.push((x, y));
        let dx = rng.gen_range(-spec.motion_range..=spec.motion_range);
        let dy = rng.gen_range(-spec.motion_range..=spec.motion_range);
        x = clamp(x + dx, margin_x, max_x);
        y = clamp(y + dy, margin_y, max_y);
    }
    Ok(MotionPath {
        homographies,
        offsets,
    })
}

fn crop(img: &Image, x0: i64, y0: i64, w: usize, h: usize) -> Image {
    img.slice(ndarray::s![
        ..,
        y0 as usize..y0 as usize + h,
        x0 as usize..x0 as usize + w
    ])
    .to_owned()
}

/// Applies jitter, the frame homography, and the walk crop of one layer.
fn render_layer_frame(
    source: &Image,
    jitter: &JitterParams,
    path: &MotionPath,
    frame: usize,
    spec: &SynthSpec,
    padding: Padding,
) -> Result<Image> {
    let jittered = apply_jitter(source, jitter);
    let warped = warp_homography(&jittered, &path.homographies[frame], padding)?;
    let (x0, y0) = path.offsets[frame];
    Ok(crop(&warped, x0, y0, spec.crop_width, spec.crop_height))
}

struct Corruption {
    noise_sigma: f64,
    jpeg_quality: Option<u8>,
    vignette_kernel: Option<usize>,
    vignette_sigma: Option<f64>,
}

/// Vignette, Gaussian noise, then a JPEG round trip, in that order.
fn corrupt_frames(
    frames: &mut Vec<Image>,
    spec: &SynthSpec,
    seed: u64,
) -> Result<Corruption> {
    let mut vignette_rng = substream(seed, "vignette");
    let mut noise_rng = substream(seed, "noise");
    let mut jpeg_rng = substream(seed, "jpeg");

    let (vignette_kernel, vignette_sigma) = if spec.vignette {
        let k = vignette_rng.gen_range(spec.vignette_kernel_range.0..=spec.vignette_kernel_range.1);
        let mut sigma = None;
        for f in frames.iter_mut() {
            sigma = Some(apply_vignette(f, k));
        }
        (Some(k), sigma)
    } else {
        (None, None)
    };

    let noise_sigma = if spec.noise {
        noise_rng.gen_range(spec.noise_sigma_range.0..=spec.noise_sigma_range.1)
    } else {
        0.0
    };
    if noise_sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        for f in frames.iter_mut() {
            for v in f.iter_mut() {
                *v = (*v + rand_distr::Distribution::sample(&normal, &mut noise_rng))
                    .clamp(0.0, 1.0);
            }
        }
    }

    let jpeg_quality = if spec.jpeg {
        let q = jpeg_rng.gen_range(spec.jpeg_quality_range.0..=spec.jpeg_quality_range.1);
        for f in frames.iter_mut() {
            let (decoded, _) = jpeg_roundtrip(f, q)?;
            // JPEG is 3-channel; keep single-channel sources that way.
            *f = if f.shape()[0] == 1 {
                decoded.slice(ndarray::s![0..1, .., ..]).to_owned()
            } else {
                decoded
            };
        }
        Some(q)
    } else {
        None
    };

    Ok(Corruption {
        noise_sigma,
        jpeg_quality,
        vignette_kernel,
        vignette_sigma,
    })
}

fn draw_num_frames(spec: &SynthSpec, available: usize) -> Result<usize> {
    let t = match spec.num_frames {
        Some(t) => t,
        None => substream(spec.seed, "frames").gen_range(2..=7.min(available.max(2))),
    };
    if available < t {
        return Err(Error::InvalidArgument(format!(
            "source provides {available} frames but {t} are needed"
        )));
    }
    Ok(t)
}

/// Generates a reflection sample: independently moving background and
/// reflection, blurred and attenuated reflection, additive blend,
/// photometric corruption. Fully determined by `spec.seed`.
pub fn generate_reflection_sample(
    spec: &SynthSpec,
    bg_frames: &ImageSequence,
    rf_frames: &ImageSequence,
) -> Result<SynthSample> {
    spec.validate()?;
    if spec.task != SynthTask::Reflection {
        return Err(Error::InvalidArgument(
            "generate_reflection_sample requires the reflection task".into(),
        ));
    }
    let t = draw_num_frames(spec, bg_frames.len().min(rf_frames.len()))?;
    let seed = spec.seed;

    let (jit_bg, jit_rf) = if spec.color_jitter {
        (
            JitterParams::sample(&mut substream(seed, "jitter.bg")),
            JitterParams::sample(&mut substream(seed, "jitter.rf")),
        )
    } else {
        (JitterParams::identity(), JitterParams::identity())
    };

    let (bh, bw) = bg_frames.spatial();
    let (rh, rw) = rf_frames.spatial();
    let path_bg = random_homography_path(spec, bh, bw, t, &mut substream(seed, "motion.bg"))?;
    let path_rf = random_homography_path(spec, rh, rw, t, &mut substream(seed, "motion.rf"))?;

    let mut blur_rng = substream(seed, "blur");
    let blur_kernel = odd_in_range(&mut blur_rng, spec.blur_kernel_range.0, spec.blur_kernel_range.1);
    let blur_sigma = blur_rng.gen_range(spec.blur_sigma_range.0..=spec.blur_sigma_range.1);
    let attenuation = substream(seed, "attenuation").gen_range(0.6..=1.0);

    let mut frames = Vec::with_capacity(t);
    let mut gt_b = Vec::with_capacity(t);
    let mut gt_r = Vec::with_capacity(t);
    for i in 0..t {
        let b = render_layer_frame(bg_frames.frame(i), &jit_bg, &path_bg, i, spec, Padding::Replicate)?;
        let r = render_layer_frame(rf_frames.frame(i), &jit_rf, &path_rf, i, spec, Padding::Replicate)?;
        let mut r_eff = gaussian_blur(&r, blur_kernel, blur_sigma);
        r_eff.mapv_inplace(|v| v * attenuation);
        let mut composite = &b + &r_eff;
        composite.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(composite);
        gt_b.push(b);
        gt_r.push(r_eff);
    }

    let corruption = corrupt_frames(&mut frames, spec, seed)?;
    Ok(SynthSample {
        frames: ImageSequence::new(frames)?,
        gt_background: ImageSequence::new(gt_b)?,
        gt_obstruction: ImageSequence::new(gt_r)?,
        gt_alpha: None,
        manifest: SampleManifest {
            spec: spec.clone(),
            num_frames: t,
            blend: "clip(b + kappa * gaussian_blur(r))".into(),
            attenuation,
            blur_kernel,
            blur_sigma,
            noise_sigma: corruption.noise_sigma,
            jpeg_quality: corruption.jpeg_quality,
            vignette_kernel: corruption.vignette_kernel,
            vignette_sigma: corruption.vignette_sigma,
            jitter_background: jit_bg,
            jitter_obstruction: jit_rf,
            path_background: path_bg,
            path_obstruction: path_rf,
        },
    })
}

/// Generates a fence/raindrop sample: `I = A * F + (1 - A) * B` with the
/// obstruction plane moving independently of the background.
pub fn generate_obstruction_sample(
    spec: &SynthSpec,
    bg_frames: &ImageSequence,
    obstruction: &Image,
    alpha: &Mask,
) -> Result<SynthSample> {
    spec.validate()?;
    if !spec.task.is_obstruction() {
        return Err(Error::InvalidArgument(
            "generate_obstruction_sample requires the fence or raindrop task".into(),
        ));
    }
    let (oh, ow) = (obstruction.shape()[1], obstruction.shape()[2]);
    if alpha.dim() != (oh, ow) {
        return Err(Error::ShapeMismatch {
            context: "obstruction alpha",
            expected: format!("[{oh}, {ow}]"),
            actual: format!("{:?}", alpha.dim()),
        });
    }
    let t = draw_num_frames(spec, bg_frames.len())?;
    let seed = spec.seed;

    let (jit_bg, jit_ob) = if spec.color_jitter {
        (
            JitterParams::sample(&mut substream(seed, "jitter.bg")),
            JitterParams::sample(&mut substream(seed, "jitter.ob")),
        )
    } else {
        (JitterParams::identity(), JitterParams::identity())
    };

    let (bh, bw) = bg_frames.spatial();
    let path_bg = random_homography_path(spec, bh, bw, t, &mut substream(seed, "motion.bg"))?;
    let path_ob = random_homography_path(spec, oh, ow, t, &mut substream(seed, "motion.ob"))?;

    let alpha_img = alpha
        .clone()
        .into_shape_with_order((1, oh, ow))
        .expect("alpha reshape");
    let jittered_ob = apply_jitter(obstruction, &jit_ob);

    let mut frames = Vec::with_capacity(t);
    let mut gt_b = Vec::with_capacity(t);
    let mut gt_f = Vec::with_capacity(t);
    let mut gt_a = Vec::with_capacity(t);
    for i in 0..t {
        let b = render_layer_frame(bg_frames.frame(i), &jit_bg, &path_bg, i, spec, Padding::Replicate)?;
        // The obstruction plane leaves the frame rather than smearing:
        // zero padding, so alpha vanishes off-plane.
        let f_full = warp_homography(&jittered_ob, &path_ob.homographies[i], Padding::Zero)?;
        let a_full = warp_homography(&alpha_img, &path_ob.homographies[i], Padding::Zero)?;
        let (x0, y0) = path_ob.offsets[i];
        let f = crop(&f_full, x0, y0, spec.crop_width, spec.crop_height);
        let mut a = crop(&a_full, x0, y0, spec.crop_width, spec.crop_height);
        a.mapv_inplace(|v| v.clamp(0.0, 1.0));

        let (c, h, w) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        let mut composite = Array3::zeros((c, h, w));
        let mut premultiplied = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let av = a[[0, y, x]];
                    let fv = f[[ch.min(f.shape()[0] - 1), y, x]];
                    premultiplied[[ch, y, x]] = av * fv;
                    composite[[ch, y, x]] = av * fv + (1.0 - av) * b[[ch, y, x]];
                }
            }
        }
        frames.push(composite);
        gt_b.push(b);
        gt_f.push(premultiplied);
        gt_a.push(a);
    }

    let corruption = corrupt_frames(&mut frames, spec, seed)?;
    Ok(SynthSample {
        frames: ImageSequence::new(frames)?,
        gt_background: ImageSequence::new(gt_b)?,
        gt_obstruction: ImageSequence::new(gt_f)?,
        gt_alpha: Some(ImageSequence::new(gt_a)?),
        manifest: SampleManifest {
            spec: spec.clone(),
            num_frames: t,
            blend: "a * f + (1 - a) * b".into(),
            attenuation: 1.0,
            blur_kernel: 0,
            blur_sigma: 0.0,
            noise_sigma: corruption.noise_sigma,
            jpeg_quality: corruption.jpeg_quality,
            vignette_kernel: corruption.vignette_kernel,
            vignette_sigma: corruption.vignette_sigma,
            jitter_background: jit_bg,
            jitter_obstruction: jit_ob,
            path_background: path_bg,
            path_obstruction: path_ob,
        },
    })
}

/// Writes a sample directory: `frame_%03d.png`, `gt_b_%03d.png`,
/// `gt_r_%03d.png` (or `gt_f`/`gt_a`), and `manifest.json`.
pub fn write_sample(dir: &Path, sample: &SynthSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let obstruction_prefix = if sample.gt_alpha.is_some() { "gt_f" } else { "gt_r" };
    for (i, frame) in sample.frames.frames().iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:03}.png")), frame)?;
        write_png(
            &dir.join(format!("gt_b_{i:03}.png")),
            sample.gt_background.frame(i),
        )?;
        write_png(
            &dir.join(format!("{obstruction_prefix}_{i:03}.png")),
            sample.gt_obstruction.frame(i),
        )?;
        if let Some(alpha) = &sample.gt_alpha {
            write_png(&dir.join(format!("gt_a_{i:03}.png")), alpha.frame(i))?;
        }
    }
    let manifest = serde_json::to_string_pretty(&sample.manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    Ok(())
}

/// Frames plus ground-truth layers read back from a sample directory.
#[derive(Debug, Clone)]
pub struct SampleDir {
    pub frames: ImageSequence,
    pub gt_background: Option<ImageSequence>,
    pub gt_obstruction: Option<ImageSequence>,
    pub gt_alpha: Option<ImageSequence>,
}

fn read_indexed(dir: &Path, prefix: &str) -> Result<Option<ImageSequence>> {
    let mut frames = Vec::new();
    for i in 0.. {
        let path = dir.join(format!("{prefix}_{i:03}.png"));
        if !path.is_file() {
            break;
        }
        frames.push(read_image(&path)?);
    }
    if frames.is_empty() {
        Ok(None)
    } else {
        Ok(Some(ImageSequence::new(frames)?))
    }
}

/// Reads a sample directory written by [`write_sample`] (ground truth
/// optional, so plain frame directories load too). Single-channel
/// ground-truth alpha is collapsed back to one channel.
pub fn read_sample_dir(dir: &Path) -> Result<SampleDir> {
    let frames = read_indexed(dir, "frame")?
        .ok_or_else(|| Error::InvalidArgument(format!("no frame_%03d.png in {}", dir.display())))?;
    let gt_obstruction = match read_indexed(dir, "gt_r")? {
        Some(seq) => Some(seq),
        None => read_indexed(dir, "gt_f")?,
    };
    let gt_alpha = read_indexed(dir, "gt_a")?.map(|seq| {
        ImageSequence::new(
            seq.frames()
                .iter()
                .map(|f| f.slice(ndarray::s![0..1, .., ..]).to_owned())
                .collect(),
        )
        .expect("alpha frames are uniform")
    });
    Ok(SampleDir {
        frames,
        gt_background: read_indexed(dir, "gt_b")?,
        gt_obstruction,
        gt_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sources(seed: u64, n: usize, h: usize, w: usize) -> (ImageSequence, ImageSequence) {
        (
            procedural::sequence(seed, n, 3, h, w),
            procedural::sequence(seed + 1, n, 3, h, w),
        )
    }

    fn small_spec(task: SynthTask) -> SynthSpec {
        SynthSpec {
            seed: 7,
            num_frames: Some(3),
            crop_width: 64,
            crop_height: 48,
            motion_range: 12,
            homography_perturbation: 3.0,
            task,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn black_reflection_without_corruption_reproduces_background() {
        let (bg, rf) = sources(1, 3, 96, 128);
        let black = ImageSequence::new(vec![ndarray::Array3::zeros((3, 96, 128)); 3]).unwrap();
        let spec = SynthSpec {
            color_jitter: false,
            noise: false,
            jpeg: false,
            vignette: false,
            ..small_spec(SynthTask::Reflection)
        };
        let _ = rf;
        let sample = generate_reflection_sample(&spec, &bg, &black).unwrap();
        for (f, b) in sample
            .frames
            .frames()
            .iter()
            .zip(sample.gt_background.frames())
        {
            assert_eq!(f, b);
        }
        assert!(sample.gt_obstruction.frames().iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (bg, rf) = sources(2, 3, 96, 128);
        let spec = small_spec(SynthTask::Reflection);
        let a = generate_reflection_sample(&spec, &bg, &rf).unwrap();
        let b = generate_reflection_sample(&spec, &bg, &rf).unwrap();
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
        for (x, y) in a.frames.frames().iter().zip(b.frames.frames()) {
            assert_eq!(x, y);
        }

        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_sample(dir_a.path(), &a).unwrap();
        write_sample(dir_b.path(), &b).unwrap();
        for entry in std::fs::read_dir(dir_a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let bytes_a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let bytes_b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{name:?} differs across runs");
        }

        let c = generate_reflection_sample(
            &SynthSpec {
                seed: 8,
                ..spec.clone()
            },
            &bg,
            &rf,
        )
        .unwrap();
        assert_ne!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&c.manifest).unwrap()
        );
    }

    #[test]
    fn sampled_parameters_respect_declared_ranges() {
        let (bg, rf) = sources(3, 7, 96, 128);
        for seed in 0..100 {
            let spec = SynthSpec {
                seed,
                num_frames: None,
                crop_width: 64,
                crop_height: 48,
                motion_range: 12,
                homography_perturbation: 3.0,
                ..SynthSpec::default()
            };
            let m = generate_reflection_sample(&spec, &bg, &rf).unwrap().manifest;
            assert!((2..=7).contains(&m.num_frames));
            assert!(m.blur_kernel % 2 == 1 && (3..=17).contains(&m.blur_kernel));
            assert!((0.8..=2.9).contains(&m.blur_sigma));
            assert!((0.6..=1.0).contains(&m.attenuation));
            assert!((0.0..=0.02).contains(&m.noise_sigma));
            assert!((50..=100).contains(&m.jpeg_quality.unwrap()));
            assert!((300..=1000).contains(&m.vignette_kernel.unwrap()));
            for path in [&m.path_background, &m.path_obstruction] {
                for pair in path.offsets.windows(2) {
                    assert!((pair[1].0 - pair[0].0).abs() <= 12);
                    assert!((pair[1].1 - pair[0].1).abs() <= 12);
                }
            }
        }
    }

    #[test]
    fn obstruction_alpha_limits() {
        let (bg, _) = sources(4, 3, 96, 128);
        let spec = SynthSpec {
            color_jitter: false,
            noise: false,
            jpeg: false,
            vignette: false,
            homography_perturbation: 0.0,
            motion_range: 0,
            ..small_spec(SynthTask::Fence)
        };
        let obstruction = procedural::texture(9, 3, 96, 128);

        // Alpha of zero: frames equal the background exactly.
        let zero = Array2::zeros((96, 128));
        let sample = generate_obstruction_sample(&spec, &bg, &obstruction, &zero).unwrap();
        for (f, b) in sample
            .frames
            .frames()
            .iter()
            .zip(sample.gt_background.frames())
        {
            assert_eq!(f, b);
        }

        // Alpha of one: frames equal the warped obstruction.
        let one = Array2::ones((96, 128));
        let sample = generate_obstruction_sample(&spec, &bg, &obstruction, &one).unwrap();
        for (f, gt_f) in sample
            .frames
            .frames()
            .iter()
            .zip(sample.gt_obstruction.frames())
        {
            for (a, b) in f.iter().zip(gt_f.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn obstruction_composite_identity_holds_per_pixel() {
        let (bg, _) = sources(5, 3, 96, 128);
        let spec = SynthSpec {
            noise: false,
            jpeg: false,
            vignette: false,
            ..small_spec(SynthTask::Raindrop)
        };
        let obstruction = procedural::texture(11, 3, 96, 128);
        let mut rng = substream(99, "alpha-test");
        let alpha = Array2::from_shape_fn((96, 128), |_| rng.gen::<f64>());
        let sample = generate_obstruction_sample(&spec, &bg, &obstruction, &alpha).unwrap();
        let a = sample.gt_alpha.as_ref().unwrap();
        for i in 0..sample.frames.len() {
            let f = sample.frames.frame(i);
            let b = sample.gt_background.frame(i);
            let premult = sample.gt_obstruction.frame(i);
            for ch in 0..3 {
                for y in 0..48 {
                    for x in 0..64 {
                        let av = a.frame(i)[[0, y, x]];
                        let expected = premult[[ch, y, x]] + (1.0 - av) * b[[ch, y, x]];
                        assert!((f[[ch, y, x]] - expected).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn motion_range_zero_freezes_the_walk() {
        let spec = SynthSpec {
            motion_range: 0,
            crop_width: 64,
            crop_height: 48,
            ..SynthSpec::default()
        };
        let mut rng = substream(3, "motion-test");
        let path = random_homography_path(&spec, 96, 128, 5, &mut rng).unwrap();
        assert!(path.offsets.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn zero_perturbation_gives_identity_homographies() {
        let spec = SynthSpec {
            homography_perturbation: 0.0,
            crop_width: 64,
            crop_height: 48,
            ..SynthSpec::default()
        };
        let mut rng = substream(4, "motion-test");
        let path = random_homography_path(&spec, 96, 128, 4, &mut rng).unwrap();
        assert!(path
            .homographies
            .iter()
            .all(|h| *h == Homography::identity()));
    }

    #[test]
    fn small_sources_are_rejected() {
        let (bg, rf) = sources(6, 3, 40, 40);
        let spec = small_spec(SynthTask::Reflection);
        assert!(generate_reflection_sample(&spec, &bg, &rf).is_err());
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let base = SynthSpec::default();
        for bad in [
            SynthSpec {
                num_frames: Some(9),
                ..base.clone()
            },
            SynthSpec {
                blur_kernel_range: (4, 16),
                ..base.clone()
            },
            SynthSpec {
                noise_sigma_range: (0.0, 0.5),
                ..base.clone()
            },
            SynthSpec {
                jpeg_quality_range: (10, 100),
                ..base.clone()
            },
            SynthSpec {
                vignette_kernel_range: (100, 1000),
                ..base.clone()
            },
            SynthSpec {
                motion_range: 80,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn gt_layers_are_untouched_by_corruption() {
        let (bg, rf) = sources(8, 3, 96, 128);
        let with = small_spec(SynthTask::Reflection);
        let without = SynthSpec {
            noise: false,
            jpeg: false,
            vignette: false,
            ..with.clone()
        };
        let a = generate_reflection_sample(&with, &bg, &rf).unwrap();
        let b = generate_reflection_sample(&without, &bg, &rf).unwrap();
        for i in 0..3 {
            assert_eq!(a.gt_background.frame(i), b.gt_background.frame(i));
            assert_eq!(a.gt_obstruction.frame(i), b.gt_obstruction.frame(i));
            assert_ne!(a.frames.frame(i), b.frames.frame(i));
        }
    }

    #[test]
    fn sample_roundtrips_through_directory() {
        let (bg, _) = sources(10, 3, 96, 128);
        let spec = small_spec(SynthTask::Fence);
        let obstruction = procedural::texture(12, 3, 96, 128);
        let alpha = Array2::from_elem((96, 128), 0.7);
        let sample = generate_obstruction_sample(&spec, &bg, &obstruction, &alpha).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &sample).unwrap();
        let back = read_sample_dir(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert!(back.gt_background.is_some());
        assert!(back.gt_obstruction.is_some());
        let alpha_back = back.gt_alpha.unwrap();
        assert_eq!(alpha_back.channels(), 1);
        // 8-bit quantization bounds the roundtrip error.
        for (orig, quant) in sample
            .frames
            .frames()
            .iter()
            .zip(back.frames.frames())
        {
            for (a, b) in orig.iter().zip(quant.iter()) {
                assert!((a - b).abs() < 0.5 / 255.0 + 1e-9);
            }
        }
    }
}
