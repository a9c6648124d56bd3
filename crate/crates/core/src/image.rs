//! Image and flow containers plus PNG/JPEG file I/O.
//!
//! Images are stored channel-first as `Array3<f64>` with shape `[C, H, W]`
//! and intensities in `[0, 1]`. Flow fields are `[2, H, W]` with channel 0
//! holding the horizontal displacement `u` (positive samples to the right)
//! and channel 1 the vertical displacement `v` (positive samples downward),
//! both in pixels. Masks are `[H, W]`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;
pub type FlowField = Array3<f64>;
pub type Mask = Array2<f64>;

/// Spatial size as `(height, width)`.
pub fn spatial(img: &Image) -> (usize, usize) {
    (img.shape()[1], img.shape()[2])
}

/// An ordered list of equally sized frames with a designated keyframe.
#[derive(Debug, Clone)]
pub struct ImageSequence {
    frames: Vec<Image>,
}

impl ImageSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty image sequence".into()));
        }
        let shape = frames[0].shape().to_vec();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != &shape[..] {
                return Err(Error::ShapeMismatch {
                    context: "image sequence",
                    expected: format!("{shape:?}"),
                    actual: format!("frame {i}: {:?}", f.shape()),
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} contains non-finite values"
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Image {
        &self.frames[i]
    }

    pub fn channels(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        spatial(&self.frames[0])
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }
}

/// Converts an 8-bit RGB buffer into a `[3, H, W]` image in `[0, 1]`.
pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    out
}

/// Quantizes a `[C, H, W]` image (1 or 3 channels) to 8-bit RGB.
pub fn to_rgb8(img: &Image) -> RgbImage {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                let v = img[[ch.min(c - 1), y, x]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            out.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    out
}

/// Reads a PNG/JPEG file into a `[3, H, W]` image.
pub fn read_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    Ok(from_rgb8(&reader.to_rgb8()))
}

/// Writes an image as PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

/// Encodes an image as JPEG at the given quality and decodes it back.
/// Returns the decoded image along with the encoded bytes.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<(Image, Vec<u8>)> {
    let rgb = to_rgb8(img);
    let mut bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(Cursor::new(&mut bytes), quality);
    DynamicImage::ImageRgb8(rgb).write_with_encoder(encoder)?;
    let decoded = image::load_from_memory(&bytes)?;
    Ok((from_rgb8(&decoded.to_rgb8()), bytes))
}

/// Loads all PNG/JPEG files in a directory in lexicographic order.
pub fn read_frame_dir(dir: &Path) -> Result<ImageSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no image files found in {}",
            dir.display()
        )));
    }
    let frames = paths
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<Vec<_>>>()?;
    ImageSequence::new(frames)
}

/// Side-by-side concatenation used for preview panels.
pub fn hconcat(images: &[&Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("hconcat of zero images".into()));
    }
    let (c, h, _) = (
        images[0].shape()[0],
        images[0].shape()[1],
        images[0].shape()[2],
    );
    let total_w: usize = images.iter().map(|i| i.shape()[2]).sum();
    let mut out = Array3::zeros((c, h, total_w));
    let mut x0 = 0;
    for img in images {
        if img.shape()[0] != c || img.shape()[1] != h {
            return Err(Error::ShapeMismatch {
                context: "hconcat",
                expected: format!("[{c}, {h}, _]"),
                actual: format!("{:?}", img.shape()),
            });
        }
        let w = img.shape()[2];
        out.slice_mut(ndarray::s![.., .., x0..x0 + w]).assign(img);
        x0 += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip_preserves_quantized_values() {
        let mut img = Array3::zeros((3, 4, 5));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let back = from_rgb8(&to_rgb8(&img));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn sequence_rejects_mismatched_frames() {
        let a = Array3::zeros((3, 4, 4));
        let b = Array3::zeros((3, 4, 5));
        assert!(ImageSequence::new(vec![a, b]).is_err());
    }

    #[test]
    fn jpeg_roundtrip_is_deterministic() {
        let mut img = Array3::zeros((3, 16, 16));
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f64 / 255.0;
        }
        let (_, bytes1) = jpeg_roundtrip(&img, 80).unwrap();
        let (_, bytes2) = jpeg_roundtrip(&img, 80).unwrap();
        assert_eq!(bytes1, bytes2);
    }
}
