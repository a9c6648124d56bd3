//! Pluggable dense optical-flow estimation and pseudo-ground-truth
//! flow generation.
//!
//! Flow convention: `estimate(a, b)` returns a field on `a`'s pixel grid
//! where `a(p)` corresponds to `b(p + flow(p))`, so backward-warping `b`
//! by the result reproduces `a`'s view.
//!
//! The reference backend wraps a pretrained flow network through an
//! external process and is never updated by any training stage. The
//! translation-search backend serves as a self-contained estimator (and
//! test oracle) for sequences whose per-layer motion is near-uniform,
//! which is exactly the regime the uniform-flow initialization assumes.

pub mod flo;

use std::path::PathBuf;
use std::process::Command;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::downsample_half;
use crate::image::{spatial, FlowField, Image, ImageSequence};

/// Environment variable naming the pretrained flow network weights.
pub const FLOW_WEIGHTS_ENV: &str = "FLOW_WEIGHTS";

pub trait FlowBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Dense flow from `a` to `b`; output matches the input spatial size.
    fn estimate(&self, a: &Image, b: &Image) -> Result<FlowField>;

    /// Digest of the backend's parameters. Training stages assert this
    /// never changes.
    fn checksum(&self) -> String;
}

fn check_same_size(a: &Image, b: &Image, backend: &str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "flow estimate",
            expected: format!("{:?}", a.shape()),
            actual: format!("{backend}: {:?}", b.shape()),
        });
    }
    Ok(spatial(a))
}

/// Exhaustive integer-translation search minimizing the mean absolute
/// difference over the overlapping region. Returns a constant field.
#[derive(Debug, Clone)]
pub struct TranslationSearch {
    pub range: isize,
}

impl TranslationSearch {
    pub fn new(range: usize) -> Self {
        Self {
            range: range as isize,
        }
    }
}

impl Default for TranslationSearch {
    fn default() -> Self {
        Self::new(8)
    }
}

impl FlowBackend for TranslationSearch {
    fn name(&self) -> &str {
        "translation-search"
    }

    fn estimate(&self, a: &Image, b: &Image) -> Result<FlowField> {
        let (h, w) = check_same_size(a, b, self.name())?;
        let c = a.shape()[0];
        let mut best = (0isize, 0isize);
        let mut best_cost = f64::INFINITY;
        for dv in -self.range..=self.range {
            for du in -self.range..=self.range {
                // a(p) vs b(p + d) over the valid overlap.
                let y0 = (-dv).max(0) as usize;
                let y1 = (h as isize - dv.max(0)) as usize;
                let x0 = (-du).max(0) as usize;
                let x1 = (w as isize - du.max(0)) as usize;
                if y0 >= y1 || x0 >= x1 {
                    continue;
                }
                let mut cost = 0.0;
                for ch in 0..c {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let sy = (y as isize + dv) as usize;
                            let sx = (x as isize + du) as usize;
                            cost += (a[[ch, y, x]] - b[[ch, sy, sx]]).abs();
                        }
                    }
                }
                cost /= ((y1 - y0) * (x1 - x0) * c) as f64;
                // Deterministic tie-break: keep the smaller displacement.
                let better = cost < best_cost - 1e-12
                    || (cost < best_cost + 1e-12
                        && du * du + dv * dv < best.0 * best.0 + best.1 * best.1);
                if better {
                    best_cost = cost;
                    best = (du, dv);
                }
            }
        }
        Ok(crate::geom::constant_flow(h, w, best.0 as f64, best.1 as f64))
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"translation-search");
        hasher.update(self.range.to_le_bytes());
        hex(&hasher.finalize())
    }
}

/// Returns a fixed registered shift for every input pair. Test plumbing
/// for cases that need exact control over the estimated motion.
#[derive(Debug, Clone)]
pub struct ConstantShift {
    pub u: f64,
    pub v: f64,
}

impl FlowBackend for ConstantShift {
    fn name(&self) -> &str {
        "constant-shift"
    }

    fn estimate(&self, a: &Image, b: &Image) -> Result<FlowField> {
        let (h, w) = check_same_size(a, b, self.name())?;
        Ok(crate::geom::constant_flow(h, w, self.u, self.v))
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"constant-shift");
        hasher.update(self.u.to_le_bytes());
        hasher.update(self.v.to_le_bytes());
        hex(&hasher.finalize())
    }
}

/// Wraps a pretrained flow network run as an external process. The
/// command is invoked as `cmd <weights> <a.png> <b.png> <out.flo>` and
/// must write a Middlebury flow file.
#[derive(Debug)]
pub struct ExternalProcess {
    weights: PathBuf,
    command: Vec<String>,
}

impl ExternalProcess {
    /// Builds the backend from the `FLOW_WEIGHTS` environment variable
    /// and an explicit command line.
    pub fn from_env(command: Vec<String>) -> Result<Self> {
        let path = std::env::var(FLOW_WEIGHTS_ENV).map_err(|_| Error::WeightsUnavailable {
            path: PathBuf::from(format!("${FLOW_WEIGHTS_ENV}")),
            message: format!("{FLOW_WEIGHTS_ENV} is not set"),
        })?;
        Self::new(PathBuf::from(path), command)
    }

    pub fn new(weights: PathBuf, command: Vec<String>) -> Result<Self> {
        if !weights.is_file() {
            return Err(Error::WeightsUnavailable {
                path: weights,
                message: "weight file does not exist".into(),
            });
        }
        if command.is_empty() {
            return Err(Error::InvalidArgument("empty flow command".into()));
        }
        Ok(Self { weights, command })
    }
}

impl FlowBackend for ExternalProcess {
    fn name(&self) -> &str {
        "external-process"
    }

    fn estimate(&self, a: &Image, b: &Image) -> Result<FlowField> {
        check_same_size(a, b, self.name())?;
        let dir = tempfile_dir()?;
        let pa = dir.join("a.png");
        let pb = dir.join("b.png");
        let pf = dir.join("out.flo");
        crate::image::write_png(&pa, a)?;
        crate::image::write_png(&pb, b)?;
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&self.weights)
            .arg(&pa)
            .arg(&pb)
            .arg(&pf)
            .status()
            .map_err(|e| Error::Backend {
                backend: self.name().into(),
                message: format!("failed to spawn `{}`: {e}", self.command[0]),
            })?;
        if !status.success() {
            return Err(Error::Backend {
                backend: self.name().into(),
                message: format!("command exited with {status}"),
            });
        }
        let flow = flo::read_flo(&pf)?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok(flow)
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        match std::fs::read(&self.weights) {
            Ok(bytes) => hasher.update(&bytes),
            Err(_) => hasher.update(b"unreadable"),
        }
        hex(&hasher.finalize())
    }
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("unveil-flow-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Flow fields for every ordered frame pair `(src, dst)`, `src != dst`.
#[derive(Debug, Clone)]
pub struct PairFlows {
    num_frames: usize,
    fields: Vec<FlowField>,
}

impl PairFlows {
    pub fn new(num_frames: usize, h: usize, w: usize) -> Self {
        let fields = vec![
            ndarray::Array3::zeros((2, h, w));
            num_frames * num_frames.saturating_sub(1)
        ];
        Self { num_frames, fields }
    }

    fn index(&self, src: usize, dst: usize) -> usize {
        assert!(src != dst && src < self.num_frames && dst < self.num_frames);
        src * (self.num_frames - 1) + if dst < src { dst } else { dst - 1 }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn get(&self, src: usize, dst: usize) -> &FlowField {
        &self.fields[self.index(src, dst)]
    }

    pub fn set(&mut self, src: usize, dst: usize, flow: FlowField) {
        let i = self.index(src, dst);
        self.fields[i] = flow;
    }

    /// Ordered pairs `(src, dst)` with `src != dst`.
    pub fn pairs(num_frames: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(num_frames * num_frames.saturating_sub(1));
        for src in 0..num_frames {
            for dst in 0..num_frames {
                if src != dst {
                    out.push((src, dst));
                }
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &FlowField)> {
        Self::pairs(self.num_frames)
            .into_iter()
            .map(move |(s, d)| ((s, d), self.get(s, d)))
    }
}

/// Pseudo-ground-truth flows: per ordered pair and per layer, the backend
/// flow between ground-truth layers downsampled `2^levels` times with the
/// displacement values divided by `2^levels`.
#[derive(Debug, Clone)]
pub struct PseudoGtFlows {
    pub background: PairFlows,
    pub obstruction: Option<PairFlows>,
}

fn layer_pair_flows(
    backend: &dyn FlowBackend,
    frames: &ImageSequence,
    levels: usize,
) -> Result<PairFlows> {
    let t = frames.len();
    let (h, w) = frames.spatial();
    let factor = 1usize << levels;
    let mut out = PairFlows::new(t, h >> levels, w >> levels);
    for (src, dst) in PairFlows::pairs(t) {
        let mut flow = backend.estimate(frames.frame(src), frames.frame(dst))?;
        for _ in 0..levels {
            flow = downsample_half(&flow);
        }
        flow.mapv_inplace(|v| v / factor as f64);
        out.set(src, dst, flow);
    }
    Ok(out)
}

/// Computes pseudo-ground-truth flows on ground-truth layer sequences.
/// `gt_obstruction` is `None` for the fence/raindrop task where no
/// obstruction flow is supervised.
pub fn pseudo_gt_layer_flows(
    backend: &dyn FlowBackend,
    gt_background: &ImageSequence,
    gt_obstruction: Option<&ImageSequence>,
    levels: usize,
) -> Result<PseudoGtFlows> {
    if let Some(gt_r) = gt_obstruction {
        if gt_r.len() != gt_background.len() || gt_r.spatial() != gt_background.spatial() {
            return Err(Error::ShapeMismatch {
                context: "pseudo gt flows",
                expected: format!(
                    "{} frames at {:?}",
                    gt_background.len(),
                    gt_background.spatial()
                ),
                actual: format!("{} frames at {:?}", gt_r.len(), gt_r.spatial()),
            });
        }
    }
    Ok(PseudoGtFlows {
        background: layer_pair_flows(backend, gt_background, levels)?,
        obstruction: gt_obstruction
            .map(|gt| layer_pair_flows(backend, gt, levels))
            .transpose()?,
    })
}
