//! Model parameters and architecture configuration for the decomposition
//! pipeline.
//!
//! Three parameter sets exist: the initial flow decomposition network
//! (feature extractor, correlation trunk, and motion heads), and two
//! layer reconstruction branches. The branches share one architecture
//! but never share storage. In obstruction mode the second branch is
//! absent: the background network grows an extra output channel that is
//! squashed into the alpha map.

mod forward;

pub use forward::{
    cost_volume, forward_decompose, fuse_baseline, init_layers, initial_flow_decomposition,
    initial_flow_pass, reconstruct_level_once, DecompositionResult, ForwardOptions, ForwardPass,
    FusionMethod, InitFlowMode, LevelState, PairVars,
};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Which decomposition task the model solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Background + reflection layers, both with their own flows.
    Reflection,
    /// Background + alpha-matted obstruction (fence, raindrops); no
    /// obstruction flows are estimated.
    Obstruction,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::Reflection => "reflection",
            TaskMode::Obstruction => "obstruction",
        }
    }
}

/// Channel widths and the correlation search range. Layer counts are
/// fixed: 3 extractor convs, 6 trunk convs plus pooling and a fully
/// connected motion head, 5 group-extractor convs, 4 reconstruction
/// convs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Image channels (1 or 3).
    pub channels: usize,
    /// Flow feature extractor width.
    pub feat_width: usize,
    /// Width of the motion-head trunk.
    pub flow_width: usize,
    /// Width of the group extractor and reconstruction convs.
    pub recon_width: usize,
    /// Correlation search range in pixels at the coarsest level.
    pub cost_range: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            feat_width: 16,
            flow_width: 32,
            recon_width: 16,
            cost_range: 4,
        }
    }
}

pub const FEAT_CONVS: usize = 3;
pub const TRUNK_CONVS: usize = 6;
pub const EXTRACT_CONVS: usize = 5;
pub const RECON_CONVS: usize = 4;

impl NetConfig {
    /// A small configuration for smoke tests and CPU-bound runs.
    pub fn compact(channels: usize) -> Self {
        Self {
            channels,
            feat_width: 8,
            flow_width: 12,
            recon_width: 8,
            cost_range: 4,
        }
    }

    /// Number of correlation channels: one per displacement.
    pub fn cost_channels(&self) -> usize {
        let side = 2 * self.cost_range + 1;
        side * side
    }

    /// Motion-head output size: two 2-vectors in reflection mode
    /// (background + reflection), one in obstruction mode.
    pub fn motion_dims(&self, mode: TaskMode) -> usize {
        match mode {
            TaskMode::Reflection => 4,
            TaskMode::Obstruction => 2,
        }
    }

    /// Channels of one feature group: registered frame, difference map,
    /// visibility mask, upsampled background, upsampled second layer.
    pub fn group_channels(&self, mode: TaskMode) -> usize {
        let c = self.channels;
        match mode {
            TaskMode::Reflection => 4 * c + 1,
            TaskMode::Obstruction => 3 * c + 2,
        }
    }

    /// Reconstruction output channels: a residual image, plus the alpha
    /// logit in obstruction mode.
    pub fn recon_out(&self, mode: TaskMode) -> usize {
        match mode {
            TaskMode::Reflection => self.channels,
            TaskMode::Obstruction => self.channels + 1,
        }
    }
}

/// Named parameter arrays with deterministic ordering.
pub type ParamSet = BTreeMap<String, ArrayD<f64>>;

/// SHA-256 over the ordered names, shapes, and raw values of a set.
pub fn param_checksum(set: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in set {
        hasher.update(name.as_bytes());
        for d in value.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// All trainable state of the decomposition model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub mode: TaskMode,
    pub config: NetConfig,
    pub flow_decomp: ParamSet,
    pub recon_b: ParamSet,
    /// Reflection branch; empty in obstruction mode.
    pub recon_r: ParamSet,
}

/// Identifies the parameter sets a training stage is allowed to update.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainableSets {
    pub flow_decomp: bool,
    pub recon_b: bool,
    pub recon_r: bool,
}

impl TrainableSets {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn flow_only() -> Self {
        Self {
            flow_decomp: true,
            ..Self::default()
        }
    }

    pub fn recon_only() -> Self {
        Self {
            recon_b: true,
            recon_r: true,
            ..Self::default()
        }
    }
}

fn conv_spec(name: &str, co: usize, ci: usize, k: usize) -> (String, String, Vec<usize>, Vec<usize>) {
    (
        format!("{name}.w"),
        format!("{name}.b"),
        vec![co, ci, k, k],
        vec![co],
    )
}

/// `(weight key, bias key, weight shape, bias shape, zero-init)` for every
/// layer of the flow decomposition network.
fn flow_decomp_layout(cfg: &NetConfig, mode: TaskMode) -> Vec<(String, String, Vec<usize>, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut ci = cfg.channels;
    for i in 0..FEAT_CONVS {
        let (w, b, ws, bs) = conv_spec(&format!("feat.{i}"), cfg.feat_width, ci, 3);
        out.push((w, b, ws, bs, false));
        ci = cfg.feat_width;
    }
    let mut ti = cfg.cost_channels() + cfg.feat_width;
    for i in 0..TRUNK_CONVS {
        let (w, b, ws, bs) = conv_spec(&format!("trunk.{i}"), cfg.flow_width, ti, 3);
        out.push((w, b, ws, bs, false));
        ti = cfg.flow_width;
    }
    let dims = cfg.motion_dims(mode);
    // Zero-initialized heads start from zero motion.
    out.push((
        "fc.w".into(),
        "fc.b".into(),
        vec![dims, cfg.flow_width],
        vec![dims],
        true,
    ));
    let (w, b, ws, bs) = conv_spec("dense", dims, cfg.flow_width, 3);
    out.push((w, b, ws, bs, true));
    out
}

/// Layout of one reconstruction branch. `out_ch` differs between the
/// background branch (residual + optional alpha) and the reflection
/// branch (residual only).
fn recon_layout(cfg: &NetConfig, group_ch: usize, out_ch: usize) -> Vec<(String, String, Vec<usize>, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut ci = group_ch;
    for i in 0..EXTRACT_CONVS {
        let (w, b, ws, bs) = conv_spec(&format!("extract.{i}"), cfg.recon_width, ci, 3);
        out.push((w, b, ws, bs, false));
        ci = cfg.recon_width;
    }
    for i in 0..RECON_CONVS {
        let co = if i + 1 == RECON_CONVS {
            out_ch
        } else {
            cfg.recon_width
        };
        // The final conv is zero-initialized so reconstruction starts
        // from the upsampled previous level.
        let (w, b, ws, bs) = conv_spec(&format!("recon.{i}"), co, ci, 3);
        out.push((w, b, ws, bs, i + 1 == RECON_CONVS));
        ci = cfg.recon_width;
    }
    out
}

fn init_set(
    layout: &[(String, String, Vec<usize>, Vec<usize>, bool)],
    rng: &mut ChaCha20Rng,
) -> ParamSet {
    let mut set = ParamSet::new();
    for (wkey, bkey, wshape, bshape, zero) in layout {
        let weight = if *zero {
            ArrayD::zeros(IxDyn(wshape))
        } else {
            let fan_in: usize = wshape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_fn(IxDyn(wshape), |_| dist.sample(rng))
        };
        set.insert(wkey.clone(), weight);
        set.insert(bkey.clone(), ArrayD::zeros(IxDyn(bshape)));
    }
    set
}

impl ModelParams {
    /// Randomly initializes all parameter sets. Heads that predict
    /// motions or residuals start at zero.
    pub fn init(mode: TaskMode, config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let flow_decomp = init_set(&flow_decomp_layout(&config, mode), &mut rng);
        let group_ch = config.group_channels(mode);
        let recon_b = init_set(&recon_layout(&config, group_ch, config.recon_out(mode)), &mut rng);
        let recon_r = match mode {
            TaskMode::Reflection => {
                init_set(&recon_layout(&config, group_ch, config.channels), &mut rng)
            }
            TaskMode::Obstruction => ParamSet::new(),
        };
        Self {
            mode,
            config,
            flow_decomp,
            recon_b,
            recon_r,
        }
    }

    /// Hash of everything that determines parameter shapes. Checkpoints
    /// are loadable only into a model with the same hash.
    pub fn arch_hash(&self) -> String {
        arch_hash(self.mode, &self.config)
    }

    pub fn set(&self, which: ParamSetId) -> &ParamSet {
        match which {
            ParamSetId::FlowDecomp => &self.flow_decomp,
            ParamSetId::ReconB => &self.recon_b,
            ParamSetId::ReconR => &self.recon_r,
        }
    }

    pub fn set_mut(&mut self, which: ParamSetId) -> &mut ParamSet {
        match which {
            ParamSetId::FlowDecomp => &mut self.flow_decomp,
            ParamSetId::ReconB => &mut self.recon_b,
            ParamSetId::ReconR => &mut self.recon_r,
        }
    }
}

pub fn arch_hash(mode: TaskMode, config: &NetConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(mode.as_str().as_bytes());
    hasher.update(
        serde_json::to_vec(config).expect("NetConfig serializes"),
    );
    hasher.update(
        [FEAT_CONVS, TRUNK_CONVS, EXTRACT_CONVS, RECON_CONVS].map(|v| v as u8),
    );
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSetId {
    FlowDecomp,
    ReconB,
    ReconR,
}

impl ParamSetId {
    pub fn prefix(&self) -> &'static str {
        match self {
            ParamSetId::FlowDecomp => "flow_decomp",
            ParamSetId::ReconB => "recon_b",
            ParamSetId::ReconR => "recon_r",
        }
    }

    pub fn all() -> [ParamSetId; 3] {
        [ParamSetId::FlowDecomp, ParamSetId::ReconB, ParamSetId::ReconR]
    }
}

/// A conv layer bound into a graph.
#[derive(Clone, Copy)]
pub(crate) struct ConvVars {
    pub w: Var,
    pub b: Var,
}

pub(crate) struct FlowNetVars {
    pub feat: Vec<ConvVars>,
    pub trunk: Vec<ConvVars>,
    pub fc: ConvVars,
    pub dense: ConvVars,
}

pub(crate) struct ReconVars {
    pub extract: Vec<ConvVars>,
    pub recon: Vec<ConvVars>,
}

pub(crate) struct BoundModel {
    pub flow: FlowNetVars,
    pub recon_b: ReconVars,
    pub recon_r: Option<ReconVars>,
}

fn bind_conv(graph: &mut Graph, set: &ParamSet, prefix: &str, name: &str, trainable: bool) -> Result<ConvVars> {
    let get = |suffix: &str| -> Result<ArrayD<f64>> {
        set.get(&format!("{name}.{suffix}"))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}.{name}.{suffix}")))
    };
    Ok(ConvVars {
        w: graph.param(&format!("{prefix}.{name}.w"), get("w")?, trainable),
        b: graph.param(&format!("{prefix}.{name}.b"), get("b")?, trainable),
    })
}

/// Inserts every parameter of `params` into `graph` as leaves, marking
/// sets trainable per `trainable`.
pub(crate) fn bind_model(
    graph: &mut Graph,
    params: &ModelParams,
    trainable: TrainableSets,
) -> Result<BoundModel> {
    let fp = ParamSetId::FlowDecomp.prefix();
    let flow_train = trainable.flow_decomp && !graph.is_inference();
    let feat = (0..FEAT_CONVS)
        .map(|i| bind_conv(graph, &params.flow_decomp, fp, &format!("feat.{i}"), flow_train))
        .collect::<Result<Vec<_>>>()?;
    let trunk = (0..TRUNK_CONVS)
        .map(|i| bind_conv(graph, &params.flow_decomp, fp, &format!("trunk.{i}"), flow_train))
        .collect::<Result<Vec<_>>>()?;
    let fc = bind_conv(graph, &params.flow_decomp, fp, "fc", flow_train)?;
    let dense = bind_conv(graph, &params.flow_decomp, fp, "dense", flow_train)?;

    let bind_recon = |graph: &mut Graph, set: &ParamSet, id: ParamSetId, train: bool| -> Result<ReconVars> {
        let train = train && !graph.is_inference();
        Ok(ReconVars {
            extract: (0..EXTRACT_CONVS)
                .map(|i| bind_conv(graph, set, id.prefix(), &format!("extract.{i}"), train))
                .collect::<Result<Vec<_>>>()?,
            recon: (0..RECON_CONVS)
                .map(|i| bind_conv(graph, set, id.prefix(), &format!("recon.{i}"), train))
                .collect::<Result<Vec<_>>>()?,
        })
    };

    let recon_b = bind_recon(graph, &params.recon_b, ParamSetId::ReconB, trainable.recon_b)?;
    let recon_r = match params.mode {
        TaskMode::Reflection => Some(bind_recon(
            graph,
            &params.recon_r,
            ParamSetId::ReconR,
            trainable.recon_r,
        )?),
        TaskMode::Obstruction => None,
    };
    Ok(BoundModel {
        flow: FlowNetVars {
            feat,
            trunk,
            fc,
            dense,
        },
        recon_b,
        recon_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches_never_share_storage() {
        let p = ModelParams::init(TaskMode::Reflection, NetConfig::compact(3), 7);
        assert_eq!(p.recon_b.len(), p.recon_r.len());
        // Same keys, different values: independently initialized.
        let same_keys = p
            .recon_b
            .keys()
            .zip(p.recon_r.keys())
            .all(|(a, b)| a == b);
        assert!(same_keys);
        let identical = p
            .recon_b
            .iter()
            .zip(p.recon_r.iter())
            .all(|((_, a), (_, b))| a == b);
        assert!(!identical);
    }

    #[test]
    fn obstruction_mode_has_no_reflection_branch() {
        let p = ModelParams::init(TaskMode::Obstruction, NetConfig::compact(3), 7);
        assert!(p.recon_r.is_empty());
        // Output conv carries the extra alpha channel.
        let last = p.recon_b.get(&format!("recon.{}.w", RECON_CONVS - 1)).unwrap();
        assert_eq!(last.shape()[0], 4);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 3);
        let b = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 3);
        assert_eq!(param_checksum(&a.flow_decomp), param_checksum(&b.flow_decomp));
        assert_eq!(param_checksum(&a.recon_b), param_checksum(&b.recon_b));
        let c = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 4);
        assert_ne!(param_checksum(&c.recon_b), param_checksum(&a.recon_b));
    }

    #[test]
    fn arch_hash_tracks_shape_changes() {
        let a = arch_hash(TaskMode::Reflection, &NetConfig::default());
        let b = arch_hash(TaskMode::Obstruction, &NetConfig::default());
        let c = arch_hash(TaskMode::Reflection, &NetConfig::compact(3));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, arch_hash(TaskMode::Reflection, &NetConfig::default()));
    }
}
