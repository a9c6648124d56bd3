//! The coarse-to-fine decomposition forward pass.
//!
//! Level 0 tiles per-pair global motion vectors into uniform flow fields
//! and initializes each layer as the average of the correspondingly
//! registered frames. Every finer level registers the input frames with
//! the upsampled previous flows, extracts features from per-frame groups
//! with shared weights, collapses the groups with an elementwise max,
//! and adds a predicted residual to the upsampled previous layer. After
//! reconstructing all frames at a level, the dense-flow backend
//! re-estimates per-pair flows between the reconstructed layers.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowBackend, PairFlows};
use crate::geom::{build_pyramid, resize_flow, visibility_mask, warp_bilinear};
use crate::image::{spatial, FlowField, Image, ImageSequence};

use super::{bind_model, BoundModel, ModelParams, NetConfig, ReconVars, TaskMode, TrainableSets};

const LEAKY_SLOPE: f64 = 0.1;

/// How the coarsest-level flows are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFlowMode {
    /// Global motion vectors tiled into uniform fields.
    #[default]
    Uniform,
    /// All-zero initial flows.
    Zero,
    /// Spatially varying fields from a dense prediction head.
    Dense,
}

/// Per-pixel fusion baselines that replace the reconstruction network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Mean,
    Median,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Number of pyramid halvings; the pyramid has `levels + 1` scales.
    pub levels: usize,
    pub init_mode: InitFlowMode,
    pub trainable: TrainableSets,
    /// Release intermediate buffers and disable backward.
    pub inference: bool,
}

impl ForwardOptions {
    pub fn inference(levels: usize) -> Self {
        Self {
            levels,
            init_mode: InitFlowMode::Uniform,
            trainable: TrainableSets::none(),
            inference: true,
        }
    }

    pub fn training(levels: usize, trainable: TrainableSets) -> Self {
        Self {
            levels,
            init_mode: InitFlowMode::Uniform,
            trainable,
            inference: false,
        }
    }
}

/// Graph handles for every ordered frame pair.
#[derive(Debug, Clone)]
pub struct PairVars {
    num_frames: usize,
    vars: Vec<Var>,
}

impl PairVars {
    pub(crate) fn from_vec(num_frames: usize, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), num_frames * (num_frames - 1));
        Self { num_frames, vars }
    }

    pub fn get(&self, src: usize, dst: usize) -> Var {
        assert!(src != dst && src < self.num_frames && dst < self.num_frames);
        self.vars[src * (self.num_frames - 1) + if dst < src { dst } else { dst - 1 }]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Var)> + '_ {
        PairFlows::pairs(self.num_frames)
            .into_iter()
            .map(move |(s, d)| ((s, d), self.get(s, d)))
    }
}

/// Per-level reconstruction state for all frames.
pub struct LevelState {
    /// Background layer per frame.
    pub background: Vec<Var>,
    /// Reflection layer (reflection mode) or alpha map (obstruction
    /// mode) per frame.
    pub secondary: Vec<Var>,
    /// Per-pair background flows refined at this level.
    pub flows_background: PairFlows,
    /// Reflection flows, or foreground flows in obstruction mode.
    pub flows_secondary: Option<PairFlows>,
}

pub struct DecompositionResult {
    pub mode: TaskMode,
    pub keyframe: usize,
    /// Index 0 is the coarsest level.
    pub levels: Vec<LevelState>,
}

/// A completed forward pass: the tape plus the per-level results and the
/// frame pyramids the losses need.
pub struct ForwardPass {
    pub graph: Graph,
    pub result: DecompositionResult,
    /// `pyramids[t][l]` is frame `t` at level `l` (coarsest first).
    pub pyramids: Vec<Vec<Image>>,
    /// Initial per-pair flow predictions at the coarsest level, kept as
    /// graph handles so the decomposition loss can train through them.
    pub initial_background: PairVars,
    pub initial_secondary: Option<PairVars>,
}

impl ForwardPass {
    fn image_of(&self, v: Var) -> Image {
        self.graph
            .value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("layer values are [C, H, W]")
    }

    pub fn background_image(&self, level: usize, frame: usize) -> Image {
        self.image_of(self.result.levels[level].background[frame])
    }

    pub fn secondary_image(&self, level: usize, frame: usize) -> Image {
        self.image_of(self.result.levels[level].secondary[frame])
    }

    /// Full-resolution background of the keyframe.
    pub fn final_background(&self) -> Image {
        self.background_image(self.result.levels.len() - 1, self.result.keyframe)
    }

    /// Full-resolution reflection layer or alpha map of the keyframe.
    pub fn final_secondary(&self) -> Image {
        self.secondary_image(self.result.levels.len() - 1, self.result.keyframe)
    }
}

/// Correlation cost volume between two feature maps: for each pixel and
/// displacement `d` with `|d|_inf <= range`, the feature dot product of
/// `a` at `x` with `b` at `x + d`; out-of-bounds partners are zero. The
/// output has `(2 * range + 1)^2` displacement channels.
pub fn cost_volume(a: &Image, b: &Image, range: usize) -> Result<Array3<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "cost_volume",
            expected: format!("{:?}", a.shape()),
            actual: format!("{:?}", b.shape()),
        });
    }
    let out = crate::autodiff::cost_volume_forward(
        &a.clone().into_dyn(),
        &b.clone().into_dyn(),
        range,
    );
    Ok(out
        .into_dimensionality::<ndarray::Ix3>()
        .expect("cost volume is [D, H, W]"))
}

fn conv_stack(g: &mut Graph, layers: &[super::ConvVars], input: Var, activate_last: bool) -> Var {
    let mut x = input;
    for (i, cv) in layers.iter().enumerate() {
        x = g.conv2d(x, cv.w, cv.b);
        if activate_last || i + 1 < layers.len() {
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

fn feature_extractor(g: &mut Graph, bound: &BoundModel, frame: Var) -> Var {
    conv_stack(g, &bound.flow.feat, frame, false)
}

/// Initial flow prediction for all ordered pairs at the coarsest level.
fn initial_pair_flows(
    g: &mut Graph,
    bound: &BoundModel,
    coarse: &[Image],
    mode: TaskMode,
    cfg: &NetConfig,
    init_mode: InitFlowMode,
) -> (PairVars, Option<PairVars>) {
    let t = coarse.len();
    let (h, w) = spatial(&coarse[0]);
    let mut background = Vec::new();
    let mut secondary = Vec::new();

    if init_mode == InitFlowMode::Zero {
        for _ in PairFlows::pairs(t) {
            let z = g.constant(ArrayD::zeros(IxDyn(&[2, h, w])));
            background.push(z);
            if mode == TaskMode::Reflection {
                secondary.push(g.constant(ArrayD::zeros(IxDyn(&[2, h, w]))));
            }
        }
    } else {
        let features: Vec<Var> = coarse
            .iter()
            .map(|f| {
                let c = g.constant(f.clone().into_dyn());
                feature_extractor(g, bound, c)
            })
            .collect();
        for (src, dst) in PairFlows::pairs(t) {
            let cv = g.cost_volume(features[src], features[dst], cfg.cost_range);
            let cat = g.concat_channels(&[cv, features[src]]);
            let trunk = conv_stack(g, &bound.flow.trunk, cat, true);
            match init_mode {
                InitFlowMode::Uniform => {
                    let pooled = g.gap(trunk);
                    let motion = g.linear(pooled, bound.flow.fc.w, bound.flow.fc.b);
                    background.push(g.tile2(motion, 0, h, w));
                    if mode == TaskMode::Reflection {
                        secondary.push(g.tile2(motion, 2, h, w));
                    }
                }
                InitFlowMode::Dense => {
                    let field = g.conv2d(trunk, bound.flow.dense.w, bound.flow.dense.b);
                    background.push(g.slice_channels(field, 0, 2));
                    if mode == TaskMode::Reflection {
                        secondary.push(g.slice_channels(field, 2, 2));
                    }
                }
                InitFlowMode::Zero => unreachable!(),
            }
        }
    }
    let background = PairVars::from_vec(t, background);
    let secondary = match mode {
        TaskMode::Reflection => Some(PairVars::from_vec(t, secondary)),
        TaskMode::Obstruction => None,
    };
    (background, secondary)
}

fn pair_values(g: &Graph, vars: &PairVars, h: usize, w: usize) -> PairFlows {
    let t = vars.num_frames;
    let mut out = PairFlows::new(t, h, w);
    for ((src, dst), v) in vars.iter() {
        let field = g
            .value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("flow field is [2, H, W]");
        out.set(src, dst, field);
    }
    out
}

/// Average of the correspondingly registered frames: the coarsest-level
/// layer estimate. The keyframe itself enters with zero flow.
pub fn init_layers(frames_coarse: &[Image], flows: &PairFlows, keyframe: usize) -> Result<Image> {
    let t = frames_coarse.len();
    let mut acc: Image = Array3::zeros(frames_coarse[0].raw_dim());
    for (j, frame) in frames_coarse.iter().enumerate() {
        let warped = if j == keyframe {
            frame.clone()
        } else {
            warp_bilinear(frame, flows.get(keyframe, j))?
        };
        acc += &warped;
    }
    acc.mapv_inplace(|v| v / t as f64);
    Ok(acc)
}

/// The five per-frame feature maps of one group, concatenated:
/// registered frame, difference to the keyframe, visibility mask,
/// upsampled background, upsampled second layer.
fn build_group(
    g: &mut Graph,
    frames_level: &[Image],
    keyframe: usize,
    j: usize,
    flow_up: &FlowField,
    up_b: Var,
    up_sec: Var,
) -> Result<Var> {
    let registered = warp_bilinear(&frames_level[j], flow_up)?;
    let mut diff = &registered - &frames_level[keyframe];
    diff.mapv_inplace(f64::abs);
    let mask = visibility_mask(flow_up);
    let (h, w) = spatial(&frames_level[j]);
    let mask3 = mask.into_shape_with_order((1, h, w)).expect("mask reshape");

    let reg_c = g.constant(registered.into_dyn());
    let diff_c = g.constant(diff.into_dyn());
    let mask_c = g.constant(mask3.into_dyn());
    Ok(g.concat_channels(&[reg_c, diff_c, mask_c, up_b, up_sec]))
}

/// Shared-weight feature extraction per group followed by max fusion
/// and the residual reconstruction trunk. Returns the raw network
/// output (residual channels, plus the alpha logit in obstruction mode).
fn fuse_and_reconstruct(g: &mut Graph, branch: &ReconVars, groups: &[Var]) -> Var {
    let feats: Vec<Var> = groups
        .iter()
        .map(|&grp| conv_stack(g, &branch.extract, grp, true))
        .collect();
    let fused = g.max_stack(&feats);
    conv_stack(g, &branch.recon, fused, false)
}

struct BranchLevel {
    background: Var,
    secondary: Var,
}

/// Reconstructs one keyframe at one level given the previous-level
/// layers and flows.
#[allow(clippy::too_many_arguments)]
fn reconstruct_keyframe_level(
    g: &mut Graph,
    bound: &BoundModel,
    mode: TaskMode,
    channels: usize,
    frames_level: &[Image],
    keyframe: usize,
    prev_background: Var,
    prev_secondary: Var,
    flows_b_prev: &PairFlows,
    flows_r_prev: Option<&PairFlows>,
) -> Result<BranchLevel> {
    let (h, w) = spatial(&frames_level[0]);
    let up_b = g.resize(prev_background, h, w);
    let up_sec = g.resize(prev_secondary, h, w);

    let groups_for =
        |g: &mut Graph, flows_prev: &PairFlows| -> Result<Vec<Var>> {
            let mut groups = Vec::new();
            for j in 0..frames_level.len() {
                if j == keyframe {
                    continue;
                }
                let flow_up = resize_flow(flows_prev.get(keyframe, j), h, w);
                groups.push(build_group(
                    g,
                    frames_level,
                    keyframe,
                    j,
                    &flow_up,
                    up_b,
                    up_sec,
                )?);
            }
            Ok(groups)
        };

    match mode {
        TaskMode::Reflection => {
            let groups_b = groups_for(g, flows_b_prev)?;
            let out_b = fuse_and_reconstruct(g, &bound.recon_b, &groups_b);
            let background = g.add(out_b, up_b);

            let flows_r = flows_r_prev.expect("reflection mode carries reflection flows");
            let groups_r = groups_for(g, flows_r)?;
            let branch_r = bound.recon_r.as_ref().expect("reflection branch bound");
            let out_r = fuse_and_reconstruct(g, branch_r, &groups_r);
            let secondary = g.add(out_r, up_sec);
            Ok(BranchLevel {
                background,
                secondary,
            })
        }
        TaskMode::Obstruction => {
            let groups = groups_for(g, flows_b_prev)?;
            let out = fuse_and_reconstruct(g, &bound.recon_b, &groups);
            let residual = g.slice_channels(out, 0, channels);
            let logit = g.slice_channels(out, channels, 1);
            let background = g.add(residual, up_b);
            let secondary = g.sigmoid(logit);
            Ok(BranchLevel {
                background,
                secondary,
            })
        }
    }
}

/// Per-pixel multiply of an image by a 1-channel alpha map.
fn apply_alpha(frame: &Image, alpha: &Image) -> Image {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| frame[[ch, y, x]] * alpha[[0, y, x]])
}

fn estimate_pairs(
    backend: &dyn FlowBackend,
    layers: &[Image],
) -> Result<PairFlows> {
    let t = layers.len();
    let (h, w) = spatial(&layers[0]);
    let mut flows = PairFlows::new(t, h, w);
    for (src, dst) in PairFlows::pairs(t) {
        flows.set(src, dst, backend.estimate(&layers[src], &layers[dst])?);
    }
    Ok(flows)
}

/// Runs the full coarse-to-fine decomposition. Layers are reconstructed
/// for every frame at every level (the flow refinement needs them); the
/// `keyframe` selects which frame the final outputs describe.
pub fn forward_decompose(
    params: &ModelParams,
    frames: &ImageSequence,
    keyframe: usize,
    backend: &dyn FlowBackend,
    opts: &ForwardOptions,
) -> Result<ForwardPass> {
    let t = frames.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "decomposition needs at least 2 frames, got {t}"
        )));
    }
    if keyframe >= t {
        return Err(Error::InvalidArgument(format!(
            "keyframe {keyframe} out of range for {t} frames"
        )));
    }
    if frames.channels() != params.config.channels {
        return Err(Error::ShapeMismatch {
            context: "forward_decompose",
            expected: format!("{} channels", params.config.channels),
            actual: format!("{} channels", frames.channels()),
        });
    }
    let levels = opts.levels;
    let mode = params.mode;
    let channels = params.config.channels;

    let pyramids: Vec<Vec<Image>> = frames
        .frames()
        .iter()
        .map(|f| build_pyramid(f, levels))
        .collect::<Result<Vec<_>>>()?;

    let mut graph = if opts.inference {
        Graph::new_inference()
    } else {
        Graph::new()
    };
    let bound = bind_model(&mut graph, params, opts.trainable)?;

    // Level 0: uniform flows and registered-average layers.
    let coarse: Vec<Image> = pyramids.iter().map(|p| p[0].clone()).collect();
    let (h0, w0) = spatial(&coarse[0]);
    let (init_b, init_sec) = initial_pair_flows(
        &mut graph,
        &bound,
        &coarse,
        mode,
        &params.config,
        opts.init_mode,
    );
    let flows0_b = pair_values(&graph, &init_b, h0, w0);
    let flows0_sec = init_sec.as_ref().map(|s| pair_values(&graph, s, h0, w0));

    let mut level0_b = Vec::with_capacity(t);
    let mut level0_sec = Vec::with_capacity(t);
    for k in 0..t {
        let b0 = init_layers(&coarse, &flows0_b, k)?;
        level0_b.push(graph.constant(b0.into_dyn()));
        let sec0 = match mode {
            TaskMode::Reflection => init_layers(
                &coarse,
                flows0_sec.as_ref().expect("reflection flows"),
                k,
            )?,
            TaskMode::Obstruction => Array3::from_elem((1, h0, w0), 0.5),
        };
        level0_sec.push(graph.constant(sec0.into_dyn()));
    }
    let flows_secondary0 = match mode {
        TaskMode::Reflection => flows0_sec.clone(),
        TaskMode::Obstruction => {
            // Foreground flows on I * alpha; alpha is 0.5 everywhere at
            // this level.
            let fg: Vec<Image> = (0..t)
                .map(|k| {
                    let alpha = Array3::from_elem((1, h0, w0), 0.5);
                    apply_alpha(&coarse[k], &alpha)
                })
                .collect();
            Some(estimate_pairs(backend, &fg)?)
        }
    };

    let mut result = DecompositionResult {
        mode,
        keyframe,
        levels: vec![LevelState {
            background: level0_b,
            secondary: level0_sec,
            flows_background: flows0_b,
            flows_secondary: flows_secondary0,
        }],
    };

    // Finer levels: register, reconstruct, then refine flows.
    for l in 1..=levels {
        let frames_level: Vec<Image> = pyramids.iter().map(|p| p[l].clone()).collect();
        let mut level_b = Vec::with_capacity(t);
        let mut level_sec = Vec::with_capacity(t);
        {
            let prev = &result.levels[l - 1];
            for k in 0..t {
                let out = reconstruct_keyframe_level(
                    &mut graph,
                    &bound,
                    mode,
                    channels,
                    &frames_level,
                    k,
                    prev.background[k],
                    prev.secondary[k],
                    &prev.flows_background,
                    prev.flows_secondary.as_ref().filter(|_| mode == TaskMode::Reflection),
                )?;
                level_b.push(out.background);
                level_sec.push(out.secondary);
                if opts.inference {
                    let mut live: Vec<Var> = Vec::new();
                    for state in &result.levels {
                        live.extend(state.background.iter().copied());
                        live.extend(state.secondary.iter().copied());
                    }
                    live.extend(level_b.iter().copied());
                    live.extend(level_sec.iter().copied());
                    graph.release_except(&live);
                }
            }
        }

        let b_values: Vec<Image> = level_b
            .iter()
            .map(|&v| {
                graph
                    .value(v)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
            })
            .collect();
        let flows_background = estimate_pairs(backend, &b_values)?;
        let flows_secondary = match mode {
            TaskMode::Reflection => {
                let r_values: Vec<Image> = level_sec
                    .iter()
                    .map(|&v| {
                        graph
                            .value(v)
                            .clone()
                            .into_dimensionality::<ndarray::Ix3>()
                            .unwrap()
                    })
                    .collect();
                Some(estimate_pairs(backend, &r_values)?)
            }
            TaskMode::Obstruction => {
                let fg: Vec<Image> = (0..t)
                    .map(|k| {
                        let alpha = graph
                            .value(level_sec[k])
                            .clone()
                            .into_dimensionality::<ndarray::Ix3>()
                            .unwrap();
                        apply_alpha(&frames_level[k], &alpha)
                    })
                    .collect();
                Some(estimate_pairs(backend, &fg)?)
            }
        };

        result.levels.push(LevelState {
            background: level_b,
            secondary: level_sec,
            flows_background,
            flows_secondary,
        });
    }

    Ok(ForwardPass {
        graph,
        result,
        pyramids,
        initial_background: init_b,
        initial_secondary: init_sec,
    })
}

/// A pass holding only the coarsest level: initial flow prediction and
/// registered-average layers, with no reconstruction and no backend
/// calls. Stage-1 training differentiates the decomposition loss
/// through this.
pub fn initial_flow_pass(
    params: &ModelParams,
    frames: &ImageSequence,
    levels: usize,
    init_mode: InitFlowMode,
    trainable: TrainableSets,
) -> Result<ForwardPass> {
    let t = frames.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "decomposition needs at least 2 frames, got {t}"
        )));
    }
    if frames.channels() != params.config.channels {
        return Err(Error::ShapeMismatch {
            context: "initial_flow_pass",
            expected: format!("{} channels", params.config.channels),
            actual: format!("{} channels", frames.channels()),
        });
    }
    let pyramids: Vec<Vec<Image>> = frames
        .frames()
        .iter()
        .map(|f| build_pyramid(f, levels))
        .collect::<Result<Vec<_>>>()?;
    let coarse: Vec<Image> = pyramids.iter().map(|p| p[0].clone()).collect();
    let (h0, w0) = spatial(&coarse[0]);

    let mut graph = Graph::new();
    let bound = bind_model(&mut graph, params, trainable)?;
    let (init_b, init_sec) = initial_pair_flows(
        &mut graph,
        &bound,
        &coarse,
        params.mode,
        &params.config,
        init_mode,
    );
    let flows0_b = pair_values(&graph, &init_b, h0, w0);
    let flows0_sec = init_sec.as_ref().map(|s| pair_values(&graph, s, h0, w0));

    let mut level0_b = Vec::with_capacity(t);
    let mut level0_sec = Vec::with_capacity(t);
    for k in 0..t {
        let b0 = init_layers(&coarse, &flows0_b, k)?;
        level0_b.push(graph.constant(b0.into_dyn()));
        let sec0 = match params.mode {
            TaskMode::Reflection => {
                init_layers(&coarse, flows0_sec.as_ref().expect("reflection flows"), k)?
            }
            TaskMode::Obstruction => Array3::from_elem((1, h0, w0), 0.5),
        };
        level0_sec.push(graph.constant(sec0.into_dyn()));
    }

    Ok(ForwardPass {
        graph,
        result: DecompositionResult {
            mode: params.mode,
            keyframe: 0,
            levels: vec![LevelState {
                background: level0_b,
                secondary: level0_sec,
                flows_background: flows0_b,
                flows_secondary: flows0_sec,
            }],
        },
        pyramids,
        initial_background: init_b,
        initial_secondary: init_sec,
    })
}

/// Standalone initial flow decomposition: per ordered pair, the tiled
/// uniform flow fields at the coarsest level.
pub fn initial_flow_decomposition(
    params: &ModelParams,
    frames: &ImageSequence,
    levels: usize,
    init_mode: InitFlowMode,
) -> Result<(PairFlows, Option<PairFlows>)> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "initial flow decomposition needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let coarse: Vec<Image> = frames
        .frames()
        .iter()
        .map(|f| Ok(build_pyramid(f, levels)?.swap_remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = spatial(&coarse[0]);
    let mut graph = Graph::new();
    let bound = bind_model(&mut graph, params, TrainableSets::none())?;
    let (b, sec) = initial_pair_flows(&mut graph, &bound, &coarse, params.mode, &params.config, init_mode);
    let flows_b = pair_values(&graph, &b, h, w);
    let flows_sec = sec.map(|s| pair_values(&graph, &s, h, w));
    Ok((flows_b, flows_sec))
}

/// One-keyframe, one-level reconstruction from explicit previous-level
/// state. `flows_b_prev[i]` aligns non-keyframe `j_i` to the keyframe,
/// in frame order with the keyframe skipped.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_level_once(
    params: &ModelParams,
    frames_level: &[Image],
    keyframe: usize,
    prev_background: &Image,
    prev_secondary: &Image,
    flows_b_prev: &[FlowField],
    flows_r_prev: Option<&[FlowField]>,
) -> Result<(Image, Image)> {
    let t = frames_level.len();
    if t < 2 || keyframe >= t {
        return Err(Error::InvalidArgument(
            "reconstruct_level_once needs >= 2 frames and a valid keyframe".into(),
        ));
    }
    if flows_b_prev.len() != t - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} background flows, got {}",
            t - 1,
            flows_b_prev.len()
        )));
    }
    let (ph, pw) = spatial(prev_background);
    let mut flows_b = PairFlows::new(t, ph, pw);
    let mut flows_r = PairFlows::new(t, ph, pw);
    let mut idx = 0;
    for j in 0..t {
        if j == keyframe {
            continue;
        }
        flows_b.set(keyframe, j, flows_b_prev[idx].clone());
        if let Some(fr) = flows_r_prev {
            flows_r.set(keyframe, j, fr[idx].clone());
        }
        idx += 1;
    }

    let mut graph = Graph::new();
    let bound = bind_model(&mut graph, params, TrainableSets::none())?;
    let prev_b = graph.constant(prev_background.clone().into_dyn());
    let prev_s = graph.constant(prev_secondary.clone().into_dyn());
    let out = reconstruct_keyframe_level(
        &mut graph,
        &bound,
        params.mode,
        params.config.channels,
        frames_level,
        keyframe,
        prev_b,
        prev_s,
        &flows_b,
        flows_r_prev.map(|_| &flows_r),
    )?;
    let b = graph
        .value(out.background)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let s = graph
        .value(out.secondary)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    Ok((b, s))
}

/// Temporal mean/median fusion baseline: aligns every frame to the
/// keyframe with the given flows and fuses per pixel over the visible
/// samples.
pub fn fuse_baseline(
    frames: &ImageSequence,
    keyframe: usize,
    flows: &PairFlows,
    method: FusionMethod,
) -> Result<Image> {
    let t = frames.len();
    if keyframe >= t {
        return Err(Error::InvalidArgument(format!(
            "keyframe {keyframe} out of range for {t} frames"
        )));
    }
    let (h, w) = frames.spatial();
    let c = frames.channels();
    let mut aligned = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for j in 0..t {
        if j == keyframe {
            aligned.push(frames.frame(j).clone());
            masks.push(ndarray::Array2::ones((h, w)));
        } else {
            let flow = flows.get(keyframe, j);
            aligned.push(warp_bilinear(frames.frame(j), flow)?);
            masks.push(visibility_mask(flow));
        }
    }
    let mut out = Array3::zeros((c, h, w));
    let mut samples = Vec::with_capacity(t);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                samples.clear();
                for j in 0..t {
                    if masks[j][[y, x]] > 0.0 {
                        samples.push(aligned[j][[ch, y, x]]);
                    }
                }
                if samples.is_empty() {
                    continue;
                }
                out[[ch, y, x]] = match method {
                    FusionMethod::Mean => {
                        samples.iter().sum::<f64>() / samples.len() as f64
                    }
                    FusionMethod::Median => {
                        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let n = samples.len();
                        if n % 2 == 1 {
                            samples[n / 2]
                        } else {
                            0.5 * (samples[n / 2 - 1] + samples[n / 2])
                        }
                    }
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::TranslationSearch;
    use crate::geom::constant_flow;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(seed: u64, t: usize, c: usize, h: usize, w: usize) -> ImageSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSequence::new(
            (0..t)
                .map(|_| Array3::from_shape_fn((c, h, w), |_| rng.gen::<f64>()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cost_volume_channel_count_and_orthogonality() {
        let a = Array3::from_shape_fn((2, 6, 6), |(c, _, _)| if c == 0 { 1.0 } else { 0.0 });
        let b = Array3::from_shape_fn((2, 6, 6), |(c, _, _)| if c == 1 { 1.0 } else { 0.0 });
        let cv = cost_volume(&a, &b, 4).unwrap();
        assert_eq!(cv.shape()[0], 81);
        assert!(cv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_volume_delta_matches_exhaustive_oracle() {
        let mut a = Array3::zeros((1, 5, 5));
        let mut b = Array3::zeros((1, 5, 5));
        a[[0, 2, 2]] = 1.0;
        b[[0, 2, 2]] = 1.0;
        let range = 2usize;
        let cv = cost_volume(&a, &b, range).unwrap();
        let side = 2 * range + 1;
        for dy in 0..side {
            for dx in 0..side {
                let d = dy * side + dx;
                for y in 0..5 {
                    for x in 0..5 {
                        // Oracle: dot product of a at (y, x) with b at the
                        // displaced location, zero outside.
                        let sy = y as isize + dy as isize - range as isize;
                        let sx = x as isize + dx as isize - range as isize;
                        let expected = if sy >= 0 && sy < 5 && sx >= 0 && sx < 5 {
                            a[[0, y, x]] * b[[0, sy as usize, sx as usize]]
                        } else {
                            0.0
                        };
                        assert_eq!(cv[[d, y, x]], expected, "d={d} y={y} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn initial_flows_are_spatially_constant() {
        let params = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 1);
        let frames = random_frames(2, 3, 1, 16, 16);
        let (fb, fr) = initial_flow_decomposition(&params, &frames, 2, InitFlowMode::Uniform)
            .unwrap();
        let fr = fr.unwrap();
        let mut count = 0;
        for (_, field) in fb.iter().chain(fr.iter()) {
            count += 1;
            let u0 = field[[0, 0, 0]];
            let v0 = field[[1, 0, 0]];
            for y in 0..field.shape()[1] {
                for x in 0..field.shape()[2] {
                    assert_eq!(field[[0, y, x]], u0);
                    assert_eq!(field[[1, y, x]], v0);
                }
            }
        }
        // T(T-1) ordered pairs per layer.
        assert_eq!(count, 2 * 3 * 2);
    }

    #[test]
    fn init_layers_identity_and_average() {
        let frame = Array3::from_elem((1, 4, 4), 0.25);
        let frames = vec![frame.clone(), frame.clone()];
        let flows = PairFlows::new(2, 4, 4);
        let b = init_layers(&frames, &flows, 0).unwrap();
        assert!(b.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let frames2 = vec![Array3::zeros((1, 4, 4)), Array3::ones((1, 4, 4))];
        let b2 = init_layers(&frames2, &flows, 0).unwrap();
        assert!(b2.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn init_layers_matches_align_and_average_oracle() {
        // Frames are shifted copies; exact flows realign them, so the
        // average equals the brute-force align-and-average oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Image = Array3::from_shape_fn((1, 8, 8), |_| rng.gen());
        let shift = 2.0;
        let moved = warp_bilinear(&base, &constant_flow(8, 8, shift, 0.0)).unwrap();
        let frames = vec![base.clone(), moved.clone()];
        let mut flows = PairFlows::new(2, 8, 8);
        flows.set(0, 1, constant_flow(8, 8, -shift, 0.0));
        flows.set(1, 0, constant_flow(8, 8, shift, 0.0));
        let b = init_layers(&frames, &flows, 0).unwrap();
        let realigned = warp_bilinear(&moved, &constant_flow(8, 8, -shift, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = 0.5 * (base[[0, y, x]] + realigned[[0, y, x]]);
                assert!((b[[0, y, x]] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reconstruct_level_is_permutation_and_duplication_invariant() {
        let params = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let frames: Vec<Image> = (0..4)
            .map(|_| Array3::from_shape_fn((1, 8, 8), |_| rng.gen()))
            .collect();
        let prev_b: Image = Array3::from_shape_fn((1, 4, 4), |_| rng.gen());
        let prev_r: Image = Array3::from_shape_fn((1, 4, 4), |_| rng.gen());
        let flows: Vec<FlowField> = (0..3)
            .map(|_| constant_flow(4, 4, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let (b, r) = reconstruct_level_once(
            &params, &frames, 0, &prev_b, &prev_r, &flows, Some(&flows),
        )
        .unwrap();

        // Permute the non-keyframe inputs (and their flows) consistently.
        let frames_p = vec![
            frames[0].clone(),
            frames[3].clone(),
            frames[1].clone(),
            frames[2].clone(),
        ];
        let flows_p = vec![flows[2].clone(), flows[0].clone(), flows[1].clone()];
        let (bp, rp) = reconstruct_level_once(
            &params, &frames_p, 0, &prev_b, &prev_r, &flows_p, Some(&flows_p),
        )
        .unwrap();
        for (x, y) in b.iter().zip(bp.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in r.iter().zip(rp.iter()) {
            assert!((x - y).abs() < 1e-6);
        }

        // Duplicate one non-keyframe: max fusion is idempotent.
        let mut frames_d = frames.clone();
        frames_d.push(frames[2].clone());
        let mut flows_d = flows.clone();
        flows_d.push(flows[1].clone());
        let (bd, rd) = reconstruct_level_once(
            &params, &frames_d, 0, &prev_b, &prev_r, &flows_d, Some(&flows_d),
        )
        .unwrap();
        for (x, y) in b.iter().zip(bd.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in r.iter().zip(rd.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_residual_head_reproduces_upsampled_previous_layer() {
        // Freshly initialized params have a zero-initialized final conv,
        // so the level output equals the upsampled previous layer.
        let params = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let frames: Vec<Image> = (0..3)
            .map(|_| Array3::from_shape_fn((1, 8, 8), |_| rng.gen()))
            .collect();
        let prev_b: Image = Array3::from_shape_fn((1, 4, 4), |_| rng.gen());
        let prev_r: Image = Array3::from_shape_fn((1, 4, 4), |_| rng.gen());
        let flows = vec![constant_flow(4, 4, 0.5, 0.0), constant_flow(4, 4, 0.0, -0.5)];
        let (b, _) = reconstruct_level_once(
            &params, &frames, 1, &prev_b, &prev_r, &flows, Some(&flows),
        )
        .unwrap();
        let expected = crate::geom::resize_bilinear(&prev_b, 8, 8);
        for (x, y) in b.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_decompose_shapes_for_all_frame_counts() {
        let backend = TranslationSearch::new(2);
        for t in 2..=7 {
            let params = ModelParams::init(TaskMode::Reflection, NetConfig::compact(1), 23);
            let frames = random_frames(t as u64, t, 1, 16, 16);
            let pass = forward_decompose(
                &params,
                &frames,
                t / 2,
                &backend,
                &ForwardOptions::inference(2),
            )
            .unwrap();
            assert_eq!(pass.result.levels.len(), 3);
            for (l, expect) in [(0usize, (4usize, 4usize)), (1, (8, 8)), (2, (16, 16))] {
                let state = &pass.result.levels[l];
                assert_eq!(state.background.len(), t);
                for k in 0..t {
                    let img = pass.background_image(l, k);
                    assert_eq!(spatial(&img), expect);
                }
            }
        }
    }

    #[test]
    fn obstruction_alpha_stays_in_unit_interval() {
        let backend = TranslationSearch::new(2);
        let mut params = ModelParams::init(TaskMode::Obstruction, NetConfig::compact(1), 29);
        // Perturb the zero-initialized output conv so alpha is nontrivial.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let key = format!("recon.{}.w", super::super::RECON_CONVS - 1);
        if let Some(w) = params.recon_b.get_mut(&key) {
            w.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let frames = random_frames(37, 3, 1, 16, 16);
        let pass = forward_decompose(
            &params,
            &frames,
            1,
            &backend,
            &ForwardOptions::inference(2),
        )
        .unwrap();
        for l in 0..=2 {
            for k in 0..3 {
                let alpha = pass.secondary_image(l, k);
                assert_eq!(alpha.shape()[0], 1);
                assert!(alpha.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        // No reflection-layer flows in obstruction mode: the secondary
        // flow set holds foreground flows instead and is still present.
        assert!(pass.initial_secondary.is_none());
    }

    #[test]
    fn fuse_baseline_mean_and_median() {
        let frames = ImageSequence::new(vec![
            Array3::from_elem((1, 4, 4), 0.0),
            Array3::from_elem((1, 4, 4), 0.0),
            Array3::from_elem((1, 4, 4), 1.0),
        ])
        .unwrap();
        let flows = PairFlows::new(3, 4, 4);
        let med = fuse_baseline(&frames, 0, &flows, FusionMethod::Median).unwrap();
        assert!(med.iter().all(|&v| v == 0.0));
        let mean = fuse_baseline(&frames, 0, &flows, FusionMethod::Mean).unwrap();
        assert!(mean.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn fuse_baseline_mean_matches_registered_average_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let frames = random_frames(43, 3, 1, 8, 8);
        let mut flows = PairFlows::new(3, 8, 8);
        for (s, d) in PairFlows::pairs(3) {
            // Small in-bounds flows keep every sample visible.
            flows.set(
                s,
                d,
                constant_flow(8, 8, rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)),
            );
        }
        // In-bounds flows can still sample the zero padding at the very
        // edge; restrict the check to the interior.
        let mean = fuse_baseline(&frames, 1, &flows, FusionMethod::Mean).unwrap();
        let oracle = init_layers(frames.frames(), &flows, 1).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((mean[[0, y, x]] - oracle[[0, y, x]]).abs() < 1e-6);
            }
        }
    }
}
