//! The three training procedures: two-stage pre-training, Reptile
//! meta-learning over synthetic and real batches, and per-sequence
//! online optimization.
//!
//! Stage separation is strict. Stage 1 updates only the flow
//! decomposition network against pseudo-ground-truth flows; stage 2
//! freezes it and trains the reconstruction branches on the supervised
//! loss; meta-learning and online optimization touch the reconstruction
//! branches only. Every run is reproducible from `(seed, config, data)`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::flow::{pseudo_gt_layer_flows, FlowBackend, PseudoGtFlows};
use crate::image::ImageSequence;
use crate::loss::{decomposition_loss, supervised_loss, unsupervised_loss, LossWeights};
use crate::model::{
    forward_decompose, initial_flow_pass, ForwardOptions, ForwardPass, InitFlowMode, ModelParams,
    ParamSet, ParamSetId, TaskMode, TrainableSets,
};
use crate::synth::{SampleDir, SynthSample};

/// One training example: input frames plus whatever ground-truth layers
/// exist for it. Real sequences carry no ground truth at all.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub frames: ImageSequence,
    pub gt_background: Option<ImageSequence>,
    pub gt_obstruction: Option<ImageSequence>,
    pub gt_alpha: Option<ImageSequence>,
}

impl From<SynthSample> for TrainSample {
    fn from(s: SynthSample) -> Self {
        Self {
            frames: s.frames,
            gt_background: Some(s.gt_background),
            gt_obstruction: Some(s.gt_obstruction),
            gt_alpha: s.gt_alpha,
        }
    }
}

impl From<SampleDir> for TrainSample {
    fn from(s: SampleDir) -> Self {
        Self {
            frames: s.frames,
            gt_background: s.gt_background,
            gt_obstruction: s.gt_obstruction,
            gt_alpha: s.gt_alpha,
        }
    }
}

impl TrainSample {
    fn gt_background(&self) -> Result<&ImageSequence> {
        self.gt_background.as_ref().ok_or_else(|| {
            Error::InvalidArgument("sample lacks ground-truth background layers".into())
        })
    }
}

/// Hyperparameters of all training stages. Defaults follow the paper's
/// published schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate for the first pre-training stage.
    pub lr_initial: f64,
    /// Learning rate after the stage boundary (stage 2, meta inner
    /// loops, and online optimization).
    pub lr_final: f64,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub batch: usize,
    /// Pyramid halvings; the hierarchy has `levels + 1` scales.
    pub levels: usize,
    pub lambda_grad: f64,
    pub lambda_tv: f64,
    pub reptile_epsilon: f64,
    pub meta_outer_iters: u64,
    /// Inner adaptation steps per sampled task.
    pub meta_inner_steps: u64,
    /// Probability that a meta task is drawn from synthetic data.
    pub meta_synth_ratio: f64,
    pub online_iters: u64,
    pub seed: u64,
    pub init_mode: InitFlowMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-4,
            lr_final: 1e-5,
            stage1_iters: 100_000,
            stage2_iters: 100_000,
            batch: 2,
            levels: 5,
            lambda_grad: 1.0,
            lambda_tv: 0.1,
            reptile_epsilon: 0.1,
            meta_outer_iters: 100_000,
            meta_inner_steps: 4,
            meta_synth_ratio: 0.5,
            online_iters: 200,
            seed: 0,
            init_mode: InitFlowMode::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.lr_initial <= 0.0 || self.lr_final <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.batch == 0 || self.levels == 0 {
            return fail("batch and levels must be positive".into());
        }
        if !(0.0 < self.reptile_epsilon && self.reptile_epsilon <= 1.0) {
            return fail(format!(
                "reptile epsilon {} outside (0, 1]",
                self.reptile_epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.meta_synth_ratio) {
            return fail("meta_synth_ratio outside [0, 1]".into());
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_grad: self.lambda_grad,
            lambda_tv: self.lambda_tv,
        }
    }
}

/// Adam moments keyed by qualified parameter name, plus the shared step
/// count for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: BTreeMap<String, ArrayD<f64>>,
    pub second_moment: BTreeMap<String, ArrayD<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update over a map of gradients qualified as
/// `<set>.<param>`. Increments the shared step once.
fn apply_gradients(
    params: &mut ModelParams,
    grads: &BTreeMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (qname, grad) in grads {
        let Some((prefix, rest)) = qname.split_once('.') else {
            return Err(Error::InvalidArgument(format!(
                "unqualified gradient name {qname}"
            )));
        };
        let set = match prefix {
            "flow_decomp" => params.set_mut(ParamSetId::FlowDecomp),
            "recon_b" => params.set_mut(ParamSetId::ReconB),
            "recon_r" => params.set_mut(ParamSetId::ReconR),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown parameter set {other}"
                )))
            }
        };
        let Some(value) = set.get_mut(rest) else {
            return Err(Error::InvalidArgument(format!("unknown parameter {qname}")));
        };
        let m = state
            .first_moment
            .entry(qname.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let v = state
            .second_moment
            .entry(qname.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        for ((pv, gv), (mv, vv)) in value
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Collects the gradients of one backward run under qualified names,
/// accumulating into `acc` with weight `scale`.
fn accumulate_gradients(
    pass: &ForwardPass,
    grads: &crate::autodiff::Gradients,
    acc: &mut BTreeMap<String, ArrayD<f64>>,
    scale: f64,
) {
    for (name, grad) in pass.graph.param_grads(grads) {
        let Some(grad) = grad else { continue };
        match acc.get_mut(name) {
            Some(slot) => slot.zip_mut_with(grad, |a, g| *a += scale * g),
            None => {
                acc.insert(name.to_string(), grad.mapv(|g| g * scale));
            }
        }
    }
}

/// Per-iteration loss values, written as `iteration,loss_name,value`.
#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<(u64, String, f64)>,
}

impl LossTrace {
    pub fn push(&mut self, iteration: u64, name: &str, value: f64) {
        self.rows.push((iteration, name.to_string(), value));
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|(_, n, _)| n == name)
            .map(|(_, _, v)| *v)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iteration,loss_name,value\n");
        for (iter, name, value) in &self.rows {
            out.push_str(&format!("{iter},{name},{value}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn substream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

fn gt_secondary<'s>(params: &ModelParams, sample: &'s TrainSample) -> Result<&'s ImageSequence> {
    match params.mode {
        TaskMode::Reflection => sample.gt_obstruction.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "reflection-mode training needs samples with ground-truth reflection layers".into(),
            )
        }),
        TaskMode::Obstruction => sample.gt_alpha.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "obstruction-mode training needs samples with ground-truth alpha".into(),
            )
        }),
    }
}

/// Stage 1 of pre-training: only the initial flow decomposition network
/// learns, regressing its uniform flows onto pseudo-ground-truth flows
/// computed by the fixed backend on the ground-truth layers.
pub fn train_stage1(
    params: ModelParams,
    config: &TrainConfig,
    samples: &[TrainSample],
    backend: &dyn FlowBackend,
) -> Result<(Checkpoint, LossTrace)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training stream".into()));
    }
    // Pseudo ground truth is fixed for the whole stage; backend errors
    // surface here, before any parameter is touched.
    let pseudo: Vec<PseudoGtFlows> = samples
        .iter()
        .map(|s| {
            let gt_r = match params.mode {
                TaskMode::Reflection => Some(gt_secondary(&params, s)?),
                TaskMode::Obstruction => None,
            };
            pseudo_gt_layer_flows(backend, s.gt_background()?, gt_r, config.levels)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = params;
    let mut adam = AdamState::new();
    let mut trace = LossTrace::default();
    let mut rng = substream(config.seed, "stage1.data");

    for iter in 0..config.stage1_iters {
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch {
            let idx = rng.gen_range(0..samples.len());
            let mut pass = initial_flow_pass(
                &params,
                &samples[idx].frames,
                config.levels,
                config.init_mode,
                TrainableSets::flow_only(),
            )?;
            let loss = decomposition_loss(&mut pass, &pseudo[idx])?;
            let g = pass.graph.backward(loss.total);
            accumulate_gradients(&pass, &g, &mut grads, 1.0 / config.batch as f64);
            loss_sum += loss.report.dec;
        }
        apply_gradients(&mut params, &grads, &mut adam, config.lr_initial)?;
        trace.push(iter, "dec", loss_sum / config.batch as f64);
    }
    Ok((
        Checkpoint::new(params, Some(adam), Stage::Stage1, config.stage1_iters, config),
        trace,
    ))
}

/// Stage 2 of pre-training: the flow decomposition network is frozen and
/// the reconstruction branches learn from the supervised loss.
pub fn train_stage2(
    config: &TrainConfig,
    samples: &[TrainSample],
    checkpoint: Checkpoint,
    backend: &dyn FlowBackend,
) -> Result<(Checkpoint, LossTrace)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training stream".into()));
    }
    if !matches!(checkpoint.manifest.stage, Stage::Stage1 | Stage::Stage2) {
        return Err(Error::InvalidArgument(format!(
            "stage 2 requires a stage1 checkpoint, got {}",
            checkpoint.manifest.stage
        )));
    }
    let mut params = checkpoint.params;
    let mut adam = AdamState::new();
    let mut trace = LossTrace::default();
    let mut rng = substream(config.seed, "stage2.data");
    let weights = config.weights();

    for iter in 0..config.stage2_iters {
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch {
            let idx = rng.gen_range(0..samples.len());
            let sample = &samples[idx];
            let keyframe = sample.frames.len() / 2;
            let mut pass = forward_decompose(
                &params,
                &sample.frames,
                keyframe,
                backend,
                &ForwardOptions {
                    levels: config.levels,
                    init_mode: config.init_mode,
                    trainable: TrainableSets::recon_only(),
                    inference: false,
                },
            )?;
            let gt_sec = gt_secondary(&params, sample)?;
            let loss = supervised_loss(&mut pass, sample.gt_background()?, gt_sec, &weights)?;
            let g = pass.graph.backward(loss.total);
            accumulate_gradients(&pass, &g, &mut grads, 1.0 / config.batch as f64);
            loss_sum += loss.report.supervised;
        }
        apply_gradients(&mut params, &grads, &mut adam, config.lr_final)?;
        trace.push(iter, "supervised", loss_sum / config.batch as f64);
    }
    Ok((
        Checkpoint::new(params, Some(adam), Stage::Stage2, config.stage2_iters, config),
        trace,
    ))
}

/// First-order meta update: `theta' = theta + epsilon * (task - theta)`.
pub fn reptile_step(outer: &mut ParamSet, task: &ParamSet, epsilon: f64) -> Result<()> {
    if outer.len() != task.len() {
        return Err(Error::ShapeMismatch {
            context: "reptile_step",
            expected: format!("{} parameters", outer.len()),
            actual: format!("{} parameters", task.len()),
        });
    }
    for (name, value) in outer.iter_mut() {
        let Some(target) = task.get(name) else {
            return Err(Error::InvalidArgument(format!(
                "task parameters missing {name}"
            )));
        };
        if target.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                context: "reptile_step",
                expected: format!("{:?}", value.shape()),
                actual: format!("{name}: {:?}", target.shape()),
            });
        }
        value.zip_mut_with(target, |o, t| *o += epsilon * (t - *o));
    }
    Ok(())
}

/// Meta-learning over synthetic (supervised) and real (unsupervised)
/// tasks. Real tasks are raw sequences and cannot touch ground truth by
/// construction. Only the reconstruction branches move.
pub fn meta_train(
    config: &TrainConfig,
    synth: &[TrainSample],
    real: &[ImageSequence],
    checkpoint: Checkpoint,
    backend: &dyn FlowBackend,
) -> Result<(Checkpoint, LossTrace)> {
    config.validate()?;
    if synth.is_empty() && real.is_empty() {
        return Err(Error::InvalidArgument("both task streams are empty".into()));
    }
    let mut params = checkpoint.params;
    let mut trace = LossTrace::default();
    let mut rng = substream(config.seed, "meta.tasks");
    let weights = config.weights();

    for outer_iter in 0..config.meta_outer_iters {
        let use_synth = if real.is_empty() {
            true
        } else if synth.is_empty() {
            false
        } else {
            rng.gen::<f64>() < config.meta_synth_ratio
        };

        let mut task_params = params.clone();
        let mut task_adam = AdamState::new();
        let mut last_loss = 0.0;
        let loss_name = if use_synth { "supervised" } else { "unsupervised" };

        for _ in 0..config.meta_inner_steps {
            let mut grads = BTreeMap::new();
            let mut loss_sum = 0.0;
            for _ in 0..config.batch {
                let opts = ForwardOptions {
                    levels: config.levels,
                    init_mode: config.init_mode,
                    trainable: TrainableSets::recon_only(),
                    inference: false,
                };
                if use_synth {
                    let sample = &synth[rng.gen_range(0..synth.len())];
                    let keyframe = sample.frames.len() / 2;
                    let mut pass =
                        forward_decompose(&task_params, &sample.frames, keyframe, backend, &opts)?;
                    let gt_sec = gt_secondary(&task_params, sample)?;
                    let loss =
                        supervised_loss(&mut pass, sample.gt_background()?, gt_sec, &weights)?;
                    let g = pass.graph.backward(loss.total);
                    accumulate_gradients(&pass, &g, &mut grads, 1.0 / config.batch as f64);
                    loss_sum += loss.report.supervised;
                } else {
                    let sequence = &real[rng.gen_range(0..real.len())];
                    let keyframe = sequence.len() / 2;
                    let mut pass =
                        forward_decompose(&task_params, sequence, keyframe, backend, &opts)?;
                    let loss = unsupervised_loss(&mut pass, &weights)?;
                    let g = pass.graph.backward(loss.total);
                    accumulate_gradients(&pass, &g, &mut grads, 1.0 / config.batch as f64);
                    loss_sum += loss.report.unsupervised;
                }
            }
            apply_gradients(&mut task_params, &grads, &mut task_adam, config.lr_final)?;
            last_loss = loss_sum / config.batch as f64;
        }

        reptile_step(
            &mut params.recon_b,
            &task_params.recon_b,
            config.reptile_epsilon,
        )?;
        reptile_step(
            &mut params.recon_r,
            &task_params.recon_r,
            config.reptile_epsilon,
        )?;
        trace.push(outer_iter, loss_name, last_loss);
    }
    Ok((
        Checkpoint::new(params, None, Stage::Meta, config.meta_outer_iters, config),
        trace,
    ))
}

/// Per-sequence online optimization: fine-tunes the reconstruction
/// branches on the unsupervised loss of one test sequence. Optimizer
/// moments start fresh. Returns the adapted checkpoint, the final
/// decomposition, and the per-iteration loss trace.
pub fn online_finetune(
    config: &TrainConfig,
    sequence: &ImageSequence,
    keyframe: usize,
    checkpoint: Checkpoint,
    backend: &dyn FlowBackend,
) -> Result<(Checkpoint, ForwardPass, LossTrace)> {
    config.validate()?;
    let mut params = checkpoint.params;
    let mut adam = AdamState::new();
    let mut trace = LossTrace::default();
    let weights = config.weights();

    for iter in 0..config.online_iters {
        let mut pass = forward_decompose(
            &params,
            sequence,
            keyframe,
            backend,
            &ForwardOptions {
                levels: config.levels,
                init_mode: config.init_mode,
                trainable: TrainableSets::recon_only(),
                inference: false,
            },
        )?;
        let loss = unsupervised_loss(&mut pass, &weights)?;
        let g = pass.graph.backward(loss.total);
        let mut grads = BTreeMap::new();
        accumulate_gradients(&pass, &g, &mut grads, 1.0);
        apply_gradients(&mut params, &grads, &mut adam, config.lr_final)?;
        trace.push(iter, "unsupervised", loss.report.unsupervised);
        trace.push(iter, "warp", loss.report.warp);
        trace.push(iter, "tv", loss.report.tv);
    }

    let final_pass = forward_decompose(
        &params,
        sequence,
        keyframe,
        backend,
        &ForwardOptions::inference(config.levels),
    )?;
    Ok((
        Checkpoint::new(params, Some(adam), Stage::Online, config.online_iters, config),
        final_pass,
        trace,
    ))
}
