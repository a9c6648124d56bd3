//! Command-line interface: data synthesis, the training stages,
//! inference with optional per-sequence optimization, evaluation, and
//! fusion/initialization baselines.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use unveil::checkpoint::{self, Checkpoint, Stage};
use unveil::flow::{self, FlowBackend, PairFlows, TranslationSearch};
use unveil::image::{hconcat, read_frame_dir, write_png, ImageSequence};
use unveil::loss::{supervised_loss, unsupervised_loss, LossWeights};
use unveil::metrics::metrics;
use unveil::model::{
    forward_decompose, fuse_baseline, ForwardOptions, FusionMethod, InitFlowMode, ModelParams,
    TaskMode, TrainableSets,
};
use unveil::synth::{
    generate_obstruction_sample, generate_reflection_sample, procedural, write_sample, SynthSpec,
    SynthTask,
};
use unveil::train::{
    meta_train, online_finetune, train_stage1, train_stage2, TrainConfig, TrainSample,
};

use config::{FileConfig, ModelConfig};

#[derive(Parser)]
#[command(
    name = "unveil",
    version,
    about = "Separate a clean background from reflections, fences, or raindrops in a short image sequence"
)]
struct Cli {
    /// TOML config file with [train]/[model]/[synth] sections; flags
    /// override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic training/evaluation samples.
    Synth(SynthArgs),
    /// Two-stage pre-training on synthetic samples.
    Pretrain(PretrainArgs),
    /// Reptile meta-learning over synthetic and real batches.
    Metatrain(MetatrainArgs),
    /// Decompose a frame directory into background and obstruction.
    Remove(RemoveArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Temporal-fusion and flow-initialization baselines.
    Baselines(BaselinesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Exhaustive integer-translation search; self-contained.
    Oracle,
    /// Pretrained flow network invoked as an external process
    /// (weights from $FLOW_WEIGHTS).
    External,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// Search range of the oracle backend, in pixels.
    #[arg(long, default_value_t = 8)]
    oracle_range: usize,
    /// Command template for the external backend; invoked as
    /// `CMD <weights> <a.png> <b.png> <out.flo>`.
    #[arg(long, num_args = 1..)]
    flow_command: Option<Vec<String>>,
}

impl BackendArgs {
    fn build(&self) -> anyhow::Result<Box<dyn FlowBackend>> {
        match self.backend {
            BackendKind::Oracle => Ok(Box::new(TranslationSearch::new(self.oracle_range))),
            BackendKind::External => {
                let command = self
                    .flow_command
                    .clone()
                    .unwrap_or_else(|| vec!["flow-net".to_string()]);
                Ok(Box::new(flow::ExternalProcess::from_env(command)?))
            }
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for sample_NNNN subdirectories.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples to generate.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, value_enum)]
    task: Option<SynthTaskArg>,
    /// Background source frames (PNG/JPEG, lexicographic order).
    #[arg(long)]
    bg_dir: Option<PathBuf>,
    /// Reflection source frames (reflection task).
    #[arg(long)]
    rf_dir: Option<PathBuf>,
    /// Obstruction image (fence/raindrop task).
    #[arg(long)]
    obstruction: Option<PathBuf>,
    /// Alpha matte image for the obstruction.
    #[arg(long)]
    alpha: Option<PathBuf>,
    /// Generate procedural sources instead of reading directories.
    #[arg(long)]
    procedural: bool,
    #[arg(long)]
    crop_width: Option<usize>,
    #[arg(long)]
    crop_height: Option<usize>,
    #[arg(long)]
    num_frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthTaskArg {
    Reflection,
    Fence,
    Raindrop,
}

impl From<SynthTaskArg> for SynthTask {
    fn from(v: SynthTaskArg) -> Self {
        match v {
            SynthTaskArg::Reflection => SynthTask::Reflection,
            SynthTaskArg::Fence => SynthTask::Fence,
            SynthTaskArg::Raindrop => SynthTask::Raindrop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Reflection,
    Obstruction,
}

impl From<ModeArg> for TaskMode {
    fn from(v: ModeArg) -> Self {
        match v {
            ModeArg::Reflection => TaskMode::Reflection,
            ModeArg::Obstruction => TaskMode::Obstruction,
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    /// Initial-flow variant: uniform (default), zero, or dense.
    #[arg(long, value_enum)]
    init_mode: Option<InitModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitModeArg {
    Uniform,
    Zero,
    Dense,
}

impl From<InitModeArg> for InitFlowMode {
    fn from(v: InitModeArg) -> Self {
        match v {
            InitModeArg::Uniform => InitFlowMode::Uniform,
            InitModeArg::Zero => InitFlowMode::Zero,
            InitModeArg::Dense => InitFlowMode::Dense,
        }
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.levels {
            cfg.levels = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr_initial {
            cfg.lr_initial = v;
        }
        if let Some(v) = self.lr_final {
            cfg.lr_final = v;
        }
        if let Some(v) = self.init_mode {
            cfg.init_mode = v.into();
        }
    }
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Image channels the model expects.
    #[arg(long)]
    channels: Option<usize>,
    /// Use the compact architecture (smoke-test scale).
    #[arg(long)]
    compact: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if self.compact {
            cfg.net = unveil::model::NetConfig::compact(cfg.net.channels);
        }
        if let Some(c) = self.channels {
            cfg.net.channels = c;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of sample_* subdirectories with ground truth.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stage1_iters: Option<u64>,
    #[arg(long)]
    stage2_iters: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct MetatrainArgs {
    #[arg(long)]
    synth_data: PathBuf,
    /// Directory of frame directories without ground truth.
    #[arg(long)]
    real_data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    outer_iters: Option<u64>,
    #[arg(long)]
    inner_steps: Option<u64>,
    /// Probability of drawing a synthetic task.
    #[arg(long)]
    synth_ratio: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RemoveArgs {
    /// Directory of input frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keyframe index; defaults to the middle frame.
    #[arg(long)]
    keyframe: Option<usize>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Run per-sequence online optimization before decomposing.
    #[arg(long)]
    online: bool,
    #[arg(long)]
    online_iters: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_background: PathBuf,
    #[arg(long)]
    gt_background: PathBuf,
    #[arg(long)]
    pred_obstruction: Option<PathBuf>,
    #[arg(long)]
    gt_obstruction: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselinesArgs {
    #[arg(long)]
    frames: PathBuf,
    /// Sample directory with gt_b (and gt_r/gt_a) for loss rows.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    keyframe: Option<usize>,
    /// Comma-separated: mean, median, zero, dense, uniform.
    #[arg(long, default_value = "mean,median")]
    methods: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

/// Output directory that is removed again if the command fails, unless
/// it already existed.
struct OutputDir {
    path: PathBuf,
    created: bool,
    committed: bool,
}

impl OutputDir {
    fn create(path: &Path) -> anyhow::Result<Self> {
        let created = !path.exists();
        std::fs::create_dir_all(path)
            .with_context(|| format!("creating output directory {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            created,
            committed: false,
        })
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.created && !self.committed {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    train: &'a TrainConfig,
    model: &'a ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<&'a SynthSpec>,
    backend: Option<BackendInfo>,
}

#[derive(Serialize)]
struct BackendInfo {
    name: String,
    checksum: String,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn backend_info(backend: &dyn FlowBackend) -> Option<BackendInfo> {
    Some(BackendInfo {
        name: backend.name().to_string(),
        checksum: backend.checksum(),
    })
}

/// Reads input frames from a directory. Inside a synthesized sample
/// directory only the `frame_*` images are inputs; ground-truth files
/// live alongside them and must not be ingested.
fn read_input_frames(dir: &Path) -> anyhow::Result<ImageSequence> {
    if dir.join("frame_000.png").is_file() {
        Ok(unveil::synth::read_sample_dir(dir)?.frames)
    } else {
        Ok(read_frame_dir(dir)?)
    }
}

fn load_samples(dir: &Path) -> anyhow::Result<Vec<TrainSample>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading sample directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no sample subdirectories in {}", dir.display());
    }
    subdirs
        .iter()
        .map(|p| {
            Ok(TrainSample::from(
                unveil::synth::read_sample_dir(p)
                    .with_context(|| format!("loading sample {}", p.display()))?,
            ))
        })
        .collect()
}

fn load_real_sequences(dir: &Path) -> anyhow::Result<Vec<ImageSequence>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading real-data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no sequence subdirectories in {}", dir.display());
    }
    subdirs.iter().map(|p| read_input_frames(p)).collect()
}

fn init_or_load_params(
    ckpt: Option<&PathBuf>,
    model_cfg: &ModelConfig,
    seed: u64,
) -> anyhow::Result<(ModelParams, Option<Checkpoint>)> {
    match ckpt {
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            Ok((loaded.params.clone(), Some(loaded)))
        }
        None => {
            eprintln!("note: no checkpoint given; using freshly initialized parameters");
            Ok((
                ModelParams::init(model_cfg.mode, model_cfg.net.clone(), seed),
                None,
            ))
        }
    }
}

fn cmd_synth(file_cfg: FileConfig, args: SynthArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut spec = file_cfg.synth.clone();
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(task) = args.task {
        spec.task = task.into();
    }
    if let Some(w) = args.crop_width {
        spec.crop_width = w;
    }
    if let Some(h) = args.crop_height {
        spec.crop_height = h;
    }
    if let Some(t) = args.num_frames {
        spec.num_frames = Some(t);
    }
    spec.validate()?;

    // Sources: frame directories, or procedural textures sized with a
    // motion margin around the crop.
    let (src_h, src_w) = (spec.crop_height + 2 * 32, spec.crop_width + 2 * 32);
    let load_or_procedural =
        |dir: Option<&PathBuf>, salt: u64| -> anyhow::Result<Option<ImageSequence>> {
            match (dir, args.procedural) {
                (Some(d), _) => Ok(Some(read_frame_dir(d)?)),
                (None, true) => Ok(Some(procedural::sequence(
                    spec.seed.wrapping_add(salt),
                    7,
                    3,
                    src_h,
                    src_w,
                ))),
                (None, false) => Ok(None),
            }
        };

    for i in 0..args.count {
        let sample_spec = SynthSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let sample = match sample_spec.task {
            SynthTask::Reflection => {
                let bg = load_or_procedural(args.bg_dir.as_ref(), 0x625f + 7919 * i as u64)?
                    .context("reflection synthesis needs --bg-dir or --procedural")?;
                let rf = load_or_procedural(args.rf_dir.as_ref(), 0x4866 + 7919 * i as u64)?
                    .context("reflection synthesis needs --rf-dir or --procedural")?;
                generate_reflection_sample(&sample_spec, &bg, &rf)?
            }
            SynthTask::Fence | SynthTask::Raindrop => {
                let bg = load_or_procedural(args.bg_dir.as_ref(), 0x625f + 7919 * i as u64)?
                    .context("obstruction synthesis needs --bg-dir or --procedural")?;
                let (obstruction, alpha) = match (&args.obstruction, &args.alpha) {
                    (Some(ob), Some(al)) => {
                        let ob_img = unveil::image::read_image(ob)?;
                        let al_img = unveil::image::read_image(al)?;
                        let matte = al_img.index_axis(ndarray::Axis(0), 0).to_owned();
                        (ob_img, matte)
                    }
                    _ if args.procedural => {
                        let (h, w) = bg.spatial();
                        let seed = sample_spec.seed ^ 0x0b57;
                        if sample_spec.task == SynthTask::Fence {
                            procedural::fence_pattern(seed, h, w)
                        } else {
                            procedural::raindrop_pattern(seed, h, w)
                        }
                    }
                    _ => bail!("obstruction synthesis needs --obstruction/--alpha or --procedural"),
                };
                generate_obstruction_sample(&sample_spec, &bg, &obstruction, &alpha)?
            }
        };
        write_sample(&out.path.join(format!("sample_{i:04}")), &sample)?;
    }

    write_manifest(
        &out.path,
        &RunManifest {
            command: "synth",
            argv: std::env::args().collect(),
            seed: spec.seed,
            train: &file_cfg.train,
            model: &file_cfg.model,
            synth: Some(&spec),
            backend: None,
        },
    )?;
    out.commit();
    Ok(())
}

fn cmd_pretrain(file_cfg: FileConfig, args: PretrainArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut train_cfg = file_cfg.train.clone();
    args.train.apply(&mut train_cfg);
    if let Some(v) = args.stage1_iters {
        train_cfg.stage1_iters = v;
    }
    if let Some(v) = args.stage2_iters {
        train_cfg.stage2_iters = v;
    }
    let mut model_cfg = file_cfg.model.clone();
    args.model.apply(&mut model_cfg);

    let backend = args.backend.build()?;
    let samples = load_samples(&args.data)?;
    let params = ModelParams::init(model_cfg.mode, model_cfg.net.clone(), train_cfg.seed);

    let (ckpt1, trace1) = train_stage1(params, &train_cfg, &samples, backend.as_ref())?;
    checkpoint::save(&out.path.join("stage1.ckpt"), &ckpt1)?;
    trace1.write_csv(&out.path.join("stage1_loss.csv"))?;

    let (ckpt2, trace2) = train_stage2(&train_cfg, &samples, ckpt1, backend.as_ref())?;
    checkpoint::save(&out.path.join("stage2.ckpt"), &ckpt2)?;
    trace2.write_csv(&out.path.join("stage2_loss.csv"))?;

    write_manifest(
        &out.path,
        &RunManifest {
            command: "pretrain",
            argv: std::env::args().collect(),
            seed: train_cfg.seed,
            train: &train_cfg,
            model: &model_cfg,
            synth: None,
            backend: backend_info(backend.as_ref()),
        },
    )?;
    out.commit();
    Ok(())
}

fn cmd_metatrain(file_cfg: FileConfig, args: MetatrainArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut train_cfg = file_cfg.train.clone();
    args.train.apply(&mut train_cfg);
    if let Some(v) = args.outer_iters {
        train_cfg.meta_outer_iters = v;
    }
    if let Some(v) = args.inner_steps {
        train_cfg.meta_inner_steps = v;
    }
    if let Some(v) = args.synth_ratio {
        train_cfg.meta_synth_ratio = v;
    }
    if let Some(v) = args.epsilon {
        train_cfg.reptile_epsilon = v;
    }

    let backend = args.backend.build()?;
    let synth = load_samples(&args.synth_data)?;
    let real = load_real_sequences(&args.real_data)?;
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model_cfg = ModelConfig {
        mode: ckpt.manifest.mode,
        net: ckpt.manifest.net_config.clone(),
    };

    let (meta_ckpt, trace) = meta_train(&train_cfg, &synth, &real, ckpt, backend.as_ref())?;
    checkpoint::save(&out.path.join("meta.ckpt"), &meta_ckpt)?;
    trace.write_csv(&out.path.join("meta_loss.csv"))?;

    write_manifest(
        &out.path,
        &RunManifest {
            command: "metatrain",
            argv: std::env::args().collect(),
            seed: train_cfg.seed,
            train: &train_cfg,
            model: &model_cfg,
            synth: None,
            backend: backend_info(backend.as_ref()),
        },
    )?;
    out.commit();
    Ok(())
}

fn cmd_remove(file_cfg: FileConfig, args: RemoveArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut train_cfg = file_cfg.train.clone();
    args.train.apply(&mut train_cfg);
    if let Some(v) = args.online_iters {
        train_cfg.online_iters = v;
    }
    let mut model_cfg = file_cfg.model.clone();
    args.model.apply(&mut model_cfg);

    let backend = args.backend.build()?;
    let frames = read_input_frames(&args.frames)?;
    let keyframe = args.keyframe.unwrap_or(frames.len() / 2);
    if keyframe >= frames.len() {
        bail!(
            "keyframe {keyframe} out of range for {} frames",
            frames.len()
        );
    }

    let (params, loaded) = init_or_load_params(args.ckpt.as_ref(), &model_cfg, train_cfg.seed)?;
    let model_cfg = match &loaded {
        Some(c) => ModelConfig {
            mode: c.manifest.mode,
            net: c.manifest.net_config.clone(),
        },
        None => model_cfg,
    };
    let mode = model_cfg.mode;

    let pass = if args.online {
        let base = match loaded {
            Some(c) => c,
            None => Checkpoint::new(params, None, Stage::Stage2, 0, &train_cfg),
        };
        let (adapted, pass, trace) =
            online_finetune(&train_cfg, &frames, keyframe, base, backend.as_ref())?;
        checkpoint::save(&out.path.join("adapted.ckpt"), &adapted)?;
        trace.write_csv(&out.path.join("online_loss.csv"))?;
        pass
    } else {
        forward_decompose(
            &params,
            &frames,
            keyframe,
            backend.as_ref(),
            &ForwardOptions::inference(train_cfg.levels),
        )?
    };

    let background = pass.final_background();
    let secondary = pass.final_secondary();
    write_png(
        &out.path.join(format!("background_{keyframe:03}.png")),
        &background,
    )?;
    let secondary_name = match mode {
        TaskMode::Reflection => format!("obstruction_{keyframe:03}.png"),
        TaskMode::Obstruction => format!("alpha_{keyframe:03}.png"),
    };
    write_png(&out.path.join(secondary_name), &secondary)?;

    let preview = hconcat(&[frames.frame(keyframe), &background, &secondary])?;
    write_png(
        &out.path.join(format!("preview_{keyframe:03}.png")),
        &preview,
    )?;

    // Finest-level flows into the keyframe, one pair per non-keyframe.
    let finest = pass.result.levels.last().expect("at least one level");
    for j in 0..frames.len() {
        if j == keyframe {
            continue;
        }
        flow::flo::write_flo(
            &out.path.join(format!("flow_b_{j:03}to{keyframe:03}.flo")),
            finest.flows_background.get(j, keyframe),
        )?;
        if mode == TaskMode::Reflection {
            let flows_r = finest
                .flows_secondary
                .as_ref()
                .expect("reflection flows at finest level");
            flow::flo::write_flo(
                &out.path.join(format!("flow_r_{j:03}to{keyframe:03}.flo")),
                flows_r.get(j, keyframe),
            )?;
        }
    }

    write_manifest(
        &out.path,
        &RunManifest {
            command: "remove",
            argv: std::env::args().collect(),
            seed: train_cfg.seed,
            train: &train_cfg,
            model: &model_cfg,
            synth: None,
            backend: backend_info(backend.as_ref()),
        },
    )?;
    out.commit();
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    sequence: String,
    layer: String,
    metric: String,
    value: f64,
}

fn image_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no images under {}", path.display());
    }
    Ok(files)
}

fn eval_layer(
    layer: &str,
    pred: &Path,
    gt: &Path,
    rows: &mut Vec<MetricRow>,
) -> anyhow::Result<()> {
    let preds = image_files(pred)?;
    let gts = image_files(gt)?;
    if preds.len() != gts.len() {
        bail!(
            "{layer}: {} predictions vs {} ground-truth images",
            preds.len(),
            gts.len()
        );
    }
    for (p, g) in preds.iter().zip(&gts) {
        let pi = unveil::image::read_image(p)?;
        let gi = unveil::image::read_image(g)?;
        let report = metrics(&pi, &gi)?;
        let sequence = p
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        for (metric, value) in report.rows() {
            rows.push(MetricRow {
                sequence: sequence.clone(),
                layer: layer.to_string(),
                metric: metric.to_string(),
                value,
            });
        }
    }
    Ok(())
}

fn summarize(rows: &[MetricRow]) -> String {
    let mut by_layer: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in rows {
        let slot = by_layer
            .entry((row.layer.clone(), row.metric.clone()))
            .or_insert((0.0, 0));
        slot.0 += row.value;
        slot.1 += 1;
    }
    let mut text = String::from("| layer | metric | mean |\n|---|---|---|\n");
    for ((layer, metric), (sum, n)) in by_layer {
        text.push_str(&format!("| {layer} | {metric} | {:.6} |\n", sum / n as f64));
    }
    text
}

fn cmd_eval(file_cfg: FileConfig, args: EvalArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut rows = Vec::new();
    eval_layer(
        "background",
        &args.pred_background,
        &args.gt_background,
        &mut rows,
    )?;
    match (&args.pred_obstruction, &args.gt_obstruction) {
        (Some(p), Some(g)) => eval_layer("obstruction", p, g, &mut rows)?,
        (None, None) => {}
        _ => bail!("--pred-obstruction and --gt-obstruction must be given together"),
    }

    std::fs::write(
        out.path.join("metrics.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    std::fs::write(out.path.join("summary.md"), summarize(&rows))?;
    write_manifest(
        &out.path,
        &RunManifest {
            command: "eval",
            argv: std::env::args().collect(),
            seed: 0,
            train: &file_cfg.train,
            model: &file_cfg.model,
            synth: None,
            backend: None,
        },
    )?;
    out.commit();
    Ok(())
}

#[derive(Serialize)]
struct BaselineRow {
    method: String,
    loss_name: String,
    value: f64,
}

fn cmd_baselines(file_cfg: FileConfig, args: BaselinesArgs) -> anyhow::Result<()> {
    let mut out = OutputDir::create(&args.out)?;
    let mut train_cfg = file_cfg.train.clone();
    args.train.apply(&mut train_cfg);
    let mut model_cfg = file_cfg.model.clone();
    args.model.apply(&mut model_cfg);

    let backend = args.backend.build()?;
    let frames = read_input_frames(&args.frames)?;
    let keyframe = args.keyframe.unwrap_or(frames.len() / 2);
    let gt = args
        .gt
        .as_ref()
        .map(|p| unveil::synth::read_sample_dir(p))
        .transpose()?;

    let weights = LossWeights {
        lambda_grad: train_cfg.lambda_grad,
        lambda_tv: train_cfg.lambda_tv,
    };
    let mut rows: Vec<BaselineRow> = Vec::new();

    let gt_keyframe_background = gt
        .as_ref()
        .and_then(|g| g.gt_background.as_ref())
        .map(|seq| seq.frame(keyframe).clone());

    for method in args.methods.split(',').map(str::trim) {
        match method {
            "mean" | "median" => {
                // Classic temporal fusion: align raw frames with backend
                // flows and fuse per pixel.
                let (h, w) = frames.spatial();
                let mut flows = PairFlows::new(frames.len(), h, w);
                for j in 0..frames.len() {
                    if j == keyframe {
                        continue;
                    }
                    flows.set(
                        keyframe,
                        j,
                        backend.estimate(frames.frame(keyframe), frames.frame(j))?,
                    );
                }
                let fusion = if method == "mean" {
                    FusionMethod::Mean
                } else {
                    FusionMethod::Median
                };
                let fused = fuse_baseline(&frames, keyframe, &flows, fusion)?;
                write_png(&out.path.join(format!("fused_{method}.png")), &fused)?;
                if let Some(gt_b) = &gt_keyframe_background {
                    let l1 = (&fused - gt_b).mapv(f64::abs).mean().unwrap_or(f64::NAN);
                    rows.push(BaselineRow {
                        method: method.into(),
                        loss_name: "background_l1".into(),
                        value: l1,
                    });
                }
            }
            "zero" | "dense" | "uniform" => {
                let init_mode = match method {
                    "zero" => InitFlowMode::Zero,
                    "dense" => InitFlowMode::Dense,
                    _ => InitFlowMode::Uniform,
                };
                let (params, _) =
                    init_or_load_params(args.ckpt.as_ref(), &model_cfg, train_cfg.seed)?;
                let mut pass = forward_decompose(
                    &params,
                    &frames,
                    keyframe,
                    backend.as_ref(),
                    &ForwardOptions {
                        levels: train_cfg.levels,
                        init_mode,
                        trainable: TrainableSets::none(),
                        inference: false,
                    },
                )?;
                let background = pass.final_background();
                write_png(
                    &out.path.join(format!("network_{method}.png")),
                    &background,
                )?;
                if let Some(g) = &gt {
                    let gt_sec = match params.mode {
                        TaskMode::Reflection => g.gt_obstruction.as_ref(),
                        TaskMode::Obstruction => g.gt_alpha.as_ref(),
                    };
                    if let (Some(gt_b), Some(gt_sec)) = (g.gt_background.as_ref(), gt_sec) {
                        let loss = supervised_loss(&mut pass, gt_b, gt_sec, &weights)?;
                        for (name, value) in
                            [("supervised", loss.report.supervised), ("img", loss.report.img), ("grad", loss.report.grad)]
                        {
                            rows.push(BaselineRow {
                                method: method.into(),
                                loss_name: name.into(),
                                value,
                            });
                        }
                    }
                }
                if let Some(gt_b) = &gt_keyframe_background {
                    let l1 = (&background - gt_b)
                        .mapv(f64::abs)
                        .mean()
                        .unwrap_or(f64::NAN);
                    rows.push(BaselineRow {
                        method: method.into(),
                        loss_name: "background_l1".into(),
                        value: l1,
                    });
                }
                let uns = unsupervised_loss(&mut pass, &weights)?;
                rows.push(BaselineRow {
                    method: method.into(),
                    loss_name: "unsupervised".into(),
                    value: uns.report.unsupervised,
                });
            }
            other => bail!("unknown baseline method `{other}`"),
        }
    }

    let mut csv = String::from("method,loss_name,value\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.method, row.loss_name, row.value
        ));
    }
    std::fs::write(out.path.join("baselines.csv"), csv)?;
    std::fs::write(
        out.path.join("baselines.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    write_manifest(
        &out.path,
        &RunManifest {
            command: "baselines",
            argv: std::env::args().collect(),
            seed: train_cfg.seed,
            train: &train_cfg,
            model: &model_cfg,
            synth: None,
            backend: backend_info(backend.as_ref()),
        },
    )?;
    out.commit();
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<()> {
        let file_cfg = FileConfig::load(cli.config.as_deref())?;
        match cli.command {
            Command::Synth(args) => cmd_synth(file_cfg, args),
            Command::Pretrain(args) => cmd_pretrain(file_cfg, args),
            Command::Metatrain(args) => cmd_metatrain(file_cfg, args),
            Command::Remove(args) => cmd_remove(file_cfg, args),
            Command::Eval(args) => cmd_eval(file_cfg, args),
            Command::Baselines(args) => cmd_baselines(file_cfg, args),
        }
    })();
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
