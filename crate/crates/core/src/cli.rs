//! The `subnerf` command line: dataset generation, training, rendering,
//! refinement and evaluation. Progress goes to standard error; results are
//! written to files only.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{Bounds, CameraPose, Intrinsics};
use crate::checkpoint::Container;
use crate::dataset::{load_dataset, make_dataset, Dataset, DatasetOptions, Split, MANIFEST_FILE};
use crate::error::Error;
use crate::field::FieldParams;
use crate::image::{load_depth_float, save_depth_float, Image};
use crate::metrics::{psnr, ssim, Kernel, MetricRow, MetricsReport};
use crate::refine::{
    refine_image, train_refiner, GradientFeatures, RefineInput, RefineTrainConfig, RefinerParams, Viewpoint,
};
use crate::render::{render_image, RenderConfig};
use crate::scene::AnalyticScene;
use crate::train::{train, train_config_from_container, Mode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const RENDERS_FILE: &str = "renders.json";
pub const RENDERS_FORMAT: &str = "subnerf-renders";
pub const REFINER_CHECKPOINT: &str = "refiner.ckpt";
pub const REFINE_LOG: &str = "refine_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Parser, Debug)]
#[command(
    name = "subnerf",
    version,
    about = "Supersampled radiance fields and depth-guided patch refinement"
)]
pub struct Cli {
    /// Worker threads for the parallel loops (default: available parallelism).
    /// Results do not depend on this value.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render an analytic scene into a multi-view dataset with LR and HR images.
    MakeDataset(MakeDatasetArgs),
    /// Fit a radiance field to the LR training views.
    Train(TrainArgs),
    /// Render views of a trained field with color and depth.
    Render(RenderArgs),
    /// Train or load a patch refiner and refine rendered views.
    Refine(RefineArgs),
    /// Compare rendered views against ground truth (PSNR, SSIM).
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    Supersample,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Supersample => Mode::Supersample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Average,
    Tent,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Average => Kernel::Average,
            KernelArg::Tent => Kernel::Tent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn admits(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with dataset options and an optional scene description.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the camera placement.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Downsampling factor between HR and LR images.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Downsampling kernel used to make the LR images.
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Number of training views.
    #[arg(long)]
    pub views: Option<usize>,
    /// Number of held-out test views.
    #[arg(long)]
    pub test_views: Option<usize>,
    /// Width and height of the HR images.
    #[arg(long)]
    pub hr_res: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (or its manifest).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with training options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training mode: one ray per LR pixel, or s×s sub-pixel rays averaged.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Sub-pixel factor for supersampled training (default: the dataset's scale).
    #[arg(long)]
    pub scale: Option<usize>,
    /// Number of passes over the training pixels.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Rays per optimizer step.
    #[arg(long)]
    pub batch_rays: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Dataset directory providing poses, intrinsics and bounds.
    #[arg(long)]
    pub data: PathBuf,
    /// Field checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the rendered views.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with render options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which dataset views to render.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// JSON file with a pose list (`[{"id": .., "cam_to_world": [[..]]}]`) to render instead of dataset views.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Output resolution as a multiple of the LR resolution (default: the dataset's scale).
    #[arg(long)]
    pub scale: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Dataset directory providing the reference image and its camera.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `render` with the views to refine.
    #[arg(long)]
    pub renders: PathBuf,
    /// Dataset view id of the reference image.
    #[arg(long)]
    pub reference: usize,
    /// Output directory for refined views, the refiner and its log.
    #[arg(long)]
    pub out: PathBuf,
    /// Field checkpoint, used to render the reference view when the renders lack it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trained refiner checkpoint to use instead of training one.
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    /// JSON file with refiner training options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for refiner initialization and patch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Refiner optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground truth: a dataset directory (HR images) or a renders directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of views to score; repeat to compare methods.
    #[arg(long, required = true)]
    pub renders: Vec<PathBuf>,
    /// Method name for each `--renders` (default: the directory name).
    #[arg(long)]
    pub method: Vec<String>,
    /// Output directory for the metrics table and JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset views to score when the ground truth is a dataset.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn validation(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::OutsideImage { .. }
            | Error::BehindCamera(_)
            | Error::Format { .. }
            | Error::Dataset(_)
            | Error::Checkpoint(_)
            | Error::EmptyBatch => EXIT_VALIDATION,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let workers = match cli.workers {
        Some(n) => n as usize,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: format!("thread pool: {e}"),
        })?;
    pool.install(|| match cli.command {
        Command::MakeDataset(a) => cmd_make_dataset(a, workers),
        Command::Train(a) => cmd_train(a, workers),
        Command::Render(a) => cmd_render(a, workers),
        Command::Refine(a) => cmd_refine(a, workers),
        Command::Eval(a) => cmd_eval(a, workers),
    })
}

/// Reads a JSON config into `T` and reports which top-level keys it set.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<(T, Vec<String>)> {
    let Some(path) = path else {
        return Ok((T::default(), Vec::new()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let keys = value
        .as_object()
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default();
    let cfg = serde_json::from_value(value).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    Ok((cfg, keys))
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::validation(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::from(Error::io(path, e)))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::from(Error::io(path, e)))
}

fn write_effective(out: &Path, command: &str, workers: usize, config: &impl Serialize) -> CliResult<()> {
    create_dir(out)?;
    let v = serde_json::json!({
        "command": command,
        "workers": workers,
        "config": config,
    });
    write_json(&out.join(EFFECTIVE_CONFIG), &v)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    require_exists(path, "dataset")?;
    Ok(load_dataset(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MakeDatasetConfig {
    pub options: DatasetOptions,
    pub scene: AnalyticScene,
}

impl Default for MakeDatasetConfig {
    fn default() -> Self {
        Self {
            options: DatasetOptions::default(),
            scene: AnalyticScene::three_primitives(),
        }
    }
}

fn cmd_make_dataset(a: MakeDatasetArgs, workers: usize) -> CliResult<()> {
    let (mut cfg, _) = load_config::<MakeDatasetConfig>(a.config.as_deref())?;
    let o = &mut cfg.options;
    o.seed = a.seed.unwrap_or(o.seed);
    o.scale = a.scale.unwrap_or(o.scale);
    o.kernel = a.kernel.map_or(o.kernel, Kernel::from);
    o.n_views = a.views.unwrap_or(o.n_views);
    o.n_test = a.test_views.unwrap_or(o.n_test);
    o.hr_res = a.hr_res.unwrap_or(o.hr_res);
    cfg.options.validate()?;
    cfg.scene.validate()?;
    write_effective(&a.out, "make-dataset", workers, &cfg)?;
    let start = Instant::now();
    let m = make_dataset(&cfg.scene, &cfg.options, &a.out)?;
    eprintln!(
        "wrote {} views ({}x{} HR, {}x{} LR) to {} in {:.1}s",
        m.frames.len(),
        m.hr_intrinsics.width,
        m.hr_intrinsics.height,
        m.lr_intrinsics.width,
        m.lr_intrinsics.height,
        a.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Applies flags over the config file over defaults. Without an explicit
/// scale, supersampling uses the dataset's own factor.
pub fn merge_train_config(cfg: &mut TrainConfig, keys: &[String], a: &TrainArgs, dataset_scale: usize) {
    if !keys.iter().any(|k| k == "scale") {
        cfg.scale = dataset_scale;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.mode = a.mode.map_or(cfg.mode, Mode::from);
    cfg.scale = a.scale.unwrap_or(cfg.scale);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_rays = a.batch_rays.unwrap_or(cfg.batch_rays);
}

fn cmd_train(a: TrainArgs, workers: usize) -> CliResult<()> {
    let (mut cfg, keys) = load_config::<TrainConfig>(a.config.as_deref())?;
    let ds = load_data(&a.data)?;
    merge_train_config(&mut cfg, &keys, &a, ds.manifest.scale);
    cfg.validate()?;
    let data = ds.train_data();
    data.validate()?;
    write_effective(&a.out, "train", workers, &cfg)?;
    eprintln!(
        "training {:?} s={} on {} views, {} epochs, {} rays per step",
        cfg.mode,
        cfg.scale,
        data.images.len(),
        cfg.epochs,
        cfg.batch_rays
    );
    let outcome = train(&data, &cfg, Some(&a.out), |r| {
        let val = r.val_psnr.map_or(String::new(), |p| format!(" val_psnr {p:.3}"));
        eprintln!(
            "epoch {:>3} step {:>6} loss_c {:.6} loss_f {:.6} lr {:.2e}{val} t {:.1}s",
            r.epoch, r.step, r.loss_coarse, r.loss_fine, r.lr, r.wall_time
        );
    })?;
    eprintln!("best epoch {}; checkpoints in {}", outcome.best_epoch, a.out.display());
    Ok(())
}

/// One rendered view on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderedView {
    pub id: usize,
    pub cam_to_world: CameraPose,
    pub intrinsics: Intrinsics,
    pub png: String,
    pub float: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RendersManifest {
    pub format: String,
    pub version: u32,
    pub near: f64,
    pub far: f64,
    pub views: Vec<RenderedView>,
}

impl RendersManifest {
    fn new(bounds: Bounds) -> Self {
        Self {
            format: RENDERS_FORMAT.into(),
            version: 1,
            near: bounds.near,
            far: bounds.far,
            views: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> crate::Result<Self> {
        let p = dir.join(RENDERS_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
        if m.format != RENDERS_FORMAT || m.version != 1 {
            return Err(Error::format(
                &p,
                format!("unsupported renders {} v{}", m.format, m.version),
            ));
        }
        Ok(m)
    }

    /// Color and depth of one view.
    pub fn read_view(&self, dir: &Path, v: &RenderedView) -> crate::Result<(Image, Vec<f64>)> {
        let img = Image::load_float(&dir.join(&v.float))?;
        let (w, h, depth) = load_depth_float(&dir.join(&v.depth))?;
        if img.dims() != (v.intrinsics.width, v.intrinsics.height) || (w, h) != img.dims() {
            return Err(Error::format(
                dir.join(&v.float),
                "image or depth size disagrees with the intrinsics",
            ));
        }
        Ok((img, depth))
    }
}

/// Writes one view's files into `dir` and returns its manifest entry.
fn write_view(
    dir: &Path,
    id: usize,
    pose: CameraPose,
    intr: Intrinsics,
    img: &Image,
    depth: &[f64],
) -> crate::Result<RenderedView> {
    let v = RenderedView {
        id,
        cam_to_world: pose,
        intrinsics: intr,
        png: format!("{id:03}.png"),
        float: format!("{id:03}.f64img"),
        depth: format!("{id:03}.depth.f64img"),
    };
    img.save_png(&dir.join(&v.png))?;
    img.save_float(&dir.join(&v.float))?;
    save_depth_float(&dir.join(&v.depth), img.width(), img.height(), depth)?;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub split: SplitArg,
    /// Multiple of the LR resolution; `None` uses the dataset's scale.
    pub scale: Option<usize>,
    /// Sample counts; `None` uses the counts the field was trained with.
    pub n_coarse: Option<usize>,
    pub n_fine: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            split: SplitArg::Test,
            scale: None,
            n_coarse: None,
            n_fine: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    id: usize,
    cam_to_world: CameraPose,
}

/// Field weights plus the render settings they were trained with.
fn load_field(path: &Path) -> CliResult<(FieldParams, Option<TrainConfig>)> {
    require_exists(path, "checkpoint")?;
    let c = Container::load(path)?;
    Ok((FieldParams::from_container(&c)?, train_config_from_container(&c)?))
}

fn render_config(
    trained: Option<&TrainConfig>,
    n_coarse: Option<usize>,
    n_fine: Option<usize>,
    white: bool,
) -> RenderConfig {
    let d = RenderConfig::default();
    RenderConfig {
        n_coarse: n_coarse.or(trained.map(|t| t.n_coarse)).unwrap_or(d.n_coarse),
        n_fine: n_fine.or(trained.map(|t| t.n_fine)).unwrap_or(d.n_fine),
        white_background: white,
        jitter: false,
    }
}

fn cmd_render(a: RenderArgs, workers: usize) -> CliResult<()> {
    let (mut opts, _) = load_config::<RenderOptions>(a.config.as_deref())?;
    opts.split = a.split.unwrap_or(opts.split);
    opts.scale = a.scale.or(opts.scale);
    let ds = load_data(&a.data)?;
    let (params, trained) = load_field(&a.checkpoint)?;
    let m = &ds.manifest;
    let scale = opts.scale.unwrap_or(m.scale);
    if scale == 0 {
        return Err(Failure::validation("render scale must be >= 1"));
    }
    let intr = if scale == m.scale {
        m.hr_intrinsics
    } else {
        m.lr_intrinsics.scaled(scale)
    };
    let poses: Vec<(usize, CameraPose)> = match &a.poses {
        Some(p) => {
            let (entries, _) = load_config::<Vec<PoseEntry>>(Some(p))?;
            entries.into_iter().map(|e| (e.id, e.cam_to_world)).collect()
        }
        None => ds
            .views
            .iter()
            .filter(|v| opts.split.admits(v.split))
            .map(|v| (v.id, v.hr_camera.pose))
            .collect(),
    };
    if poses.is_empty() {
        return Err(Failure::validation("no views to render"));
    }
    let rc = render_config(trained.as_ref(), opts.n_coarse, opts.n_fine, m.white_background);
    rc.validate()?;
    let bounds = m.bounds();
    write_effective(
        &a.out,
        "render",
        workers,
        &serde_json::json!({ "options": opts, "render": rc, "width": intr.width, "height": intr.height }),
    )?;
    let mut out = RendersManifest::new(bounds);
    for (i, (id, pose)) in poses.iter().enumerate() {
        let start = Instant::now();
        let r = render_image(&params, pose, &intr, bounds, &rc)?;
        out.views
            .push(write_view(&a.out, *id, *pose, intr, &r.image, &r.depth)?);
        eprintln!(
            "rendered view {id} ({}/{}) at {}x{} in {:.1}s",
            i + 1,
            poses.len(),
            intr.width,
            intr.height,
            start.elapsed().as_secs_f64()
        );
    }
    write_json(&a.out.join(RENDERS_FILE), &out)
}

fn cmd_refine(a: RefineArgs, workers: usize) -> CliResult<()> {
    let (mut cfg, _) = load_config::<RefineTrainConfig>(a.config.as_deref())?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.validate()?;
    let ds = load_data(&a.data)?;
    require_exists(&a.renders.join(RENDERS_FILE), "renders manifest")?;
    let renders = RendersManifest::load(&a.renders)?;
    let refv = ds.view(a.reference)?;
    let ref_vp = Viewpoint {
        pose: refv.hr_camera.pose,
        intr: refv.hr_camera.intr,
    };
    let loaded = match &a.refiner {
        Some(p) => {
            require_exists(p, "refiner checkpoint")?;
            Some(RefinerParams::from_container(&Container::load(p)?)?)
        }
        None => None,
    };
    let existing = renders
        .views
        .iter()
        .find(|v| v.id == a.reference && (v.intrinsics.width, v.intrinsics.height) == refv.hr.dims());
    let field = match (&loaded, existing, &a.checkpoint) {
        (None, None, Some(ck)) => Some(load_field(ck)?),
        (None, None, None) => {
            return Err(Failure::validation(format!(
                "renders lack view {} at HR size; pass --checkpoint to render it",
                a.reference
            )))
        }
        _ => None,
    };
    write_effective(
        &a.out,
        "refine",
        workers,
        &serde_json::json!({ "reference": a.reference, "train": cfg }),
    )?;
    let params = match loaded {
        Some(p) => p,
        None => {
            let sr = match (existing, field) {
                (Some(v), _) => renders.read_view(&a.renders, v)?.0,
                (None, Some((params, trained))) => {
                    let rc = render_config(trained.as_ref(), None, None, ds.manifest.white_background);
                    let c = refv.hr_camera;
                    render_image(&params, &c.pose, &c.intr, c.bounds, &rc)?.image
                }
                (None, None) => unreachable!("checked above"),
            };
            let start = Instant::now();
            let mut log = String::new();
            let (p, _) = train_refiner(&sr, &refv.hr, &cfg, &GradientFeatures, |r| {
                log += &serde_json::to_string(r).expect("log record serializes");
                log.push('\n');
                if r.step % 25 == 0 || r.step + 1 == cfg.steps {
                    eprintln!(
                        "refiner step {:>5} loss {:.5} l1 {:.5} t {:.1}s",
                        r.step,
                        r.loss,
                        r.l1,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            let lp = a.out.join(REFINE_LOG);
            std::fs::write(&lp, log).map_err(|e| Failure::from(Error::io(&lp, e)))?;
            p
        }
    };
    let mut c = Container::default();
    c.put(params.to_section());
    c.save(&a.out.join(REFINER_CHECKPOINT))?;
    let mut out = RendersManifest {
        views: Vec::new(),
        ..renders.clone()
    };
    let refined = renders
        .views
        .par_iter()
        .map(|v| {
            let (img, depth) = renders.read_view(&a.renders, v)?;
            let view = Viewpoint {
                pose: v.cam_to_world,
                intr: v.intrinsics,
            };
            let r = refine_image(
                &params,
                RefineInput {
                    image: &img,
                    depth: &depth,
                    view,
                },
                &refv.hr,
                &ref_vp,
                cfg.k,
            )?;
            Ok((r, depth))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    for (v, (img, depth)) in renders.views.iter().zip(refined) {
        out.views
            .push(write_view(&a.out, v.id, v.cam_to_world, v.intrinsics, &img, &depth)?);
    }
    eprintln!("refined {} views into {}", out.views.len(), a.out.display());
    write_json(&a.out.join(RENDERS_FILE), &out)
}

/// Views keyed by id, from a dataset (HR images) or a renders directory.
fn load_view_set(dir: &Path, split: SplitArg) -> CliResult<Vec<(usize, Image)>> {
    require_exists(dir, "directory")?;
    if dir.join(MANIFEST_FILE).exists() {
        let ds = load_dataset(dir)?;
        return Ok(ds
            .views
            .into_iter()
            .filter(|v| split.admits(v.split))
            .map(|v| (v.id, v.hr))
            .collect());
    }
    if dir.join(RENDERS_FILE).exists() {
        let m = RendersManifest::load(dir)?;
        return m
            .views
            .iter()
            .map(|v| Ok((v.id, Image::load_float(&dir.join(&v.float))?)))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(Failure::from);
    }
    Err(Failure::validation(format!(
        "{} holds neither {MANIFEST_FILE} nor {RENDERS_FILE}",
        dir.display()
    )))
}

fn dir_name(p: &Path) -> String {
    let canon = p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    canon
        .file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_eval(a: EvalArgs, workers: usize) -> CliResult<()> {
    if !a.method.is_empty() && a.method.len() != a.renders.len() {
        return Err(Failure::validation(format!(
            "{} --method names for {} --renders directories",
            a.method.len(),
            a.renders.len()
        )));
    }
    let methods: Vec<String> = if a.method.is_empty() {
        a.renders.iter().map(|p| dir_name(p)).collect()
    } else {
        a.method.clone()
    };
    let truth = load_view_set(&a.data, a.split)?;
    let scene = dir_name(&a.data);
    let mut sets = Vec::new();
    for r in &a.renders {
        // a dataset given as renders is scored on every split it shares with the truth
        sets.push(load_view_set(r, SplitArg::All)?);
    }
    write_effective(
        &a.out,
        "eval",
        workers,
        &serde_json::json!({ "data": a.data, "renders": a.renders, "methods": methods, "split": a.split }),
    )?;
    let mut report = MetricsReport::default();
    for (method, set) in methods.iter().zip(&sets) {
        let mut scored = 0;
        for (id, img) in set {
            let Some((_, gt)) = truth.iter().find(|(t, _)| t == id) else {
                continue;
            };
            report.push(MetricRow {
                scene: scene.clone(),
                view: *id,
                method: method.clone(),
                psnr: psnr(img, gt)?,
                ssim: ssim(img, gt)?,
            });
            scored += 1;
        }
        if scored == 0 {
            return Err(Failure::validation(format!(
                "{method}: no views in common with the ground truth"
            )));
        }
    }
    let table = report.to_table();
    let tp = a.out.join(METRICS_TABLE);
    std::fs::write(&tp, &table).map_err(|e| Failure::from(Error::io(&tp, e)))?;
    write_json(&a.out.join(METRICS_JSON), &report.to_json())?;
    eprint!("{table}");
    Ok(())
}
