//! Photometric losses, Adam, and the epoch loop.
//!
//! A batch holds pixels; in supersampling mode every pixel expands to its
//! `s²` sub-pixel rays, whose rendered colours are averaged before the
//! squared error against the low-resolution pixel. Coarse and fine passes are
//! both supervised with weight one.
//!
//! Rays are processed in fixed-size chunks, one graph per chunk, and the
//! per-chunk gradients are summed in chunk order. Each ray draws from its own
//! RNG stream keyed by `(seed, step, ray index)`. Together these make a run
//! bit-reproducible for any number of worker threads.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::camera::{subpixel_grid, Camera, Ray};
use crate::checkpoint::{Container, Section};
use crate::error::{Error, Result};
use crate::field::{BoundMlp, FieldConfig, FieldParams};
use crate::image::Image;
use crate::metrics::psnr;
use crate::render::{render_image, render_rays, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Supersample,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "supersample" => Ok(Mode::Supersample),
            _ => Err(Error::invalid(format!("unknown mode {s:?} (vanilla|supersample)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub scale: usize,
    pub batch_rays: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stratified jitter and random fine draws during training.
    pub jitter: bool,
    /// Rays per graph; fixed so results do not depend on the worker count.
    pub chunk_rays: usize,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supersample,
            scale: 2,
            batch_rays: 2048,
            epochs: 10,
            lr_start: 5e-4,
            lr_end: 5e-6,
            n_coarse: 64,
            n_fine: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            jitter: true,
            chunk_rays: 64,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::invalid("scale must be >= 1"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::invalid("need lr_start >= lr_end > 0"));
        }
        if self.batch_rays < self.rays_per_pixel() {
            return Err(Error::invalid(format!(
                "batch of {} rays cannot hold one pixel's {} sub-pixel rays",
                self.batch_rays,
                self.rays_per_pixel()
            )));
        }
        if self.chunk_rays < self.rays_per_pixel() {
            return Err(Error::invalid("chunk_rays must cover one pixel's sub-pixel rays"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        self.field.validate()?;
        self.render(false).validate()
    }

    /// Sub-pixel rays per training pixel.
    pub fn rays_per_pixel(&self) -> usize {
        match self.mode {
            Mode::Vanilla => 1,
            Mode::Supersample => self.scale * self.scale,
        }
    }

    pub fn pixels_per_batch(&self) -> usize {
        self.batch_rays / self.rays_per_pixel()
    }

    pub fn render(&self, white_background: bool) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            white_background,
            jitter: self.jitter,
        }
    }
}

/// `lr_start · (lr_end / lr_start)^(step / total)`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.numel() != g.len()) {
            return Err(Error::invalid("adam: parameter and gradient shapes differ"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::invalid("adam: parameters changed shape between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One supervised low-resolution pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPixel {
    pub camera: usize,
    pub x: usize,
    pub y: usize,
    pub target: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub cameras: &'a [Camera],
    pub pixels: Vec<TrainPixel>,
    /// Keys the per-ray RNG streams.
    pub seed: u64,
    pub step: u64,
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn ray_seed(seed: u64, step: u64, ray: u64) -> u64 {
    mix(mix(seed, step), ray)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub coarse: f64,
    pub fine: f64,
    /// Gradient per weight tensor, in [`FieldParams::tensors`] order.
    pub grads: Vec<Vec<f64>>,
}

impl Loss {
    pub fn total(&self) -> f64 {
        self.coarse + self.fine
    }
}

/// How pixels become rays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rays {
    Centre,
    Grid(usize),
}

impl Rays {
    fn per_pixel(self) -> usize {
        match self {
            Rays::Centre => 1,
            Rays::Grid(s) => s * s,
        }
    }
}

fn pixel_rays(cameras: &[Camera], pixels: &[TrainPixel], how: Rays) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(pixels.len() * how.per_pixel());
    for px in pixels {
        let cam = cameras
            .get(px.camera)
            .ok_or_else(|| Error::invalid(format!("pixel refers to missing camera {}", px.camera)))?;
        match how {
            Rays::Centre => rays.push(cam.ray((px.x as f64 + 0.5, px.y as f64 + 0.5))?),
            Rays::Grid(s) => {
                for p in subpixel_grid((px.x, px.y), s)? {
                    rays.push(cam.ray(p)?);
                }
            }
        }
    }
    Ok(rays)
}

/// Per-pixel predicted colours `[P, 3]` for coarse and fine passes.
fn predict<'g>(
    c: &BoundMlp<'g>,
    f: &BoundMlp<'g>,
    field: FieldConfig,
    rays: &[Ray],
    seeds: &[u64],
    how: Rays,
    render: &RenderConfig,
) -> Result<(Var<'g>, Var<'g>)> {
    let out = render_rays(c, f, field.l_pos, field.l_dir, rays, seeds, render)?;
    match how {
        Rays::Centre => Ok((out.coarse.color, out.fine.color)),
        Rays::Grid(s) => {
            let p = rays.len() / (s * s);
            let avg = |v: Var<'g>| v.reshape(&[p, s * s, 3])?.mean_axis(1);
            Ok((avg(out.coarse.color)?, avg(out.fine.color)?))
        }
    }
}

fn squared_error_sum<'g>(pred: Var<'g>, targets: &[[f64; 3]]) -> Result<Var<'g>> {
    let g = pred.graph();
    let t = g.constant(&[targets.len(), 3], targets.iter().flatten().copied().collect())?;
    let d = pred.sub(t)?;
    Ok(d.mul(d)?.sum()?)
}

/// Coarse and fine loss terms for a slice of a batch, each divided by
/// `norm`; the building block of both losses, exposed for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn loss_terms<'g>(
    c: &BoundMlp<'g>,
    f: &BoundMlp<'g>,
    field: FieldConfig,
    cameras: &[Camera],
    pixels: &[TrainPixel],
    seeds: &[u64],
    scale: Option<usize>,
    render: &RenderConfig,
    norm: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    let how = scale.map_or(Rays::Centre, Rays::Grid);
    let rays = pixel_rays(cameras, pixels, how)?;
    let (pc, pf) = predict(c, f, field, &rays, seeds, how, render)?;
    let targets: Vec<[f64; 3]> = pixels.iter().map(|p| p.target).collect();
    let lc = squared_error_sum(pc, &targets)?.scale(1.0 / norm)?;
    let lf = squared_error_sum(pf, &targets)?.scale(1.0 / norm)?;
    Ok((lc, lf))
}

fn batch_loss(
    params: &FieldParams,
    batch: &Batch<'_>,
    scale: Option<usize>,
    render: &RenderConfig,
    chunk_rays: usize,
) -> Result<Loss> {
    if batch.pixels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per = scale.map_or(1, |s| s * s);
    let chunk_pixels = (chunk_rays / per).max(1);
    let norm = batch.pixels.len() as f64;
    let field = params.config();
    let sizes: Vec<usize> = params.tensors().map(Tensor::numel).collect();
    let parts = batch
        .pixels
        .par_chunks(chunk_pixels)
        .enumerate()
        .map(|(ci, pixels)| -> Result<(f64, f64, Vec<Vec<f64>>)> {
            let first_ray = (ci * chunk_pixels * per) as u64;
            let seeds: Vec<u64> = (0..(pixels.len() * per) as u64)
                .map(|r| ray_seed(batch.seed, batch.step, first_ray + r))
                .collect();
            let g = Graph::new();
            let c = params.coarse.bind(&g, true)?;
            let f = params.fine.bind(&g, true)?;
            let (lc, lf) = loss_terms(&c, &f, field, batch.cameras, pixels, &seeds, scale, render, norm)?;
            let (vc, vf) = (lc.item()?, lf.item()?);
            let mut grads = g.backward(lc.add(lf)?)?;
            let out = c
                .vars
                .iter()
                .chain(&f.vars)
                .zip(&sizes)
                .map(|(v, &n)| grads.take_or_zeros(*v, n))
                .collect();
            Ok((vc, vf, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = Loss {
        coarse: 0.0,
        fine: 0.0,
        grads: sizes.iter().map(|&n| vec![0.0; n]).collect(),
    };
    for (vc, vf, grads) in parts {
        loss.coarse += vc;
        loss.fine += vf;
        for (acc, g) in loss.grads.iter_mut().zip(grads) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(loss)
}

/// Mean over pixels of the squared colour error of the pixel-centre ray,
/// coarse plus fine.
pub fn vanilla_loss(params: &FieldParams, batch: &Batch<'_>, render: &RenderConfig, chunk_rays: usize) -> Result<Loss> {
    batch_loss(params, batch, None, render, chunk_rays)
}

/// As [`vanilla_loss`], but each prediction is the mean of the `s²`
/// sub-pixel ray colours.
pub fn supersampled_loss(
    params: &FieldParams,
    batch: &Batch<'_>,
    s: usize,
    render: &RenderConfig,
    chunk_rays: usize,
) -> Result<Loss> {
    if s < 1 {
        return Err(Error::invalid("scale factor must be >= 1"));
    }
    batch_loss(params, batch, Some(s), render, chunk_rays)
}

/// The quantity the supersampled loss compares against each low-resolution
/// pixel: the fine-pass mean over its sub-pixel rays, without jitter.
pub fn subpixel_average_image(
    params: &FieldParams,
    camera: &Camera,
    s: usize,
    render: &RenderConfig,
    chunk_rays: usize,
) -> Result<Image> {
    let render = RenderConfig {
        jitter: false,
        ..*render
    };
    let (w, h) = (camera.intr.width, camera.intr.height);
    let pixels: Vec<TrainPixel> = (0..w * h)
        .map(|i| TrainPixel {
            camera: 0,
            x: i % w,
            y: i / w,
            target: [0.0; 3],
        })
        .collect();
    let field = params.config();
    let chunk_pixels = (chunk_rays / (s * s)).max(1);
    let cams = std::slice::from_ref(camera);
    let parts = pixels
        .par_chunks(chunk_pixels)
        .map(|px| -> Result<Vec<f64>> {
            let g = Graph::new();
            let c = params.coarse.bind(&g, false)?;
            let f = params.fine.bind(&g, false)?;
            let rays = pixel_rays(cams, px, Rays::Grid(s))?;
            let seeds = vec![0; rays.len()];
            let (_, pf) = predict(&c, &f, field, &rays, &seeds, Rays::Grid(s), &render)?;
            Ok(pf.value()?)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::from_clamped(w, h, parts.concat())
}

/// Views the trainer needs, independent of how they were stored.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Held-out view at training resolution, used to pick the best epoch.
    pub validation: Option<(Camera, Image)>,
    pub white_background: bool,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.cameras.len() != self.images.len() {
            return Err(Error::Dataset(
                "training set is empty or cameras and images differ in count".into(),
            ));
        }
        let intr = self.cameras[0].intr;
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if cam.intr != intr {
                return Err(Error::Dataset(format!("view {i} has different intrinsics")));
            }
            if img.dims() != (cam.intr.width, cam.intr.height) {
                return Err(Error::Dataset(format!(
                    "view {i}: image is {:?}, camera expects {}x{}",
                    img.dims(),
                    cam.intr.width,
                    cam.intr.height
                )));
            }
        }
        if let Some((cam, img)) = &self.validation {
            if img.dims() != (cam.intr.width, cam.intr.height) {
                return Err(Error::Dataset("validation image does not match its camera".into()));
            }
        }
        Ok(())
    }

    fn all_pixels(&self) -> Vec<TrainPixel> {
        let mut out = Vec::new();
        for (ci, img) in self.images.iter().enumerate() {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.push(TrainPixel {
                        camera: ci,
                        x,
                        y,
                        target: img.pixel(x, y),
                    });
                }
            }
        }
        out
    }
}

/// One line of the training log (JSON lines, one object per epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Epoch means of the per-batch losses.
    pub loss_coarse: f64,
    pub loss_fine: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub params: FieldParams,
    /// Weights of the epoch with the best validation PSNR (last if no validation view).
    pub best: FieldParams,
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_SECTION: &str = "train";

fn write_checkpoint(path: &Path, params: &FieldParams, cfg: &TrainConfig) -> Result<()> {
    let mut c = Container::default();
    c.put(params.to_section());
    c.put(Section {
        name: TRAIN_SECTION.into(),
        meta: serde_json::to_value(cfg).expect("train config serializes"),
        tensors: Vec::new(),
    });
    c.save(path)
}

/// Training config stored next to the weights, if present.
pub fn train_config_from_container(c: &Container) -> Result<Option<TrainConfig>> {
    match c.section(TRAIN_SECTION) {
        Some(s) => serde_json::from_value(s.meta.clone())
            .map(Some)
            .map_err(|e| Error::Checkpoint(format!("train section: {e}"))),
        None => Ok(None),
    }
}

pub fn steps_per_epoch(data: &TrainData, cfg: &TrainConfig) -> usize {
    let pixels: usize = data.images.iter().map(|i| i.width() * i.height()).sum();
    pixels.div_ceil(cfg.pixels_per_batch())
}

/// Runs the epoch loop on the current rayon pool. With `out_dir` set, the
/// log and the last and best checkpoints are written there every epoch.
pub fn train(
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut params = FieldParams::init(cfg.field, cfg.seed)?;
    let render = cfg.render(data.white_background);
    let eval_render = RenderConfig {
        jitter: false,
        ..render
    };
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut pixels = data.all_pixels();
    let per_batch = cfg.pixels_per_batch();
    let total_steps = steps_per_epoch(data, cfg) * cfg.epochs;
    let scale = match cfg.mode {
        Mode::Vanilla => None,
        Mode::Supersample => Some(cfg.scale),
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let start = Instant::now();
    let mut step = 0usize;
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5348_5546 ^ epoch as u64));
        pixels.shuffle(&mut rng);
        let (mut sum_c, mut sum_f, mut n) = (0.0, 0.0, 0usize);
        let mut lr = lr_at(step, total_steps, cfg);
        for chunk in pixels.chunks(per_batch) {
            let batch = Batch {
                cameras: &data.cameras,
                pixels: chunk.to_vec(),
                seed: cfg.seed,
                step: step as u64,
            };
            let loss = batch_loss(&params, &batch, scale, &render, cfg.chunk_rays)?;
            if !loss.total().is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            lr = lr_at(step, total_steps, cfg);
            adam.step(params.tensors_mut(), &loss.grads, lr)?;
            sum_c += loss.coarse;
            sum_f += loss.fine;
            n += 1;
            step += 1;
        }
        let val_psnr = match &data.validation {
            Some((cam, img)) => {
                let r = render_image(&params, &cam.pose, &cam.intr, cam.bounds, &eval_render)?;
                Some(psnr(&r.image, img)?)
            }
            None => None,
        };
        let rec = LogRecord {
            epoch,
            step,
            loss_coarse: sum_c / n as f64,
            loss_fine: sum_f / n as f64,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
            val_psnr,
        };
        let score = val_psnr.unwrap_or(epoch as f64);
        let improved = score > best.0;
        if improved {
            best = (score, params.clone(), epoch);
        }
        if let (Some(dir), Some((f, path))) = (out_dir, log_file.as_mut()) {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            write_checkpoint(&dir.join(LAST_CHECKPOINT), &params, cfg)?;
            if improved {
                write_checkpoint(&dir.join(BEST_CHECKPOINT), &params, cfg)?;
            }
        }
        progress(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        params,
        best: best.1,
        best_epoch: best.2,
        log,
    })
}
