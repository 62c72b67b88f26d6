//! Reference-guided patch refinement.
//!
//! A synthesized 64×64 patch is paired with up to K patches cut from one
//! high-resolution reference view. The reference patches are located by
//! warping the synthesized patch's pixels into the reference view with the
//! rendered depth. A small convolutional encoder is shared between the
//! query patch and the references; reference features are max-pooled over
//! the set, so the output does not depend on their order. The decoder
//! predicts a residual through a zero-initialized head, which makes the
//! untrained refiner the identity.

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::camera::{add, pixel_direction, project, scale, CameraPose, Intrinsics};
use crate::checkpoint::{Container, Section};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::{mix, Adam};

/// Side length of every patch.
pub const PATCH: usize = 64;
pub const DEFAULT_K: usize = 8;
/// Rows and columns of the grid that splits warped pixels into clusters.
pub const GRID: (usize, usize) = (2, 4);
pub const REFINER_SECTION: &str = "refiner";

/// Pose and intrinsics of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    pub pose: CameraPose,
    pub intr: Intrinsics,
}

/// Where one source pixel lands in the reference image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Warped {
    Inside(f64, f64),
    /// In front of the reference camera but outside its image.
    Outside(f64, f64),
    /// No depth, or behind the reference camera.
    Discarded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpMap {
    pub origin: (usize, usize),
    pub size: usize,
    /// Row-major, `size × size`.
    pub pixels: Vec<Warped>,
}

impl WarpMap {
    pub fn inside(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.pixels.iter().filter_map(|w| match *w {
            Warped::Inside(u, v) => Some((u, v)),
            _ => None,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> Warped {
        self.pixels[j * self.size + i]
    }
}

/// Maps each pixel of the `size × size` patch at `origin` in the source
/// view to reference image coordinates. `depth` is the distance along each
/// pixel's unit ray (as the renderer reports it), row-major with
/// `depth_width` columns; values `<= 0` mark pixels without depth.
pub fn warp_map(
    origin: (usize, usize),
    size: usize,
    depth: &[f64],
    depth_width: usize,
    source: &Viewpoint,
    reference: &Viewpoint,
) -> Result<WarpMap> {
    if depth_width == 0 || !depth.len().is_multiple_of(depth_width) {
        return Err(Error::invalid("depth map length is not a multiple of its width"));
    }
    let depth_height = depth.len() / depth_width;
    if origin.0 + size > depth_width || origin.1 + size > depth_height {
        return Err(Error::invalid(format!(
            "patch at {origin:?} of size {size} exceeds the {depth_width}x{depth_height} depth map"
        )));
    }
    let centre = source.pose.center();
    let mut pixels = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let (x, y) = (origin.0 + i, origin.1 + j);
            let d = depth[y * depth_width + x];
            if !d.is_finite() {
                return Err(Error::NonFinite("depth"));
            }
            if d <= 0.0 {
                pixels.push(Warped::Discarded);
                continue;
            }
            let dir = pixel_direction(&source.pose, &source.intr, (x as f64 + 0.5, y as f64 + 0.5));
            let world = add(centre, scale(dir, d));
            pixels.push(match project(world, &reference.pose, &reference.intr) {
                Ok((p, _)) if reference.intr.contains(p) => Warped::Inside(p.0, p.1),
                Ok((p, _)) => Warped::Outside(p.0, p.1),
                Err(Error::BehindCamera(_)) => Warped::Discarded,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(WarpMap { origin, size, pixels })
}

/// K reference patches for one query patch.
#[derive(Clone, Debug, PartialEq)]
pub struct RefSet {
    pub patches: Vec<Image>,
    /// Reference-image point each patch is centred on.
    pub centers: Vec<(f64, f64)>,
    /// Set when no pixel warped inside the reference image.
    pub fallback: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// The `PATCH × PATCH` window of `img` centred on `c`; samples beyond the
/// border repeat the edge pixels.
pub fn patch_at(img: &Image, c: (f64, f64)) -> Image {
    let half = (PATCH / 2) as f64;
    let x0 = (c.0 - half).round() as isize;
    let y0 = (c.1 - half).round() as isize;
    img.crop_clamped(x0, y0, PATCH, PATCH)
}

/// Centres of the reference patches: the valid warped coordinates are split
/// by a fixed 2×4 grid over their bounding box, and each non-empty cell
/// contributes its component-wise median. With more than `k` cells the
/// most populated win; with fewer, the list is repeated up to `k`.
pub fn reference_centers(warp: &WarpMap, k: usize, reference_dims: (usize, usize)) -> Result<(Vec<(f64, f64)>, bool)> {
    if k == 0 {
        return Err(Error::invalid("need at least one reference patch"));
    }
    let valid: Vec<(f64, f64)> = warp.inside().collect();
    if valid.is_empty() {
        let projected: Vec<(f64, f64)> = warp
            .pixels
            .iter()
            .filter_map(|w| match *w {
                Warped::Outside(u, v) | Warped::Inside(u, v) => Some((u, v)),
                Warped::Discarded => None,
            })
            .collect();
        let c = if projected.is_empty() {
            (reference_dims.0 as f64 / 2.0, reference_dims.1 as f64 / 2.0)
        } else {
            let n = projected.len() as f64;
            (
                projected.iter().map(|p| p.0).sum::<f64>() / n,
                projected.iter().map(|p| p.1).sum::<f64>() / n,
            )
        };
        return Ok((vec![c; k], true));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(u, v) in &valid {
        x0 = x0.min(u);
        x1 = x1.max(u);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    let (rows, cols) = GRID;
    let cell = |p: f64, lo: f64, hi: f64, n: usize| -> usize {
        if hi > lo {
            (((p - lo) / (hi - lo) * n as f64) as usize).min(n - 1)
        } else {
            0
        }
    };
    let mut cells: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); rows * cols];
    for &(u, v) in &valid {
        let c = cell(v, y0, y1, rows) * cols + cell(u, x0, x1, cols);
        cells[c].0.push(u);
        cells[c].1.push(v);
    }
    let mut clusters: Vec<(usize, (f64, f64))> = cells
        .into_iter()
        .filter(|(us, _)| !us.is_empty())
        .map(|(mut us, mut vs)| (us.len(), (median(&mut us), median(&mut vs))))
        .collect();
    // stable: equal sizes keep grid order
    clusters.sort_by_key(|c| std::cmp::Reverse(c.0));
    clusters.truncate(k);
    let centers = (0..k).map(|i| clusters[i % clusters.len()].1).collect();
    Ok((centers, false))
}

pub fn gather_reference_patches(warp: &WarpMap, reference: &Image, k: usize) -> Result<RefSet> {
    let (centers, fallback) = reference_centers(warp, k, reference.dims())?;
    Ok(RefSet {
        patches: centers.iter().map(|&c| patch_at(reference, c)).collect(),
        centers,
        fallback,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Output channels of the seven encoder convolutions; layers 2, 4 and 6
    /// halve the resolution.
    pub channels: [usize; 7],
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 32, 48, 48, 64, 64],
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::invalid("refiner channels must be nonzero"));
        }
        Ok(())
    }

    /// `(in, out, stride)` of every convolution: seven encoder layers, four
    /// decoder layers and the output head.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let c = self.channels;
        let mut out = Vec::with_capacity(12);
        for i in 0..7 {
            let input = if i == 0 { 3 } else { c[i - 1] };
            out.push((input, c[i], if i % 2 == 1 { 2 } else { 1 }));
        }
        out.push((2 * c[6], c[6], 1));
        out.push((c[6] + 2 * c[4], c[4], 1));
        out.push((c[4] + 2 * c[2], c[2], 1));
        out.push((c[2] + 2 * c[0], c[0], 1));
        out.push((c[0], 3, 1));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    /// `(weight [out, in, 3, 3], bias [out])` per layer.
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct RefinerMeta {
    config: RefinerConfig,
}

impl RefinerParams {
    /// He-uniform convolutions, zero biases, and an all-zero output head.
    pub fn init(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config.layers();
        let last = layers.len() - 1;
        let mut tensors = Vec::with_capacity(2 * layers.len());
        for (l, &(cin, cout, _)) in layers.iter().enumerate() {
            let n = cout * cin * 9;
            let w = if l == last {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.push(Tensor::new(&[cout, cin, 3, 3], w)?);
            tensors.push(Tensor::zeros(&[cout]));
        }
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: RefinerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        if tensors.len() != 2 * layers.len() {
            return Err(Error::Checkpoint(format!(
                "refiner expects {} tensors, found {}",
                2 * layers.len(),
                tensors.len()
            )));
        }
        for (l, &(cin, cout, _)) in layers.iter().enumerate() {
            if tensors[2 * l].shape() != [cout, cin, 3, 3] || tensors[2 * l + 1].shape() != [cout] {
                return Err(Error::Checkpoint(format!("refiner layer {l} has the wrong shape")));
            }
        }
        if tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("refiner weights"));
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn to_section(&self) -> Section {
        Section {
            name: REFINER_SECTION.into(),
            meta: serde_json::to_value(RefinerMeta { config: self.config }).expect("refiner metadata serializes"),
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let s = c
            .section(REFINER_SECTION)
            .ok_or_else(|| Error::Checkpoint("no refiner section".into()))?;
        let meta: RefinerMeta =
            serde_json::from_value(s.meta.clone()).map_err(|e| Error::Checkpoint(format!("refiner metadata: {e}")))?;
        Self::from_tensors(meta.config, s.tensors.clone())
    }

    fn bind<'g>(&self, g: &'g Graph, track: bool) -> Result<Vec<Var<'g>>, AutodiffError> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    g.param(t)
                } else {
                    g.constant(t.shape(), t.data().to_vec())
                }
            })
            .collect()
    }
}

/// Refines `query` `[1, 3, H, W]` given references `[R, 3, H, W]`; H and W
/// must be multiples of 8.
fn forward<'g>(cfg: &RefinerConfig, vars: &[Var<'g>], query: Var<'g>, refs: Var<'g>) -> Result<Var<'g>, AutodiffError> {
    let g = query.graph();
    let layers = cfg.layers();
    let conv = |l: usize, x: Var<'g>| x.conv2d(vars[2 * l], vars[2 * l + 1], layers[l].2, 1);
    let n_refs = refs.shape()?[0];
    let mut h = g.concat(&[query, refs], 0)?;
    // (query features, pooled reference features) at full, 1/2, 1/4, 1/8
    let mut skips = Vec::with_capacity(4);
    for l in 0..7 {
        h = conv(l, h)?.relu()?;
        if l % 2 == 0 {
            let q = h.slice(0, 0, 1)?;
            let parts = (0..n_refs)
                .map(|r| h.slice(0, 1 + r, 1))
                .collect::<Result<Vec<_>, _>>()?;
            skips.push((q, g.max_n(&parts)?));
        }
    }
    let (q, m) = skips[3];
    let mut d = conv(7, g.concat(&[q, m], 1)?)?.relu()?;
    for (l, &(q, m)) in (8..11).zip(skips[..3].iter().rev()) {
        d = conv(l, g.concat(&[d.upsample2x()?, q, m], 1)?)?.relu()?;
    }
    query.add(conv(11, d)?)?.clamp(0.0, 1.0)
}

/// `[3, H, W]` planar layout of an interleaved RGB image.
pub fn image_to_planar(img: &Image) -> Vec<f64> {
    let (w, h) = img.dims();
    let mut out = vec![0.0; 3 * w * h];
    for (p, rgb) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + p] = rgb[c];
        }
    }
    out
}

pub fn planar_to_image(w: usize, h: usize, planar: &[f64]) -> Result<Image> {
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            data[3 * p + c] = planar[c * w * h + p];
        }
    }
    Image::from_clamped(w, h, data)
}

fn stack<'a>(images: impl IntoIterator<Item = &'a Image>) -> Vec<f64> {
    images.into_iter().flat_map(image_to_planar).collect()
}

fn check_patch(img: &Image) -> Result<()> {
    if img.dims() != (PATCH, PATCH) {
        return Err(Error::DimensionMismatch {
            left: (PATCH, PATCH),
            right: img.dims(),
        });
    }
    Ok(())
}

/// Refines one patch. Duplicate references are encoded once; the max-pool
/// makes that invisible in the output.
pub fn refine(params: &RefinerParams, patch: &Image, refs: &RefSet) -> Result<Image> {
    check_patch(patch)?;
    let mut unique: Vec<&Image> = Vec::new();
    for r in &refs.patches {
        check_patch(r)?;
        if !unique.contains(&r) {
            unique.push(r);
        }
    }
    if unique.is_empty() {
        return Err(Error::invalid("reference set is empty"));
    }
    let g = Graph::new();
    let vars = params.bind(&g, false)?;
    let q = g.constant(&[1, 3, PATCH, PATCH], image_to_planar(patch))?;
    let r = g.constant(&[unique.len(), 3, PATCH, PATCH], stack(unique.iter().copied()))?;
    let out = forward(&params.config, &vars, q, r)?;
    planar_to_image(PATCH, PATCH, &out.value()?)
}

/// Feature maps compared by the secondary loss term.
pub trait FeatureExtractor: Send + Sync {
    fn features<'g>(&self, x: Var<'g>) -> Result<Vec<Var<'g>>, AutodiffError>;
}

/// Horizontal and vertical forward differences of an `[N, C, H, W]` image.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientFeatures;

impl FeatureExtractor for GradientFeatures {
    fn features<'g>(&self, x: Var<'g>) -> Result<Vec<Var<'g>>, AutodiffError> {
        let s = x.shape()?;
        let (h, w) = (s[2], s[3]);
        let dx = x.slice(3, 1, w - 1)?.sub(x.slice(3, 0, w - 1)?)?;
        let dy = x.slice(2, 1, h - 1)?.sub(x.slice(2, 0, h - 1)?)?;
        Ok(vec![dx, dy])
    }
}

/// Terms of the refinement objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineLossValue {
    pub l1: f64,
    pub feature: f64,
    pub total: f64,
}

/// `mean|out − target| + weight · Σ_l mean|φ_l(out) − φ_l(target)|`.
pub fn refine_loss<'g>(
    out: Var<'g>,
    target: Var<'g>,
    extractor: &dyn FeatureExtractor,
    weight: f64,
) -> Result<(Var<'g>, RefineLossValue), AutodiffError> {
    let l1 = out.sub(target)?.abs()?.mean()?;
    let mut feature: Option<Var<'g>> = None;
    for (a, b) in extractor.features(out)?.into_iter().zip(extractor.features(target)?) {
        let term = a.sub(b)?.abs()?.mean()?;
        feature = Some(match feature {
            Some(f) => f.add(term)?,
            None => term,
        });
    }
    let total = match feature {
        Some(f) => l1.add(f.scale(weight)?)?,
        None => l1,
    };
    let value = RefineLossValue {
        l1: l1.item()?,
        feature: feature.map(|f| f.item()).transpose()?.unwrap_or(0.0),
        total: total.item()?,
    };
    Ok((total, value))
}

/// Projective map of the unit patch given by where its four corners go.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography([f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// The homography taking `from[i]` to `to[i]` for the four corners.
    pub fn from_corners(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in from.iter().zip(&to).enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::invalid("degenerate corner configuration"))?;
        Ok(Self([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * p.0 + h[7] * p.1 + h[8];
        (
            (h[0] * p.0 + h[1] * p.1 + h[2]) / w,
            (h[3] * p.0 + h[4] * p.1 + h[5]) / w,
        )
    }
}

/// Bilinear sample at a continuous point (pixel centres at `+0.5`), edges
/// repeated.
pub fn sample_bilinear(img: &Image, p: (f64, f64)) -> [f64; 3] {
    let (w, h) = img.dims();
    let fx = (p.0 - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (p.1 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let (a, b, c, d) = (
        img.pixel(x0, y0),
        img.pixel(x1, y0),
        img.pixel(x0, y1),
        img.pixel(x1, y1),
    );
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] + (b[ch] - a[ch]) * tx;
        let bottom = c[ch] + (d[ch] - c[ch]) * tx;
        out[ch] = top + (bottom - top) * ty;
    }
    out
}

/// Patch whose pixel `p` shows `img` at `origin + hom(p)`.
pub fn warp_patch(img: &Image, origin: (isize, isize), hom: &Homography) -> Result<Image> {
    let mut data = Vec::with_capacity(3 * PATCH * PATCH);
    for j in 0..PATCH {
        for i in 0..PATCH {
            let q = hom.apply((i as f64 + 0.5, j as f64 + 0.5));
            data.extend(sample_bilinear(img, (origin.0 as f64 + q.0, origin.1 as f64 + q.1)));
        }
    }
    Image::from_clamped(PATCH, PATCH, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineTrainConfig {
    pub steps: usize,
    /// Patch pairs per optimizer step.
    pub batch: usize,
    pub lr: f64,
    /// Largest corner displacement of the perspective jitter, in pixels.
    pub jitter_px: f64,
    /// Reference patches are cut within this many pixels of the target.
    pub ref_window: usize,
    pub k: usize,
    pub feature_weight: f64,
    pub seed: u64,
    pub refiner: RefinerConfig,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 2,
            lr: 2e-4,
            jitter_px: 8.0,
            ref_window: 16,
            k: DEFAULT_K,
            feature_weight: 0.1,
            seed: 0,
            refiner: RefinerConfig::default(),
        }
    }
}

impl RefineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.k == 0 {
            return Err(Error::invalid("batch and k must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.jitter_px >= 0.0) || !(self.feature_weight >= 0.0) {
            return Err(Error::invalid(
                "lr must be positive; jitter and feature weight nonnegative",
            ));
        }
        if self.jitter_px >= PATCH as f64 / 4.0 {
            return Err(Error::invalid("jitter must stay below a quarter of the patch"));
        }
        self.refiner.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineLogRecord {
    pub step: usize,
    /// Batch means.
    pub loss: f64,
    pub l1: f64,
    pub feature: f64,
}

/// One training example: jittered input and target, and K reference crops.
struct Example {
    input: Image,
    target: Image,
    refs: Vec<Image>,
}

fn sample_example(sr: &Image, reference: &Image, cfg: &RefineTrainConfig, rng: &mut ChaCha8Rng) -> Result<Example> {
    let (w, h) = reference.dims();
    let x0 = rng.gen_range(0..=w.saturating_sub(PATCH)) as isize;
    let y0 = rng.gen_range(0..=h.saturating_sub(PATCH)) as isize;
    let p = PATCH as f64;
    let corners = [(0.0, 0.0), (p, 0.0), (p, p), (0.0, p)];
    let mut moved = corners;
    if cfg.jitter_px > 0.0 {
        for c in &mut moved {
            c.0 += rng.gen_range(-cfg.jitter_px..=cfg.jitter_px);
            c.1 += rng.gen_range(-cfg.jitter_px..=cfg.jitter_px);
        }
    }
    let hom = Homography::from_corners(corners, moved)?;
    let win = cfg.ref_window as isize;
    let refs = (0..cfg.k)
        .map(|_| {
            let dx = rng.gen_range(-win..=win);
            let dy = rng.gen_range(-win..=win);
            reference.crop_clamped(x0 + dx, y0 + dy, PATCH, PATCH)
        })
        .collect();
    Ok(Example {
        input: warp_patch(sr, (x0, y0), &hom)?,
        target: warp_patch(reference, (x0, y0), &hom)?,
        refs,
    })
}

fn example_grads(
    params: &RefinerParams,
    ex: &Example,
    extractor: &dyn FeatureExtractor,
    weight: f64,
) -> Result<(RefineLossValue, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let vars = params.bind(&g, true)?;
    let q = g.constant(&[1, 3, PATCH, PATCH], image_to_planar(&ex.input))?;
    let r = g.constant(&[ex.refs.len(), 3, PATCH, PATCH], stack(&ex.refs))?;
    let t = g.constant(&[1, 3, PATCH, PATCH], image_to_planar(&ex.target))?;
    let out = forward(&params.config, &vars, q, r)?;
    let (loss, value) = refine_loss(out, t, extractor, weight)?;
    let mut grads = g.backward(loss)?;
    let gs = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.take_or_zeros(*v, t.numel()))
        .collect();
    Ok((value, gs))
}

/// Trains from the super-resolved render `sr` of the reference camera and
/// the reference image itself. Examples within a step run in parallel and
/// are reduced in order, so results do not depend on the worker count.
pub fn train_refiner(
    sr: &Image,
    reference: &Image,
    cfg: &RefineTrainConfig,
    extractor: &dyn FeatureExtractor,
    mut progress: impl FnMut(&RefineLogRecord),
) -> Result<(RefinerParams, Vec<RefineLogRecord>)> {
    cfg.validate()?;
    if sr.dims() != reference.dims() {
        return Err(Error::DimensionMismatch {
            left: sr.dims(),
            right: reference.dims(),
        });
    }
    let mut params = RefinerParams::init(cfg.refiner, cfg.seed)?;
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let results = (0..cfg.batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, step as u64), b as u64));
                let ex = sample_example(sr, reference, cfg, &mut rng)?;
                example_grads(&params, &ex, extractor, cfg.feature_weight)
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / cfg.batch as f64;
        let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut rec = RefineLogRecord {
            step,
            loss: 0.0,
            l1: 0.0,
            feature: 0.0,
        };
        for (value, gs) in results {
            rec.loss += value.total * inv;
            rec.l1 += value.l1 * inv;
            rec.feature += value.feature * inv;
            for (acc, g) in grads.iter_mut().zip(gs) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v * inv);
            }
        }
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite("refinement loss"));
        }
        adam.step(params.tensors_mut().iter_mut(), &grads, cfg.lr)?;
        progress(&rec);
        log.push(rec);
    }
    Ok((params, log))
}

/// Mirror index for padding (edge pixel not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn padded_len(n: usize) -> usize {
    n.div_ceil(PATCH) * PATCH
}

fn reflect_pad_image(img: &Image, w: usize, h: usize) -> Result<Image> {
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            data.extend(img.pixel(reflect(x, img.width()), reflect(y, img.height())));
        }
    }
    Image::new(w, h, data)
}

fn reflect_pad_depth(depth: &[f64], dw: usize, dh: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(depth[reflect(y, dh) * dw + reflect(x, dw)]);
        }
    }
    out
}

/// A rendered view to be refined, with its depth (distance along each
/// pixel's ray, row-major, `<= 0` where undefined).
#[derive(Clone, Copy, Debug)]
pub struct RefineInput<'a> {
    pub image: &'a Image,
    pub depth: &'a [f64],
    pub view: Viewpoint,
}

/// Splits the image into non-overlapping 64×64 tiles (reflect-padding the
/// right and bottom edges when needed), refines each with references from
/// `reference`, and stitches the result back to the input size.
pub fn refine_image(
    params: &RefinerParams,
    input: RefineInput<'_>,
    reference: &Image,
    reference_view: &Viewpoint,
    k: usize,
) -> Result<Image> {
    let (w, h) = input.image.dims();
    if input.depth.len() != w * h {
        return Err(Error::invalid(format!(
            "depth map has {} values for a {w}x{h} image",
            input.depth.len()
        )));
    }
    let (pw, ph) = (padded_len(w), padded_len(h));
    let padded = reflect_pad_image(input.image, pw, ph)?;
    let depth = reflect_pad_depth(input.depth, w, h, pw, ph);
    let tiles: Vec<(usize, usize)> = (0..ph / PATCH)
        .flat_map(|ty| (0..pw / PATCH).map(move |tx| (tx * PATCH, ty * PATCH)))
        .collect();
    let refined = tiles
        .par_iter()
        .map(|&origin| {
            let warp = warp_map(origin, PATCH, &depth, pw, &input.view, reference_view)?;
            let refs = gather_reference_patches(&warp, reference, k)?;
            let patch = padded.crop_clamped(origin.0 as isize, origin.1 as isize, PATCH, PATCH);
            refine(params, &patch, &refs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = padded;
    for (&(x, y), patch) in tiles.iter().zip(&refined) {
        out.paste(patch, x, y);
    }
    Ok(out.crop_clamped(0, 0, w, h))
}
