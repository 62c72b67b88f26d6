//! Volume rendering by quadrature, with stratified and importance sampling.
//!
//! For samples `t_i` with intervals `δ_i`:
//!
//! ```text
//! α_i = 1 − exp(−σ_i δ_i)      T_i = Π_{j<i} (1 − α_j)      w_i = T_i α_i
//! color = Σ w_i c_i            acc = Σ w_i                  depth = Σ w_i t_i / max(acc, 1e-8)
//! ```
//!
//! Samples along a ray use `δ_last = 1e10`, so the last sample soaks up
//! whatever transmittance is left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::{ray_for_point, Bounds, CameraPose, Intrinsics, Ray};
use crate::error::{Error, Result};
use crate::field::{encode_into, encoded_len, BoundMlp, FieldParams};
use crate::image::Image;

pub const FAR_DELTA: f64 = 1e10;
pub const DEPTH_EPS: f64 = 1e-8;

/// Depths along one ray, their intervals, and the bin edges used when
/// resampling (`edges.len() == ts.len() + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    ts: Vec<f64>,
    deltas: Vec<f64>,
    edges: Vec<f64>,
}

impl RaySamples {
    /// Explicit depths and intervals; bin edges default to midpoints closed
    /// off by `near`/`far`.
    pub fn new(ts: Vec<f64>, deltas: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        let mut edges = Vec::with_capacity(ts.len() + 1);
        edges.push(near);
        edges.extend(ts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(far);
        Self::with_edges(ts, deltas, edges)
    }

    fn with_edges(ts: Vec<f64>, deltas: Vec<f64>, edges: Vec<f64>) -> Result<Self> {
        if ts.is_empty() || ts.len() != deltas.len() || edges.len() != ts.len() + 1 {
            return Err(Error::invalid("sample arrays have inconsistent lengths"));
        }
        if ts.iter().chain(&deltas).chain(&edges).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ray samples"));
        }
        if ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("sample depths must be strictly increasing"));
        }
        if deltas.iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid("sample intervals must be positive"));
        }
        Ok(Self { ts, deltas, edges })
    }

    /// Sorted depths with `δ_i = t_{i+1} − t_i` and `δ_last = 1e10`.
    fn along_ray(ts: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        let mut deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push(FAR_DELTA);
        Self::new(ts, deltas, near, far)
    }

    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// `n` equal bins over `[near, far]`, one sample per bin: the centre, or a
/// uniform draw within the bin when `jitter` is set.
pub fn stratified_sample(near: f64, far: f64, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::invalid("stratified sampling needs at least 2 samples"));
    }
    Bounds::new(near, far)?;
    let width = (far - near) / n as f64;
    let edges: Vec<f64> = (0..=n).map(|i| near + width * i as f64).collect();
    let ts: Vec<f64> = (0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            edges[i] + u * (edges[i + 1] - edges[i])
        })
        .collect();
    let mut deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(FAR_DELTA);
    RaySamples::with_edges(ts, deltas, edges)
}

/// Draws `n_fine` depths from the piecewise-constant density proportional to
/// `weights` over the bins of `coarse`, and merges them with the coarse
/// depths. Without jitter the draws sit at quantiles `(k + ½) / n_fine`.
/// If the weights sum to less than `1e-12` every bin gets equal mass.
pub fn importance_sample(
    weights: &[f64],
    coarse: &RaySamples,
    n_fine: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if weights.len() != coarse.len() {
        return Err(Error::invalid("weights and samples differ in length"));
    }
    if let Some((i, &w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::invalid(format!(
            "weight {w} at sample {i} is not a nonnegative number"
        )));
    }
    let edges = coarse.edges();
    let total: f64 = weights.iter().sum();
    let pdf: Vec<f64> = if total < 1e-12 {
        vec![1.0 / weights.len() as f64; weights.len()]
    } else {
        weights.iter().map(|w| w / total).collect()
    };
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p);
    }
    let mut ts = coarse.ts().to_vec();
    for k in 0..n_fine {
        let u = if jitter {
            rng.gen::<f64>()
        } else {
            (k as f64 + 0.5) / n_fine as f64
        };
        let u = u * cdf[pdf.len()];
        // last bin whose cdf start is <= u and which carries mass
        let mut bin = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(pdf.len() - 1);
        while pdf[bin] == 0.0 && bin > 0 {
            bin -= 1;
        }
        let frac = if pdf[bin] > 0.0 {
            ((u - cdf[bin]) / pdf[bin]).clamp(0.0, 1.0)
        } else {
            0.5
        };
        ts.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    ts.sort_by(f64::total_cmp);
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            ts[i] = ts[i - 1].next_up();
        }
    }
    RaySamples::along_ray(ts, edges[0], *edges.last().unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub acc: f64,
}

/// Quadrature of the rendering integral for one ray, without background.
pub fn composite(colors: &[[f64; 3]], sigmas: &[f64], samples: &RaySamples) -> Result<RenderOutput> {
    if colors.len() != sigmas.len() || sigmas.len() != samples.len() {
        return Err(Error::invalid("colors, densities and samples differ in length"));
    }
    if let Some((i, &s)) = sigmas.iter().enumerate().find(|(_, s)| **s < 0.0) {
        return Err(Error::NegativeDensity(s, i));
    }
    if sigmas.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("densities"));
    }
    let mut trans = 1.0;
    let mut out = RenderOutput {
        color: [0.0; 3],
        depth: 0.0,
        weights: Vec::with_capacity(sigmas.len()),
        acc: 0.0,
    };
    let mut wt = 0.0;
    for i in 0..sigmas.len() {
        let alpha = 1.0 - (-sigmas[i] * samples.deltas[i]).exp();
        let w = trans * alpha;
        for c in 0..3 {
            out.color[c] += w * colors[i][c];
        }
        out.acc += w;
        wt += w * samples.ts[i];
        out.weights.push(w);
        trans *= 1.0 - alpha;
    }
    out.depth = wt / out.acc.max(DEPTH_EPS);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub white_background: bool,
    /// Jittered stratified samples and random fine draws; off for evaluation.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            white_background: true,
            jitter: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::invalid("n_coarse must be >= 2"));
        }
        Ok(())
    }
}

/// Graph-side result of one pass over a batch of `R` rays with `N` samples each.
pub struct PassOutput<'g> {
    /// `[R, 3]`, background included.
    pub color: Var<'g>,
    /// `[R]`
    pub acc: Var<'g>,
    /// `[R]`
    pub depth: Var<'g>,
    /// `[R, N]`
    pub weights: Var<'g>,
    pub samples: Vec<RaySamples>,
}

pub struct BatchOutput<'g> {
    pub coarse: PassOutput<'g>,
    pub fine: PassOutput<'g>,
}

/// Composites `[R, N, 3]` colours and `[R, N]` densities on the graph.
pub fn composite_graph<'g>(
    rgb: Var<'g>,
    sigma: Var<'g>,
    samples: Vec<RaySamples>,
    white_background: bool,
) -> Result<PassOutput<'g>> {
    let g = rgb.graph();
    let r = samples.len();
    let n = samples.first().map_or(0, RaySamples::len);
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("rays in a batch must have equal sample counts"));
    }
    let deltas = g.constant(&[r, n], samples.iter().flat_map(|s| s.deltas.iter().copied()).collect())?;
    let ts = g.constant(&[r, n], samples.iter().flat_map(|s| s.ts.iter().copied()).collect())?;
    let tau = sigma.mul(deltas)?;
    let trans = tau.cumsum_exclusive(1)?.neg()?.exp()?;
    let alpha = tau.neg()?.exp()?.neg()?.add_scalar(1.0)?;
    let weights = trans.mul(alpha)?;
    let mut color = weights.reshape(&[r, n, 1])?.mul(rgb)?.sum_axis(1)?;
    let acc = weights.sum_axis(1)?;
    let depth = weights
        .mul(ts)?
        .sum_axis(1)?
        .div(acc.clamp(DEPTH_EPS, f64::INFINITY)?)?;
    if white_background {
        let bg = acc.neg()?.add_scalar(1.0)?.reshape(&[r, 1])?;
        color = color.add(bg)?;
    }
    Ok(PassOutput {
        color,
        acc,
        depth,
        weights,
        samples,
    })
}

fn run_field<'g>(
    g: &'g Graph,
    mlp: &BoundMlp<'g>,
    rays: &[Ray],
    samples: &[RaySamples],
    l_pos: usize,
    l_dir: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let n = samples[0].len();
    let p = rays.len() * n;
    let mut xs = Vec::with_capacity(p * encoded_len(l_pos));
    let mut ds = Vec::with_capacity(p * encoded_len(l_dir));
    let mut d_enc = Vec::with_capacity(encoded_len(l_dir));
    for (ray, s) in rays.iter().zip(samples) {
        d_enc.clear();
        encode_into(ray.dir, l_dir, &mut d_enc);
        for &t in s.ts() {
            encode_into(ray.point_at(t), l_pos, &mut xs);
            ds.extend_from_slice(&d_enc);
        }
    }
    let xe = g.constant(&[p, encoded_len(l_pos)], xs)?;
    let de = g.constant(&[p, encoded_len(l_dir)], ds)?;
    let out = mlp.forward(xe, de)?;
    Ok((
        out.rgb.reshape(&[rays.len(), n, 3])?,
        out.sigma.reshape(&[rays.len(), n])?,
    ))
}

/// Coarse pass, importance resampling, fine pass. `seeds` gives one RNG
/// stream per ray so results do not depend on how rays are grouped.
pub fn render_rays<'g>(
    coarse: &BoundMlp<'g>,
    fine: &BoundMlp<'g>,
    l_pos: usize,
    l_dir: usize,
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<BatchOutput<'g>> {
    cfg.validate()?;
    if rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if seeds.len() != rays.len() {
        return Err(Error::invalid("one seed per ray required"));
    }
    let g = coarse.vars[0].graph();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let coarse_samples = rays
        .iter()
        .zip(&mut rngs)
        .map(|(r, rng)| stratified_sample(r.t_near, r.t_far, cfg.n_coarse, cfg.jitter, rng))
        .collect::<Result<Vec<_>>>()?;
    let (rgb, sigma) = run_field(g, coarse, rays, &coarse_samples, l_pos, l_dir)?;
    let coarse_out = composite_graph(rgb, sigma, coarse_samples, cfg.white_background)?;
    if cfg.n_fine == 0 {
        let (rgb, sigma) = run_field(g, fine, rays, &coarse_out.samples, l_pos, l_dir)?;
        let fine_out = composite_graph(rgb, sigma, coarse_out.samples.clone(), cfg.white_background)?;
        return Ok(BatchOutput {
            coarse: coarse_out,
            fine: fine_out,
        });
    }
    let w = coarse_out.weights.value()?;
    let n = cfg.n_coarse;
    let fine_samples = coarse_out
        .samples
        .iter()
        .zip(&mut rngs)
        .enumerate()
        .map(|(i, (s, rng))| importance_sample(&w[i * n..(i + 1) * n], s, cfg.n_fine, cfg.jitter, rng))
        .collect::<Result<Vec<_>>>()?;
    let (rgb, sigma) = run_field(g, fine, rays, &fine_samples, l_pos, l_dir)?;
    let fine_out = composite_graph(rgb, sigma, fine_samples, cfg.white_background)?;
    Ok(BatchOutput {
        coarse: coarse_out,
        fine: fine_out,
    })
}

fn pass_to_outputs(p: &PassOutput<'_>) -> Result<Vec<RenderOutput>> {
    let color = p.color.value()?;
    let acc = p.acc.value()?;
    let depth = p.depth.value()?;
    let w = p.weights.value()?;
    let n = p.samples[0].len();
    Ok((0..p.samples.len())
        .map(|i| RenderOutput {
            color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
            depth: depth[i],
            weights: w[i * n..(i + 1) * n].to_vec(),
            acc: acc[i],
        })
        .collect())
}

/// Renders rays without recording gradients; returns `(coarse, fine)` per ray.
pub fn render_rays_eval(
    params: &FieldParams,
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<Vec<(RenderOutput, RenderOutput)>> {
    let g = Graph::new();
    let fc = params.config();
    let c = params.coarse.bind(&g, false)?;
    let f = params.fine.bind(&g, false)?;
    let out = render_rays(&c, &f, fc.l_pos, fc.l_dir, rays, seeds, cfg)?;
    Ok(pass_to_outputs(&out.coarse)?
        .into_iter()
        .zip(pass_to_outputs(&out.fine)?)
        .collect())
}

pub fn render_ray(
    params: &FieldParams,
    ray: &Ray,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(RenderOutput, RenderOutput)> {
    Ok(render_rays_eval(params, std::slice::from_ref(ray), &[seed], cfg)?.remove(0))
}

/// Rays rendered per graph when producing whole images.
pub const IMAGE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    /// Fine-pass expected depth per pixel, row-major.
    pub depth: Vec<f64>,
}

/// Renders every pixel centre with the fine pass. Jitter is forced off, so
/// the result is deterministic and independent of the thread count.
pub fn render_image(
    params: &FieldParams,
    pose: &CameraPose,
    intr: &Intrinsics,
    bounds: Bounds,
    cfg: &RenderConfig,
) -> Result<RenderedImage> {
    let cfg = RenderConfig { jitter: false, ..*cfg };
    let (w, h) = (intr.width, intr.height);
    let rays = (0..w * h)
        .map(|i| ray_for_point(pose, intr, ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5), bounds))
        .collect::<Result<Vec<_>>>()?;
    let chunks = rays
        .par_chunks(IMAGE_CHUNK)
        .map(|chunk| render_rays_eval(params, chunk, &vec![0; chunk.len()], &cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for (_, fine) in chunks.into_iter().flatten() {
        data.extend_from_slice(&fine.color);
        depth.push(fine.depth);
    }
    Ok(RenderedImage {
        image: Image::from_clamped(w, h, data)?,
        depth,
    })
}

#[cfg(test)]
mod tests;
