//! PSNR, SSIM and the downsampling kernels used to make low-resolution data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported for identical images, where PSNR would be infinite.
pub const PSNR_CAP: f64 = 99.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn mean_abs_error(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak 1.0; capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of one channel.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over window
/// positions fully inside the image, averaged over positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least 11x11, got {w}x{h}")));
    }
    let k = gaussian_1d();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Mean of each `s × s` block.
    Average,
    /// Separable triangle filter, see [`tent_weights`].
    Tent,
}

impl Kernel {
    pub fn apply(self, img: &Image, s: usize) -> Result<Image> {
        match self {
            Kernel::Average => downsample_average(img, s),
            Kernel::Tent => downsample_tent(img, s),
        }
    }
}

fn check_divisible(img: &Image, s: usize) -> Result<()> {
    if s == 0 || !img.width().is_multiple_of(s) || !img.height().is_multiple_of(s) {
        return Err(Error::invalid(format!(
            "{}x{} is not divisible by scale {s}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

pub fn downsample_average(img: &Image, s: usize) -> Result<Image> {
    check_divisible(img, s)?;
    let (w, h) = (img.width() / s, img.height() / s);
    let norm = (s * s) as f64;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..s {
                for dx in 0..s {
                    let p = img.pixel(x * s + dx, y * s + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            data.extend(acc.iter().map(|v| v / norm));
        }
    }
    Image::from_clamped(w, h, data)
}

/// Taps of the tent kernel for factor `s`, relative to the first HR pixel of
/// a block: offsets `−s/2 … 3s/2 − 1`, weight `max(0, 1 − |d|/s)` where `d`
/// is the distance between the HR and LR pixel centres in HR pixels,
/// normalised to sum to one. For `s = 2` this is `[1, 3, 3, 1] / 8`.
pub fn tent_weights(s: usize) -> Vec<(isize, f64)> {
    let sf = s as f64;
    let center = sf / 2.0;
    let mut taps = Vec::new();
    for off in -(s as isize)..(2 * s as isize) {
        let d = (off as f64 + 0.5 - center).abs();
        let w = 1.0 - d / sf;
        if w > 0.0 {
            taps.push((off, w));
        }
    }
    let total: f64 = taps.iter().map(|t| t.1).sum();
    taps.into_iter().map(|(o, w)| (o, w / total)).collect()
}

/// Tent-filtered decimation; borders repeat the edge pixel.
pub fn downsample_tent(img: &Image, s: usize) -> Result<Image> {
    check_divisible(img, s)?;
    let taps = tent_weights(s);
    let (w, h) = (img.width() / s, img.height() / s);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // horizontal pass to [w, H]
    let mut rows = vec![[0.0; 3]; w * img.height()];
    for y in 0..img.height() {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for &(off, k) in &taps {
                let p = img.pixel(clamp((x * s) as isize + off, img.width()), y);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for &(off, k) in &taps {
                let p = rows[clamp((y * s) as isize + off, img.height()) * w + x];
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            data.extend_from_slice(&acc);
        }
    }
    Image::from_clamped(w, h, data)
}

/// One evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub view: usize,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMean {
    pub method: String,
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-view metrics for one or more methods. LPIPS needs a pretrained
/// network and is reported as unavailable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const LPIPS_UNAVAILABLE: &str = "n/a";

impl MetricsReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Means per method, in order of first appearance.
    pub fn means(&self) -> Vec<MethodMean> {
        let mut out: Vec<MethodMean> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|m| m.method == r.method) {
                Some(m) => {
                    m.views += 1;
                    m.psnr += r.psnr;
                    m.ssim += r.ssim;
                }
                None => out.push(MethodMean {
                    method: r.method.clone(),
                    views: 1,
                    psnr: r.psnr,
                    ssim: r.ssim,
                }),
            }
        }
        for m in &mut out {
            m.psnr /= m.views as f64;
            m.ssim /= m.views as f64;
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>6} {:<20} {:>9} {:>7} {:>6}\n",
            "scene", "view", "method", "psnr", "ssim", "lpips"
        );
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>6} {:<20} {:>9.3} {:>7.4} {:>6}\n",
                r.scene, r.view, r.method, r.psnr, r.ssim, LPIPS_UNAVAILABLE
            );
        }
        for m in self.means() {
            s += &format!(
                "{:<16} {:>6} {:<20} {:>9.3} {:>7.4} {:>6}\n",
                "mean", m.views, m.method, m.psnr, m.ssim, LPIPS_UNAVAILABLE
            );
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "means": self.means(),
            "lpips": "unavailable",
        })
    }
}
