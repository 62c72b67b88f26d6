//! Convolution via im2col and a single GEMM per image.

use super::gemm::gemm;
use super::graph::grad_slot;
use super::AutodiffError;

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self, AutodiffError> {
        let bad = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(bad());
        }
        if b != [w[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad());
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Unfolds one image into `[C·KH·KW, HO·WO]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(ci * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(ci * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(geom: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (pl, plane) = (geom.patch_len(), geom.out_plane());
    let out_image = geom.o * plane;
    let mut out = vec![0.0; geom.n * out_image];
    let mut cols = vec![0.0; pl * plane];
    for ni in 0..geom.n {
        geom.im2col(&x[ni * geom.in_image()..(ni + 1) * geom.in_image()], &mut cols);
        let dst = &mut out[ni * out_image..(ni + 1) * out_image];
        for (oc, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(b[oc]);
        }
        gemm(geom.o, pl, plane, w, pl, 1, &cols, plane, 1, dst, plane, 1);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    (xid, x_tracked): (usize, bool),
    (wid, w_tracked): (usize, bool),
    (bid, b_tracked): (usize, bool),
) {
    let (pl, plane) = (geom.patch_len(), geom.out_plane());
    let out_image = geom.o * plane;
    if b_tracked {
        let gb = grad_slot(grads, bid, geom.o);
        for ni in 0..geom.n {
            for oc in 0..geom.o {
                let row = &g[ni * out_image + oc * plane..ni * out_image + (oc + 1) * plane];
                gb[oc] += row.iter().sum::<f64>();
            }
        }
    }
    if !w_tracked && !x_tracked {
        return;
    }
    let mut cols = vec![0.0; pl * plane];
    let mut dcols = vec![0.0; pl * plane];
    for ni in 0..geom.n {
        let gn = &g[ni * out_image..(ni + 1) * out_image];
        if w_tracked {
            geom.im2col(&x[ni * geom.in_image()..(ni + 1) * geom.in_image()], &mut cols);
            let gw = grad_slot(grads, wid, geom.o * pl);
            // dW += dOut · colsᵀ
            gemm(geom.o, plane, pl, gn, plane, 1, &cols, 1, plane, gw, pl, 1);
        }
        if x_tracked {
            dcols.fill(0.0);
            // dcols = Wᵀ · dOut
            gemm(pl, geom.o, plane, w, 1, pl, gn, plane, 1, &mut dcols, plane, 1);
            let gx = grad_slot(grads, xid, geom.n * geom.in_image());
            geom.col2im(&dcols, &mut gx[ni * geom.in_image()..(ni + 1) * geom.in_image()]);
        }
    }
}
