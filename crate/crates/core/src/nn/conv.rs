//! im2col convolution kernels.

use super::gemm::{gemm, Layout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        (n, cin, h, w): (usize, usize, usize, usize),
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Input x-range whose receptive offset `kx` lands inside the image.
    fn valid_out(&self, kk: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // out index o maps to input index o*stride + kk - pad
        let s = self.stride;
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        let hi = if in_len + self.pad > kk {
            ((in_len + self.pad - kk - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut cols = vec![0.0f32; g.rows() * ncols];
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_out(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_out(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * hw_out..(b + 1) * hw_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let len = ox_hi - ox_lo;
                            drow[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + len]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox] = srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncols = g.cols();
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_out(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_out(kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &dcols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst =
                        &mut dx[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    let src = &src_row[b * hw_out..(b + 1) * hw_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                        for ox in ox_lo..ox_hi {
                            drow[ox * g.stride + kx - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, cols)`; `cols` is kept for the backward pass.
pub(crate) fn forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let mut tmp = vec![0.0f32; g.cout * ncols];
    gemm(g.cout, g.rows(), ncols, w, Layout::N, &cols, Layout::N, 0.0, &mut tmp);
    let hw_out = g.ho * g.wo;
    let mut out = vec![0.0f32; g.n * g.cout * hw_out];
    for co in 0..g.cout {
        let bias = b.map_or(0.0, |b| b[co]);
        let trow = &tmp[co * ncols..(co + 1) * ncols];
        for bi in 0..g.n {
            let dst = &mut out[(bi * g.cout + co) * hw_out..(bi * g.cout + co + 1) * hw_out];
            for (d, s) in dst.iter_mut().zip(&trow[bi * hw_out..(bi + 1) * hw_out]) {
                *d = s + bias;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

pub(crate) fn backward(
    gout: &[f32],
    cols: &[f32],
    w: &[f32],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let ncols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut dtmp = vec![0.0f32; g.cout * ncols];
    let mut db = vec![0.0f32; g.cout];
    for co in 0..g.cout {
        let drow = &mut dtmp[co * ncols..(co + 1) * ncols];
        for bi in 0..g.n {
            let src = &gout[(bi * g.cout + co) * hw_out..(bi * g.cout + co + 1) * hw_out];
            drow[bi * hw_out..(bi + 1) * hw_out].copy_from_slice(src);
        }
        db[co] = drow.iter().sum();
    }
    let mut dw = vec![0.0f32; g.cout * g.rows()];
    gemm(g.cout, ncols, g.rows(), &dtmp, Layout::N, cols, Layout::T, 0.0, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; g.rows() * ncols];
        gemm(g.rows(), g.cout, ncols, w, Layout::T, &dtmp, Layout::N, 0.0, &mut dcols);
        let mut dx = vec![0.0f32; g.n * g.cin * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}
