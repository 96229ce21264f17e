//! Single-head spatial self-attention in residual form:
//! `out = x + softmax(Q K^T / sqrt(C)) V` over the `H*W` positions.
//! Keys carry no bias: it would shift every score in a row by the same
//! amount and cancel in the softmax.

use super::gemm::{gemm, Layout};

pub(crate) struct AttnWeights<'a> {
    pub wq: &'a [f32],
    pub bq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub bv: &'a [f32],
}

pub(crate) struct AttnSaved {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    p: Vec<f32>,
}

fn project(xn: &[f32], w: &[f32], b: &[f32], l: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; l * c];
    gemm(l, c, c, xn, Layout::T, w, Layout::T, 0.0, &mut out);
    for row in out.chunks_exact_mut(c) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    out
}

pub(crate) fn softmax_rows(s: &mut [f32], l: usize) {
    for row in s.chunks_exact_mut(l) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn forward(
    x: &[f32],
    (n, c, l): (usize, usize, usize),
    w: &AttnWeights<'_>,
) -> (Vec<f32>, AttnSaved) {
    let scale = 1.0 / (c as f32).sqrt();
    let mut out = x.to_vec();
    let mut saved = AttnSaved {
        q: Vec::with_capacity(n * l * c),
        k: Vec::with_capacity(n * l * c),
        v: Vec::with_capacity(n * l * c),
        p: Vec::with_capacity(n * l * l),
    };
    for b in 0..n {
        let xn = &x[b * c * l..(b + 1) * c * l];
        let q = project(xn, w.wq, w.bq, l, c);
        let k = project(xn, w.wk, &[], l, c);
        let v = project(xn, w.wv, w.bv, l, c);
        let mut s = vec![0.0f32; l * l];
        gemm(l, c, l, &q, Layout::N, &k, Layout::T, 0.0, &mut s);
        s.iter_mut().for_each(|v| *v *= scale);
        softmax_rows(&mut s, l);
        let mut a = vec![0.0f32; l * c];
        gemm(l, l, c, &s, Layout::N, &v, Layout::N, 0.0, &mut a);
        let on = &mut out[b * c * l..(b + 1) * c * l];
        for pos in 0..l {
            for ch in 0..c {
                on[ch * l + pos] += a[pos * c + ch];
            }
        }
        saved.q.extend_from_slice(&q);
        saved.k.extend_from_slice(&k);
        saved.v.extend_from_slice(&v);
        saved.p.extend_from_slice(&s);
    }
    (out, saved)
}

pub(crate) struct AttnGrads {
    pub dx: Vec<f32>,
    /// Order: wq, bq, wk, wv, bv.
    pub dparams: [Vec<f32>; 5],
}

pub(crate) fn backward(
    gout: &[f32],
    x: &[f32],
    (n, c, l): (usize, usize, usize),
    w: &AttnWeights<'_>,
    saved: &AttnSaved,
) -> AttnGrads {
    let scale = 1.0 / (c as f32).sqrt();
    let mut dx = gout.to_vec();
    let mut dw = [
        vec![0.0f32; c * c],
        vec![0.0f32; c],
        vec![0.0f32; c * c],
        vec![0.0f32; c * c],
        vec![0.0f32; c],
    ];
    for b in 0..n {
        let xn = &x[b * c * l..(b + 1) * c * l];
        let gn = &gout[b * c * l..(b + 1) * c * l];
        let q = &saved.q[b * l * c..(b + 1) * l * c];
        let k = &saved.k[b * l * c..(b + 1) * l * c];
        let v = &saved.v[b * l * c..(b + 1) * l * c];
        let p = &saved.p[b * l * l..(b + 1) * l * l];

        let mut dp = vec![0.0f32; l * l];
        gemm(l, c, l, gn, Layout::T, v, Layout::T, 0.0, &mut dp);
        let mut dv = vec![0.0f32; l * c];
        gemm(l, l, c, p, Layout::T, gn, Layout::T, 0.0, &mut dv);
        let mut ds = vec![0.0f32; l * l];
        for r in 0..l {
            let prow = &p[r * l..(r + 1) * l];
            let dprow = &dp[r * l..(r + 1) * l];
            let dot: f32 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
            for j in 0..l {
                ds[r * l + j] = prow[j] * (dprow[j] - dot) * scale;
            }
        }
        let mut dq = vec![0.0f32; l * c];
        gemm(l, l, c, &ds, Layout::N, k, Layout::N, 0.0, &mut dq);
        let mut dk = vec![0.0f32; l * c];
        gemm(l, l, c, &ds, Layout::T, q, Layout::N, 0.0, &mut dk);

        let mut dxt = vec![0.0f32; l * c];
        // (projection grad, weight, slot of dW, slot of db)
        for (dproj, wmat, ws, bs) in [(&dq, w.wq, 0, Some(1)), (&dk, w.wk, 2, None), (&dv, w.wv, 3, Some(4))] {
            gemm(c, l, c, dproj, Layout::T, xn, Layout::T, 1.0, &mut dw[ws]);
            if let Some(bs) = bs {
                for row in dproj.chunks_exact(c) {
                    for (acc, g) in dw[bs].iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            }
            gemm(l, c, c, dproj, Layout::N, wmat, Layout::N, 1.0, &mut dxt);
        }
        let dn = &mut dx[b * c * l..(b + 1) * c * l];
        for pos in 0..l {
            for ch in 0..c {
                dn[ch * l + pos] += dxt[pos * c + ch];
            }
        }
    }
    AttnGrads { dx, dparams: dw }
}

/// Softmax attention matrices (`n` blocks of `l x l`), row-major.
pub(crate) fn attention_weights(
    x: &[f32],
    (n, c, l): (usize, usize, usize),
    w: &AttnWeights<'_>,
) -> Vec<f32> {
    forward(x, (n, c, l), w).1.p
}
