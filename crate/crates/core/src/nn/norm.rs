//! Group normalization kernels.

pub(crate) struct GroupNormSaved {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// `x` is `(n, c, hw)`; statistics are taken per (sample, group).
pub(crate) fn forward(
    x: &[f32],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupNormSaved) {
    let cpg = c / groups;
    let gsize = cpg * hw;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = vec![0.0f32; n * groups];
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * hw;
            let seg = &x[start..start + gsize];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
            let var = seg
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / gsize as f64;
            let r = (1.0 / (var + eps as f64).sqrt()) as f32;
            rstd[b * groups + gi] = r;
            let mean = mean as f32;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean) * r;
                    xhat[i] = xh;
                    y[i] = xh * gain[ch] + bias[ch];
                }
            }
        }
    }
    (y, GroupNormSaved { xhat, rstd })
}

pub(crate) struct GroupNormGrads {
    pub dx: Vec<f32>,
    pub dgain: Vec<f32>,
    pub dbias: Vec<f32>,
}

pub(crate) fn backward(
    gout: &[f32],
    saved: &GroupNormSaved,
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gain: &[f32],
) -> GroupNormGrads {
    let cpg = c / groups;
    let gsize = (cpg * hw) as f32;
    let mut dx = vec![0.0f32; gout.len()];
    let mut dgain = vec![0.0f32; c];
    let mut dbias = vec![0.0f32; c];
    for b in 0..n {
        for gi in 0..groups {
            let r = saved.rstd[b * groups + gi];
            let mut sum_dxh = 0.0f32;
            let mut sum_dxh_xh = 0.0f32;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let go = gout[i];
                    let xh = saved.xhat[i];
                    dgain[ch] += go * xh;
                    dbias[ch] += go;
                    let dxh = go * gain[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
            }
            let mean_dxh = sum_dxh / gsize;
            let mean_dxh_xh = sum_dxh_xh / gsize;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let dxh = gout[i] * gain[ch];
                    dx[i] = r * (dxh - mean_dxh - saved.xhat[i] * mean_dxh_xh);
                }
            }
        }
    }
    GroupNormGrads { dx, dgain, dbias }
}
