//! Spatial and ensemble statistics used to validate generated geomodels.

use rayon::prelude::*;

use crate::diffusion::{interpolate_latents, DiffusionError, Ldm};
use crate::geogen::{ConditioningSet, FaciesGrid};
use crate::nn::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of the continuous facies encoding {-1, 0, 1}.
pub const FACIES_RANGE: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointCurve {
    pub facies: u8,
    pub direction: (usize, usize),
    /// `prob[l]` for lags `0..=max_lag`.
    pub prob: Vec<f64>,
}

/// Per-grid curves with their pointwise mean, minimum and maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointSet {
    pub curves: Vec<TwoPointCurve>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// `P(facies(p + l*dir) = f | facies(p) = f)` over all in-bounds pairs.
/// A grid without any reference cell at some lag contributes 0 there; lag 0
/// is 1 by definition.
pub fn two_point_curve(grid: &FaciesGrid, facies: u8, direction: (usize, usize), max_lag: usize) -> Result<TwoPointCurve, MetricsError> {
    let (dx, dy) = direction;
    if dx == 0 && dy == 0 {
        return Err(MetricsError::Argument("zero lag direction".into()));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    if max_lag * dx >= nx.max(1) && dx > 0 || max_lag * dy >= ny.max(1) && dy > 0 {
        return Err(MetricsError::Argument(format!("lag {max_lag} along {direction:?} exceeds {nx}x{ny}")));
    }
    let mut prob = vec![1.0; max_lag + 1];
    for (l, p) in prob.iter_mut().enumerate().skip(1) {
        let (sx, sy) = (l * dx, l * dy);
        let mut both = 0usize;
        let mut refs = 0usize;
        for j in 0..ny - sy {
            for i in 0..nx - sx {
                if grid.get(i, j) == facies {
                    refs += 1;
                    if grid.get(i + sx, j + sy) == facies {
                        both += 1;
                    }
                }
            }
        }
        *p = if refs == 0 { 0.0 } else { both as f64 / refs as f64 };
    }
    Ok(TwoPointCurve { facies, direction, prob })
}

pub fn two_point_probability(
    grids: &[FaciesGrid],
    facies: u8,
    direction: (usize, usize),
    max_lag: usize,
) -> Result<TwoPointSet, MetricsError> {
    if grids.is_empty() {
        return Err(MetricsError::Empty("grid set"));
    }
    let curves = grids
        .par_iter()
        .map(|g| two_point_curve(g, facies, direction, max_lag))
        .collect::<Result<Vec<_>, _>>()?;
    let n = curves.len() as f64;
    let mut mean = vec![0.0; max_lag + 1];
    let mut min = vec![f64::INFINITY; max_lag + 1];
    let mut max = vec![f64::NEG_INFINITY; max_lag + 1];
    for c in &curves {
        for (l, &p) in c.prob.iter().enumerate() {
            mean[l] += p / n;
            min[l] = min[l].min(p);
            max[l] = max[l].max(p);
        }
    }
    Ok(TwoPointSet { curves, mean, min, max })
}

/// Fraction of lags at which `curve` lies inside `[lo, hi]`.
pub fn envelope_coverage(curve: &[f64], lo: &[f64], hi: &[f64]) -> Result<f64, MetricsError> {
    if curve.len() != lo.len() || curve.len() != hi.len() || curve.is_empty() {
        return Err(MetricsError::Shape(format!("{} / {} / {}", curve.len(), lo.len(), hi.len())));
    }
    let inside = curve.iter().zip(lo.iter().zip(hi)).filter(|(c, (l, h))| *l <= *c && *c <= *h).count();
    Ok(inside as f64 / curve.len() as f64)
}

pub fn two_point_csv(curve: &[f64]) -> String {
    let mut s = String::from("lag,prob\n");
    for (l, p) in curve.iter().enumerate() {
        s.push_str(&format!("{l},{p}\n"));
    }
    s
}

/// Summed-area table with one row and column of zero padding.
fn integral(img: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let w = nx + 1;
    let mut s = vec![0.0; w * (ny + 1)];
    for j in 0..ny {
        let mut row = 0.0;
        for i in 0..nx {
            row += img[j * nx + i];
            s[(j + 1) * w + i + 1] = s[j * w + i + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, i: usize, j: usize, k: usize) -> f64 {
    s[(j + k) * w + i + k] - s[j * w + i + k] - s[(j + k) * w + i] + s[j * w + i]
}

/// Mean SSIM over all `7x7` windows fully inside the image (smaller images
/// use one window of their shorter side), with uniform weights, population
/// moments, and `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` for dynamic range `L`.
pub fn ssim(a: &[f64], b: &[f64], nx: usize, ny: usize, data_range: f64) -> Result<f64, MetricsError> {
    if a.len() != nx * ny || b.len() != nx * ny {
        return Err(MetricsError::Shape(format!("images of {} and {} values for {nx}x{ny}", a.len(), b.len())));
    }
    if nx == 0 || ny == 0 {
        return Err(MetricsError::Empty("image"));
    }
    if !(data_range > 0.0) {
        return Err(MetricsError::Argument(format!("dynamic range {data_range}")));
    }
    let k = SSIM_WINDOW.min(nx).min(ny);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let sa = integral(a, nx, ny);
    let sb = integral(b, nx, ny);
    let saa = integral(&prod(&|x, _| x * x), nx, ny);
    let sbb = integral(&prod(&|_, y| y * y), nx, ny);
    let sab = integral(&prod(&|x, y| x * y), nx, ny);
    let w = nx + 1;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..=ny - k {
        for i in 0..=nx - k {
            let ma = box_sum(&sa, w, i, j, k) / n;
            let mb = box_sum(&sb, w, i, j, k) / n;
            let va = (box_sum(&saa, w, i, j, k) / n - ma * ma).max(0.0);
            let vb = (box_sum(&sbb, w, i, j, k) / n - mb * mb).max(0.0);
            let cov = box_sum(&sab, w, i, j, k) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two facies grids in the continuous encoding.
pub fn ssim_grids(a: &FaciesGrid, b: &FaciesGrid) -> Result<f64, MetricsError> {
    if (a.nx(), a.ny()) != (b.nx(), b.ny()) {
        return Err(MetricsError::Shape(format!("{}x{} vs {}x{}", a.nx(), a.ny(), b.nx(), b.ny())));
    }
    let f = |g: &FaciesGrid| -> Vec<f64> { g.to_continuous().into_iter().map(f64::from).collect() };
    ssim(&f(a), &f(b), a.nx(), a.ny(), FACIES_RANGE)
}

/// Empirical percentile `p` in [0, 100] with linear interpolation between
/// order statistics at rank `(n - 1) p / 100`. Reorders `values`.
pub fn percentile_in_place(values: &mut [f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("sample"));
    }
    if !(0.0..=100.0).contains(&p) || values.iter().any(|v| v.is_nan()) {
        return Err(MetricsError::Argument(format!("percentile {p} of sample with NaN or bad rank")));
    }
    let h = (values.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let n = values.len();
    let (_, &mut x_lo, right) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if lo + 1 == n || h == lo as f64 {
        return Ok(x_lo);
    }
    let x_hi = right.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(x_lo + (h - lo as f64) * (x_hi - x_lo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PercentileBand {
    pub times: Vec<f64>,
    pub p10: Vec<f64>,
    pub p50: Vec<f64>,
    pub p90: Vec<f64>,
}

/// P10/P50/P90 across realizations at each time; `series[r][k]` is
/// realization `r` at `times[k]`.
pub fn percentile_curves(series: &[Vec<f64>], times: &[f64]) -> Result<PercentileBand, MetricsError> {
    if series.is_empty() {
        return Err(MetricsError::Empty("series set"));
    }
    if let Some(s) = series.iter().find(|s| s.len() != times.len()) {
        return Err(MetricsError::Shape(format!("series of length {} on {} times", s.len(), times.len())));
    }
    let mut band = PercentileBand {
        times: times.to_vec(),
        p10: Vec::with_capacity(times.len()),
        p50: Vec::with_capacity(times.len()),
        p90: Vec::with_capacity(times.len()),
    };
    let mut col = vec![0.0; series.len()];
    for k in 0..times.len() {
        for (c, s) in col.iter_mut().zip(series) {
            *c = s[k];
        }
        band.p10.push(percentile_in_place(&mut col, 10.0)?);
        band.p50.push(percentile_in_place(&mut col, 50.0)?);
        band.p90.push(percentile_in_place(&mut col, 90.0)?);
    }
    Ok(band)
}

pub fn band_csv(band: &PercentileBand) -> String {
    let mut s = String::from("time,p10,p50,p90\n");
    for k in 0..band.times.len() {
        s.push_str(&format!("{},{},{},{}\n", band.times[k], band.p10[k], band.p50[k], band.p90[k]));
    }
    s
}

/// Fraction of (grid, hard point) pairs whose facies matches.
pub fn hard_data_accuracy(grids: &[FaciesGrid], cond: &ConditioningSet) -> Result<f64, MetricsError> {
    if grids.is_empty() || cond.is_empty() {
        return Ok(1.0);
    }
    let mut hit = 0usize;
    for g in grids {
        cond.check_bounds(g.nx(), g.ny())
            .map_err(|e| MetricsError::Argument(e.to_string()))?;
        hit += cond.points().iter().filter(|p| g.get(p.i, p.j) == p.facies).count();
    }
    Ok(hit as f64 / (grids.len() * cond.len()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationCurves {
    pub deltas: Vec<f64>,
    pub models: Vec<FaciesGrid>,
    /// SSIM between models at consecutive deltas (length `n`).
    pub consecutive: Vec<f64>,
    /// SSIM between the first model and each model (length `n + 1`).
    pub anchored: Vec<f64>,
}

/// Generates models along `delta = 0, 1/n, ..., 1` with `n = round(1/step)`.
pub fn interpolation_stability(
    ldm: &Ldm,
    xi1: &Tensor,
    xi2: &Tensor,
    step: f64,
    n_steps: usize,
) -> Result<InterpolationCurves, MetricsError> {
    if !(step > 0.0 && step < 1.0) {
        return Err(MetricsError::Argument(format!("interpolation step {step}")));
    }
    let n = (1.0 / step).round() as usize;
    let deltas: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    let latents = deltas
        .iter()
        .map(|&d| interpolate_latents(xi1, xi2, d))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = Tensor::stack(&latents).map_err(|e| MetricsError::Shape(e.to_string()))?;
    let mut shape = xi1.shape().to_vec();
    if shape.first() == Some(&1) {
        shape[0] = latents.len();
    } else {
        shape.insert(0, latents.len());
    }
    let batch = batch.reshape(shape).map_err(|e| MetricsError::Shape(e.to_string()))?;
    let models = ldm.generate(&batch, n_steps)?;
    let consecutive = models
        .windows(2)
        .map(|w| ssim_grids(&w[0], &w[1]))
        .collect::<Result<Vec<_>, _>>()?;
    let anchored = models.iter().map(|m| ssim_grids(&models[0], m)).collect::<Result<Vec<_>, _>>()?;
    Ok(InterpolationCurves {
        deltas,
        models,
        consecutive,
        anchored,
    })
}

/// Centered moving average with the window shrunk at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_sums_match_direct_sums() {
        let img: Vec<f64> = (0..30).map(|v| (v as f64 * 0.7).sin()).collect();
        let s = integral(&img, 6, 5);
        let direct: f64 = (1..4).flat_map(|j| (2..5).map(move |i| (i, j))).map(|(i, j)| img[j * 6 + i]).sum();
        assert!((box_sum(&s, 7, 2, 1, 3) - direct).abs() < 1e-12);
    }

    #[test]
    fn moving_average_ends() {
        assert_eq!(moving_average(&[3.0, 0.0, 3.0, 6.0], 3), vec![1.5, 2.0, 3.0, 4.5]);
    }
}
