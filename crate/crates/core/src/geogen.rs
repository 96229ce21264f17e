//! Object-based channel/levee/mud facies realizations.
//!
//! Each channel is a sine-perturbed straight centerline. The centerline is
//! rasterized with a supercover traversal and widened to a band of cells
//! whose centers lie within `width / 2` of it. Levees are the cells within
//! `levee_halfwidth` (Chebyshev distance) of the band. Overlaps resolve by
//! facies rank: channel over levee over mud.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{rng, split_seed};

pub const MUD: u8 = 0;
pub const LEVEE: u8 = 1;
pub const CHANNEL: u8 = 2;

pub const DATASET_MAGIC: &[u8; 4] = b"GGDS";
pub const DATASET_VERSION: u32 = 1;

/// Default rejection-sampling budget per realization.
pub const RETRY_BUDGET: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum GeogenError {
    #[error("invalid channel style: {0}")]
    Style(String),
    #[error("invalid conditioning: {0}")]
    Conditioning(String),
    #[error("conditioning infeasible for seed {seed}: {unmet} point(s) could not be honored")]
    ConditioningInfeasible { seed: u64, unmet: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Integer-coded facies field, row-major (`codes[j * nx + i]`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FaciesGrid {
    nx: usize,
    ny: usize,
    codes: Vec<u8>,
}

impl FaciesGrid {
    pub fn new(nx: usize, ny: usize, codes: Vec<u8>) -> Result<Self, GeogenError> {
        if nx == 0 || ny == 0 {
            return Err(GeogenError::Grid(format!("dimensions must be positive, got {nx}x{ny}")));
        }
        if codes.len() != nx * ny {
            return Err(GeogenError::Grid(format!("{nx}x{ny} grid needs {} codes, got {}", nx * ny, codes.len())));
        }
        if let Some(c) = codes.iter().find(|&&c| c > CHANNEL) {
            return Err(GeogenError::Grid(format!("unknown facies code {c}")));
        }
        Ok(Self { nx, ny, codes })
    }

    pub fn filled(nx: usize, ny: usize, code: u8) -> Result<Self, GeogenError> {
        Self::new(nx, ny, vec![code; nx * ny])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.codes[j * self.nx + i]
    }

    pub fn fraction(&self, code: u8) -> f64 {
        self.codes.iter().filter(|&&c| c == code).count() as f64 / self.codes.len() as f64
    }

    /// Continuous codes {-1, 0, 1}.
    pub fn to_continuous(&self) -> Vec<f32> {
        self.codes.iter().map(|&c| c as f32 - 1.0).collect()
    }

    /// Nearest-level discretization of continuous values.
    pub fn from_continuous(nx: usize, ny: usize, values: &[f32]) -> Result<Self, GeogenError> {
        let codes = values
            .iter()
            .map(|&v| {
                let v = if v.is_finite() { v } else { 0.0 };
                (v.round().clamp(-1.0, 1.0) + 1.0) as u8
            })
            .collect();
        Self::new(nx, ny, codes)
    }

    /// Mirror in x (i -> nx - 1 - i).
    pub fn mirror_x(&self) -> Self {
        let mut codes = self.codes.clone();
        for row in codes.chunks_exact_mut(self.nx) {
            row.reverse();
        }
        Self { codes, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardPoint {
    pub i: usize,
    pub j: usize,
    pub facies: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConditioningSet {
    points: Vec<HardPoint>,
}

impl ConditioningSet {
    pub fn new(points: Vec<HardPoint>) -> Result<Self, GeogenError> {
        for (k, p) in points.iter().enumerate() {
            if p.facies > CHANNEL {
                return Err(GeogenError::Conditioning(format!("unknown facies {} at ({}, {})", p.facies, p.i, p.j)));
            }
            if points[..k].iter().any(|q| q.i == p.i && q.j == p.j) {
                return Err(GeogenError::Conditioning(format!("duplicate point ({}, {})", p.i, p.j)));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[HardPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, nx: usize, ny: usize) -> Result<(), GeogenError> {
        match self.points.iter().find(|p| p.i >= nx || p.j >= ny) {
            Some(p) => Err(GeogenError::Conditioning(format!(
                "point ({}, {}) outside {nx}x{ny} grid",
                p.i, p.j
            ))),
            None => Ok(()),
        }
    }

    pub fn honored_by(&self, grid: &FaciesGrid) -> bool {
        self.points.iter().all(|p| grid.get(p.i, p.j) == p.facies)
    }

    /// Parses lines of `i j facies`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, GeogenError> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || GeogenError::Conditioning(format!("line {}: expected `i j facies`, got `{line}`", ln + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            points.push(HardPoint {
                i: f[0].parse().map_err(|_| bad())?,
                j: f[1].parse().map_err(|_| bad())?,
                facies: f[2].parse().map_err(|_| bad())?,
            });
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# i j facies (0 mud, 1 levee, 2 channel)\n");
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p.i, p.j, p.facies));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, GeogenError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeogenError> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Names and cells of the five-well pattern (three injectors, two
/// producers), placed on a 64x64 layout and scaled to `nx x ny`.
pub fn well_pattern(nx: usize, ny: usize) -> Vec<(&'static str, usize, usize)> {
    const BASE: [(&str, usize, usize); 5] = [("I1", 10, 14), ("P1", 54, 14), ("I2", 10, 50), ("P2", 54, 50), ("I3", 32, 32)];
    BASE.iter()
        .map(|&(name, i, j)| (name, (i * nx / 64).min(nx - 1), (j * ny / 64).min(ny - 1)))
        .collect()
}

/// Channel-facies hard data at the five well cells.
pub fn well_conditioning(nx: usize, ny: usize) -> ConditioningSet {
    let mut points: Vec<HardPoint> = Vec::new();
    for (_, i, j) in well_pattern(nx, ny) {
        if !points.iter().any(|p| p.i == i && p.j == j) {
            points.push(HardPoint { i, j, facies: CHANNEL });
        }
    }
    ConditioningSet { points }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStyle {
    pub nx: usize,
    pub ny: usize,
    pub n_channels: [usize; 2],
    pub width: [f64; 2],
    pub amplitude: [f64; 2],
    pub wavelength: [f64; 2],
    pub orientation: [f64; 2],
    pub levee_halfwidth: [usize; 2],
}

impl Default for ChannelStyle {
    /// 64x64 style.
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            n_channels: [2, 5],
            width: [3.0, 6.0],
            amplitude: [2.0, 5.0],
            wavelength: [32.0, 64.0],
            orientation: [-0.15, 0.15],
            levee_halfwidth: [1, 2],
        }
    }
}

impl ChannelStyle {
    /// 32x32 desk-scale style: the 64x64 geometry at half resolution.
    pub fn desk() -> Self {
        Self {
            nx: 32,
            ny: 32,
            n_channels: [2, 5],
            width: [1.5, 3.0],
            amplitude: [1.0, 2.5],
            wavelength: [16.0, 32.0],
            orientation: [-0.15, 0.15],
            levee_halfwidth: [1, 1],
        }
    }

    pub fn validate(&self) -> Result<(), GeogenError> {
        let mut errs = Vec::new();
        if self.nx == 0 || self.ny == 0 {
            errs.push(format!("grid {}x{} must be positive", self.nx, self.ny));
        }
        if self.n_channels[0] > self.n_channels[1] {
            errs.push("n_channels min > max".to_string());
        }
        if self.levee_halfwidth[0] > self.levee_halfwidth[1] {
            errs.push("levee_halfwidth min > max".to_string());
        }
        for (name, r) in [
            ("width", self.width),
            ("amplitude", self.amplitude),
            ("wavelength", self.wavelength),
            ("orientation", self.orientation),
        ] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
                errs.push(format!("{name} range [{}, {}] is not ordered", r[0], r[1]));
            }
        }
        if self.width[0] < 1.0 {
            errs.push(format!("width must be at least 1 cell, got {}", self.width[0]));
        }
        if self.amplitude[0] < 0.0 {
            errs.push("amplitude must be nonnegative".to_string());
        }
        if self.wavelength[0] <= 0.0 {
            errs.push("wavelength must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GeogenError::Style(errs.join("; ")))
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn draw_int(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

#[derive(Clone, Debug)]
struct Channel {
    theta: f64,
    offset: f64,
    amplitude: f64,
    wavelength: f64,
    phase: f64,
    width: f64,
    levee: usize,
}

impl Channel {
    fn sample(style: &ChannelStyle, rng: &mut ChaCha8Rng) -> Self {
        let theta = draw(rng, style.orientation);
        let (nx, ny) = (style.nx as f64, style.ny as f64);
        // Half extent of the grid across the channel direction.
        let reach = 0.5 * (nx * theta.sin().abs() + ny * theta.cos().abs());
        Self {
            theta,
            offset: rng.random_range(-reach..=reach),
            amplitude: draw(rng, style.amplitude),
            wavelength: draw(rng, style.wavelength),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            width: draw(rng, style.width),
            levee: draw_int(rng, style.levee_halfwidth),
        }
    }

    fn frame(&self, nx: usize, ny: usize) -> ((f64, f64), (f64, f64), (f64, f64)) {
        let c = (nx as f64 / 2.0, ny as f64 / 2.0);
        let d = (self.theta.cos(), self.theta.sin());
        let n = (-self.theta.sin(), self.theta.cos());
        (c, d, n)
    }

    fn lateral(&self, u: f64) -> f64 {
        self.offset + self.amplitude * (std::f64::consts::TAU * u / self.wavelength + self.phase).sin()
    }

    fn centerline(&self, nx: usize, ny: usize) -> Vec<(f64, f64)> {
        let (c, d, n) = self.frame(nx, ny);
        let half = 0.5 * (nx as f64 * d.0.abs() + ny as f64 * d.1.abs()) + self.amplitude + self.width + 2.0;
        let steps = (2.0 * half / 0.5).ceil() as usize;
        (0..=steps)
            .map(|k| {
                let u = -half + k as f64 * 0.5;
                let v = self.lateral(u);
                (c.0 + u * d.0 + v * n.0, c.1 + u * d.1 + v * n.1)
            })
            .collect()
    }

    /// Translates the channel across its direction so the centerline passes
    /// through the center of cell (i, j).
    fn pass_through(&mut self, i: usize, j: usize, nx: usize, ny: usize) {
        let (c, d, n) = self.frame(nx, ny);
        let p = (i as f64 + 0.5 - c.0, j as f64 + 0.5 - c.1);
        let u = p.0 * d.0 + p.1 * d.1;
        let v = p.0 * n.0 + p.1 * n.1;
        self.offset += v - self.lateral(u);
    }

    /// Cross-direction distance from the center of (i, j) to the centerline.
    fn lateral_distance(&self, i: usize, j: usize, nx: usize, ny: usize) -> f64 {
        let (c, d, n) = self.frame(nx, ny);
        let p = (i as f64 + 0.5 - c.0, j as f64 + 0.5 - c.1);
        let u = p.0 * d.0 + p.1 * d.1;
        let v = p.0 * n.0 + p.1 * n.1;
        (v - self.lateral(u)).abs()
    }

    fn mask(&self, nx: usize, ny: usize) -> Vec<bool> {
        let mut mask = vec![false; nx * ny];
        let pts = self.centerline(nx, ny);
        let r = self.width / 2.0;
        for seg in pts.windows(2) {
            supercover(seg[0], seg[1], nx, ny, &mut mask);
            let (a, b) = (seg[0], seg[1]);
            let lo_i = (a.0.min(b.0) - r - 1.0).floor().max(0.0) as usize;
            let hi_i = ((a.0.max(b.0) + r + 1.0).ceil().max(0.0) as usize).min(nx);
            let lo_j = (a.1.min(b.1) - r - 1.0).floor().max(0.0) as usize;
            let hi_j = ((a.1.max(b.1) + r + 1.0).ceil().max(0.0) as usize).min(ny);
            for j in lo_j..hi_j {
                for i in lo_i..hi_i {
                    if seg_distance((i as f64 + 0.5, j as f64 + 0.5), a, b) <= r {
                        mask[j * nx + i] = true;
                    }
                }
            }
        }
        mask
    }
}

/// Whether segment `a`-`b` meets the closed unit square of cell (i, j).
fn seg_hits_cell(a: (f64, f64), b: (f64, f64), i: usize, j: usize) -> bool {
    let (x0, y0, x1, y1) = (i as f64, j as f64, i as f64 + 1.0, j as f64 + 1.0);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0 - x0), (dx, x1 - a.0), (-dy, a.1 - y0), (dy, y1 - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0)
    };
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Marks every cell the segment passes through (cells are unit squares
/// `[i, i+1) x [j, j+1)`); at exact corner crossings both neighbours are
/// marked, so the result is 4-connected.
fn supercover(a: (f64, f64), b: (f64, f64), nx: usize, ny: usize, mask: &mut [bool]) {
    let mut set = |i: i64, j: i64| {
        if i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny {
            mask[j as usize * nx + i as usize] = true;
        }
    };
    let (mut i, mut j) = (a.0.floor() as i64, a.1.floor() as i64);
    let (ie, je) = (b.0.floor() as i64, b.1.floor() as i64);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let si = if dx > 0.0 { 1 } else { -1 };
    let sj = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        (a.0.floor() + 1.0 - a.0) / dx
    } else if dx < 0.0 {
        (a.0 - a.0.floor()) / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        (a.1.floor() + 1.0 - a.1) / dy
    } else if dy < 0.0 {
        (a.1 - a.1.floor()) / -dy
    } else {
        f64::INFINITY
    };
    set(i, j);
    let n = (ie - i).abs() + (je - j).abs();
    for _ in 0..n {
        if (t_max_x - t_max_y).abs() < 1e-12 {
            set(i + si, j);
            set(i, j + sj);
            i += si;
            j += sj;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            i += si;
            t_max_x += t_delta_x;
        } else {
            j += sj;
            t_max_y += t_delta_y;
        }
        set(i, j);
        if i == ie && j == je {
            break;
        }
    }
}

fn dilate_chebyshev(mask: &[bool], nx: usize, ny: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if mask[j * nx + i] {
                for ii in i.saturating_sub(r)..(i + r + 1).min(nx) {
                    rows[j * nx + ii] = true;
                }
            }
        }
    }
    let mut out = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if rows[j * nx + i] {
                for jj in j.saturating_sub(r)..(j + r + 1).min(ny) {
                    out[jj * nx + i] = true;
                }
            }
        }
    }
    out
}

/// A channel's centerline with the geometry needed for point queries.
struct Traced<'a> {
    ch: &'a Channel,
    line: Vec<(f64, f64)>,
}

impl Traced<'_> {
    fn covers(&self, i: usize, j: usize) -> bool {
        let p = (i as f64 + 0.5, j as f64 + 0.5);
        let r = self.ch.width / 2.0;
        self.line.windows(2).any(|s| {
            let (a, b) = (s[0], s[1]);
            // Cheap reject: both ends far from the cell on one side.
            let far = r + 2.0;
            if (a.0 - p.0 > far && b.0 - p.0 > far) || (p.0 - a.0 > far && p.0 - b.0 > far) {
                return false;
            }
            if (a.1 - p.1 > far && b.1 - p.1 > far) || (p.1 - a.1 > far && p.1 - b.1 > far) {
                return false;
            }
            seg_distance(p, a, b) <= r || seg_hits_cell(a, b, i, j)
        })
    }
}

/// Facies at one cell without rendering the whole grid. Agrees with
/// [`render`] except for centerlines passing exactly through cell corners.
fn facies_at(traced: &[Traced<'_>], i: usize, j: usize, nx: usize, ny: usize) -> u8 {
    if traced.iter().any(|t| t.covers(i, j)) {
        return CHANNEL;
    }
    for t in traced {
        let r = t.ch.levee;
        for jj in j.saturating_sub(r)..(j + r + 1).min(ny) {
            for ii in i.saturating_sub(r)..(i + r + 1).min(nx) {
                if t.covers(ii, jj) {
                    return LEVEE;
                }
            }
        }
    }
    MUD
}

fn point_misses(channels: &[Channel], cond: &ConditioningSet, nx: usize, ny: usize) -> usize {
    let traced: Vec<Traced<'_>> = channels.iter().map(|ch| Traced { ch, line: ch.centerline(nx, ny) }).collect();
    cond.points
        .iter()
        .filter(|p| facies_at(&traced, p.i, p.j, nx, ny) != p.facies)
        .count()
}

fn render(channels: &[Channel], nx: usize, ny: usize) -> FaciesGrid {
    let mut codes = vec![MUD; nx * ny];
    for ch in channels {
        let mask = ch.mask(nx, ny);
        let halo = dilate_chebyshev(&mask, nx, ny, ch.levee);
        for k in 0..nx * ny {
            let c = if mask[k] {
                CHANNEL
            } else if halo[k] {
                LEVEE
            } else {
                MUD
            };
            codes[k] = codes[k].max(c);
        }
    }
    FaciesGrid { nx, ny, codes }
}

fn sample_channels(style: &ChannelStyle, rng: &mut ChaCha8Rng) -> Vec<Channel> {
    let n = draw_int(rng, style.n_channels);
    (0..n).map(|_| Channel::sample(style, rng)).collect()
}

fn unmet(cond: &ConditioningSet, grid: &FaciesGrid) -> usize {
    cond.points.iter().filter(|p| grid.get(p.i, p.j) != p.facies).count()
}

/// Moves channels through unmet channel points, each channel at most once.
/// For every unmet point the nearest channel is chosen among those whose
/// removal would not uncover an already honored channel point, falling
/// back to the nearest unmoved channel.
fn translate_fix(channels: &mut [Channel], cond: &ConditioningSet, nx: usize, ny: usize) {
    let mut moved = vec![false; channels.len()];
    let targets: Vec<HardPoint> = cond.points.iter().copied().filter(|p| p.facies == CHANNEL).collect();
    let covered_by = |chs: &[Channel], p: &HardPoint| -> Vec<usize> {
        chs.iter()
            .enumerate()
            .filter(|(_, ch)| Traced { ch, line: ch.centerline(nx, ny) }.covers(p.i, p.j))
            .map(|(k, _)| k)
            .collect()
    };
    for p in &targets {
        if !covered_by(channels, p).is_empty() {
            continue;
        }
        let mut needed = vec![false; channels.len()];
        for q in &targets {
            if let [only] = covered_by(channels, q)[..] {
                needed[only] = true;
            }
        }
        let nearest = |allow: &dyn Fn(usize) -> bool| {
            (0..channels.len()).filter(|&k| allow(k)).min_by(|&a, &b| {
                channels[a]
                    .lateral_distance(p.i, p.j, nx, ny)
                    .total_cmp(&channels[b].lateral_distance(p.i, p.j, nx, ny))
            })
        };
        let pick = nearest(&|k| !moved[k] && !needed[k]).or_else(|| nearest(&|k| !moved[k]));
        if let Some(k) = pick {
            channels[k].pass_through(p.i, p.j, nx, ny);
            moved[k] = true;
        }
    }
}

/// One conditioned realization. Draws whole channel sets from the seed's
/// stream until every hard point is honored (at most `RETRY_BUDGET` draws),
/// then translates the nearest channels of the closest draw through the
/// unmet channel points before giving up.
pub fn generate_realization(style: &ChannelStyle, cond: &ConditioningSet, seed: u64) -> Result<FaciesGrid, GeogenError> {
    generate_with_budget(style, cond, seed, RETRY_BUDGET)
}

pub fn generate_with_budget(
    style: &ChannelStyle,
    cond: &ConditioningSet,
    seed: u64,
    budget: usize,
) -> Result<FaciesGrid, GeogenError> {
    generate_traced(style, cond, seed, budget).map(|(g, _)| g)
}

/// How a realization was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationTrace {
    /// Channel-set draws made by rejection sampling.
    pub draws: usize,
    /// Whether the translation fallback produced the result.
    pub translated: bool,
}

/// [`generate_with_budget`] that also reports how the result was reached.
/// The fallback starts from the rejected draw with the fewest unmet points.
pub fn generate_traced(
    style: &ChannelStyle,
    cond: &ConditioningSet,
    seed: u64,
    budget: usize,
) -> Result<(FaciesGrid, GenerationTrace), GeogenError> {
    style.validate()?;
    let (nx, ny) = (style.nx, style.ny);
    cond.check_bounds(nx, ny)?;
    let mut rng = rng(seed);
    let mut best: Option<(usize, Vec<Channel>)> = None;
    for draw in 1..=budget.max(1) {
        let channels = sample_channels(style, &mut rng);
        let miss = point_misses(&channels, cond, nx, ny);
        if miss == 0 {
            let grid = render(&channels, nx, ny);
            if unmet(cond, &grid) == 0 {
                return Ok((grid, GenerationTrace { draws: draw, translated: false }));
            }
        }
        if best.as_ref().is_none_or(|(m, _)| miss < *m) {
            best = Some((miss, channels));
        }
    }
    let mut channels = best.map(|(_, c)| c).unwrap_or_default();
    translate_fix(&mut channels, cond, nx, ny);
    let grid = render(&channels, nx, ny);
    match unmet(cond, &grid) {
        0 => Ok((
            grid,
            GenerationTrace {
                draws: budget.max(1),
                translated: true,
            },
        )),
        unmet => Err(GeogenError::ConditioningInfeasible { seed, unmet }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<FaciesGrid>,
    pub val: Vec<FaciesGrid>,
    pub test: Vec<FaciesGrid>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition sizes: train and validation are rounded, test takes the rest.
pub fn split_sizes(n_total: usize, split: (f64, f64, f64)) -> Result<(usize, usize, usize), GeogenError> {
    let (a, b, c) = split;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(GeogenError::Split(format!("fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1")));
    }
    let n_train = ((a * n_total as f64).round() as usize).min(n_total);
    let n_val = ((b * n_total as f64).round() as usize).min(n_total - n_train);
    Ok((n_train, n_val, n_total - n_train - n_val))
}

/// Attempts per dataset index before an infeasible conditioning error is
/// propagated.
pub const DATASET_SEED_ATTEMPTS: u64 = 16;

/// Realization for dataset index `k`: seed `split_seed(split_seed(seed, k), a)`
/// for the first attempt `a` whose conditioning is feasible.
pub fn dataset_member(style: &ChannelStyle, cond: &ConditioningSet, seed: u64, k: u64) -> Result<FaciesGrid, GeogenError> {
    let base = split_seed(seed, k);
    let mut last = None;
    for a in 0..DATASET_SEED_ATTEMPTS {
        match generate_realization(style, cond, split_seed(base, a)) {
            Ok(g) => return Ok(g),
            Err(e @ GeogenError::ConditioningInfeasible { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generates `n_total` realizations (see [`dataset_member`]) and partitions
/// them by a seeded shuffle.
pub fn build_dataset(
    style: &ChannelStyle,
    cond: &ConditioningSet,
    n_total: usize,
    split: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset, GeogenError> {
    if n_total < 10 {
        return Err(GeogenError::Split(format!("need at least 10 realizations, got {n_total}")));
    }
    let (n_train, n_val, _) = split_sizes(n_total, split)?;
    let grids = (0..n_total)
        .into_par_iter()
        .map(|k| dataset_member(style, cond, seed, k as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..n_total).collect();
    let mut r = rng(split_seed(seed, u64::MAX));
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
    let pick = |ix: &[usize]| ix.iter().map(|&k| grids[k].clone()).collect::<Vec<_>>();
    Ok(Dataset {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

pub fn write_grids(w: &mut impl Write, grids: &[FaciesGrid]) -> Result<(), GeogenError> {
    let (nx, ny) = grids.first().map_or((0, 0), |g| (g.nx, g.ny));
    if grids.iter().any(|g| g.nx != nx || g.ny != ny) {
        return Err(GeogenError::Format("all grids in a file must share dimensions".into()));
    }
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, grids.len() as u32, nx as u32, ny as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for g in grids {
        w.write_all(&g.codes)?;
    }
    Ok(())
}

pub fn read_grids(r: &mut impl Read) -> Result<Vec<FaciesGrid>, GeogenError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(GeogenError::Format("bad magic, not a GGDS file".into()));
    }
    let mut word = || -> Result<u32, GeogenError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != DATASET_VERSION {
        return Err(GeogenError::Format(format!("unsupported version {version}")));
    }
    let (count, nx, ny) = (word()? as usize, word()? as usize, word()? as usize);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut codes = vec![0u8; nx * ny];
        r.read_exact(&mut codes)?;
        out.push(FaciesGrid::new(nx, ny, codes)?);
    }
    Ok(out)
}

pub fn save_grids(path: &Path, grids: &[FaciesGrid]) -> Result<(), GeogenError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_grids(&mut w, grids)?;
    w.flush()?;
    Ok(())
}

pub fn load_grids(path: &Path) -> Result<Vec<FaciesGrid>, GeogenError> {
    let f = std::fs::File::open(path).map_err(|e| GeogenError::Format(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(f);
    let grids = read_grids(&mut r)?;
    if !r.fill_buf()?.is_empty() {
        return Err(GeogenError::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supercover_is_four_connected() {
        let (nx, ny) = (20, 20);
        for &(a, b) in &[((0.3, 0.2), (17.8, 9.1)), ((2.5, 2.5), (12.5, 12.5)), ((15.2, 1.0), (3.1, 18.7))] {
            let mut mask = vec![false; nx * ny];
            supercover(a, b, nx, ny, &mut mask);
            // Flood fill from the start cell over 4-neighbours reaches all.
            let start = (a.1 as usize) * nx + a.0 as usize;
            let mut seen = vec![false; nx * ny];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(k) = stack.pop() {
                let (i, j) = (k % nx, k / nx);
                let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
                for (ii, jj) in nb {
                    if ii < nx && jj < ny && mask[jj * nx + ii] && !seen[jj * nx + ii] {
                        seen[jj * nx + ii] = true;
                        stack.push(jj * nx + ii);
                    }
                }
            }
            assert_eq!(seen, mask);
            assert!(mask[(b.1 as usize) * nx + b.0 as usize]);
        }
    }

    #[test]
    fn dilation_matches_brute_force() {
        let (nx, ny) = (9, 7);
        let mask: Vec<bool> = (0..nx * ny).map(|k| k % 11 == 3).collect();
        for r in 0..3 {
            let d = dilate_chebyshev(&mask, nx, ny, r);
            for j in 0..ny {
                for i in 0..nx {
                    let want = (0..ny).any(|jj| {
                        (0..nx).any(|ii| mask[jj * nx + ii] && i.abs_diff(ii) <= r && j.abs_diff(jj) <= r)
                    });
                    assert_eq!(d[j * nx + i], want);
                }
            }
        }
    }

    #[test]
    fn translation_puts_point_on_centerline() {
        let style = ChannelStyle::desk();
        let mut r = rng(3);
        let mut ch = Channel::sample(&style, &mut r);
        ch.pass_through(5, 7, 32, 32);
        assert!(ch.lateral_distance(5, 7, 32, 32) < 1e-9);
        assert_eq!(render(&[ch], 32, 32).get(5, 7), CHANNEL);
    }

    #[test]
    fn point_query_agrees_with_render() {
        let style = ChannelStyle::desk();
        let mut r = rng(9);
        for _ in 0..20 {
            let chs = sample_channels(&style, &mut r);
            let grid = render(&chs, 32, 32);
            let traced: Vec<Traced<'_>> = chs.iter().map(|ch| Traced { ch, line: ch.centerline(32, 32) }).collect();
            for j in 0..32 {
                for i in 0..32 {
                    assert_eq!(facies_at(&traced, i, j, 32, 32), grid.get(i, j), "({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn continuous_round_trip() {
        let g = FaciesGrid::new(3, 1, vec![0, 1, 2]).unwrap();
        assert_eq!(g.to_continuous(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(FaciesGrid::from_continuous(3, 1, &[-0.6, 0.4, 3.0]).unwrap(), g);
    }
}
