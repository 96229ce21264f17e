//! Ensemble smoother with multiple data assimilation over the latent input,
//! optionally with per-facies porosity and log-permeability, plus k-means
//! medoid selection of representative realizations.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, Ldm};
use crate::flowsim::{self, FlowError, RockFluidProps, WellSeries, WellSpec};
use crate::geogen::FaciesGrid;
use crate::nn::Tensor;
use crate::rng::{rng, split_seed, stage_seed};

pub const PAPER_ALPHAS: [f64; 10] = [57.017, 35.0, 25.0, 20.0, 18.0, 15.0, 12.0, 8.0, 5.0, 3.0];
pub const N_PROPS: usize = 6;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;
const EMPTY_CLUSTER_RETRIES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum EsmdaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid ensemble: {0}")]
    Ensemble(String),
    #[error("(C_dd + alpha C_d) is not positive definite")]
    Solver,
    #[error("forward model failed for member {member}: {message}")]
    Forward { member: usize, message: String },
    #[error("k-means: {0}")]
    KMeans(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Normal prior truncated to [min, max].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropPrior {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl PropPrior {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let v = self.mean + self.std * z;
            if v >= self.min && v <= self.max {
                return v;
            }
        }
    }
}

/// Order: porosity of mud, levee, channel, then ln k (mD) of mud, levee, channel.
pub const PROP_PRIORS: [PropPrior; N_PROPS] = [
    PropPrior { mean: 0.075, std: 0.0125, min: 0.05, max: 0.10 },
    PropPrior { mean: 0.16, std: 0.02, min: 0.12, max: 0.20 },
    PropPrior { mean: 0.26, std: 0.02, min: 0.22, max: 0.30 },
    PropPrior { mean: 3.45, std: 0.23, min: 3.00, max: 3.91 },
    PropPrior { mean: 5.41, std: 0.40, min: 4.61, max: 6.21 },
    PropPrior { mean: 7.46, std: 0.27, min: 6.91, max: 8.00 },
];

pub const PROP_NAMES: [&str; N_PROPS] = ["phi_mud", "phi_levee", "phi_channel", "lnk_mud", "lnk_levee", "lnk_channel"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HmCase {
    /// Latent only, facies properties fixed.
    Fixed,
    /// Latent plus the six facies properties.
    Uncertain,
}

impl HmCase {
    pub fn from_number(n: u32) -> Result<Self, EsmdaError> {
        match n {
            1 => Ok(Self::Fixed),
            2 => Ok(Self::Uncertain),
            _ => Err(EsmdaError::Config(format!("case must be 1 or 2, got {n}"))),
        }
    }
}

/// History-matching variables of one member. `xi` is the latent flattened
/// row-major over (channel, y, x).
#[derive(Clone, Debug, PartialEq)]
pub struct HmVector {
    pub xi: Vec<f64>,
    pub props: Option<[f64; N_PROPS]>,
}

impl HmVector {
    pub fn len(&self) -> usize {
        self.xi.len() + if self.props.is_some() { N_PROPS } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.xi.clone();
        if let Some(p) = &self.props {
            v.extend_from_slice(p);
        }
        v
    }

    pub fn from_slice(v: &[f64], n_c: usize, case: HmCase) -> Result<Self, EsmdaError> {
        let want = n_c + if case == HmCase::Uncertain { N_PROPS } else { 0 };
        if v.len() != want {
            return Err(EsmdaError::Ensemble(format!("member has {} values, expected {want}", v.len())));
        }
        let props = (case == HmCase::Uncertain).then(|| {
            let mut p = [0.0; N_PROPS];
            p.copy_from_slice(&v[n_c..]);
            p
        });
        Ok(Self { xi: v[..n_c].to_vec(), props })
    }

    /// Rock properties for simulation: `base` with this member's facies values if present.
    pub fn rock(&self, base: &RockFluidProps) -> RockFluidProps {
        match &self.props {
            None => base.clone(),
            Some(p) => base.with_facies([p[0], p[1], p[2]], [p[3].exp(), p[4].exp(), p[5].exp()]),
        }
    }

    /// Clip facies properties to the prior bounds.
    pub fn truncate(&mut self) {
        if let Some(p) = &mut self.props {
            for (v, pr) in p.iter_mut().zip(PROP_PRIORS.iter()) {
                *v = v.clamp(pr.min, pr.max);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<HmVector>,
    /// Assimilation steps applied so far.
    pub step: usize,
}

impl Ensemble {
    pub fn new(members: Vec<HmVector>, step: usize) -> Result<Self, EsmdaError> {
        if members.len() < 2 {
            return Err(EsmdaError::Ensemble(format!("need at least 2 members, got {}", members.len())));
        }
        let (n, has) = (members[0].xi.len(), members[0].props.is_some());
        if members.iter().any(|m| m.xi.len() != n || m.props.is_some() != has) {
            return Err(EsmdaError::Ensemble("members differ in length".into()));
        }
        Ok(Self { members, step })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn case(&self) -> HmCase {
        if self.members[0].props.is_some() {
            HmCase::Uncertain
        } else {
            HmCase::Fixed
        }
    }

    pub fn latent_len(&self) -> usize {
        self.members[0].xi.len()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(HmVector::to_vec).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        column_mean(&self.rows())
    }

    /// Latents as a [N, channels, ny, nx] tensor.
    pub fn latent_tensor(&self, shape: &[usize]) -> Result<Tensor, EsmdaError> {
        let data: Vec<f32> = self.members.iter().flat_map(|m| m.xi.iter().map(|&v| v as f32)).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| EsmdaError::Ensemble(e.to_string()))
    }
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Prior ensemble: latent components i.i.d. N(0, 1), facies properties from
/// the truncated priors. Member `j` depends only on (`seed`, `j`).
pub fn init_ensemble(case: HmCase, n_e: usize, n_c: usize, seed: u64) -> Result<Ensemble, EsmdaError> {
    let members = (0..n_e)
        .map(|j| {
            let mut r = rng(split_seed(seed, j as u64));
            let xi = (0..n_c).map(|_| r.sample(StandardNormal)).collect();
            let props = (case == HmCase::Uncertain).then(|| PROP_PRIORS.map(|p| p.sample(&mut r)));
            HmVector { xi, props }
        })
        .collect();
    Ensemble::new(members, 0)
}

/// Observed data with diagonal error covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub d_obs: Vec<f64>,
    /// Diagonal of C_d.
    pub var: Vec<f64>,
}

impl ObservationSet {
    pub fn new(d_obs: Vec<f64>, var: Vec<f64>) -> Result<Self, EsmdaError> {
        if d_obs.len() != var.len() {
            return Err(EsmdaError::Config(format!("{} data but {} variances", d_obs.len(), var.len())));
        }
        if var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(EsmdaError::Config("error variances must be finite and nonnegative".into()));
        }
        Ok(Self { d_obs, var })
    }

    /// Std = `rel` × |d| per datum, floored at `floor` × max |d|.
    pub fn from_true_data(d_true: &[f64], rel: f64, floor: f64) -> Result<Self, EsmdaError> {
        let scale = d_true.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let var = d_true.iter().map(|d| (rel * d.abs()).max(floor * scale).powi(2)).collect();
        Self::new(d_true.to_vec(), var)
    }

    pub fn len(&self) -> usize {
        self.d_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_obs.is_empty()
    }

    /// (1/N_d) (d - d_obs)ᵀ C_d⁻¹ (d - d_obs).
    pub fn mismatch(&self, d: &[f64]) -> f64 {
        let s: f64 = d
            .iter()
            .zip(&self.d_obs)
            .zip(&self.var)
            .map(|((a, b), v)| if *v > 0.0 { (a - b).powi(2) / v } else { 0.0 })
            .sum();
        s / self.len() as f64
    }
}

/// d* = d_obs + √α C_d^{1/2} z.
pub fn perturb_obs(obs: &ObservationSet, alpha: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    obs.d_obs
        .iter()
        .zip(&obs.var)
        .map(|(d, v)| {
            let z: f64 = r.sample(StandardNormal);
            d + (alpha * v).sqrt() * z
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    // Columns are members.
    DMatrix::from_fn(rows[0].len(), rows.len(), |i, j| rows[j][i])
}

fn anomalies(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut a = m.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    a
}

/// Sample cross-covariance C_xd and autocovariance C_dd with 1/(N_e - 1)
/// normalization; rows of `x` and `d` are members.
pub fn sample_covariances(x: &[Vec<f64>], d: &[Vec<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>), EsmdaError> {
    if x.len() != d.len() || x.len() < 2 {
        return Err(EsmdaError::Ensemble(format!("{} members but {} data rows", x.len(), d.len())));
    }
    let ax = anomalies(&to_matrix(x));
    let ad = anomalies(&to_matrix(d));
    let s = 1.0 / (x.len() - 1) as f64;
    Ok((&ax * ad.transpose() * s, &ad * ad.transpose() * s))
}

/// Update with explicit perturbed data (`d_pert[j]` for member `j`):
/// x_j + C_xd (C_dd + α C_d)⁻¹ (d*_j - d_j), then props clipped to bounds.
pub fn esmda_update_with(
    ens: &Ensemble,
    d_sim: &[Vec<f64>],
    d_pert: &[Vec<f64>],
    obs: &ObservationSet,
    alpha: f64,
) -> Result<Ensemble, EsmdaError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(EsmdaError::Config(format!("inflation factor must be positive, got {alpha}")));
    }
    let n_d = obs.len();
    if d_sim.len() != ens.len() || d_pert.len() != ens.len() {
        return Err(EsmdaError::Ensemble(format!("{} members, {} simulated, {} perturbed", ens.len(), d_sim.len(), d_pert.len())));
    }
    if d_sim.iter().chain(d_pert).any(|d| d.len() != n_d) {
        return Err(EsmdaError::Ensemble(format!("data rows must have {n_d} values")));
    }
    let rows = ens.rows();
    let (c_xd, c_dd) = sample_covariances(&rows, d_sim)?;
    let mut s = c_dd;
    for i in 0..n_d {
        s[(i, i)] += alpha * obs.var[i];
    }
    let chol = s.cholesky().ok_or(EsmdaError::Solver)?;
    let innov = to_matrix(d_pert) - to_matrix(d_sim);
    let delta = c_xd * chol.solve(&innov);
    let n_c = ens.latent_len();
    let case = ens.case();
    let members = rows
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let v: Vec<f64> = r.iter().enumerate().map(|(i, x)| x + delta[(i, j)]).collect();
            let mut m = HmVector::from_slice(&v, n_c, case)?;
            m.truncate();
            Ok(m)
        })
        .collect::<Result<Vec<_>, EsmdaError>>()?;
    Ensemble::new(members, ens.step + 1)
}

/// One assimilation step; member `j` is compared to its own perturbation
/// drawn with `split_seed(seed, j)`.
pub fn esmda_update(
    ens: &Ensemble,
    d_sim: &[Vec<f64>],
    obs: &ObservationSet,
    alpha: f64,
    seed: u64,
) -> Result<Ensemble, EsmdaError> {
    let d_pert: Vec<Vec<f64>> = (0..ens.len()).map(|j| perturb_obs(obs, alpha, split_seed(seed, j as u64))).collect();
    esmda_update_with(ens, d_sim, &d_pert, obs, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsmdaConfig {
    pub n_e: usize,
    pub alphas: Vec<f64>,
    /// Relative measurement-error std.
    pub rel_noise: f64,
    /// Std floor as a fraction of the largest |datum|.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for EsmdaConfig {
    fn default() -> Self {
        Self { n_e: 200, alphas: PAPER_ALPHAS.to_vec(), rel_noise: 0.02, noise_floor: 0.01, seed: 0 }
    }
}

impl EsmdaConfig {
    pub fn n_a(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<(), EsmdaError> {
        if self.n_e < 2 {
            return Err(EsmdaError::Config(format!("n_e must be at least 2, got {}", self.n_e)));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(EsmdaError::Config("alphas must be a nonempty list of positive values".into()));
        }
        let inv: f64 = self.alphas.iter().map(|a| 1.0 / a).sum();
        if (inv - 1.0).abs() > 1e-3 {
            return Err(EsmdaError::Config(format!("sum of 1/alpha is {inv}, must be 1 within 1e-3")));
        }
        if !(self.rel_noise > 0.0 && self.rel_noise.is_finite()) || !(self.noise_floor >= 0.0) {
            return Err(EsmdaError::Config("rel_noise must be positive and noise_floor nonnegative".into()));
        }
        Ok(())
    }
}

/// Simulated data for a whole ensemble, one row per member.
pub trait ForwardModel {
    fn forward(&self, members: &[HmVector]) -> Result<Vec<Vec<f64>>, EsmdaError>;
}

impl<F> ForwardModel for F
where
    F: Fn(&[HmVector]) -> Result<Vec<Vec<f64>>, EsmdaError>,
{
    fn forward(&self, members: &[HmVector]) -> Result<Vec<Vec<f64>>, EsmdaError> {
        self(members)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MismatchRow {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug)]
pub struct EsmdaRun {
    /// Ensembles after 0..=N_a steps.
    pub ensembles: Vec<Ensemble>,
    /// Simulated data of each ensemble.
    pub data: Vec<Vec<Vec<f64>>>,
    pub mismatch: Vec<MismatchRow>,
}

impl EsmdaRun {
    pub fn posterior(&self) -> &Ensemble {
        self.ensembles.last().expect("run holds the prior")
    }
}

fn mismatch_row(step: usize, obs: &ObservationSet, data: &[Vec<f64>]) -> MismatchRow {
    let m: Vec<f64> = data.iter().map(|d| obs.mismatch(d)).collect();
    MismatchRow {
        step,
        mean: m.iter().sum::<f64>() / m.len() as f64,
        min: m.iter().cloned().fold(f64::INFINITY, f64::min),
        max: m.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Runs all assimilation steps. The prior and every updated ensemble are
/// simulated, so `mismatch` has N_a + 1 rows.
pub fn run_esmda(
    config: &EsmdaConfig,
    prior: Ensemble,
    obs: &ObservationSet,
    model: &impl ForwardModel,
    mut on_step: impl FnMut(&MismatchRow),
) -> Result<EsmdaRun, EsmdaError> {
    config.validate()?;
    let perturb_seed = stage_seed(config.seed, "perturb");
    let check = |d: &Vec<Vec<f64>>, n: usize| -> Result<(), EsmdaError> {
        if d.len() != n {
            return Err(EsmdaError::Ensemble(format!("forward model returned {} rows for {n} members", d.len())));
        }
        Ok(())
    };
    let mut run = EsmdaRun { ensembles: vec![prior], data: Vec::new(), mismatch: Vec::new() };
    for (i, &alpha) in config.alphas.iter().enumerate() {
        let ens = &run.ensembles[i];
        let d = model.forward(&ens.members)?;
        check(&d, ens.len())?;
        let row = mismatch_row(i, obs, &d);
        on_step(&row);
        run.mismatch.push(row);
        let next = esmda_update(ens, &d, obs, alpha, split_seed(perturb_seed, i as u64))?;
        run.data.push(d);
        run.ensembles.push(next);
    }
    let last = run.posterior();
    let d = model.forward(&last.members)?;
    check(&d, last.len())?;
    let row = mismatch_row(config.n_a(), obs, &d);
    on_step(&row);
    run.mismatch.push(row);
    run.data.push(d);
    Ok(run)
}

pub fn mismatch_csv(rows: &[MismatchRow]) -> String {
    let mut s = String::from("step,mean,min,max\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.mean, r.min, r.max));
    }
    s
}

/// Facies-to-data map: LDM generation from the member latent, property
/// assignment, flow simulation, observation extraction.
pub struct LdmForward<'a> {
    pub ldm: &'a Ldm,
    pub ddim_steps: usize,
    pub props: RockFluidProps,
    pub wells: Vec<WellSpec>,
    pub t_end: f64,
    pub max_dt: f64,
    pub every: f64,
    pub until: f64,
}

impl LdmForward<'_> {
    pub fn grids(&self, members: &[HmVector]) -> Result<Vec<FaciesGrid>, EsmdaError> {
        if members.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.ldm.latent_shape(members.len());
        let want: usize = shape[1..].iter().product();
        if let Some(j) = members.iter().position(|m| m.xi.len() != want) {
            return Err(EsmdaError::Forward { member: j, message: format!("latent length {} != {want}", members[j].xi.len()) });
        }
        let data: Vec<f32> = members.iter().flat_map(|m| m.xi.iter().map(|&v| v as f32)).collect();
        let xi = Tensor::new(shape, data).map_err(|e| EsmdaError::Ensemble(e.to_string()))?;
        Ok(self.ldm.generate(&xi, self.ddim_steps)?)
    }

    /// Full well series for each member, simulated in parallel.
    pub fn series(&self, members: &[HmVector], grids: &[FaciesGrid]) -> Result<Vec<WellSeries>, EsmdaError> {
        members
            .par_iter()
            .zip(grids.par_iter())
            .enumerate()
            .map(|(j, (m, g))| {
                flowsim::simulate(g, &m.rock(&self.props), &self.wells, self.t_end, self.max_dt)
                    .map_err(|e| EsmdaError::Forward { member: j, message: e.to_string() })
            })
            .collect()
    }

    pub fn observe(&self, series: &[WellSeries]) -> Result<Vec<Vec<f64>>, EsmdaError> {
        series.iter().map(|s| Ok(flowsim::extract_observations(s, self.every, self.until)?)).collect()
    }
}

impl ForwardModel for LdmForward<'_> {
    fn forward(&self, members: &[HmVector]) -> Result<Vec<Vec<f64>>, EsmdaError> {
        let grids = self.grids(members)?;
        let series = self.series(members, &grids)?;
        self.observe(&series)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Index of the member nearest each centroid.
    pub medoids: Vec<usize>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = dist2(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Result<(Vec<Vec<f64>>, Vec<usize>, f64), EsmdaError> {
    let (n, k, dim) = (points.len(), centroids.len(), points[0].len());
    let mut assignment = vec![usize::MAX; n];
    let mut retries = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids).0;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            // Move the empty centroid onto the point worst served by its own.
            retries += 1;
            if retries > EMPTY_CLUSTER_RETRIES {
                return Err(EsmdaError::KMeans("empty clusters persist; too few distinct points".into()));
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = dist2(&points[a], &centroids[assignment[a]]);
                    let db = dist2(&points[b], &centroids[assignment[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap_or(0);
            centroids[empty] = points[far].clone();
            assignment.iter_mut().for_each(|a| *a = usize::MAX);
            continue;
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &c)| dist2(p, &centroids[c])).sum();
    Ok((centroids, assignment, inertia))
}

/// k-means with k-means++ seeding, best inertia over `restarts` runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult, EsmdaError> {
    if k == 0 || k > points.len() {
        return Err(EsmdaError::KMeans(format!("k = {k} must be in 1..={}", points.len())));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(EsmdaError::KMeans("points differ in dimension".into()));
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    let mut last_err = None;
    for r in 0..restarts.max(1) {
        let mut g = rng(split_seed(seed, r as u64));
        match lloyd(points, seed_centroids(points, k, &mut g)) {
            Ok(res) => {
                if best.as_ref().is_none_or(|b| res.2 < b.2) {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (centroids, assignment, inertia) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or_else(|| EsmdaError::KMeans("no restart succeeded".into()))),
    };
    let medoids = (0..k)
        .map(|c| {
            (0..points.len())
                .filter(|&i| assignment[i] == c)
                .min_by(|&a, &b| dist2(&points[a], &centroids[c]).total_cmp(&dist2(&points[b], &centroids[c])))
                .expect("clusters are nonempty")
        })
        .collect();
    Ok(KMeansResult { centroids, assignment, inertia, medoids })
}

/// Representative grids: medoids of k-means on continuous facies codes,
/// ordered by cluster size (largest first).
pub fn kmeans_medoids(grids: &[FaciesGrid], k: usize, seed: u64) -> Result<Vec<usize>, EsmdaError> {
    let points: Vec<Vec<f64>> =
        grids.iter().map(|g| g.to_continuous().into_iter().map(f64::from).collect()).collect();
    let res = kmeans(&points, k, seed, KMEANS_RESTARTS)?;
    let mut order: Vec<(usize, usize)> =
        (0..k).map(|c| (res.assignment.iter().filter(|&&a| a == c).count(), res.medoids[c])).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, m)| m).collect())
}
