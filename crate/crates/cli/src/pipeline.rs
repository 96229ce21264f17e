//! Stage functions shared by the subcommands and the acceptance suite.

use geoldm::diffusion::{self, Ldm, LdmLossRow, LdmTrainResult};
use geoldm::esmda::{
    self, init_ensemble, perturb_obs, run_esmda, EsmdaRun, HmCase, HmVector, LdmForward, ObservationSet, PROP_PRIORS,
};
use geoldm::flowsim::{self, RockFluidProps, WellSeries};
use geoldm::geogen::{self, dataset_member, ConditioningSet, Dataset, FaciesGrid};
use geoldm::metrics::{self, InterpolationCurves};
use geoldm::nn::Tensor;
use geoldm::rng::{rng, split_seed};
use geoldm::vae::{self, LossRow, Vae, VaeTrainResult};
use geoldm::Error;
use serde::Serialize;

use crate::config::PipelineConfig;

/// Generation batch size; bounds activation memory.
const GENERATE_CHUNK: usize = 50;

pub fn conditioning(cfg: &PipelineConfig) -> ConditioningSet {
    geogen::well_conditioning(cfg.data.style.nx, cfg.data.style.ny)
}

pub fn build_data(cfg: &PipelineConfig) -> Result<Dataset, Error> {
    Ok(geogen::build_dataset(
        &cfg.data.style,
        &conditioning(cfg),
        cfg.data.n_total,
        cfg.split(),
        cfg.stage_seed("gen-data"),
    )?)
}

/// Fresh generator realizations disjoint from the dataset seeds.
pub fn reference_models(cfg: &PipelineConfig, count: usize, label: &str) -> Result<Vec<FaciesGrid>, Error> {
    use rayon::prelude::*;
    let seed = cfg.stage_seed(label);
    let cond = conditioning(cfg);
    (0..count)
        .into_par_iter()
        .map(|k| Ok(dataset_member(&cfg.data.style, &cond, seed, k as u64)?))
        .collect()
}

pub fn train_vae(
    cfg: &PipelineConfig,
    data: &Dataset,
    on_step: impl FnMut(&LossRow),
) -> Result<VaeTrainResult, Error> {
    Ok(vae::train_vae(cfg.vae_arch(), &data.train, &data.val, &conditioning(cfg), &cfg.vae_train(), on_step)?)
}

pub fn train_ldm(
    cfg: &PipelineConfig,
    vae: &Vae,
    data: &Dataset,
    on_step: impl FnMut(&LdmLossRow),
) -> Result<LdmTrainResult, Error> {
    Ok(diffusion::train_ldm(vae, &data.train, &data.val, &cfg.ldm_train(), on_step)?)
}

/// Latent flattened row-major, one vector per sample.
pub fn latent_rows(xi: &Tensor) -> Vec<Vec<f64>> {
    let n = xi.shape()[0];
    let per = xi.numel() / n.max(1);
    xi.data().chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
}

/// Generate from explicit starting latents, in chunks.
pub fn generate(ldm: &Ldm, xi: &Tensor, ddim_steps: usize) -> Result<Vec<FaciesGrid>, Error> {
    let n = xi.shape()[0];
    let per = xi.numel() / n.max(1);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(GENERATE_CHUNK) {
        let end = (start + GENERATE_CHUNK).min(n);
        let mut shape = xi.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, xi.data()[start * per..end * per].to_vec())?;
        out.extend(ldm.generate(&chunk, ddim_steps)?);
    }
    Ok(out)
}

/// `count` new models from starting latents drawn with `seed`.
pub fn sample(ldm: &Ldm, cfg: &PipelineConfig, count: usize, seed: u64) -> Result<(Tensor, Vec<FaciesGrid>), Error> {
    let xi = ldm.draw_latents(count, cfg.ldm.prior, seed)?;
    let grids = generate(ldm, &xi, cfg.ldm.ddim_steps)?;
    Ok((xi, grids))
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageRow {
    pub facies: u8,
    pub direction: (usize, usize),
    pub coverage: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QualitySummary {
    pub n_generated: usize,
    pub n_reference: usize,
    pub hard_data_accuracy: f64,
    pub reference_hard_data_accuracy: f64,
    /// Facies fractions (mud, levee, channel), generated vs reference.
    pub fractions: [f64; 3],
    pub reference_fractions: [f64; 3],
    pub two_point: Vec<CoverageRow>,
    pub min_coverage: f64,
}

pub const DIRECTIONS: [(usize, usize); 2] = [(1, 0), (0, 1)];

fn fractions(grids: &[FaciesGrid]) -> [f64; 3] {
    let mut f = [0.0; 3];
    for g in grids {
        for (c, v) in f.iter_mut().enumerate() {
            *v += g.fraction(c as u8) / grids.len() as f64;
        }
    }
    f
}

/// Hard-data accuracy and two-point envelope coverage of `generated`
/// against `reference`.
pub fn quality(
    generated: &[FaciesGrid],
    reference: &[FaciesGrid],
    cond: &ConditioningSet,
    max_lag: usize,
) -> Result<(QualitySummary, Vec<(u8, (usize, usize), metrics::TwoPointSet, metrics::TwoPointSet)>), Error> {
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for facies in 0..3u8 {
        for dir in DIRECTIONS {
            let g = metrics::two_point_probability(generated, facies, dir, max_lag)?;
            let r = metrics::two_point_probability(reference, facies, dir, max_lag)?;
            let coverage = metrics::envelope_coverage(&g.mean, &r.min, &r.max)?;
            rows.push(CoverageRow { facies, direction: dir, coverage });
            sets.push((facies, dir, g, r));
        }
    }
    let min_coverage = rows.iter().map(|r| r.coverage).fold(1.0, f64::min);
    Ok((
        QualitySummary {
            n_generated: generated.len(),
            n_reference: reference.len(),
            hard_data_accuracy: metrics::hard_data_accuracy(generated, cond)?,
            reference_hard_data_accuracy: metrics::hard_data_accuracy(reference, cond)?,
            fractions: fractions(generated),
            reference_fractions: fractions(reference),
            two_point: rows,
            min_coverage,
        },
        sets,
    ))
}

/// Interpolation between two starting latents drawn with `seed`.
pub fn interpolation(ldm: &Ldm, cfg: &PipelineConfig, seed: u64) -> Result<InterpolationCurves, Error> {
    let xi = ldm.draw_latents(2, cfg.ldm.prior, seed)?;
    let per = xi.numel() / 2;
    let mut shape = xi.shape().to_vec();
    shape[0] = 1;
    let a = Tensor::new(shape.clone(), xi.data()[..per].to_vec())?;
    let b = Tensor::new(shape, xi.data()[per..].to_vec())?;
    Ok(metrics::interpolation_stability(ldm, &a, &b, cfg.metrics.interp_step, cfg.ldm.ddim_steps)?)
}

/// Simulate each grid with the configured wells and properties.
pub fn simulate_all(cfg: &PipelineConfig, grids: &[FaciesGrid], props: &[RockFluidProps]) -> Result<Vec<WellSeries>, Error> {
    use rayon::prelude::*;
    let f = &cfg.flow;
    grids
        .par_iter()
        .zip(props.par_iter())
        .map(|(g, p)| Ok(flowsim::simulate(g, p, &f.wells_for(g.nx(), g.ny()), f.t_end, f.max_dt)?))
        .collect()
}

/// One quantity per well role through time: `(label, well, values)`.
pub fn series_quantities(s: &WellSeries) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    let field: Vec<_> = (0..s.times.len()).map(|k| s.field_totals(k)).collect();
    out.push(("field:water_inj".to_string(), field.iter().map(|r| r.water_inj).collect()));
    out.push(("field:oil".to_string(), field.iter().map(|r| r.oil_prod).collect()));
    out.push(("field:water".to_string(), field.iter().map(|r| r.water_prod).collect()));
    for (w, name) in s.wells.iter().enumerate() {
        match s.kinds[w] {
            flowsim::WellKind::Injector => {
                out.push((format!("{name}:water_inj"), s.rates.iter().map(|r| r[w].water_inj).collect()));
            }
            flowsim::WellKind::Producer => {
                out.push((format!("{name}:oil"), s.rates.iter().map(|r| r[w].oil_prod).collect()));
                out.push((format!("{name}:water"), s.rates.iter().map(|r| r[w].water_prod).collect()));
            }
        }
    }
    out
}

/// P10/P50/P90 bands of every quantity over an ensemble of series.
pub fn flow_bands(series: &[WellSeries]) -> Result<Vec<(String, metrics::PercentileBand)>, Error> {
    let per: Vec<Vec<(String, Vec<f64>)>> = series.iter().map(series_quantities).collect();
    let times = &series[0].times;
    let mut out = Vec::new();
    for (q, (label, _)) in per[0].iter().enumerate() {
        let curves: Vec<Vec<f64>> = per.iter().map(|p| p[q].1.clone()).collect();
        out.push((label.clone(), metrics::percentile_curves(&curves, times)?));
    }
    Ok(out)
}

/// Synthetic truth for a history-matching run.
#[derive(Clone, Debug)]
pub struct TrueModel {
    pub grid: FaciesGrid,
    pub props: RockFluidProps,
    /// ln-space property vector (Case 2 ordering) of the truth.
    pub prop_vector: [f64; 6],
    pub series: WellSeries,
    /// Noise-free history data.
    pub d_true: Vec<f64>,
    pub obs: ObservationSet,
}

pub fn true_model(cfg: &PipelineConfig, case: HmCase, seed: u64) -> Result<TrueModel, Error> {
    let grid = dataset_member(&cfg.data.style, &conditioning(cfg), split_seed(seed, 0), 0)?;
    let base = &cfg.flow.props;
    let prop_vector = match case {
        HmCase::Fixed => {
            let f = &base.facies;
            [f[0].porosity, f[1].porosity, f[2].porosity, f[0].perm.ln(), f[1].perm.ln(), f[2].perm.ln()]
        }
        HmCase::Uncertain => {
            let mut r = rng(split_seed(seed, 1));
            PROP_PRIORS.map(|p| p.sample(&mut r))
        }
    };
    let props = HmVector { xi: Vec::new(), props: Some(prop_vector) }.rock(base);
    let f = &cfg.flow;
    let series = flowsim::simulate(&grid, &props, &f.wells_for(grid.nx(), grid.ny()), f.t_end, f.max_dt)?;
    let d_true = flowsim::extract_observations(&series, f.obs_every, f.obs_until)?;
    let clean = ObservationSet::from_true_data(&d_true, cfg.esmda.rel_noise, cfg.esmda.noise_floor)?;
    let d_obs = perturb_obs(&clean, 1.0, split_seed(seed, 2));
    let obs = ObservationSet::new(d_obs, clean.var)?;
    Ok(TrueModel { grid, props, prop_vector, series, d_true, obs })
}

pub struct HmOutcome {
    pub truth: TrueModel,
    pub run: EsmdaRun,
    pub prior_grids: Vec<FaciesGrid>,
    pub posterior_grids: Vec<FaciesGrid>,
}

/// Twin experiment: truth, prior ensemble, ESMDA over the history window.
pub fn history_match(
    ldm: &Ldm,
    cfg: &PipelineConfig,
    case: HmCase,
    seed: u64,
    on_step: impl FnMut(&esmda::MismatchRow),
) -> Result<HmOutcome, Error> {
    let truth = true_model(cfg, case, split_seed(seed, 0))?;
    let n_c: usize = ldm.latent_shape(1).iter().product();
    let prior = init_ensemble(case, cfg.esmda.n_e, n_c, split_seed(seed, 1))?;
    let forward = history_forward(ldm, cfg);
    let run = run_esmda(&cfg.esmda_config(split_seed(seed, 2)), prior, &truth.obs, &forward, on_step)?;
    let prior_grids = forward.grids(&run.ensembles[0].members)?;
    let posterior_grids = forward.grids(&run.posterior().members)?;
    Ok(HmOutcome { truth, run, prior_grids, posterior_grids })
}

/// Forward model over the history window only.
pub fn history_forward<'a>(ldm: &'a Ldm, cfg: &PipelineConfig) -> LdmForward<'a> {
    let f = &cfg.flow;
    let (nx, ny) = (cfg.data.style.nx, cfg.data.style.ny);
    LdmForward {
        ldm,
        ddim_steps: cfg.ldm.ddim_steps,
        props: f.props.clone(),
        wells: f.wells_for(nx, ny),
        t_end: f.obs_until,
        max_dt: f.max_dt,
        every: f.obs_every,
        until: f.obs_until,
    }
}

/// Full-horizon series for ensemble members with their grids.
pub fn forecast(cfg: &PipelineConfig, members: &[HmVector], grids: &[FaciesGrid]) -> Result<Vec<WellSeries>, Error> {
    let props: Vec<RockFluidProps> = members.iter().map(|m| m.rock(&cfg.flow.props)).collect();
    simulate_all(cfg, grids, &props)
}

/// Fraction of `truth` inside the per-datum [P10, P90] of `data` rows.
pub fn bracket_fraction(data: &[Vec<f64>], truth: &[f64]) -> Result<f64, Error> {
    let mut inside = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        let mut col: Vec<f64> = data.iter().map(|d| d[i]).collect();
        let p10 = metrics::percentile_in_place(&mut col, 10.0)?;
        let p90 = metrics::percentile_in_place(&mut col, 90.0)?;
        // Zero-width bands (e.g. rates that are identically zero) bracket an equal truth.
        let tol = 1e-9 * t.abs().max(1.0);
        if t >= p10 - tol && t <= p90 + tol {
            inside += 1;
        }
    }
    Ok(inside as f64 / truth.len() as f64)
}
