//! Command-line pipeline: dataset, autoencoder and denoiser training,
//! sampling, statistics, flow simulation and history matching.

pub mod config;
pub mod manifest;
pub mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use geoldm::diffusion::{self, Ldm};
use geoldm::esmda::{self, HmCase, PROP_NAMES};
use geoldm::flowsim::{self, WellSeries};
use geoldm::geogen::{self, FaciesGrid};
use geoldm::metrics;
use geoldm::nn::Checkpoint;
use geoldm::vae::{self, Vae};
use sha2::{Digest, Sha256};

use config::{ConfigError, PipelineConfig};
use manifest::{RunManifest, RunStatus};

pub const WORKERS_ENV: &str = "GEOLDM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "geoldm", version, about = "Latent diffusion geomodels and ensemble history matching")]
pub struct Cli {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Output directory; defaults to <paths.runs>/<command>-<hash>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training/validation/test realizations.
    GenData,
    /// Train the autoencoder on a generated dataset.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the latent denoiser with a frozen autoencoder.
    TrainLdm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Generate new models.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hard-data accuracy and two-point statistics of generated models.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        /// Reference realizations; fresh generator draws when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Latent interpolation and SSIM stability curves.
    Interp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Flow simulation of a set of models.
    Simulate {
        #[arg(long)]
        models: PathBuf,
    },
    /// ESMDA twin experiment.
    Hm {
        #[arg(long)]
        model: PathBuf,
        /// 1: latent only; 2: latent plus facies properties.
        #[arg(long)]
        case: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Representative models by k-means.
    Medoids {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVae { .. } => "train-vae",
            Command::TrainLdm { .. } => "train-ldm",
            Command::Sample { .. } => "sample",
            Command::Metrics { .. } => "metrics",
            Command::Interp { .. } => "interp",
            Command::Simulate { .. } => "simulate",
            Command::Hm { .. } => "hm",
            Command::Medoids { .. } => "medoids",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already holds a run; pass --force to replace it")]
    Exists(PathBuf),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Core(#[from] geoldm::Error),
}

impl CliError {
    /// Process exit status by category.
    pub fn exit_code(&self) -> i32 {
        use geoldm::Error as E;
        match self {
            CliError::Argument(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io { .. } | CliError::Exists(_) => 4,
            CliError::Core(e) => match e {
                E::Geogen(_) => 10,
                E::Nn(_) => 11,
                E::Vae(_) => 12,
                E::Diffusion(_) => 13,
                E::Metrics(_) => 14,
                E::Flow(_) => 15,
                E::Esmda(_) => 16,
            },
        }
    }

    pub fn category(&self) -> &'static str {
        use geoldm::Error as E;
        match self {
            CliError::Argument(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } | CliError::Exists(_) => "io",
            CliError::Core(e) => match e {
                E::Geogen(_) => "geogen",
                E::Nn(_) => "nn",
                E::Vae(_) => "vae",
                E::Diffusion(_) => "diffusion",
                E::Metrics(_) => "metrics",
                E::Flow(_) => "flowsim",
                E::Esmda(_) => "esmda",
            },
        }
    }
}

macro_rules! core {
    ($e:expr) => {
        $e.map_err(|e| CliError::Core(e.into()))
    };
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    io(path, std::fs::write(path, text))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = io(path, std::fs::read(path))?;
    Ok(manifest::hex(&Sha256::digest(&bytes)))
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let workers = cli.workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Argument(format!("worker pool: {e}")))?;
    pool.install(|| execute(cli, &cfg))
}

/// Arguments that identify a run, with input files replaced by their digests.
fn identity_args(cmd: &Command, cfg: &PipelineConfig) -> Result<(Vec<String>, BTreeMap<String, u64>), CliError> {
    let mut args = Vec::new();
    let mut seeds = BTreeMap::new();
    seeds.insert("global".to_string(), cfg.seed);
    let input = |name: &str, p: &Path, args: &mut Vec<String>| -> Result<(), CliError> {
        if p.is_dir() {
            for f in ["train.ggds", "val.ggds", "test.ggds"] {
                args.push(format!("{name}/{f}={}", file_digest(&p.join(f))?));
            }
        } else {
            args.push(format!("{name}={}", file_digest(p)?));
        }
        Ok(())
    };
    match cmd {
        Command::GenData => {
            seeds.insert("gen-data".into(), cfg.stage_seed("gen-data"));
        }
        Command::TrainVae { data } => {
            input("data", data, &mut args)?;
            seeds.insert("train-vae".into(), cfg.stage_seed("train-vae"));
        }
        Command::TrainLdm { data, vae } => {
            input("data", data, &mut args)?;
            input("vae", vae, &mut args)?;
            seeds.insert("train-ldm".into(), cfg.stage_seed("train-ldm"));
        }
        Command::Sample { model, count, seed } => {
            input("model", model, &mut args)?;
            args.push(format!("count={}", count.unwrap_or(cfg.metrics.n_generate)));
            seeds.insert("sample".into(), seed.unwrap_or(cfg.stage_seed("sample")));
        }
        Command::Metrics { model, reference, count, seed } => {
            input("model", model, &mut args)?;
            if let Some(r) = reference {
                input("reference", r, &mut args)?;
            } else {
                seeds.insert("reference".into(), cfg.stage_seed("reference"));
            }
            args.push(format!("count={}", count.unwrap_or(cfg.metrics.n_generate)));
            seeds.insert("sample".into(), seed.unwrap_or(cfg.stage_seed("sample")));
        }
        Command::Interp { model, seed } => {
            input("model", model, &mut args)?;
            seeds.insert("interp".into(), seed.unwrap_or(cfg.stage_seed("interp")));
        }
        Command::Simulate { models } => input("models", models, &mut args)?,
        Command::Hm { model, case, seed } => {
            input("model", model, &mut args)?;
            args.push(format!("case={}", case.unwrap_or(cfg.esmda.case)));
            seeds.insert("hm".into(), seed.unwrap_or(cfg.stage_seed("hm")));
        }
        Command::Medoids { models, k, seed } => {
            input("models", models, &mut args)?;
            args.push(format!("k={}", k.unwrap_or(cfg.esmda.medoids)));
            seeds.insert("medoids".into(), seed.unwrap_or(cfg.stage_seed("medoids")));
        }
    }
    Ok((args, seeds))
}

fn planned_outputs(cmd: &Command, n_a: usize) -> Vec<PathBuf> {
    let names: Vec<String> = match cmd {
        Command::GenData => vec!["train.ggds", "val.ggds", "test.ggds", "conditioning.txt"].into_iter().map(String::from).collect(),
        Command::TrainVae { .. } => vec!["vae.ckpt".into(), "vae_train.csv".into(), "vae_val.csv".into()],
        Command::TrainLdm { .. } => vec!["ldm.ckpt".into(), "ldm_train.csv".into(), "ldm_val.csv".into()],
        Command::Sample { .. } => vec!["samples.ggds".into()],
        Command::Metrics { .. } => vec!["metrics.json".into(), "two_point.csv".into(), "samples.ggds".into()],
        Command::Interp { .. } => vec!["interp.csv".into(), "interp.ggds".into()],
        Command::Simulate { .. } => vec!["rates.csv".into(), "bands.csv".into()],
        Command::Hm { .. } => {
            let mut v: Vec<String> = ["truth.ggds", "observations.csv", "mismatch.csv", "prior.ggds", "posterior.ggds", "bands_prior.csv", "bands_posterior.csv", "summary.json"]
                .into_iter()
                .map(String::from)
                .collect();
            v.extend((0..=n_a).map(|k| format!("ensembles/step_{k:02}.csv")));
            v
        }
        Command::Medoids { .. } => vec!["medoids.ggds".into(), "medoids.json".into()],
    };
    names.into_iter().map(PathBuf::from).collect()
}

fn execute(cli: &Cli, cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let cmd = &cli.command;
    let (args, seeds) = identity_args(cmd, cfg)?;
    let hash = manifest::run_hash(cmd.name(), &args, cfg);
    let dir = cli.out.clone().unwrap_or_else(|| manifest::default_run_dir(cfg, cmd.name(), &hash));
    if dir.join(manifest::MANIFEST_FILE).exists() {
        if !cli.force {
            return Err(CliError::Exists(dir));
        }
        io(&dir, std::fs::remove_dir_all(&dir))?;
    }
    let m = RunManifest {
        command: cmd.name().to_string(),
        args,
        config_hash: manifest::config_hash(cfg),
        code_version: manifest::CODE_VERSION.to_string(),
        seeds: seeds.clone(),
        started: manifest::now(),
        outputs: planned_outputs(cmd, cfg.esmda.alphas.len()),
    };
    io(&dir, m.create(&dir))?;
    io(&dir, std::fs::write(dir.join("config.toml"), cfg.to_toml()))?;

    let result = dispatch(cmd, cfg, &seeds, &dir);
    let status = RunStatus {
        finished: manifest::now(),
        ok: result.is_ok(),
        message: result.as_ref().err().map(|e| format!("error[{}]: {e}", e.category())),
    };
    io(&dir, status.write(&dir))?;
    result.map(|_| dir)
}

fn load_ldm(path: &Path) -> Result<Ldm, CliError> {
    let ck = core!(Checkpoint::load(path))?;
    core!(Ldm::from_checkpoint(&ck))
}

fn load_data(dir: &Path) -> Result<geogen::Dataset, CliError> {
    Ok(geogen::Dataset {
        train: core!(geogen::load_grids(&dir.join("train.ggds")))?,
        val: core!(geogen::load_grids(&dir.join("val.ggds")))?,
        test: core!(geogen::load_grids(&dir.join("test.ggds")))?,
    })
}

fn check_grid(cfg: &PipelineConfig, g: &FaciesGrid) -> Result<(), CliError> {
    let (nx, ny) = (cfg.data.style.nx, cfg.data.style.ny);
    if (g.nx(), g.ny()) != (nx, ny) {
        return Err(CliError::Argument(format!("models are {}x{} but the configuration is {nx}x{ny}", g.nx(), g.ny())));
    }
    Ok(())
}

fn progress(label: &str, step: usize, total: usize, value: f64) {
    if step % 500 == 0 || step == total {
        eprintln!("{label} step {step}/{total}: {value:.6}");
    }
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig, seeds: &BTreeMap<String, u64>, dir: &Path) -> Result<(), CliError> {
    match cmd {
        Command::GenData => {
            let data = core!(pipeline::build_data(cfg))?;
            for (name, grids) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                core!(geogen::save_grids(&dir.join(format!("{name}.ggds")), grids))?;
            }
            core!(pipeline::conditioning(cfg).save(&dir.join("conditioning.txt")))?;
        }
        Command::TrainVae { data } => {
            let data = load_data(data)?;
            let total = cfg.vae.steps;
            let res = core!(pipeline::train_vae(cfg, &data, |r| progress("vae", r.step, total, r.report.total)))?;
            core!(res.checkpoint().save(&dir.join("vae.ckpt")))?;
            write(&dir.join("vae_train.csv"), vae::loss_log_csv(&res.log))?;
            write(&dir.join("vae_val.csv"), vae::loss_log_csv(&res.val_log))?;
        }
        Command::TrainLdm { data, vae } => {
            let data = load_data(data)?;
            let ck = core!(Checkpoint::load(vae))?;
            let vae = core!(Vae::from_checkpoint(&ck))?;
            let total = cfg.ldm.steps;
            let res = core!(pipeline::train_ldm(cfg, &vae, &data, |r| progress("ldm", r.step, total, r.loss)))?;
            core!(res.checkpoint().save(&dir.join("ldm.ckpt")))?;
            write(&dir.join("ldm_train.csv"), diffusion::ldm_log_csv(&res.log))?;
            write(&dir.join("ldm_val.csv"), diffusion::ldm_log_csv(&res.val_log))?;
        }
        Command::Sample { model, count, .. } => {
            let ldm = load_ldm(model)?;
            let (_, grids) = core!(pipeline::sample(&ldm, cfg, count.unwrap_or(cfg.metrics.n_generate), seeds["sample"]))?;
            core!(geogen::save_grids(&dir.join("samples.ggds"), &grids))?;
        }
        Command::Metrics { model, reference, count, .. } => {
            let ldm = load_ldm(model)?;
            let n = count.unwrap_or(cfg.metrics.n_generate);
            let (_, generated) = core!(pipeline::sample(&ldm, cfg, n, seeds["sample"]))?;
            let reference = match reference {
                Some(p) => core!(geogen::load_grids(p))?,
                None => pipeline::reference_models(cfg, n, "reference")?,
            };
            check_grid(cfg, &generated[0])?;
            let (summary, sets) = pipeline::quality(&generated, &reference, &pipeline::conditioning(cfg), cfg.metrics.max_lag)?;
            let mut csv = String::from("facies,dx,dy,lag,generated_mean,reference_mean,reference_min,reference_max\n");
            for (facies, (dx, dy), g, r) in &sets {
                for l in 0..g.mean.len() {
                    let _ = writeln!(csv, "{facies},{dx},{dy},{l},{},{},{},{}", g.mean[l], r.mean[l], r.min[l], r.max[l]);
                }
            }
            write(&dir.join("two_point.csv"), csv)?;
            write(&dir.join("metrics.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
            core!(geogen::save_grids(&dir.join("samples.ggds"), &generated))?;
        }
        Command::Interp { model, .. } => {
            let ldm = load_ldm(model)?;
            let c = pipeline::interpolation(&ldm, cfg, seeds["interp"])?;
            let mut csv = String::from("delta,consecutive_ssim,anchored_ssim\n");
            for (k, d) in c.deltas.iter().enumerate() {
                let cons = if k == 0 { String::new() } else { c.consecutive[k - 1].to_string() };
                let _ = writeln!(csv, "{d},{cons},{}", c.anchored[k]);
            }
            write(&dir.join("interp.csv"), csv)?;
            core!(geogen::save_grids(&dir.join("interp.ggds"), &c.models))?;
        }
        Command::Simulate { models } => {
            let grids = core!(geogen::load_grids(models))?;
            if let Some(g) = grids.first() {
                check_grid(cfg, g)?;
            } else {
                return Err(CliError::Argument(format!("{} holds no models", models.display())));
            }
            let props = vec![cfg.flow.props.clone(); grids.len()];
            let series = pipeline::simulate_all(cfg, &grids, &props)?;
            write(&dir.join("rates.csv"), rates_csv(&series))?;
            write(&dir.join("bands.csv"), bands_csv(&pipeline::flow_bands(&series)?))?;
        }
        Command::Hm { model, case, .. } => {
            let ldm = load_ldm(model)?;
            let case = core!(HmCase::from_number(case.unwrap_or(cfg.esmda.case)))?;
            hm(&ldm, cfg, case, seeds["hm"], dir)?;
        }
        Command::Medoids { models, k, .. } => {
            let grids = core!(geogen::load_grids(models))?;
            let k = k.unwrap_or(cfg.esmda.medoids);
            let idx = core!(esmda::kmeans_medoids(&grids, k, seeds["medoids"]))?;
            let picked: Vec<FaciesGrid> = idx.iter().map(|&i| grids[i].clone()).collect();
            core!(geogen::save_grids(&dir.join("medoids.ggds"), &picked))?;
            write(&dir.join("medoids.json"), serde_json::to_string_pretty(&idx).expect("indices serialize"))?;
        }
    }
    Ok(())
}

pub fn rates_csv(series: &[WellSeries]) -> String {
    let mut out = String::from("model,time,well,phase,rate\n");
    for (m, s) in series.iter().enumerate() {
        for line in s.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{m},{line}");
        }
    }
    out
}

pub fn bands_csv(bands: &[(String, metrics::PercentileBand)]) -> String {
    let mut out = String::from("quantity,time,p10,p50,p90\n");
    for (label, b) in bands {
        for k in 0..b.times.len() {
            let _ = writeln!(out, "{label},{},{},{},{}", b.times[k], b.p10[k], b.p50[k], b.p90[k]);
        }
    }
    out
}

fn ensemble_csv(ens: &esmda::Ensemble) -> String {
    let mut out = String::from("member");
    let n_c = ens.latent_len();
    for k in 0..n_c {
        let _ = write!(out, ",xi_{k}");
    }
    if ens.case() == HmCase::Uncertain {
        for name in PROP_NAMES {
            let _ = write!(out, ",{name}");
        }
    }
    out.push('\n');
    for (j, row) in ens.rows().iter().enumerate() {
        let _ = write!(out, "{j}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, serde::Serialize)]
struct HmSummary {
    case: u32,
    n_e: usize,
    n_a: usize,
    mismatch_prior: f64,
    mismatch_posterior: f64,
    reduction: f64,
    bracket_prior: f64,
    bracket_posterior: f64,
    true_props: [f64; 6],
    prior_prop_mean: Option<Vec<f64>>,
    posterior_prop_mean: Option<Vec<f64>>,
}

fn prop_mean(ens: &esmda::Ensemble) -> Option<Vec<f64>> {
    let n_c = ens.latent_len();
    (ens.case() == HmCase::Uncertain).then(|| ens.mean()[n_c..].to_vec())
}

fn hm(ldm: &Ldm, cfg: &PipelineConfig, case: HmCase, seed: u64, dir: &Path) -> Result<(), CliError> {
    let n_a = cfg.esmda.alphas.len();
    let out = pipeline::history_match(ldm, cfg, case, seed, |r| {
        eprintln!("esmda step {}: mismatch mean {:.4} (min {:.4}, max {:.4})", r.step, r.mean, r.min, r.max)
    })?;
    let f = &cfg.flow;
    core!(geogen::save_grids(&dir.join("truth.ggds"), std::slice::from_ref(&out.truth.grid)))?;
    let labels = core!(flowsim::observation_labels(&out.truth.series, f.obs_every, f.obs_until))?;
    let mut obs = String::from("label,d_true,d_obs,variance\n");
    for (k, l) in labels.iter().enumerate() {
        let _ = writeln!(obs, "{l},{},{},{}", out.truth.d_true[k], out.truth.obs.d_obs[k], out.truth.obs.var[k]);
    }
    write(&dir.join("observations.csv"), obs)?;
    write(&dir.join("mismatch.csv"), esmda::mismatch_csv(&out.run.mismatch))?;
    let ens_dir = dir.join("ensembles");
    io(&ens_dir, std::fs::create_dir_all(&ens_dir))?;
    for (k, ens) in out.run.ensembles.iter().enumerate() {
        write(&ens_dir.join(format!("step_{k:02}.csv")), ensemble_csv(ens))?;
    }
    core!(geogen::save_grids(&dir.join("prior.ggds"), &out.prior_grids))?;
    core!(geogen::save_grids(&dir.join("posterior.ggds"), &out.posterior_grids))?;

    let prior = &out.run.ensembles[0];
    let post = out.run.posterior();
    let prior_series = pipeline::forecast(cfg, &prior.members, &out.prior_grids)?;
    let post_series = pipeline::forecast(cfg, &post.members, &out.posterior_grids)?;
    write(&dir.join("bands_prior.csv"), bands_csv(&pipeline::flow_bands(&prior_series)?))?;
    write(&dir.join("bands_posterior.csv"), bands_csv(&pipeline::flow_bands(&post_series)?))?;

    let m0 = out.run.mismatch[0].mean;
    let m1 = out.run.mismatch[n_a].mean;
    let summary = HmSummary {
        case: match case {
            HmCase::Fixed => 1,
            HmCase::Uncertain => 2,
        },
        n_e: cfg.esmda.n_e,
        n_a,
        mismatch_prior: m0,
        mismatch_posterior: m1,
        reduction: m0 / m1,
        bracket_prior: pipeline::bracket_fraction(&out.run.data[0], &out.truth.d_true)?,
        bracket_posterior: pipeline::bracket_fraction(&out.run.data[n_a], &out.truth.d_true)?,
        true_props: out.truth.prop_vector,
        prior_prop_mean: prop_mean(prior),
        posterior_prop_mean: prop_mean(post),
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(())
}
