//! Pipeline configuration (TOML). Missing keys take the full-scale defaults;
//! unknown keys are rejected. Per-stage seeds are derived from `seed`.

use std::path::{Path, PathBuf};

use geoldm::diffusion::{LatentPrior, LdmTrainConfig, ScheduleConfig};
use geoldm::esmda::{EsmdaConfig, HmCase, PAPER_ALPHAS};
use geoldm::flowsim::{paper_wells, RockFluidProps, WellKind, WellSpec};
use geoldm::geogen::ChannelStyle;
use geoldm::rng::stage_seed;
use geoldm::vae::{VaeArch, VaeTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub ldm: LdmConfig,
    pub metrics: MetricsConfig,
    pub flow: FlowConfig,
    pub esmda: HmConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub style: ChannelStyle,
    pub n_total: usize,
    /// Train, validation, test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { style: ChannelStyle::default(), n_total: 4000, split: [0.7, 0.2, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub widths: [usize; 4],
    pub latent_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda_kl: f64,
    pub lambda_h: f64,
    pub eval_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        let a = VaeArch::default();
        let t = VaeTrainConfig::default();
        Self {
            widths: a.widths,
            latent_channels: a.latent_channels,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lambda_kl: t.lambda_kl,
            lambda_h: t.lambda_h,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmConfig {
    pub widths: [usize; 2],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub eval_every: usize,
    pub schedule: ScheduleConfig,
    pub ddim_steps: usize,
    pub prior: LatentPrior,
}

impl Default for LdmConfig {
    fn default() -> Self {
        let t = LdmTrainConfig::default();
        Self {
            widths: t.widths,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            eval_every: t.eval_every,
            schedule: t.schedule,
            ddim_steps: 100,
            prior: LatentPrior::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Models generated for statistics.
    pub n_generate: usize,
    pub max_lag: usize,
    pub interp_step: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { n_generate: 200, max_lag: 20, interp_step: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub props: RockFluidProps,
    /// Empty means the five-well pattern scaled to the grid.
    pub wells: Vec<WellSpec>,
    pub t_end: f64,
    pub max_dt: f64,
    pub obs_every: f64,
    pub obs_until: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            props: RockFluidProps::default(),
            wells: Vec::new(),
            t_end: 2500.0,
            max_dt: 50.0,
            obs_every: 100.0,
            obs_until: 1000.0,
        }
    }
}

impl FlowConfig {
    pub fn wells_for(&self, nx: usize, ny: usize) -> Vec<WellSpec> {
        if self.wells.is_empty() {
            paper_wells(nx, ny)
        } else {
            self.wells.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmConfig {
    /// 1: latent only; 2: latent plus facies properties.
    pub case: u32,
    pub n_e: usize,
    pub alphas: Vec<f64>,
    pub rel_noise: f64,
    pub noise_floor: f64,
    /// Representative models per ensemble.
    pub medoids: usize,
}

impl Default for HmConfig {
    fn default() -> Self {
        let e = EsmdaConfig::default();
        Self {
            case: 1,
            n_e: e.n_e,
            alphas: PAPER_ALPHAS.to_vec(),
            rel_noise: e.rel_noise,
            noise_floor: e.noise_floor,
            medoids: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { runs: PathBuf::from("runs") }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            ldm: LdmConfig::default(),
            metrics: MetricsConfig::default(),
            flow: FlowConfig::default(),
            esmda: HmConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// The desk-scale preset shipped as `configs/desk.toml`.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

impl PipelineConfig {
    pub fn desk() -> Self {
        Self::from_toml(DESK_TOML, Path::new("configs/desk.toml")).expect("desk preset parses")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every range violation, by field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                errs.push(format!("{field}: {msg}"));
            }
        };
        let pos = |v: f64| v > 0.0 && v.is_finite();

        if let Err(e) = self.data.style.validate() {
            check(false, "data.style", e.to_string());
        }
        check(self.data.n_total >= 10, "data.n_total", format!("must be at least 10, got {}", self.data.n_total));
        let s = self.data.split;
        check(
            s.iter().all(|f| (0.0..=1.0).contains(f)) && (s.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            "data.split",
            format!("fractions {s:?} must lie in [0, 1] and sum to 1"),
        );

        let v = &self.vae;
        if let Err(e) = self.vae_arch().validate() {
            check(false, "vae.widths", e.to_string());
        }
        check(v.steps > 0, "vae.steps", "must be positive".into());
        check(v.batch_size > 0, "vae.batch_size", "must be positive".into());
        check(pos(v.lr as f64), "vae.lr", format!("must be positive, got {}", v.lr));
        check(v.lambda_kl >= 0.0 && v.lambda_kl.is_finite(), "vae.lambda_kl", format!("must be >= 0, got {}", v.lambda_kl));
        check(v.lambda_h >= 0.0 && v.lambda_h.is_finite(), "vae.lambda_h", format!("must be >= 0, got {}", v.lambda_h));

        let l = &self.ldm;
        check(l.widths.iter().all(|&w| w >= 2), "ldm.widths", format!("must be at least 2, got {:?}", l.widths));
        check(l.steps > 0, "ldm.steps", "must be positive".into());
        check(l.batch_size > 0, "ldm.batch_size", "must be positive".into());
        check(pos(l.lr as f64), "ldm.lr", format!("must be positive, got {}", l.lr));
        if let Err(e) = l.schedule.table() {
            check(false, "ldm.schedule", e.to_string());
        }
        check(
            l.ddim_steps >= 1 && l.ddim_steps <= l.schedule.steps,
            "ldm.ddim_steps",
            format!("must be in 1..={}, got {}", l.schedule.steps, l.ddim_steps),
        );

        let m = &self.metrics;
        check(m.n_generate >= 1, "metrics.n_generate", "must be positive".into());
        check(m.max_lag >= 1, "metrics.max_lag", "must be positive".into());
        check(m.interp_step > 0.0 && m.interp_step < 1.0, "metrics.interp_step", format!("must be in (0, 1), got {}", m.interp_step));

        let f = &self.flow;
        if let Err(e) = f.props.validate() {
            check(false, "flow.props", e.to_string());
        }
        check(pos(f.t_end), "flow.t_end", format!("must be positive, got {}", f.t_end));
        check(pos(f.max_dt), "flow.max_dt", format!("must be positive, got {}", f.max_dt));
        check(pos(f.obs_every), "flow.obs_every", format!("must be positive, got {}", f.obs_every));
        check(
            f.obs_until >= 0.0 && f.obs_until <= f.t_end,
            "flow.obs_until",
            format!("must be in [0, t_end], got {}", f.obs_until),
        );
        let ratio = f.obs_every / f.max_dt;
        check(
            (ratio - ratio.round()).abs() < 1e-9 && ratio >= 1.0,
            "flow.obs_every",
            "must be a multiple of flow.max_dt".into(),
        );
        let (nx, ny) = (self.data.style.nx, self.data.style.ny);
        for w in &f.wells {
            check(w.i < nx && w.j < ny, "flow.wells", format!("{} at ({}, {}) is outside {nx}x{ny}", w.name, w.i, w.j));
            check(pos(w.bhp) && pos(w.rw), "flow.wells", format!("{} needs positive bhp and rw", w.name));
        }
        let wells = f.wells_for(nx, ny);
        check(
            wells.iter().any(|w| w.kind == WellKind::Producer),
            "flow.wells",
            "at least one producer is required".into(),
        );

        let h = &self.esmda;
        check(h.case == 1 || h.case == 2, "esmda.case", format!("must be 1 or 2, got {}", h.case));
        if let Err(e) = self.esmda_config(0).validate() {
            check(false, "esmda", e.to_string());
        }
        check(h.medoids >= 1 && h.medoids <= h.n_e, "esmda.medoids", format!("must be in 1..=n_e, got {}", h.medoids));

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn vae_arch(&self) -> VaeArch {
        VaeArch {
            nx: self.data.style.nx,
            ny: self.data.style.ny,
            widths: self.vae.widths,
            latent_channels: self.vae.latent_channels,
        }
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        let v = &self.vae;
        VaeTrainConfig {
            steps: v.steps,
            batch_size: v.batch_size,
            lr: v.lr,
            lambda_kl: v.lambda_kl,
            lambda_h: v.lambda_h,
            eval_every: v.eval_every,
            seed: self.stage_seed("train-vae"),
        }
    }

    pub fn ldm_train(&self) -> LdmTrainConfig {
        let l = &self.ldm;
        LdmTrainConfig {
            steps: l.steps,
            batch_size: l.batch_size,
            lr: l.lr,
            widths: l.widths,
            schedule: l.schedule.clone(),
            eval_every: l.eval_every,
            seed: self.stage_seed("train-ldm"),
        }
    }

    pub fn esmda_config(&self, seed: u64) -> EsmdaConfig {
        let h = &self.esmda;
        EsmdaConfig { n_e: h.n_e, alphas: h.alphas.clone(), rel_noise: h.rel_noise, noise_floor: h.noise_floor, seed }
    }

    pub fn hm_case(&self) -> HmCase {
        HmCase::from_number(self.esmda.case).unwrap_or(HmCase::Fixed)
    }

    pub fn split(&self) -> (f64, f64, f64) {
        let s = self.data.split;
        (s[0], s[1], s[2])
    }

    /// Seed of a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }
}
