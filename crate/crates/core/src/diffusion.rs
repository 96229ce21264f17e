//! Linear noise schedule, DDPM/DDIM samplers and the latent denoising U-net.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geogen::FaciesGrid;
use crate::nn::layers::{timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock, SelfAttention};
use crate::nn::{AdamConfig, AdamState, Checkpoint, Graph, NnError, OptimizerSnapshot, ParamSet, Tensor, Var};
use crate::rng::split_seed;
use crate::vae::{grids_to_tensor, Vae, VaeError};

pub const PREFIX: &str = "unet.";
pub const LATENT_MEAN: &str = "latent.mean";
pub const LATENT_VAR: &str = "latent.var";

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("interpolation weight {0} outside [0, 1]")]
    Delta(f64),
    #[error("training: {0}")]
    Training(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// `beta[t-1]`, `alpha[t-1]`, `alpha_bar[t-1]` hold the values for step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerTable {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl SchedulerTable {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// `alpha_bar` at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(DiffusionError::Schedule("betas must lie in (0, 1]".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }
}

pub fn make_linear_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<SchedulerTable, DiffusionError> {
    if steps == 0 || !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need T >= 1 and 0 < beta1 <= betaT < 1, got T={steps}, {beta1}, {beta_t}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta1]
    } else {
        (0..steps)
            .map(|i| beta1 + (beta_t - beta1) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    SchedulerTable::from_betas(beta)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffusionError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())).into());
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x as f64, y as f64) as f32).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &SchedulerTable) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map(x0, eps, |x, e| a * x + b * e)
}

/// Noise predictor `eps_theta(x_t, t)` for a batch; `ts` holds one step per
/// batch element.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor, DiffusionError>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor, DiffusionError>,
{
    fn predict(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor, DiffusionError> {
        self(x, ts)
    }
}

fn batch_len(x: &Tensor) -> usize {
    x.shape().first().copied().unwrap_or(1)
}

/// Ancestral step with `sigma_t = sqrt(beta_t)`, given the predicted noise.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps: &Tensor, sched: &SchedulerTable, z: &Tensor) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    let a = sched.alpha[t - 1];
    let c = (1.0 - a) / (1.0 - sched.alpha_bar_at(t)).sqrt();
    let sigma = sched.beta[t - 1].sqrt();
    let mean = zip_map(x_t, eps, |x, e| (x - c * e) / a.sqrt())?;
    zip_map(&mean, z, |m, z| m + sigma * z)
}

pub fn ddpm_sample_step(
    x_t: &Tensor,
    t: usize,
    net: &impl NoisePredictor,
    sched: &SchedulerTable,
    z: &Tensor,
) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    let eps = net.predict(x_t, &vec![t; batch_len(x_t)])?;
    ddpm_step(x_t, t, &eps, sched, z)
}

/// Deterministic implicit step from `t` to `t_prev < t` (`t_prev = 0` is the
/// clean sample).
pub fn ddim_step(x_t: &Tensor, t: usize, t_prev: usize, eps: &Tensor, sched: &SchedulerTable) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(DiffusionError::Timestep { t: t_prev, max: t - 1 });
    }
    let ab = sched.alpha_bar_at(t);
    let ab_prev = sched.alpha_bar_at(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    zip_map(x_t, eps, |x, e| pa * ((x - sb * e) / sa) + pb * e)
}

pub fn ddim_sample_step(x_t: &Tensor, t: usize, net: &impl NoisePredictor, sched: &SchedulerTable) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    let eps = net.predict(x_t, &vec![t; batch_len(x_t)])?;
    ddim_step(x_t, t, t - 1, &eps, sched)
}

/// `round(linspace(T, 1, n))`: strictly decreasing, starts at `T` when
/// `n > 1`, ends at 1.
pub fn ddim_substep_schedule(steps: usize, n_steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if n_steps == 0 || n_steps > steps {
        return Err(DiffusionError::Schedule(format!("{n_steps} sampling steps for T = {steps}")));
    }
    if n_steps == 1 {
        return Ok(vec![1]);
    }
    let span = (steps - 1) as f64;
    Ok((0..n_steps)
        .map(|i| (steps as f64 - span * i as f64 / (n_steps - 1) as f64).round() as usize)
        .collect())
}

/// Runs the implicit sampler along `schedule` down to step 0.
pub fn ddim_sample(x_t: &Tensor, schedule: &[usize], net: &impl NoisePredictor, sched: &SchedulerTable) -> Result<Tensor, DiffusionError> {
    let mut x = x_t.clone();
    let n = batch_len(x_t);
    for (k, &t) in schedule.iter().enumerate() {
        let t_prev = schedule.get(k + 1).copied().unwrap_or(0);
        let eps = net.predict(&x, &vec![t; n])?;
        x = ddim_step(&x, t, t_prev, &eps, sched)?;
    }
    Ok(x)
}

fn draw_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

fn draw_steps(n: usize, steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=steps)).collect()
}

/// Noised batch for one training draw: per element `t ~ U{1..T}` and
/// `eps ~ N(0, I)`.
fn noised_batch(xi0: &Tensor, sched: &SchedulerTable, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Vec<usize>), DiffusionError> {
    let n = batch_len(xi0);
    let ts = draw_steps(n, sched.steps(), rng);
    let eps = draw_noise(xi0.shape(), rng);
    let per = xi0.numel() / n.max(1);
    let mut xt = xi0.clone();
    for (k, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = k * per..(k + 1) * per;
        for (o, (&x, &e)) in xt.data_mut()[range.clone()]
            .iter_mut()
            .zip(xi0.data()[range.clone()].iter().zip(&eps.data()[range]))
        {
            *o = (a * x as f64 + b * e as f64) as f32;
        }
    }
    Ok((xt, eps, ts))
}

/// Batch mean of `|eps - eps_theta(x_t, t)|^2`, with `t` and `eps` drawn
/// from `seed`.
pub fn ddpm_loss(net: &impl NoisePredictor, xi0: &Tensor, sched: &SchedulerTable, seed: u64) -> Result<f64, DiffusionError> {
    let n = batch_len(xi0);
    if n == 0 || xi0.numel() == 0 {
        return Err(DiffusionError::Training("empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xt, eps, ts) = noised_batch(xi0, sched, &mut rng)?;
    let pred = net.predict(&xt, &ts)?;
    if !pred.all_finite() {
        return Err(NnError::NonFinite("noise prediction".into()).into());
    }
    let sq = zip_map(&eps, &pred, |a, b| (a - b) * (a - b))?;
    let s: f64 = sq.data().iter().map(|&v| v as f64).sum();
    Ok(s / n as f64)
}

/// `xi1 (1 - delta) + xi2 delta`.
pub fn interpolate_latents(xi1: &Tensor, xi2: &Tensor, delta: f64) -> Result<Tensor, DiffusionError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(DiffusionError::Delta(delta));
    }
    zip_map(xi1, xi2, |a, b| a * (1.0 - delta) + b * delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    pub latent_channels: usize,
    /// Latent grid size; both must be even.
    pub nx: usize,
    pub ny: usize,
    /// Widths at full and half latent resolution.
    pub widths: [usize; 2],
}

impl UNetArch {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.nx < 2 || self.ny < 2 || self.nx % 2 != 0 || self.ny % 2 != 0 {
            return Err(DiffusionError::Schedule(format!("latent {}x{} must be even", self.nx, self.ny)));
        }
        if self.widths.iter().any(|&w| w < 2) || self.latent_channels == 0 {
            return Err(DiffusionError::Schedule(format!("bad U-net widths {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        4 * self.widths[0]
    }

    fn to_tensor(&self) -> Tensor {
        let v = [self.latent_channels, self.nx, self.ny, self.widths[0], self.widths[1]];
        Tensor::new(vec![5], v.iter().map(|&x| x as f32).collect()).expect("arch record")
    }

    fn from_tensor(t: &Tensor) -> Result<Self, DiffusionError> {
        let d: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        let [latent_channels, nx, ny, w0, w1] = d[..] else {
            return Err(DiffusionError::Checkpoint("bad U-net architecture record".into()));
        };
        Ok(Self {
            latent_channels,
            nx,
            ny,
            widths: [w0, w1],
        })
    }
}

/// Two residual blocks on the way down (the second after a stride-2
/// convolution), a residual/attention/residual middle at half resolution,
/// and two residual blocks on the way up fed with the matching skips.
#[derive(Clone, Debug)]
pub struct UNet {
    arch: UNetArch,
    params: ParamSet,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down1: ResBlock,
    downsample: Conv2d,
    down2: ResBlock,
    mid1: ResBlock,
    attn: SelfAttention,
    mid2: ResBlock,
    up1: ResBlock,
    upconv: Conv2d,
    up2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = &mut ParamSet::new();
        let [c0, c1] = arch.widths;
        let lc = arch.latent_channels;
        let td = arch.time_dim();
        let r = &mut rng;
        let time1 = Linear::new(ps, "time.0", c0, td, r)?;
        let time2 = Linear::new(ps, "time.1", td, td, r)?;
        let conv_in = Conv2d::same3(ps, "conv_in", lc, c0, r)?;
        let down1 = ResBlock::new(ps, "down1", c0, c0, Some(td), r)?;
        let downsample = Conv2d::new(ps, "downsample", c0, c0, 3, 2, 1, r)?;
        let down2 = ResBlock::new(ps, "down2", c0, c1, Some(td), r)?;
        let mid1 = ResBlock::new(ps, "mid1", c1, c1, Some(td), r)?;
        let attn = SelfAttention::new(ps, "mid.attn", c1, r)?;
        let mid2 = ResBlock::new(ps, "mid2", c1, c1, Some(td), r)?;
        let up1 = ResBlock::new(ps, "up1", 2 * c1, c1, Some(td), r)?;
        let upconv = Conv2d::same3(ps, "upconv", c1, c1, r)?;
        let up2 = ResBlock::new(ps, "up2", c1 + c0, c0, Some(td), r)?;
        let norm_out = GroupNorm::new(ps, "norm_out", c0)?;
        let conv_out = Conv2d::same3(ps, "conv_out", c0, lc, r)?;
        Ok(Self {
            arch,
            params: std::mem::take(ps),
            time1,
            time2,
            conv_in,
            down1,
            downsample,
            down2,
            mid1,
            attn,
            mid2,
            up1,
            upconv,
            up2,
            norm_out,
            conv_out,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ts: &[usize]) -> Result<Var, DiffusionError> {
        let a = &self.arch;
        let want = [ts.len(), a.latent_channels, a.ny, a.nx];
        if g.shape(x) != want {
            return Err(NnError::Shape(format!("denoiser expects {want:?}, got {:?}", g.shape(x))).into());
        }
        let ps = &self.params;
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let temb = g.input(timestep_embedding(&tf, a.widths[0]));
        let h = self.time1.forward(g, ps, temb)?;
        let h = g.silu(h);
        let temb = self.time2.forward(g, ps, h)?;
        let t = Some(temb);

        let h = self.conv_in.forward(g, ps, x)?;
        let s1 = self.down1.forward(g, ps, h, t)?;
        let h = self.downsample.forward(g, ps, s1)?;
        let s2 = self.down2.forward(g, ps, h, t)?;
        let h = self.mid1.forward(g, ps, s2, t)?;
        let h = self.attn.forward(g, ps, h)?;
        let h = self.mid2.forward(g, ps, h, t)?;
        let h = g.concat(h, s2)?;
        let h = self.up1.forward(g, ps, h, t)?;
        let h = g.upsample2x(h)?;
        let h = self.upconv.forward(g, ps, h)?;
        let h = g.concat(h, s1)?;
        let h = self.up2.forward(g, ps, h, t)?;
        let h = self.norm_out.forward(g, ps, h)?;
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, ps, h)?)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![(format!("{PREFIX}arch"), self.arch.to_tensor())];
        v.extend(self.params.named_tensors().into_iter().map(|(n, t)| (format!("{PREFIX}{n}"), t)));
        v
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor, DiffusionError> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, ts)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta1: 1e-4,
            beta_t: 0.02,
        }
    }
}

/// f64 as four exactly representable 16-bit chunks.
fn f64_words(x: f64) -> [f32; 4] {
    let b = x.to_bits();
    std::array::from_fn(|k| ((b >> (16 * k)) & 0xffff) as f32)
}

fn f64_from_words(w: &[f32]) -> f64 {
    f64::from_bits(w.iter().enumerate().map(|(k, &v)| (v as u64) << (16 * k)).sum())
}

impl ScheduleConfig {
    fn to_tensor(&self) -> Tensor {
        let mut v = vec![self.steps as f32];
        v.extend(f64_words(self.beta1));
        v.extend(f64_words(self.beta_t));
        Tensor::new(vec![9], v).expect("schedule record")
    }

    fn from_tensor(t: &Tensor) -> Result<Self, DiffusionError> {
        let d = t.data();
        if d.len() != 9 {
            return Err(DiffusionError::Checkpoint("bad schedule record".into()));
        }
        Ok(Self {
            steps: d[0] as usize,
            beta1: f64_from_words(&d[1..5]),
            beta_t: f64_from_words(&d[5..9]),
        })
    }

    pub fn table(&self) -> Result<SchedulerTable, DiffusionError> {
        make_linear_schedule(self.steps, self.beta1, self.beta_t)
    }
}

/// Distribution used to draw `xi_T` at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LatentPrior {
    #[default]
    Standard,
    /// Per-cell mean and variance of the encoder's aggregate posterior.
    Aggregate,
}

/// Per-cell aggregate posterior moments over a set of encodings:
/// mean of `mu`, and `mean(sigma^2) + var(mu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl LatentStats {
    pub fn from_encodings(mu: &Tensor, log_var: &Tensor) -> Result<Self, DiffusionError> {
        let n = batch_len(mu);
        let per = mu.numel() / n.max(1);
        let mut mean = vec![0.0f64; per];
        let mut sig = vec![0.0f64; per];
        for k in 0..n {
            for c in 0..per {
                mean[c] += mu.data()[k * per + c] as f64;
                sig[c] += (log_var.data()[k * per + c] as f64).exp();
            }
        }
        mean.iter_mut().chain(sig.iter_mut()).for_each(|v| *v /= n as f64);
        let mut var = sig;
        for k in 0..n {
            for c in 0..per {
                var[c] += (mu.data()[k * per + c] as f64 - mean[c]).powi(2) / n as f64;
            }
        }
        let mut shape = mu.shape().to_vec();
        shape[0] = 1;
        Ok(Self {
            mean: Tensor::new(shape.clone(), mean.iter().map(|&v| v as f32).collect())?,
            var: Tensor::new(shape, var.iter().map(|&v| v as f32).collect())?,
        })
    }
}

/// Trained latent diffusion model: frozen autoencoder, denoiser, schedule.
#[derive(Clone, Debug)]
pub struct Ldm {
    pub vae: Vae,
    pub unet: UNet,
    pub schedule: ScheduleConfig,
    pub table: SchedulerTable,
    pub stats: Option<LatentStats>,
}

impl Ldm {
    pub fn new(vae: Vae, unet: UNet, schedule: ScheduleConfig, stats: Option<LatentStats>) -> Result<Self, DiffusionError> {
        let (lx, ly) = vae.arch().latent_dims();
        let a = unet.arch();
        if (a.nx, a.ny, a.latent_channels) != (lx, ly, vae.arch().latent_channels) {
            return Err(DiffusionError::Checkpoint("denoiser and autoencoder latents differ".into()));
        }
        let table = schedule.table()?;
        Ok(Self {
            vae,
            unet,
            schedule,
            table,
            stats,
        })
    }

    pub fn latent_shape(&self, n: usize) -> Vec<usize> {
        self.vae.arch().latent_shape(n)
    }

    /// Draws `n` starting latents from the chosen prior.
    pub fn draw_latents(&self, n: usize, prior: LatentPrior, seed: u64) -> Result<Tensor, DiffusionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = draw_noise(&self.latent_shape(n), &mut rng);
        if prior == LatentPrior::Aggregate {
            let s = self
                .stats
                .as_ref()
                .ok_or_else(|| DiffusionError::Checkpoint("no aggregate latent statistics stored".into()))?;
            let per = s.mean.numel();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                let c = i % per;
                *v = s.mean.data()[c] + s.var.data()[c].max(0.0).sqrt() * *v;
            }
        }
        Ok(z)
    }

    /// Denoised clean latents for a batch of starting latents.
    pub fn denoise(&self, xi_t: &Tensor, n_steps: usize) -> Result<Tensor, DiffusionError> {
        let schedule = ddim_substep_schedule(self.table.steps(), n_steps)?;
        ddim_sample(xi_t, &schedule, &self.unet, &self.table)
    }

    /// Deterministic generation: denoise, decode, discretize.
    pub fn generate(&self, xi_t: &Tensor, n_steps: usize) -> Result<Vec<FaciesGrid>, DiffusionError> {
        let want = self.latent_shape(batch_len(xi_t));
        if xi_t.shape() != want.as_slice() {
            return Err(NnError::Shape(format!("starting latent {:?}, expected {want:?}", xi_t.shape())).into());
        }
        let xi0 = self.denoise(xi_t, n_steps)?;
        Ok(self.vae.decode_grids(&xi0)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = self.vae.named_tensors();
        t.extend(self.unet.named_tensors());
        t.push((format!("{PREFIX}schedule"), self.schedule.to_tensor()));
        if let Some(st) = &self.stats {
            t.push((LATENT_MEAN.into(), st.mean.clone()));
            t.push((LATENT_VAR.into(), st.var.clone()));
        }
        Checkpoint::new(t)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffusionError> {
        let vae = Vae::from_checkpoint(ck)?;
        let mut tensors = ck.with_prefix(PREFIX);
        let mut take = |name: &str| -> Result<Tensor, DiffusionError> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| DiffusionError::Checkpoint(format!("missing {PREFIX}{name}")))?;
            Ok(tensors.remove(pos).1)
        };
        let arch = UNetArch::from_tensor(&take("arch")?)?;
        let sched = take("schedule")?;
        let schedule = ScheduleConfig::from_tensor(&sched)?;
        let mut unet = UNet::new(arch, 0)?;
        unet.params.load(&tensors)?;
        let stats = match (ck.get(LATENT_MEAN), ck.get(LATENT_VAR)) {
            (Some(m), Some(v)) => Some(LatentStats {
                mean: m.clone(),
                var: v.clone(),
            }),
            _ => None,
        };
        Self::new(vae, unet, schedule, stats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub widths: [usize; 2],
    pub schedule: ScheduleConfig,
    /// Validation interval in steps; 0 means once per pass over the data.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            batch_size: 16,
            lr: 1e-4,
            widths: [128, 256],
            schedule: ScheduleConfig::default(),
            eval_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdmLossRow {
    pub step: usize,
    pub loss: f64,
}

pub struct LdmTrainResult {
    pub best: Ldm,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub log: Vec<LdmLossRow>,
    pub val_log: Vec<LdmLossRow>,
    pub optimizer: OptimizerSnapshot,
}

impl LdmTrainResult {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.best.to_checkpoint();
        ck.optimizer = Some(self.optimizer.clone());
        ck
    }
}

/// Encoder means for a set of grids, batched.
pub fn encode_means(vae: &Vae, grids: &[FaciesGrid]) -> Result<(Tensor, Tensor), DiffusionError> {
    let mut mus = Vec::new();
    let mut lvs = Vec::new();
    for chunk in grids.chunks(64) {
        let d = vae.encode(&grids_to_tensor(chunk)?)?;
        mus.push(d.mu);
        lvs.push(d.log_var);
    }
    let cat = |ts: Vec<Tensor>| -> Result<Tensor, DiffusionError> {
        let mut shape = ts[0].shape().to_vec();
        shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
        Ok(Tensor::new(shape, ts.into_iter().flat_map(Tensor::into_data).collect())?)
    };
    Ok((cat(mus)?, cat(lvs)?))
}

/// Mean noise-prediction loss over `latents` with a fixed draw per chunk, so
/// values are comparable across evaluations.
pub fn evaluate_ldm(unet: &UNet, latents: &Tensor, sched: &SchedulerTable, seed: u64) -> Result<f64, DiffusionError> {
    let n = batch_len(latents);
    let mut total = 0.0;
    for (k, start) in (0..n).step_by(64).enumerate() {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let batch = latents.select_batch(&idx)?;
        total += ddpm_loss(unet, &batch, sched, split_seed(seed, k as u64))? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains the denoiser on encoder means of the training grids; the
/// autoencoder stays frozen.
pub fn train_ldm(
    vae: &Vae,
    train: &[FaciesGrid],
    val: &[FaciesGrid],
    config: &LdmTrainConfig,
    mut on_step: impl FnMut(&LdmLossRow),
) -> Result<LdmTrainResult, DiffusionError> {
    if train.is_empty() {
        return Err(DiffusionError::Training("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(DiffusionError::Training("batch size must be at least 1".into()));
    }
    let table = config.schedule.table()?;
    let (mu, lv) = encode_means(vae, train)?;
    let stats = LatentStats::from_encodings(&mu, &lv)?;
    let val_mu = if val.is_empty() { None } else { Some(encode_means(vae, val)?.0) };
    let (lx, ly) = vae.arch().latent_dims();
    let arch = UNetArch {
        latent_channels: vae.arch().latent_channels,
        nx: lx,
        ny: ly,
        widths: config.widths,
    };
    let mut unet = UNet::new(arch, split_seed(config.seed, 0))?;
    let mut opt = AdamState::new(
        unet.params(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 1));
    let val_seed = split_seed(config.seed, 2);
    let bs = config.batch_size.min(train.len());
    let eval_every = if config.eval_every == 0 {
        train.len().div_ceil(bs)
    } else {
        config.eval_every
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    let mut val_log = Vec::new();
    let mut best = (unet.clone(), 0usize, None::<f64>);
    for step in 1..=config.steps {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + bs).min(order.len())];
        cursor += idx.len();
        let xi0 = mu.select_batch(idx)?;
        let (xt, eps, ts) = noised_batch(&xi0, &table, &mut rng)?;

        let mut g = Graph::new();
        let xv = g.input(xt);
        let pred = unet.forward(&mut g, xv, &ts)?;
        let ev = g.input(eps);
        let d = g.sub(pred, ev)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        let loss = g.scale(s, 1.0 / idx.len() as f32);
        let value = g.value(s).data()[0] as f64 / idx.len() as f64;
        if !value.is_finite() {
            return Err(DiffusionError::Training(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        unet.params.zero_grad();
        g.accumulate_param_grads(&grads, &mut unet.params);
        opt.step(&mut unet.params)?;
        let row = LdmLossRow { step, loss: value };
        on_step(&row);
        log.push(row);

        if step % eval_every == 0 || step == config.steps {
            match &val_mu {
                Some(v) => {
                    let l = evaluate_ldm(&unet, v, &table, val_seed)?;
                    val_log.push(LdmLossRow { step, loss: l });
                    if best.2.is_none_or(|b| l < b) {
                        best = (unet.clone(), step, Some(l));
                    }
                }
                None => best = (unet.clone(), step, None),
            }
        }
    }
    if config.steps == 0 {
        best = (unet.clone(), 0, None);
    }
    let optimizer = OptimizerSnapshot {
        step: opt.step,
        config: opt.config,
        tensors: opt.named_moments(unet.params()),
    };
    let ldm = Ldm::new(vae.clone(), best.0, config.schedule.clone(), Some(stats))?;
    Ok(LdmTrainResult {
        best: ldm,
        best_step: best.1,
        best_val: best.2,
        log,
        val_log,
        optimizer,
    })
}

pub fn ldm_log_csv(rows: &[LdmLossRow]) -> String {
    let mut s = String::from("step,loss\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substeps_are_rounded_linspace() {
        assert_eq!(ddim_substep_schedule(10, 4).unwrap(), vec![10, 7, 4, 1]);
        assert_eq!(ddim_substep_schedule(5, 1).unwrap(), vec![1]);
        assert!(ddim_substep_schedule(5, 6).is_err());
    }

    #[test]
    fn aggregate_stats_combine_spread_and_variance() {
        let mu = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let lv = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 0.0]).unwrap();
        let s = LatentStats::from_encodings(&mu, &lv).unwrap();
        assert_eq!(s.mean.data(), &[2.0]);
        assert_eq!(s.var.data(), &[2.0]);
    }
}
