//! Convolutional variational autoencoder with a 2D latent field.
//!
//! The encoder halves the grid three times (f = 8) between four residual
//! blocks; the decoder mirrors it with nearest-neighbour upsampling followed
//! by a 3x3 convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geogen::{ConditioningSet, FaciesGrid, GeogenError};
use crate::nn::layers::{Conv2d, GroupNorm, ResBlock};
use crate::nn::{AdamConfig, AdamState, Checkpoint, Graph, NnError, OptimizerSnapshot, ParamSet, Tensor, Var};
use crate::rng::split_seed;

pub const DOWNSAMPLE: usize = 8;
pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;
pub const PREFIX: &str = "vae.";

#[derive(Debug, thiserror::Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geogen(#[from] GeogenError),
    #[error("grid {nx}x{ny} is not divisible by {DOWNSAMPLE}")]
    Grid { nx: usize, ny: usize },
    #[error("training: {0}")]
    Training(String),
    #[error("checkpoint architecture mismatch: {0}")]
    Arch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub nx: usize,
    pub ny: usize,
    /// Channel widths of the four residual stages, finest first.
    pub widths: [usize; 4],
    pub latent_channels: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            widths: [32, 64, 128, 128],
            latent_channels: 1,
        }
    }
}

impl VaeArch {
    pub fn desk() -> Self {
        Self {
            nx: 32,
            ny: 32,
            widths: [8, 16, 32, 32],
            latent_channels: 1,
        }
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.nx / DOWNSAMPLE, self.ny / DOWNSAMPLE)
    }

    pub fn latent_shape(&self, n: usize) -> Vec<usize> {
        let (lx, ly) = self.latent_dims();
        vec![n, self.latent_channels, ly, lx]
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        if self.nx == 0 || self.ny == 0 || self.nx % DOWNSAMPLE != 0 || self.ny % DOWNSAMPLE != 0 {
            return Err(VaeError::Grid { nx: self.nx, ny: self.ny });
        }
        if self.widths.iter().any(|&w| w < 2) || self.latent_channels == 0 {
            return Err(VaeError::Arch(format!("widths {:?}, latent channels {}", self.widths, self.latent_channels)));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let mut v = vec![self.nx as f32, self.ny as f32, self.latent_channels as f32];
        v.extend(self.widths.iter().map(|&w| w as f32));
        Tensor::new(vec![7], v).expect("arch record")
    }

    fn from_tensor(t: &Tensor) -> Result<Self, VaeError> {
        let d = t.data();
        if d.len() != 7 {
            return Err(VaeError::Arch("bad architecture record".into()));
        }
        let u = |x: f32| x as usize;
        Ok(Self {
            nx: u(d[0]),
            ny: u(d[1]),
            latent_channels: u(d[2]),
            widths: [u(d[3]), u(d[4]), u(d[5]), u(d[6])],
        })
    }
}

/// Encoder output: mean and log-variance fields of shape `(N, C, ny/8, nx/8)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentDistribution {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self, VaeError> {
        if mu.shape() != log_var.shape() {
            return Err(NnError::Shape(format!("mu {:?} vs log_var {:?}", mu.shape(), log_var.shape())).into());
        }
        if !log_var.all_finite() {
            return Err(NnError::NonFinite("log_var".into()).into());
        }
        Ok(Self { mu, log_var })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self, VaeError> {
        Ok(Self {
            mu: self.mu.select_batch(indices)?,
            log_var: self.log_var.select_batch(indices)?,
        })
    }
}

/// `xi = mu + sigma * z` with `z` standard normal drawn from `seed`.
pub fn sample_latent(dist: &LatentDistribution, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .map(|(&m, &lv)| {
            let z: f32 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * z
        })
        .collect();
    Tensor::new(dist.mu.shape().to_vec(), data).expect("same shape")
}

/// Stacks grids into a `(N, 1, ny, nx)` tensor in the {-1, 0, 1} encoding.
pub fn grids_to_tensor(grids: &[FaciesGrid]) -> Result<Tensor, VaeError> {
    let first = grids.first().ok_or_else(|| VaeError::Training("no grids".into()))?;
    let (nx, ny) = (first.nx(), first.ny());
    let mut data = Vec::with_capacity(grids.len() * nx * ny);
    for g in grids {
        if g.nx() != nx || g.ny() != ny {
            return Err(NnError::Shape(format!("grid {}x{} among {nx}x{ny}", g.nx(), g.ny())).into());
        }
        data.extend(g.to_continuous());
    }
    Ok(Tensor::new(vec![grids.len(), 1, ny, nx], data)?)
}

/// Discretizes each `(1, ny, nx)` slice of a decoder output.
pub fn tensor_to_grids(t: &Tensor) -> Result<Vec<FaciesGrid>, VaeError> {
    let (n, c, ny, nx) = t.dims4()?;
    if c != 1 {
        return Err(NnError::Shape(format!("expected one facies channel, got {c}")).into());
    }
    (0..n)
        .map(|k| Ok(FaciesGrid::from_continuous(nx, ny, &t.data()[k * nx * ny..(k + 1) * nx * ny])?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossReport {
    pub recon: f64,
    pub kl: f64,
    pub hard: f64,
    pub total: f64,
    pub lambda_kl: f64,
    pub lambda_h: f64,
}

impl VaeLossReport {
    fn from_parts(recon: f64, kl: f64, hard: f64, lambda_kl: f64, lambda_h: f64) -> Self {
        Self {
            recon,
            kl,
            hard,
            total: recon + lambda_kl * kl + lambda_h * hard,
            lambda_kl,
            lambda_h,
        }
    }
}

fn hard_mask(cond: &ConditioningSet, nx: usize, ny: usize) -> Vec<f32> {
    let mut mask = vec![0.0f32; nx * ny];
    for p in cond.points() {
        mask[p.j * nx + p.i] = 1.0;
    }
    mask
}

/// Loss terms averaged over the batch: squared reconstruction error,
/// closed-form KL to N(0, I), and the mean squared error at the hard-data
/// cells.
pub fn vae_loss(
    m: &Tensor,
    m_hat: &Tensor,
    dist: &LatentDistribution,
    cond: &ConditioningSet,
    lambda_kl: f64,
    lambda_h: f64,
) -> Result<VaeLossReport, VaeError> {
    if m.shape() != m_hat.shape() {
        return Err(NnError::Shape(format!("{:?} vs {:?}", m.shape(), m_hat.shape())).into());
    }
    let (n, _, ny, nx) = m.dims4()?;
    cond.check_bounds(nx, ny)?;
    let per = m.numel() / n.max(1);
    let mut recon = 0.0;
    let mut hard = 0.0;
    for k in 0..n {
        let a = &m.data()[k * per..(k + 1) * per];
        let b = &m_hat.data()[k * per..(k + 1) * per];
        recon += a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
        for p in cond.points() {
            let c = p.j * nx + p.i;
            hard += (a[c] as f64 - b[c] as f64).powi(2);
        }
    }
    let kl: f64 = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .map(|(&mu, &lv)| {
            let (mu, lv) = (mu as f64, lv as f64);
            0.5 * (mu * mu + lv.exp() - 1.0 - lv)
        })
        .sum();
    let nb = n.max(1) as f64;
    let nh = cond.len().max(1) as f64;
    Ok(VaeLossReport::from_parts(recon / nb, kl / nb, hard / nh / nb, lambda_kl, lambda_h))
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Vae {
    arch: VaeArch,
    params: ParamSet,
    enc: Encoder,
    dec: Decoder,
}

impl Vae {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self, VaeError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = arch.widths;
        let lc = arch.latent_channels;

        let conv_in = Conv2d::same3(&mut ps, "enc.conv_in", 1, w[0], &mut rng)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for s in 0..4 {
            let cin = if s == 0 { w[0] } else { w[s - 1] };
            blocks.push(ResBlock::new(&mut ps, &format!("enc.res{s}"), cin, w[s], None, &mut rng)?);
            if s < 3 {
                downs.push(Conv2d::new(&mut ps, &format!("enc.down{s}"), w[s], w[s], 3, 2, 1, &mut rng)?);
            }
        }
        let norm_out = GroupNorm::new(&mut ps, "enc.norm_out", w[3])?;
        let conv_out = Conv2d::same3(&mut ps, "enc.conv_out", w[3], 2 * lc, &mut rng)?;
        let enc = Encoder {
            conv_in,
            blocks,
            downs,
            norm_out,
            conv_out,
        };

        let conv_in = Conv2d::same3(&mut ps, "dec.conv_in", lc, w[3], &mut rng)?;
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for s in (0..4).rev() {
            let cin = if s == 3 { w[3] } else { w[s + 1] };
            if s < 3 {
                ups.push(Conv2d::same3(&mut ps, &format!("dec.up{s}"), cin, cin, &mut rng)?);
            }
            blocks.push(ResBlock::new(&mut ps, &format!("dec.res{s}"), cin, w[s], None, &mut rng)?);
        }
        let norm_out = GroupNorm::new(&mut ps, "dec.norm_out", w[0])?;
        let conv_out = Conv2d::same3(&mut ps, "dec.conv_out", w[0], 1, &mut rng)?;
        let dec = Decoder {
            conv_in,
            blocks,
            ups,
            norm_out,
            conv_out,
        };

        Ok(Self {
            arch,
            params: ps,
            enc,
            dec,
        })
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), VaeError> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.arch.ny || shape[3] != self.arch.nx {
            return Err(NnError::Shape(format!(
                "encoder expects (N, 1, {}, {}), got {shape:?}",
                self.arch.ny, self.arch.nx
            ))
            .into());
        }
        Ok(())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<(), VaeError> {
        let want = self.arch.latent_shape(shape.first().copied().unwrap_or(0));
        if shape != want.as_slice() {
            return Err(NnError::Shape(format!("decoder expects {want:?}, got {shape:?}")).into());
        }
        Ok(())
    }

    /// Builds the encoder on `g`; returns `(mu, log_var)` nodes.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Var), VaeError> {
        self.check_input(g.shape(x))?;
        let ps = &self.params;
        let e = &self.enc;
        let mut h = e.conv_in.forward(g, ps, x)?;
        for s in 0..4 {
            h = e.blocks[s].forward(g, ps, h, None)?;
            if s < 3 {
                h = e.downs[s].forward(g, ps, h)?;
            }
        }
        let h = e.norm_out.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = e.conv_out.forward(g, ps, h)?;
        let lc = self.arch.latent_channels;
        let mu = g.slice_channels(h, 0, lc)?;
        let lv = g.slice_channels(h, lc, lc)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    /// Builds the decoder on `g`, without the output clamp.
    pub fn decode_graph(&self, g: &mut Graph, xi: Var) -> Result<Var, VaeError> {
        self.check_latent(g.shape(xi))?;
        let ps = &self.params;
        let d = &self.dec;
        let mut h = d.conv_in.forward(g, ps, xi)?;
        for (k, block) in d.blocks.iter().enumerate() {
            if k > 0 {
                h = g.upsample2x(h)?;
                h = d.ups[k - 1].forward(g, ps, h)?;
            }
            h = block.forward(g, ps, h, None)?;
        }
        let h = d.norm_out.forward(g, ps, h)?;
        let h = g.silu(h);
        Ok(d.conv_out.forward(g, ps, h)?)
    }

    pub fn encode(&self, m: &Tensor) -> Result<LatentDistribution, VaeError> {
        let mut g = Graph::inference();
        let x = g.input(m.clone());
        let (mu, lv) = self.encode_graph(&mut g, x)?;
        LatentDistribution::new(g.value(mu).clone(), g.value(lv).clone())
    }

    /// Decoder output clamped to the continuous facies range [-1, 1].
    pub fn decode(&self, xi: &Tensor) -> Result<Tensor, VaeError> {
        let mut g = Graph::inference();
        let x = g.input(xi.clone());
        let out = self.decode_graph(&mut g, x)?;
        let out = g.clamp(out, -1.0, 1.0);
        Ok(g.value(out).clone())
    }

    pub fn decode_grids(&self, xi: &Tensor) -> Result<Vec<FaciesGrid>, VaeError> {
        tensor_to_grids(&self.decode(xi)?)
    }

    /// Prefixed tensors plus an architecture record, ready for a checkpoint.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![(format!("{PREFIX}arch"), self.arch.to_tensor())];
        v.extend(self.params.named_tensors().into_iter().map(|(n, t)| (format!("{PREFIX}{n}"), t)));
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.named_tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VaeError> {
        let mut tensors = ck.with_prefix(PREFIX);
        let pos = tensors
            .iter()
            .position(|(n, _)| n == "arch")
            .ok_or_else(|| VaeError::Arch("checkpoint has no autoencoder".into()))?;
        let arch = VaeArch::from_tensor(&tensors.remove(pos).1)?;
        let mut vae = Self::new(arch, 0)?;
        vae.params.load(&tensors)?;
        Ok(vae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda_kl: f64,
    pub lambda_h: f64,
    /// Validation interval in steps; 0 means once per pass over the data.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            lr: 1e-4,
            lambda_kl: 1e-6,
            lambda_h: 10.0,
            eval_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub report: VaeLossReport,
}

pub struct VaeTrainResult {
    /// Parameters at the best validation loss (the last step if no
    /// validation set was given).
    pub best: Vae,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub log: Vec<LossRow>,
    pub val_log: Vec<LossRow>,
    pub optimizer: OptimizerSnapshot,
}

impl VaeTrainResult {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.best.to_checkpoint();
        ck.optimizer = Some(self.optimizer.clone());
        ck
    }
}

/// Builds the Eq.-style objective on a fresh graph and returns the graph,
/// the loss node and the loss terms.
fn training_graph(
    vae: &Vae,
    batch: &Tensor,
    mask: &Tensor,
    n_hard: usize,
    z: Option<&Tensor>,
    lambda_kl: f64,
    lambda_h: f64,
) -> Result<(Graph, Var, VaeLossReport), VaeError> {
    let n = batch.shape()[0];
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let (mu, lv) = vae.encode_graph(&mut g, x)?;
    let xi = match z {
        Some(z) => {
            let half = g.scale(lv, 0.5);
            let sigma = g.exp(half);
            let zv = g.input(z.clone());
            let noise = g.mul(sigma, zv)?;
            g.add(mu, noise)?
        }
        None => mu,
    };
    let out = vae.decode_graph(&mut g, xi)?;
    let diff = g.sub(out, x)?;
    let sq = g.square(diff);
    let recon = g.sum(sq);

    let mv = g.input(mask.clone());
    let hd = g.mul(sq, mv)?;
    let hard = g.sum(hd);

    let mu2 = g.square(mu);
    let var = g.exp(lv);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, lv)?;
    let kl_raw = g.sum(b);

    let nb = n as f32;
    let cells = g.value(mu).numel() as f32;
    let recon_term = g.scale(recon, 1.0 / nb);
    let kl_term = g.scale(kl_raw, 0.5 * lambda_kl as f32 / nb);
    let hard_term = g.scale(hard, lambda_h as f32 / (n_hard.max(1) as f32 * nb));
    let t = g.add(recon_term, kl_term)?;
    let loss = g.add(t, hard_term)?;

    let v = |g: &Graph, var: Var| g.value(var).data()[0] as f64;
    let kl = 0.5 * (v(&g, kl_raw) - cells as f64) / n as f64;
    let report = VaeLossReport::from_parts(
        v(&g, recon) / n as f64,
        kl,
        v(&g, hard) / n_hard.max(1) as f64 / n as f64,
        lambda_kl,
        lambda_h,
    );
    Ok((g, loss, report))
}

fn batch_mask(mask: &[f32], shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| mask[i % mask.len()])
}

/// Mean validation loss over `val`, using the encoder mean (no sampling).
pub fn evaluate(vae: &Vae, val: &Tensor, cond: &ConditioningSet, lambda_kl: f64, lambda_h: f64) -> Result<VaeLossReport, VaeError> {
    let n = val.shape()[0];
    let chunk = 32;
    let mut acc = [0.0f64; 3];
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let m = val.select_batch(&idx)?;
        let dist = vae.encode(&m)?;
        let mut g = Graph::inference();
        let xi = g.input(dist.mu.clone());
        let out = vae.decode_graph(&mut g, xi)?;
        let r = vae_loss(&m, g.value(out), &dist, cond, lambda_kl, lambda_h)?;
        let w = idx.len() as f64;
        acc[0] += r.recon * w;
        acc[1] += r.kl * w;
        acc[2] += r.hard * w;
        start += chunk;
    }
    let n = n as f64;
    Ok(VaeLossReport::from_parts(acc[0] / n, acc[1] / n, acc[2] / n, lambda_kl, lambda_h))
}

/// Adam on mini-batches drawn by reshuffling the training set each pass.
/// The returned model is the one with the lowest validation total.
pub fn train_vae(
    arch: VaeArch,
    train: &[FaciesGrid],
    val: &[FaciesGrid],
    cond: &ConditioningSet,
    config: &VaeTrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<VaeTrainResult, VaeError> {
    if train.is_empty() {
        return Err(VaeError::Training("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(VaeError::Training("batch size must be at least 1".into()));
    }
    cond.check_bounds(arch.nx, arch.ny)?;
    let data = grids_to_tensor(train)?;
    let val_data = if val.is_empty() { None } else { Some(grids_to_tensor(val)?) };
    let mut vae = Vae::new(arch.clone(), split_seed(config.seed, 0))?;
    let mut opt = AdamState::new(
        vae.params(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mask = hard_mask(cond, arch.nx, arch.ny);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 1));
    let bs = config.batch_size.min(train.len());
    let per_pass = train.len().div_ceil(bs);
    let eval_every = if config.eval_every == 0 { per_pass } else { config.eval_every };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    let mut val_log = Vec::new();
    let mut best = (vae.clone(), 0usize, None::<f64>);

    for step in 1..=config.steps {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let idx: Vec<usize> = order[cursor..(cursor + bs).min(order.len())].to_vec();
        cursor += idx.len();
        let batch = data.select_batch(&idx)?;
        let zshape = arch.latent_shape(idx.len());
        let z = Tensor::from_fn(zshape, |_| rng.sample(StandardNormal));
        let m = batch_mask(&mask, batch.shape());
        let (g, loss, report) = training_graph(&vae, &batch, &m, cond.len(), Some(&z), config.lambda_kl, config.lambda_h)?;
        if !report.total.is_finite() {
            return Err(VaeError::Training(format!("non-finite loss at step {step}: {report:?}")));
        }
        let grads = g.backward(loss)?;
        vae.params.zero_grad();
        g.accumulate_param_grads(&grads, &mut vae.params);
        opt.step(&mut vae.params)?;
        let row = LossRow { step, report };
        on_step(&row);
        log.push(row);

        if step % eval_every == 0 || step == config.steps {
            match &val_data {
                Some(v) => {
                    let r = evaluate(&vae, v, cond, config.lambda_kl, config.lambda_h)?;
                    val_log.push(LossRow { step, report: r });
                    if best.2.is_none_or(|b| r.total < b) {
                        best = (vae.clone(), step, Some(r.total));
                    }
                }
                None => best = (vae.clone(), step, None),
            }
        }
    }
    if config.steps == 0 {
        best = (vae.clone(), 0, None);
    }
    let optimizer = OptimizerSnapshot {
        step: opt.step,
        config: opt.config,
        tensors: opt.named_moments(vae.params()),
    };
    Ok(VaeTrainResult {
        best: best.0,
        best_step: best.1,
        best_val: best.2,
        log,
        val_log,
        optimizer,
    })
}

/// Loss log as CSV text with header `step,recon,kl,hard,total`.
pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,recon,kl,hard,total\n");
    for r in rows {
        let p = &r.report;
        s.push_str(&format!("{},{},{},{},{}\n", r.step, p.recon, p.kl, p.hard, p.total));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_loss_matches_report() {
        let arch = VaeArch {
            nx: 16,
            ny: 16,
            widths: [4, 4, 4, 4],
            latent_channels: 1,
        };
        let vae = Vae::new(arch.clone(), 3).unwrap();
        let m = Tensor::from_fn(vec![2, 1, 16, 16], |i| ((i % 3) as f32) - 1.0);
        let cond = crate::geogen::well_conditioning(16, 16);
        let mask = batch_mask(&hard_mask(&cond, 16, 16), &[2, 1, 16, 16]);
        let (g, loss, report) = training_graph(&vae, &m, &mask, cond.len(), None, 1e-6, 10.0).unwrap();
        let dist = vae.encode(&m).unwrap();
        let mut g2 = Graph::inference();
        let xi = g2.input(dist.mu.clone());
        let out = vae.decode_graph(&mut g2, xi).unwrap();
        let direct = vae_loss(&m, g2.value(out), &dist, &cond, 1e-6, 10.0).unwrap();
        assert!((report.recon - direct.recon).abs() <= 1e-4 * direct.recon.max(1.0));
        assert!((report.hard - direct.hard).abs() <= 1e-4 * direct.hard.max(1.0));
        assert!((report.kl - direct.kl).abs() <= 1e-3 * direct.kl.abs().max(1.0));
        let l = g.value(loss).data()[0] as f64;
        assert!((l - report.total).abs() <= 1e-4 * report.total);
    }

    #[test]
    fn arch_record_round_trip() {
        let a = VaeArch::desk();
        assert_eq!(VaeArch::from_tensor(&a.to_tensor()).unwrap(), a);
    }
}
