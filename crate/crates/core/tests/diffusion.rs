use geoldm::diffusion::*;
use geoldm::geogen::{dataset_member, well_conditioning, ChannelStyle, FaciesGrid};
use geoldm::nn::{Checkpoint, Tensor};
use geoldm::rng::split_seed;
use geoldm::vae::{Vae, VaeArch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

/// Predicts the noise that maps `x0` to the current `x_t`.
fn oracle(x0: Tensor, sched: SchedulerTable) -> impl Fn(&Tensor, &[usize]) -> Result<Tensor, DiffusionError> {
    move |x: &Tensor, ts: &[usize]| {
        let per = x.numel() / ts.len();
        let mut out = x.clone();
        for (k, &t) in ts.iter().enumerate() {
            let ab = sched.alpha_bar_at(t);
            for c in k * per..(k + 1) * per {
                let x0c = x0.data()[c % x0.numel()] as f64;
                out.data_mut()[c] = ((x.data()[c] as f64 - ab.sqrt() * x0c) / (1.0 - ab).sqrt()) as f32;
            }
        }
        Ok(out)
    }
}

fn zero_net(x: &Tensor, _: &[usize]) -> Result<Tensor, DiffusionError> {
    Ok(Tensor::zeros(x.shape().to_vec()))
}

#[test]
fn linear_schedule_endpoints() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.beta[0], 1e-4);
    assert!((s.beta[999] - 0.02).abs() < 1e-15);
    let s = make_linear_schedule(1, 0.3, 0.3).unwrap();
    assert!((s.alpha_bar_at(1) - 0.7).abs() < 1e-15);
    let s = make_linear_schedule(3, 0.1, 0.3).unwrap();
    assert!((s.beta[1] - 0.2).abs() < 1e-15);
    assert!((s.alpha_bar_at(3) - 0.504).abs() < 1e-12);
    assert_eq!(s.alpha_bar_at(0), 1.0);
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
    assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
    assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    assert!(SchedulerTable::from_betas(vec![]).is_err());
}

proptest! {
    #[test]
    fn schedule_recurrence(steps in 1usize..2000, b1 in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = make_linear_schedule(steps, b1, b1 + span).unwrap();
        for t in 1..=steps {
            let ratio = s.alpha_bar_at(t) / s.alpha_bar_at(t - 1);
            prop_assert!((ratio - s.alpha[t - 1]).abs() <= 1e-14);
            prop_assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            prop_assert!(s.beta[t - 1] > 0.0 && s.beta[t - 1] < 1.0);
            if t > 1 {
                prop_assert!(s.beta[t - 1] >= s.beta[t - 2]);
            }
        }
    }

    #[test]
    fn substep_schedule_shape(steps in 1usize..1500, frac in 0.0f64..1.0) {
        let n = 1 + ((steps - 1) as f64 * frac) as usize;
        let sch = ddim_substep_schedule(steps, n).unwrap();
        prop_assert_eq!(sch.len(), n);
        prop_assert_eq!(*sch.last().unwrap(), 1);
        prop_assert!(sch.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(sch.iter().all(|&t| (1..=steps).contains(&t)));
        if n > 1 {
            prop_assert_eq!(sch[0], steps);
        }
    }
}

#[test]
fn substep_examples() {
    let s = ddim_substep_schedule(1000, 100).unwrap();
    assert_eq!(s.len(), 100);
    assert_eq!((s[0], s[99]), (1000, 1));
    assert!(s.windows(2).all(|w| (10..=11).contains(&(w[0] - w[1]))));
    assert_eq!(ddim_substep_schedule(7, 7).unwrap(), vec![7, 6, 5, 4, 3, 2, 1]);
    for n in 1..=10 {
        let s = ddim_substep_schedule(10, n).unwrap();
        assert_eq!(s.len(), n);
        assert_eq!(*s.last().unwrap(), 1);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }
    assert!(ddim_substep_schedule(10, 0).is_err());
    assert!(ddim_substep_schedule(10, 11).is_err());
}

#[test]
fn forward_noise_examples() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = normal(vec![1, 1, 4, 4], 1);
    let out = forward_noise(&x0, 500, &Tensor::zeros(vec![1, 1, 4, 4]), &s).unwrap();
    let a = s.alpha_bar_at(500).sqrt();
    for (o, x) in out.data().iter().zip(x0.data()) {
        assert!((*o as f64 - a * *x as f64).abs() < 1e-6);
    }
    let full = SchedulerTable::from_betas(vec![0.5, 1.0]).unwrap();
    let eps = normal(vec![1, 1, 4, 4], 2);
    assert_eq!(forward_noise(&x0, 2, &eps, &full).unwrap(), eps);
    assert!(forward_noise(&x0, 0, &eps, &s).is_err());
    assert!(forward_noise(&x0, 1001, &eps, &s).is_err());
    assert!(forward_noise(&x0, 1, &Tensor::zeros(vec![4]), &s).is_err());
}

#[test]
fn forward_noise_moments() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let t = 300;
    let x0 = Tensor::new(vec![1, 1, 1, 2], vec![0.8, -1.5]).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sum = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for _ in 0..n {
        let eps = Tensor::from_fn(vec![1, 1, 1, 2], |_| rng.sample(StandardNormal));
        let x = forward_noise(&x0, t, &eps, &s).unwrap();
        for c in 0..2 {
            let v = x.data()[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let ab = s.alpha_bar_at(t);
    for c in 0..2 {
        let mean = sum[c] / n as f64;
        let var = sq[c] / n as f64 - mean * mean;
        assert!((mean - ab.sqrt() * x0.data()[c] as f64).abs() < 0.02, "mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.02, "var {var}");
    }
}

#[test]
fn iterated_single_steps_match_closed_form() {
    let s = make_linear_schedule(50, 1e-3, 0.1).unwrap();
    let x0 = [1.0f64, -0.5, 0.2, 2.0];
    let paths = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..paths {
        let mut x = x0;
        for t in 1..=50 {
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v = s.alpha[t - 1].sqrt() * *v + s.beta[t - 1].sqrt() * z;
            }
        }
        for c in 0..4 {
            sum[c] += x[c];
            sq[c] += x[c] * x[c];
        }
    }
    let ab = s.alpha_bar_at(50);
    for c in 0..4 {
        let mean = sum[c] / paths as f64;
        let var = sq[c] / paths as f64 - mean * mean;
        assert!((mean - ab.sqrt() * x0[c]).abs() < 0.02, "mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.02, "var {var}");
    }
}

#[test]
fn ddpm_loss_examples() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let xi0 = normal(vec![1000, 1, 4, 4], 3);
    let zero = ddpm_loss(&zero_net, &xi0, &s, 5).unwrap();
    assert!((zero / 16.0 - 1.0).abs() < 0.05, "{zero}");
    assert_eq!(zero, ddpm_loss(&zero_net, &xi0, &s, 5).unwrap());

    // the oracle recovers the drawn noise from x_t and the known x0
    let single = normal(vec![1, 1, 4, 4], 4);
    let or = oracle(single.clone(), s.clone());
    let l = ddpm_loss(&or, &single, &s, 6).unwrap();
    assert!(l < 1e-6, "{l}");
    assert!(ddpm_loss(&zero_net, &Tensor::zeros(vec![0, 1, 4, 4]), &s, 0).is_err());
}

#[test]
fn ddpm_step_examples() {
    let s = make_linear_schedule(10, 1e-3, 0.2).unwrap();
    let x = normal(vec![1, 1, 4, 4], 1);
    let z = Tensor::zeros(vec![1, 1, 4, 4]);
    let out = ddpm_sample_step(&x, 4, &zero_net, &s, &z).unwrap();
    let a = s.alpha[3].sqrt();
    for (o, v) in out.data().iter().zip(x.data()) {
        assert!((*o as f64 - *v as f64 / a).abs() < 1e-6);
    }
    let ones = Tensor::ones(vec![1, 1, 4, 4]);
    let with_z = ddpm_sample_step(&x, 4, &zero_net, &s, &ones).unwrap();
    for (o, v) in with_z.data().iter().zip(out.data()) {
        assert!((*o as f64 - *v as f64 - s.beta[3].sqrt()).abs() < 1e-6);
    }
    assert!(ddpm_sample_step(&x, 0, &zero_net, &s, &z).is_err());
    assert!(ddpm_sample_step(&x, 11, &zero_net, &s, &z).is_err());
}

#[test]
fn ddpm_chain_with_oracle_recovers_x0() {
    let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
    let x0 = normal(vec![1, 1, 4, 4], 21);
    let mut x = forward_noise(&x0, 10, &normal(vec![1, 1, 4, 4], 22), &s).unwrap();
    let or = oracle(x0.clone(), s.clone());
    for t in (1..=10).rev() {
        let z = if t > 1 {
            normal(vec![1, 1, 4, 4], 100 + t as u64)
        } else {
            Tensor::zeros(vec![1, 1, 4, 4])
        };
        x = ddpm_sample_step(&x, t, &or, &s, &z).unwrap();
    }
    assert!(max_abs_diff(&x, &x0) < 1e-4);
}

#[test]
fn ddim_examples() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = normal(vec![2, 1, 4, 4], 31);
    let eps = normal(vec![2, 1, 4, 4], 32);
    let x1 = forward_noise(&x0, 1, &eps, &s).unwrap();
    let or = oracle(x0.clone(), s.clone());
    let back = ddim_sample_step(&x1, 1, &or, &s).unwrap();
    assert!(max_abs_diff(&back, &x0) < 1e-6);

    let x = normal(vec![1, 1, 4, 4], 33);
    let out = ddim_sample_step(&x, 600, &zero_net, &s).unwrap();
    let r = (s.alpha_bar_at(599) / s.alpha_bar_at(600)).sqrt();
    for (o, v) in out.data().iter().zip(x.data()) {
        assert!((*o as f64 - r * *v as f64).abs() < 1e-5);
    }
    let a = ddim_sample_step(&x, 600, &or, &s).unwrap();
    let b = ddim_sample_step(&x, 600, &or, &s).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(ddim_sample_step(&x, 0, &zero_net, &s).is_err());
    assert!(ddim_step(&x, 5, 5, &x, &s).is_err());
}

#[test]
fn ddim_chain_with_oracle_recovers_x0() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = normal(vec![1, 1, 4, 4], 41);
    let xt = forward_noise(&x0, 1000, &normal(vec![1, 1, 4, 4], 42), &s).unwrap();
    let sch = ddim_substep_schedule(1000, 50).unwrap();
    let out = ddim_sample(&xt, &sch, &oracle(x0.clone(), s.clone()), &s).unwrap();
    assert!(max_abs_diff(&out, &x0) < 1e-4);
}

#[test]
fn interpolation_examples() {
    let a = normal(vec![1, 1, 4, 4], 1);
    let b = normal(vec![1, 1, 4, 4], 2);
    assert_eq!(interpolate_latents(&a, &b, 0.0).unwrap(), a);
    assert_eq!(interpolate_latents(&a, &b, 1.0).unwrap(), b);
    let mid = interpolate_latents(&a, &b, 0.5).unwrap();
    for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
        assert!((m - (x + y) / 2.0).abs() < 1e-6);
    }
    assert!(interpolate_latents(&a, &b, -0.1).is_err());
    assert!(interpolate_latents(&a, &b, 1.1).is_err());
    assert!(interpolate_latents(&a, &Tensor::zeros(vec![3]), 0.5).is_err());
}

fn randomize(unet: &mut UNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = unet.params_mut();
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.value_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f32, _>(StandardNormal);
        }
    }
}

fn desk_unet() -> UNet {
    UNet::new(
        UNetArch {
            latent_channels: 1,
            nx: 4,
            ny: 4,
            widths: [8, 16],
        },
        5,
    )
    .unwrap()
}

#[test]
fn denoiser_shape_and_time_conditioning() {
    let mut unet = desk_unet();
    randomize(&mut unet, 1);
    let x = normal(vec![3, 1, 4, 4], 7);
    let a = unet.predict(&x, &[10, 10, 10]).unwrap();
    assert_eq!(a.shape(), x.shape());
    let b = unet.predict(&x, &[10, 500, 10]).unwrap();
    assert_eq!(a.data()[..16], b.data()[..16]);
    assert!(max_abs_diff(&a.select_batch(&[1]).unwrap(), &b.select_batch(&[1]).unwrap()) > 1e-4);
    assert!(unet.predict(&normal(vec![1, 1, 8, 8], 1), &[1]).is_err());
    assert!(unet.predict(&x, &[1]).is_err());
    assert!(UNet::new(
        UNetArch {
            latent_channels: 1,
            nx: 3,
            ny: 4,
            widths: [8, 16]
        },
        0
    )
    .is_err());
}

fn fixture_grids(n: u64) -> Vec<FaciesGrid> {
    let style = ChannelStyle::desk();
    let cond = well_conditioning(32, 32);
    (0..n).map(|k| dataset_member(&style, &cond, 7, k).unwrap()).collect()
}

fn tiny_ldm() -> Ldm {
    let vae = Vae::new(VaeArch::desk(), 3).unwrap();
    let mut unet = desk_unet();
    randomize(&mut unet, 2);
    let (mu, lv) = encode_means(&vae, &fixture_grids(4)).unwrap();
    let stats = LatentStats::from_encodings(&mu, &lv).unwrap();
    Ldm::new(
        vae,
        unet,
        ScheduleConfig {
            steps: 100,
            ..ScheduleConfig::default()
        },
        Some(stats),
    )
    .unwrap()
}

#[test]
fn generation_is_deterministic_and_shaped() {
    let ldm = tiny_ldm();
    let xi = ldm.draw_latents(3, LatentPrior::Standard, 5).unwrap();
    assert_eq!(xi, ldm.draw_latents(3, LatentPrior::Standard, 5).unwrap());
    let a = ldm.generate(&xi, 20).unwrap();
    let b = ldm.generate(&xi, 20).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|g| g.nx() == 32 && g.ny() == 32));
    assert!(ldm.generate(&normal(vec![1, 1, 8, 8], 0), 20).is_err());
    assert!(ldm.generate(&xi, 101).is_err());
}

#[test]
fn aggregate_prior_uses_stored_moments() {
    let ldm = tiny_ldm();
    let z = ldm.draw_latents(2, LatentPrior::Standard, 8).unwrap();
    let x = ldm.draw_latents(2, LatentPrior::Aggregate, 8).unwrap();
    let s = ldm.stats.as_ref().unwrap();
    for (i, (&zv, &xv)) in z.data().iter().zip(x.data()).enumerate() {
        let c = i % 16;
        let expect = s.mean.data()[c] + s.var.data()[c].sqrt() * zv;
        assert!((xv - expect).abs() < 1e-6);
    }
    let mut bare = ldm.clone();
    bare.stats = None;
    assert!(bare.draw_latents(1, LatentPrior::Aggregate, 0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let ldm = tiny_ldm();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ldm.ldmc");
    ldm.to_checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert!(ck.get(LATENT_MEAN).is_some() && ck.get(LATENT_VAR).is_some());
    assert!(ck.tensors.iter().any(|(n, _)| n.starts_with("unet.")));
    let back = Ldm::from_checkpoint(&ck).unwrap();
    let xi = ldm.draw_latents(2, LatentPrior::Standard, 1).unwrap();
    assert_eq!(back.denoise(&xi, 10).unwrap(), ldm.denoise(&xi, 10).unwrap());
    assert_eq!(back.stats, ldm.stats);
    assert!(Ldm::from_checkpoint(&ldm.vae.to_checkpoint()).is_err());
}

#[test]
fn training_defaults() {
    let c = LdmTrainConfig::default();
    assert_eq!(c.batch_size, 16);
    assert_eq!(c.lr, 1e-4);
    assert_eq!(c.schedule, ScheduleConfig::default());
    assert_eq!((c.schedule.steps, c.schedule.beta1, c.schedule.beta_t), (1000, 1e-4, 0.02));
}

#[test]
fn training_log_and_best_checkpoint() {
    let vae = Vae::new(VaeArch::desk(), 3).unwrap();
    let grids = fixture_grids(8);
    let cfg = LdmTrainConfig {
        steps: 9,
        batch_size: 4,
        lr: 1e-3,
        widths: [8, 16],
        schedule: ScheduleConfig {
            steps: 100,
            ..ScheduleConfig::default()
        },
        eval_every: 3,
        seed: 3,
    };
    let r = train_ldm(&vae, &grids[..6], &grids[6..], &cfg, |_| {}).unwrap();
    assert_eq!(r.log.len(), 9);
    assert_eq!(r.val_log.len(), 3);
    let best = r.val_log.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).unwrap();
    assert_eq!((r.best_step, r.best_val), (best.step, Some(best.loss)));
    assert!(ldm_log_csv(&r.log).starts_with("step,loss\n1,"));
    let again = train_ldm(&vae, &grids[..6], &grids[6..], &cfg, |_| {}).unwrap();
    assert_eq!(again.log, r.log);
    assert!(train_ldm(&vae, &[], &[], &cfg, |_| {}).is_err());
}

#[test]
fn overfit_fixture_reduces_loss() {
    let vae = Vae::new(VaeArch::desk(), 3).unwrap();
    let grids = fixture_grids(8);
    let cfg = LdmTrainConfig {
        steps: 2000,
        batch_size: 8,
        lr: 1e-3,
        widths: [32, 64],
        schedule: ScheduleConfig {
            steps: 100,
            ..ScheduleConfig::default()
        },
        eval_every: 0,
        seed: 1,
    };
    let r = train_ldm(&vae, &grids, &[], &cfg, |_| {}).unwrap();
    // 512 copies of the 8 latents give a low-variance estimate of the loss
    let (mu, _) = encode_means(&vae, &grids).unwrap();
    let idx: Vec<usize> = (0..512).map(|k| k % 8).collect();
    let rep = mu.select_batch(&idx).unwrap();
    let table = cfg.schedule.table().unwrap();
    let init = UNet::new(r.best.unet.arch().clone(), split_seed(cfg.seed, 0)).unwrap();
    let before = evaluate_ldm(&init, &rep, &table, 5).unwrap();
    let after = evaluate_ldm(&r.best.unet, &rep, &table, 5).unwrap();
    assert!(after < 0.1 * before, "loss {before} -> {after}");
}
