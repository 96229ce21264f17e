use geoldm::esmda::*;
use geoldm::geogen::FaciesGrid;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn prior_ensemble_lengths_and_bounds() {
    let c1 = init_ensemble(HmCase::Fixed, 10, 64, 1).unwrap();
    assert!(c1.members.iter().all(|m| m.len() == 64 && m.props.is_none()));
    let c2 = init_ensemble(HmCase::Uncertain, 400, 64, 1).unwrap();
    assert!(c2.members.iter().all(|m| m.len() == 70));
    for m in &c2.members {
        let p = m.props.unwrap();
        assert!((0.22..=0.30).contains(&p[2]));
        for (v, pr) in p.iter().zip(PROP_PRIORS.iter()) {
            assert!(*v >= pr.min && *v <= pr.max);
        }
    }
    // Member j is independent of ensemble size.
    let small = init_ensemble(HmCase::Uncertain, 5, 64, 1).unwrap();
    assert_eq!(small.members[..], c2.members[..5]);
    assert!(init_ensemble(HmCase::Fixed, 1, 4, 0).is_err());
    assert_eq!(HmCase::from_number(2).unwrap(), HmCase::Uncertain);
    assert!(HmCase::from_number(3).is_err());
}

#[test]
fn prior_latent_is_standard_normal() {
    let e = init_ensemble(HmCase::Fixed, 2000, 16, 3).unwrap();
    let all: Vec<f64> = e.members.iter().flat_map(|m| m.xi.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
}

#[test]
fn hm_vector_round_trip_and_rock() {
    let v: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
    let m = HmVector::from_slice(&v, 4, HmCase::Uncertain).unwrap();
    assert_eq!(m.to_vec(), v);
    assert!(HmVector::from_slice(&v, 4, HmCase::Fixed).is_err());
    let rock = m.rock(&Default::default());
    assert_eq!(rock.facies[0].porosity, 0.4);
    assert!((rock.facies[2].perm - 0.9f64.exp()).abs() < 1e-12);
}

#[test]
fn perturbation_statistics() {
    let obs = ObservationSet::new(vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
    assert_eq!(perturb_obs(&obs, 5.0, 1), obs.d_obs);
    let obs = ObservationSet::new(vec![10.0], vec![0.25]).unwrap();
    let alpha = 3.0;
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|s| perturb_obs(&obs, alpha, s)[0]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / (alpha * 0.25) - 1.0).abs() < 0.02, "{var}");
    assert!((mean - 10.0).abs() < 0.02);
    assert_ne!(perturb_obs(&obs, alpha, 1), perturb_obs(&obs, alpha, 2));
}

#[test]
fn observation_noise_model() {
    let obs = ObservationSet::from_true_data(&[100.0, 0.0, -50.0], 0.02, 1e-6).unwrap();
    assert!((obs.var[0] - 4.0).abs() < 1e-12);
    assert!((obs.var[1] - 1e-8).abs() < 1e-20);
    assert!((obs.var[2] - 1.0).abs() < 1e-12);
    let m = obs.mismatch(&[102.0, 0.0, -50.0]);
    assert!((m - 1.0 / 3.0).abs() < 1e-12);
    assert!(ObservationSet::new(vec![1.0], vec![-1.0]).is_err());
}

#[test]
fn paper_alphas_pass_check() {
    let s: f64 = PAPER_ALPHAS.iter().map(|a| 1.0 / a).sum();
    assert!((s - 1.0).abs() < 1e-5, "{s}");
    let cfg = EsmdaConfig::default();
    cfg.validate().unwrap();
    assert_eq!((cfg.n_e, cfg.n_a()), (200, 10));
    let bad = EsmdaConfig { alphas: vec![2.0, 3.0], ..cfg.clone() };
    assert!(bad.validate().is_err());
    assert!(EsmdaConfig { alphas: vec![1.0], ..cfg }.validate().is_ok());
}

fn naive_cov(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mean = |x: &[Vec<f64>], i: usize| x.iter().map(|r| r[i]).sum::<f64>() / n as f64;
    let mut out = vec![vec![0.0; b[0].len()]; a[0].len()];
    for i in 0..a[0].len() {
        for k in 0..b[0].len() {
            let (ma, mb) = (mean(a, i), mean(b, k));
            let mut s = 0.0;
            for j in 0..n {
                s += (a[j][i] - ma) * (b[j][k] - mb);
            }
            out[i][k] = s / (n - 1) as f64;
        }
    }
    out
}

proptest! {
    #[test]
    fn covariances_match_double_loop(
        n in 2usize..7, nx in 1usize..5, nd in 1usize..5,
        vals in proptest::collection::vec(-10.0f64..10.0, 6 * 8 + 6 * 8)
    ) {
        let x: Vec<Vec<f64>> = (0..n).map(|j| vals[j * nx..(j + 1) * nx].to_vec()).collect();
        let d: Vec<Vec<f64>> = (0..n).map(|j| vals[48 + j * nd..48 + (j + 1) * nd].to_vec()).collect();
        let (cxd, cdd) = sample_covariances(&x, &d).unwrap();
        let (oxd, odd) = (naive_cov(&x, &d), naive_cov(&d, &d));
        for i in 0..nx {
            for k in 0..nd {
                prop_assert!((cxd[(i, k)] - oxd[i][k]).abs() < 1e-10);
            }
        }
        for i in 0..nd {
            for k in 0..nd {
                prop_assert!((cdd[(i, k)] - odd[i][k]).abs() < 1e-10);
            }
        }
    }
}

/// Toy linear-Gaussian problem: 4 unknowns, 6 data.
struct Toy {
    g: DMatrix<f64>,
    obs: ObservationSet,
}

fn toy() -> Toy {
    let g = DMatrix::from_row_slice(
        6,
        4,
        &[
            1.0, 0.5, 0.0, -0.3, //
            0.2, 1.0, 0.4, 0.0, //
            0.0, -0.6, 1.0, 0.5, //
            0.7, 0.0, 0.3, 1.0, //
            -0.4, 0.8, 0.0, 0.6, //
            0.5, 0.5, 0.5, 0.5,
        ],
    );
    let d_obs = vec![1.2, -0.4, 0.9, 1.5, 0.3, 1.1];
    let var = vec![0.3, 0.2, 0.5, 0.25, 0.4, 0.3];
    Toy { g, obs: ObservationSet::new(d_obs, var).unwrap() }
}

impl Toy {
    fn simulate(&self, members: &[HmVector]) -> Vec<Vec<f64>> {
        members
            .iter()
            .map(|m| {
                let x = DVector::from_column_slice(&m.xi);
                (&self.g * x).iter().copied().collect()
            })
            .collect()
    }

    /// Closed-form posterior mean for the N(0, I) prior.
    fn kalman_mean(&self) -> DVector<f64> {
        let p = DMatrix::<f64>::identity(4, 4);
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&self.obs.var));
        let d = DVector::from_column_slice(&self.obs.d_obs);
        let s = &self.g * &p * self.g.transpose() + r;
        let k = &p * self.g.transpose() * s.try_inverse().unwrap();
        k * d
    }
}

fn rel_err(ens: &Ensemble, want: &DVector<f64>) -> f64 {
    let m = DVector::from_column_slice(&ens.mean());
    (m - want).norm() / want.norm()
}

#[test]
fn single_step_matches_kalman() {
    let t = toy();
    let prior = init_ensemble(HmCase::Fixed, 5000, 4, 21).unwrap();
    let post = esmda_update(&prior, &t.simulate(&prior.members), &t.obs, 1.0, 5).unwrap();
    let err = rel_err(&post, &t.kalman_mean());
    assert!(err < 0.03, "{err}");
    assert_eq!(post.step, 1);
}

#[test]
fn multi_step_matches_kalman() {
    let t = toy();
    let cfg = EsmdaConfig { n_e: 5000, seed: 9, ..EsmdaConfig::default() };
    let prior = init_ensemble(HmCase::Fixed, cfg.n_e, 4, 22).unwrap();
    let model = |m: &[HmVector]| -> Result<Vec<Vec<f64>>, EsmdaError> { Ok(t.simulate(m)) };
    let run = run_esmda(&cfg, prior, &t.obs, &model, |_| {}).unwrap();
    assert_eq!(run.ensembles.len(), 11);
    assert_eq!(run.mismatch.len(), 11);
    let err = rel_err(run.posterior(), &t.kalman_mean());
    assert!(err < 0.03, "{err}");
    assert!(run.mismatch[10].mean < run.mismatch[0].mean);
}

#[test]
fn zero_innovation_leaves_ensemble() {
    let t = toy();
    let prior = init_ensemble(HmCase::Uncertain, 20, 4, 2).unwrap();
    let d: Vec<Vec<f64>> = prior
        .members
        .iter()
        .map(|m| {
            let v = m.to_vec();
            (0..6).map(|i| v[i % 10] * (i + 1) as f64).collect()
        })
        .collect();
    let post = esmda_update_with(&prior, &d, &d, &t.obs, 2.0).unwrap();
    assert_eq!(post.members, prior.members);
}

#[test]
fn update_is_permutation_equivariant() {
    let t = toy();
    let prior = init_ensemble(HmCase::Fixed, 12, 4, 3).unwrap();
    let d = t.simulate(&prior.members);
    let pert: Vec<Vec<f64>> = (0..12).map(|j| perturb_obs(&t.obs, 4.0, j)).collect();
    let a = esmda_update_with(&prior, &d, &pert, &t.obs, 4.0).unwrap();
    let perm: Vec<usize> = (0..12).map(|j| (j * 5 + 3) % 12).collect();
    let shuffled = Ensemble::new(perm.iter().map(|&j| prior.members[j].clone()).collect(), 0).unwrap();
    let d2: Vec<Vec<f64>> = perm.iter().map(|&j| d[j].clone()).collect();
    let p2: Vec<Vec<f64>> = perm.iter().map(|&j| pert[j].clone()).collect();
    let b = esmda_update_with(&shuffled, &d2, &p2, &t.obs, 4.0).unwrap();
    for (k, &j) in perm.iter().enumerate() {
        for (u, v) in b.members[k].xi.iter().zip(&a.members[j].xi) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn huge_inflation_freezes_ensemble() {
    let t = toy();
    let prior = init_ensemble(HmCase::Fixed, 30, 4, 4).unwrap();
    let d = t.simulate(&prior.members);
    let change = |alpha: f64| {
        let post = esmda_update(&prior, &d, &t.obs, alpha, 8).unwrap();
        let mut s = 0.0f64;
        for (a, b) in post.members.iter().zip(&prior.members) {
            for (u, v) in a.xi.iter().zip(&b.xi) {
                s = s.max((u - v).abs());
            }
        }
        s
    };
    let (c9, c12) = (change(1e9), change(1e12));
    assert!(c9 < 1e-3, "{c9}");
    assert!(c12 < 0.05 * c9, "{c12} vs {c9}");
}

#[test]
fn case_two_props_stay_in_bounds() {
    // Data that depend only on channel ln k, observed far above the prior range.
    let prior = init_ensemble(HmCase::Uncertain, 50, 4, 5).unwrap();
    let d: Vec<Vec<f64>> = prior.members.iter().map(|m| vec![m.props.unwrap()[5] * 10.0]).collect();
    let obs = ObservationSet::new(vec![200.0], vec![0.01]).unwrap();
    let post = esmda_update(&prior, &d, &obs, 1.0, 1).unwrap();
    for m in &post.members {
        for (v, pr) in m.props.unwrap().iter().zip(PROP_PRIORS.iter()) {
            assert!(*v >= pr.min && *v <= pr.max);
        }
    }
    assert!(post.members.iter().all(|m| m.props.unwrap()[5] == PROP_PRIORS[5].max));
}

#[test]
fn update_input_errors() {
    let t = toy();
    let prior = init_ensemble(HmCase::Fixed, 5, 4, 1).unwrap();
    let d = t.simulate(&prior.members);
    assert!(esmda_update(&prior, &d, &t.obs, 0.0, 1).is_err());
    assert!(esmda_update(&prior, &d[..4], &t.obs, 1.0, 1).is_err());
}

#[test]
fn forward_failure_names_member() {
    let t = toy();
    let cfg = EsmdaConfig { n_e: 4, ..EsmdaConfig::default() };
    let prior = init_ensemble(HmCase::Fixed, 4, 4, 1).unwrap();
    let model = |_: &[HmVector]| -> Result<Vec<Vec<f64>>, EsmdaError> {
        Err(EsmdaError::Forward { member: 2, message: "boom".into() })
    };
    match run_esmda(&cfg, prior, &t.obs, &model, |_| {}) {
        Err(EsmdaError::Forward { member, .. }) => assert_eq!(member, 2),
        other => panic!("{other:?}"),
    }
}

fn grid(codes: &[u8]) -> FaciesGrid {
    FaciesGrid::new(codes.len(), 1, codes.to_vec()).unwrap()
}

#[test]
fn single_cluster_medoid_is_closest_to_mean() {
    let grids: Vec<FaciesGrid> = [[0, 0, 1, 2], [2, 2, 1, 0], [1, 1, 1, 1], [0, 2, 0, 2], [1, 0, 2, 1]]
        .iter()
        .map(|c| grid(c))
        .collect();
    let m = kmeans_medoids(&grids, 1, 0).unwrap();
    let pts: Vec<Vec<f64>> = grids.iter().map(|g| g.codes().iter().map(|&c| c as f64 - 1.0).collect()).collect();
    let mean: Vec<f64> = (0..4).map(|i| pts.iter().map(|p| p[i]).sum::<f64>() / 5.0).collect();
    let d = |p: &Vec<f64>| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let best = (0..5).min_by(|&a, &b| d(&pts[a]).total_cmp(&d(&pts[b]))).unwrap();
    assert_eq!(m, vec![best]);
}

#[test]
fn identical_and_singleton_clusters() {
    let same = vec![grid(&[1, 2, 0]); 6];
    let m = kmeans_medoids(&same, 1, 3).unwrap();
    assert_eq!(m.len(), 1);
    let r = kmeans(&vec![vec![0.0, 1.0]; 4], 1, 0, 3).unwrap();
    assert_eq!(r.inertia, 0.0);

    let distinct: Vec<FaciesGrid> = (0..5u8).map(|k| grid(&[k % 3, (k / 3) % 3, 1])).collect();
    let mut m = kmeans_medoids(&distinct, 5, 1).unwrap();
    m.sort_unstable();
    assert_eq!(m, vec![0, 1, 2, 3, 4]);
    assert!(kmeans_medoids(&distinct, 6, 1).is_err());
    assert!(kmeans_medoids(&distinct, 0, 1).is_err());
}

#[test]
fn kmeans_separates_blobs_deterministically() {
    let mut pts = Vec::new();
    for c in 0..3 {
        for k in 0..10 {
            let off = (k as f64 * 0.37).sin() * 0.1;
            pts.push(vec![c as f64 * 10.0 + off, -(c as f64) * 5.0 + off * 0.5]);
        }
    }
    let a = kmeans(&pts, 3, 7, KMEANS_RESTARTS).unwrap();
    let b = kmeans(&pts, 3, 7, KMEANS_RESTARTS).unwrap();
    assert_eq!(a, b);
    for blob in 0..3 {
        let label = a.assignment[blob * 10];
        assert!(a.assignment[blob * 10..blob * 10 + 10].iter().all(|&l| l == label));
    }
    let mut meds: Vec<usize> = a.medoids.iter().map(|m| m / 10).collect();
    meds.sort_unstable();
    assert_eq!(meds, vec![0, 1, 2]);
}
