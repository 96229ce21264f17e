use geoldm::diffusion::{Ldm, LatentPrior, ScheduleConfig, UNet, UNetArch};
use geoldm::geogen::{ConditioningSet, FaciesGrid, HardPoint, CHANNEL, LEVEE, MUD};
use geoldm::metrics::*;
use geoldm::vae::{Vae, VaeArch};
use proptest::prelude::*;

fn grid_from(nx: usize, ny: usize, f: impl Fn(usize, usize) -> u8) -> FaciesGrid {
    let codes = (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j))).map(|(i, j)| f(i, j)).collect();
    FaciesGrid::new(nx, ny, codes).unwrap()
}

fn arb_grid(nx: usize, ny: usize) -> impl Strategy<Value = FaciesGrid> {
    proptest::collection::vec(0u8..3, nx * ny).prop_map(move |c| FaciesGrid::new(nx, ny, c).unwrap())
}

/// Enumerates every ordered cell pair and keeps those at the lag.
fn brute_two_point(g: &FaciesGrid, f: u8, (dx, dy): (usize, usize), l: usize) -> f64 {
    let mut both = 0;
    let mut refs = 0;
    for j1 in 0..g.ny() {
        for i1 in 0..g.nx() {
            for j2 in 0..g.ny() {
                for i2 in 0..g.nx() {
                    if i2 as isize - i1 as isize != (l * dx) as isize || j2 as isize - j1 as isize != (l * dy) as isize {
                        continue;
                    }
                    if g.get(i1, j1) == f {
                        refs += 1;
                        if g.get(i2, j2) == f {
                            both += 1;
                        }
                    }
                }
            }
        }
    }
    if refs == 0 {
        0.0
    } else {
        both as f64 / refs as f64
    }
}

/// Window-by-window SSIM from the textbook formula.
fn ssim_oracle(a: &[f64], b: &[f64], nx: usize, ny: usize, range: f64) -> f64 {
    let k = 7.min(nx).min(ny);
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let mut vals = Vec::new();
    for j0 in 0..=ny - k {
        for i0 in 0..=nx - k {
            let cells: Vec<usize> = (j0..j0 + k).flat_map(|j| (i0..i0 + k).map(move |i| j * nx + i)).collect();
            let n = cells.len() as f64;
            let mu_a = cells.iter().map(|&c| a[c]).sum::<f64>() / n;
            let mu_b = cells.iter().map(|&c| b[c]).sum::<f64>() / n;
            let var_a = cells.iter().map(|&c| (a[c] - mu_a).powi(2)).sum::<f64>() / n;
            let var_b = cells.iter().map(|&c| (b[c] - mu_b).powi(2)).sum::<f64>() / n;
            let cov = cells.iter().map(|&c| (a[c] - mu_a) * (b[c] - mu_b)).sum::<f64>() / n;
            vals.push((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn sorted_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 == v.len() || h == lo as f64 {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
    }
}

#[test]
fn checkerboard_two_point() {
    let g = grid_from(8, 8, |i, j| ((i + j) % 2) as u8);
    let c = two_point_curve(&g, MUD, (1, 0), 4).unwrap();
    assert_eq!(c.prob, vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    let d = two_point_curve(&g, MUD, (1, 1), 3).unwrap();
    assert_eq!(d.prob, vec![1.0; 4]);
}

#[test]
fn uniform_grid_two_point() {
    let g = FaciesGrid::filled(16, 16, CHANNEL).unwrap();
    for dir in [(1, 0), (1, 1), (0, 1)] {
        let c = two_point_curve(&g, CHANNEL, dir, 10).unwrap();
        assert!(c.prob.iter().all(|&p| p == 1.0));
        let m = two_point_curve(&g, MUD, dir, 10).unwrap();
        assert_eq!(m.prob[0], 1.0);
        assert!(m.prob[1..].iter().all(|&p| p == 0.0));
    }
}

#[test]
fn two_point_errors() {
    let g = FaciesGrid::filled(8, 8, MUD).unwrap();
    assert!(two_point_curve(&g, MUD, (1, 0), 8).is_err());
    assert!(two_point_curve(&g, MUD, (0, 0), 2).is_err());
    assert!(two_point_probability(&[], MUD, (1, 0), 2).is_err());
}

#[test]
fn envelope_and_coverage() {
    let grids = vec![
        grid_from(8, 8, |i, _| (i % 2) as u8),
        FaciesGrid::filled(8, 8, MUD).unwrap(),
    ];
    let s = two_point_probability(&grids, MUD, (1, 0), 3).unwrap();
    assert_eq!(s.curves.len(), 2);
    assert_eq!(s.mean, vec![1.0, 0.5, 1.0, 0.5]);
    assert_eq!(s.min, vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(s.max, vec![1.0; 4]);
    assert_eq!(envelope_coverage(&[1.0, 0.2, 1.1, -0.1], &s.min, &s.max).unwrap(), 0.5);
    assert!(envelope_coverage(&[1.0], &s.min, &s.max).is_err());
    assert_eq!(two_point_csv(&s.mean).lines().nth(2), Some("1,0.5"));
}

proptest! {
    #[test]
    fn two_point_matches_pair_enumeration(g in arb_grid(7, 6), f in 0u8..3, diag in any::<bool>()) {
        let dir = if diag { (1, 1) } else { (1, 0) };
        let c = two_point_curve(&g, f, dir, 5).unwrap();
        prop_assert_eq!(c.prob[0], 1.0);
        for l in 1..=5 {
            prop_assert_eq!(c.prob[l], brute_two_point(&g, f, dir, l));
            prop_assert!((0.0..=1.0).contains(&c.prob[l]));
        }
        let again = two_point_curve(&g, f, dir, 5).unwrap();
        prop_assert_eq!(again, c);
    }

    #[test]
    fn lag_zero_fractions_sum_to_one(g in arb_grid(9, 5)) {
        let s = g.fraction(MUD) + g.fraction(LEVEE) + g.fraction(CHANNEL);
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(
        a in proptest::collection::vec(-1.0f64..1.0, 100),
        b in proptest::collection::vec(-1.0f64..1.0, 100),
    ) {
        let ab = ssim(&a, &b, 10, 10, 2.0).unwrap();
        let ba = ssim(&b, &a, 10, 10, 2.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ssim_oracle(&a, &b, 10, 10, 2.0)).abs() < 1e-9);
        prop_assert!((ssim(&a, &a, 10, 10, 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percentiles_match_sort_oracle(values in proptest::collection::vec(-1e3f64..1e3, 1..300), p in 0.0f64..=100.0) {
        let mut v = values.clone();
        prop_assert_eq!(percentile_in_place(&mut v, p).unwrap(), sorted_percentile(&values, p));
    }

    #[test]
    fn band_is_ordered(series in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..40)) {
        let band = percentile_curves(&series, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        for k in 0..4 {
            prop_assert!(band.p10[k] <= band.p50[k] && band.p50[k] <= band.p90[k]);
        }
    }
}

#[test]
fn ssim_fixed_patterns_match_oracle() {
    let a: Vec<f64> = (0..64).map(|c| ((c % 8) as f64 / 7.0) * 2.0 - 1.0).collect();
    let b: Vec<f64> = (0..64).map(|c| (((c / 8) * 3 + c % 8) % 3) as f64 - 1.0).collect();
    let got = ssim(&a, &b, 8, 8, 2.0).unwrap();
    assert!((got - ssim_oracle(&a, &b, 8, 8, 2.0)).abs() < 1e-9);
    assert!((ssim(&a, &a, 8, 8, 2.0).unwrap() - 1.0).abs() < 1e-12);
    let small: Vec<f64> = (0..20).map(|c| (c as f64).cos()).collect();
    let other: Vec<f64> = (0..20).map(|c| (c as f64 * 1.3).sin()).collect();
    assert!((ssim(&small, &other, 5, 4, 2.0).unwrap() - ssim_oracle(&small, &other, 5, 4, 2.0)).abs() < 1e-9);
    assert!(ssim(&a, &b[..60], 8, 8, 2.0).is_err());
}

#[test]
fn ssim_on_grids() {
    let a = grid_from(16, 16, |i, j| ((i / 3 + j / 5) % 3) as u8);
    let b = grid_from(16, 16, |i, j| ((i / 4 + j / 5) % 3) as u8);
    assert_eq!(ssim_grids(&a, &a).unwrap(), 1.0);
    let v = ssim_grids(&a, &b).unwrap();
    assert!(v < 1.0 && v > -1.0);
    assert!(ssim_grids(&a, &FaciesGrid::filled(8, 8, MUD).unwrap()).is_err());
}

#[test]
fn percentile_examples() {
    let same = vec![vec![1.0, 2.0, 3.0]; 5];
    let band = percentile_curves(&same, &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(band.p10, vec![1.0, 2.0, 3.0]);
    assert_eq!(band.p50, band.p10);
    assert_eq!(band.p90, band.p10);

    let three = vec![vec![1.0], vec![3.0], vec![2.0]];
    assert_eq!(percentile_curves(&three, &[0.0]).unwrap().p50, vec![2.0]);

    // 200 series at one time against the sort oracle
    let series: Vec<Vec<f64>> = (0..200).map(|r| vec![((r * 7919) % 211) as f64 * 0.37 - 20.0]).collect();
    let band = percentile_curves(&series, &[5.0]).unwrap();
    let col: Vec<f64> = series.iter().map(|s| s[0]).collect();
    assert_eq!(band.p10[0], sorted_percentile(&col, 10.0));
    assert_eq!(band.p50[0], sorted_percentile(&col, 50.0));
    assert_eq!(band.p90[0], sorted_percentile(&col, 90.0));
    assert!(band_csv(&band).starts_with("time,p10,p50,p90\n5,"));

    assert!(percentile_curves(&[], &[0.0]).is_err());
    assert!(percentile_curves(&[vec![1.0]], &[0.0, 1.0]).is_err());
}

#[test]
fn hard_data_accuracy_counts_pairs() {
    let cond = ConditioningSet::new(vec![
        HardPoint { i: 1, j: 1, facies: CHANNEL },
        HardPoint { i: 3, j: 2, facies: CHANNEL },
    ])
    .unwrap();
    let good = FaciesGrid::filled(4, 4, CHANNEL).unwrap();
    let mut grids = vec![good.clone(); 10];
    assert_eq!(hard_data_accuracy(&grids, &cond).unwrap(), 1.0);
    grids[4] = grid_from(4, 4, |i, _| if i == 3 { MUD } else { CHANNEL });
    assert_eq!(hard_data_accuracy(&grids, &cond).unwrap(), 0.95);
    let tiny = vec![FaciesGrid::filled(2, 2, CHANNEL).unwrap()];
    assert!(hard_data_accuracy(&tiny, &cond).is_err());
}

#[test]
fn interpolation_curve_lengths() {
    let vae = Vae::new(VaeArch::desk(), 1).unwrap();
    let unet = UNet::new(
        UNetArch {
            latent_channels: 1,
            nx: 4,
            ny: 4,
            widths: [8, 16],
        },
        2,
    )
    .unwrap();
    let ldm = Ldm::new(
        vae,
        unet,
        ScheduleConfig {
            steps: 50,
            ..ScheduleConfig::default()
        },
        None,
    )
    .unwrap();
    let xi = ldm.draw_latents(2, LatentPrior::Standard, 3).unwrap();
    let a = xi.select_batch(&[0]).unwrap();
    let b = xi.select_batch(&[1]).unwrap();
    let c = interpolation_stability(&ldm, &a, &b, 0.05, 10).unwrap();
    assert_eq!(c.deltas.len(), 21);
    assert_eq!(c.anchored.len(), 21);
    assert_eq!(c.consecutive.len(), 20);
    assert_eq!(c.anchored[0], 1.0);
    assert_eq!(c.models[0], ldm.generate(&a, 10).unwrap()[0]);
    assert_eq!(c.models[20], ldm.generate(&b, 10).unwrap()[0]);
    assert!(interpolation_stability(&ldm, &a, &b, 0.0, 10).is_err());
}
