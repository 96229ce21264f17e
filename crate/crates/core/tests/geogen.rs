use geoldm::geogen::*;
use proptest::prelude::*;

fn desk() -> ChannelStyle {
    ChannelStyle::desk()
}

#[test]
fn zero_channels_give_all_mud() {
    let style = ChannelStyle {
        n_channels: [0, 0],
        ..desk()
    };
    let g = generate_realization(&style, &ConditioningSet::empty(), 5).unwrap();
    assert!(g.codes().iter().all(|&c| c == MUD));
}

#[test]
fn five_well_points_are_channel() {
    for (style, n) in [(desk(), 32), (ChannelStyle::default(), 64)] {
        let cond = well_conditioning(n, n);
        assert_eq!(cond.len(), 5);
        for seed in 0..20 {
            let g = dataset_member(&style, &cond, seed, 0).unwrap();
            for p in cond.points() {
                assert_eq!(g.get(p.i, p.j), CHANNEL, "seed {seed} at ({}, {})", p.i, p.j);
            }
        }
    }
}

#[test]
fn well_pattern_scales() {
    let p64 = well_pattern(64, 64);
    assert_eq!(p64[0], ("I1", 10, 14));
    let p32 = well_pattern(32, 32);
    assert_eq!(p32[4], ("I3", 16, 16));
    assert_eq!(p32[1], ("P1", 27, 7));
}

fn channel_fraction_band(seeds: &[u64]) -> (f64, f64, f64) {
    let style = desk();
    let cond = well_conditioning(32, 32);
    let fr: Vec<f64> = seeds
        .iter()
        .map(|&s| dataset_member(&style, &cond, s, 0).unwrap().fraction(CHANNEL))
        .collect();
    let mean = fr.iter().sum::<f64>() / fr.len() as f64;
    let lo = fr.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fr.iter().copied().fold(0.0, f64::max);
    (lo, mean, hi)
}

#[test]
fn channel_fraction_band_is_stable() {
    let seeds: Vec<u64> = (1000..1100).collect();
    let a = channel_fraction_band(&seeds);
    let b = channel_fraction_band(&seeds);
    assert_eq!(a, b);
    // Measured on this seed list: channels are present but never dominate.
    let (lo, mean, hi) = a;
    assert!(lo > 0.05 && hi < 0.75, "{a:?}");
    assert!((0.2..0.45).contains(&mean), "{a:?}");
}

#[test]
fn dataset_split_sizes() {
    assert_eq!(split_sizes(4000, (0.7, 0.2, 0.1)).unwrap(), (2800, 800, 400));
    assert_eq!(split_sizes(10, (0.7, 0.2, 0.1)).unwrap(), (7, 2, 1));
    assert!(split_sizes(10, (0.7, 0.2, 0.2)).is_err());
    assert!(split_sizes(10, (1.1, -0.2, 0.1)).is_err());
}

#[test]
fn full_size_dataset_partitions() {
    // Unconditioned so that 4000 realizations stay cheap.
    let ds = build_dataset(&desk(), &ConditioningSet::empty(), 4000, (0.7, 0.2, 0.1), 3).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2800, 800, 400));
}

#[test]
fn small_dataset_is_deterministic_and_disjoint() {
    let cond = well_conditioning(32, 32);
    let a = build_dataset(&desk(), &cond, 10, (0.7, 0.2, 0.1), 42).unwrap();
    let b = build_dataset(&desk(), &cond, 10, (0.7, 0.2, 0.1), 42).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (7, 2, 1));
    let all: Vec<&FaciesGrid> = a.train.iter().chain(&a.val).chain(&a.test).collect();
    // Distinct seeds give distinct grids, so any repeat would mean a
    // realization landed in two partitions.
    let uniq: std::collections::HashSet<&FaciesGrid> = all.iter().copied().collect();
    assert_eq!(uniq.len(), 10);
    let c = build_dataset(&desk(), &cond, 10, (0.7, 0.2, 0.1), 43).unwrap();
    assert_ne!(a, c);
    assert!(build_dataset(&desk(), &cond, 9, (0.7, 0.2, 0.1), 42).is_err());
    assert!(build_dataset(&desk(), &cond, 10, (0.5, 0.2, 0.1), 42).is_err());
}

#[test]
fn conditioning_validation() {
    let p = |i, j, facies| HardPoint { i, j, facies };
    assert!(ConditioningSet::new(vec![p(1, 1, 2), p(1, 1, 0)]).is_err());
    assert!(ConditioningSet::new(vec![p(1, 1, 3)]).is_err());
    let c = ConditioningSet::new(vec![p(40, 1, 2)]).unwrap();
    assert!(generate_realization(&desk(), &c, 0).is_err());
}

#[test]
fn conditioning_text_round_trip() {
    let c = well_conditioning(64, 64);
    assert_eq!(ConditioningSet::parse(&c.to_text()).unwrap(), c);
    let parsed = ConditioningSet::parse("# wells\n 3 4 2\n\n5 6 0 # mud\n").unwrap();
    assert_eq!(parsed.points()[1], HardPoint { i: 5, j: 6, facies: 0 });
    assert!(ConditioningSet::parse("3 4\n").is_err());
}

#[test]
fn infeasible_conditioning_is_reported() {
    // A channel cell demanded where no channel can exist.
    let style = ChannelStyle {
        n_channels: [0, 0],
        ..desk()
    };
    let cond = ConditioningSet::new(vec![HardPoint { i: 3, j: 3, facies: CHANNEL }]).unwrap();
    match generate_with_budget(&style, &cond, 1, 10) {
        Err(GeogenError::ConditioningInfeasible { seed: 1, unmet: 1 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn style_validation() {
    let mut s = desk();
    s.width = [0.5, 2.0];
    assert!(s.validate().is_err());
    let mut s = desk();
    s.n_channels = [4, 2];
    assert!(s.validate().is_err());
    assert!(desk().validate().is_ok());
    assert!(ChannelStyle::default().validate().is_ok());
}

#[test]
fn dataset_file_header() {
    let g = FaciesGrid::new(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let mut buf = Vec::new();
    write_grids(&mut buf, &[g.clone(), g]).unwrap();
    assert_eq!(&buf[..4], b"GGDS");
    let word = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    assert_eq!((word(0), word(1), word(2), word(3)), (1, 2, 3, 2));
    assert_eq!(&buf[20..26], &[0, 1, 2, 2, 1, 0]);
    assert_eq!(buf.len(), 20 + 12);
}

#[test]
fn dataset_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ggds");
    let grids: Vec<FaciesGrid> = (0..4).map(|s| generate_realization(&desk(), &ConditioningSet::empty(), s).unwrap()).collect();
    save_grids(&path, &grids).unwrap();
    assert_eq!(load_grids(&path).unwrap(), grids);
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(load_grids(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn realizations_honor_conditioning_and_are_deterministic(seed in any::<u64>()) {
        let cond = well_conditioning(32, 32);
        match generate_realization(&desk(), &cond, seed) {
            Ok(g) => {
                prop_assert!(cond.honored_by(&g));
                prop_assert_eq!(generate_realization(&desk(), &cond, seed).unwrap(), g);
            }
            Err(GeogenError::ConditioningInfeasible { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn levees_flank_channels(seed in any::<u64>()) {
        let style = desk();
        let g = generate_realization(&style, &ConditioningSet::empty(), seed).unwrap();
        let r = style.levee_halfwidth[1];
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                if g.get(i, j) != LEVEE {
                    continue;
                }
                let near = (j.saturating_sub(r)..(j + r + 1).min(g.ny()))
                    .any(|jj| (i.saturating_sub(r)..(i + r + 1).min(g.nx())).any(|ii| g.get(ii, jj) == CHANNEL));
                prop_assert!(near, "levee at ({}, {}) far from channel", i, j);
            }
        }
    }

    #[test]
    fn grid_file_round_trip(nx in 1usize..6, ny in 1usize..6, n in 0usize..4, seed in any::<u64>()) {
        let grids: Vec<FaciesGrid> = (0..n)
            .map(|k| FaciesGrid::new(nx, ny, (0..nx * ny).map(|c| ((c as u64 ^ seed ^ k as u64) % 3) as u8).collect()).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_grids(&mut buf, &grids).unwrap();
        let back = read_grids(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, grids);
    }
}
