//! Binary and text file formats round-trip; the window sampler is uniform.

use diffplan::datagen::{generate_dataset, manifest_path, read_manifest, Dataset, TransitionRecord};
use diffplan::eval::{export_trajectories, read_trajectories, RandomPlanner};
use diffplan::net::NetConfig;
use diffplan::planner::Planner;
use diffplan::schedule::ScheduleKind;
use diffplan::tasks::register_default_suite;
use diffplan::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Episodes of the given lengths with chained states; `a[0]` holds the
/// record's global index so samplers can be audited.
fn synthetic(state_dim: usize, lengths: &[usize], values: &[f64]) -> Dataset {
    let mut records = Vec::new();
    let mut v = values.iter().copied().cycle();
    for (e, &len) in lengths.iter().enumerate() {
        let mut s: Vec<f64> = (0..state_dim).map(|_| v.next().unwrap()).collect();
        for t in 0..len {
            let s_next: Vec<f64> = (0..state_dim).map(|_| v.next().unwrap()).collect();
            records.push(TransitionRecord {
                task: e % 2,
                episode_id: e as u64,
                t,
                s: s.clone(),
                a: vec![records.len() as f64, v.next().unwrap()],
                r: v.next().unwrap(),
                s_next: s_next.clone(),
                done: t + 1 == len,
                success: v.next().unwrap() > 0.0,
            });
            s = s_next;
        }
    }
    Dataset::new(state_dim, 2, vec!["a".into(), "b".into()], records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trips(
        state_dim in 1usize..5,
        lengths in prop::collection::vec(1usize..8, 0..6),
        values in prop::collection::vec(-1e6f64..1e6, 1..40),
    ) {
        let ds = synthetic(state_dim, &lengths, &values);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.write(&path).unwrap();
        prop_assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn checkpoint_round_trips(
        horizon in 1usize..6,
        state_dim in 1usize..5,
        obs_horizon in 1usize..3,
        half_embed in 1usize..5,
        hidden in prop::collection::vec(1usize..12, 0..3),
        seed in any::<u64>(),
    ) {
        let config = NetConfig {
            horizon,
            action_dim: 2,
            obs_horizon,
            state_dim,
            time_embed: 2 * half_embed,
            hidden,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Planner::new(config, ScheduleKind::Cosine, 10, horizon, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        prop_assert_eq!(Planner::load(&path).unwrap(), p);
    }

    #[test]
    fn trajectory_export_round_trips(n in 0usize..5, seed in any::<u64>()) {
        let suite = register_default_suite(12);
        let spec = suite.get("push").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let recs = export_trajectories(&mut RandomPlanner, spec, n, seed, &path).unwrap();
        let back = read_trajectories(&path, spec.state_dim, spec.action_dim).unwrap();
        prop_assert_eq!(back.len(), n);
        for ((e, steps), rec) in back.iter().zip(&recs) {
            prop_assert_eq!(*e, rec.episode);
            prop_assert_eq!(steps, &rec.steps);
        }
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let ds = synthetic(3, &[4, 2], &[0.5, -0.25, 1.5]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    ds.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(Dataset::read(&path), Err(Error::Format(_))));
    std::fs::write(&path, b"not a dataset\n").unwrap();
    assert!(matches!(Dataset::read(&path), Err(Error::Format(_))));
}

#[test]
fn manifest_matches_dataset_stats() {
    let suite = register_default_suite(20);
    let ds = generate_dataset(&suite, 4, 0.5, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = manifest_path(&dir.path().join("d.bin"));
    ds.write_manifest(&path).unwrap();
    let back = read_manifest(&path).unwrap();
    let stats = ds.stats();
    assert_eq!(back.len(), stats.len());
    for (id, s) in &stats {
        assert_eq!(back[id].episodes, s.episodes);
        assert!((back[id].success_rate - s.success_rate).abs() < 1e-12);
        assert!((back[id].mean_return - s.mean_return).abs() < 1e-9);
    }
}

#[test]
fn window_anchors_are_uniform_over_records() {
    let ds = synthetic(2, &[3, 7, 1, 5, 4], &[0.1, 0.2, 0.3]);
    let n = ds.len();
    let mut counts = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 40_000;
    for w in ds.sample_windows(draws, 4, 2, &mut rng).unwrap() {
        counts[w.a_seq.row(0)[0] as usize] += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2:.1} on {} dof, p = {p:.2e}", n - 1);
}

#[test]
fn windows_stay_inside_their_episode() {
    let ds = synthetic(2, &[3, 5], &[0.1, 0.2, 0.3]);
    // Record 4 is t=1 of the second episode (records 3..8).
    let w = ds.window_at(4, 6, 3).unwrap();
    let anchors: Vec<f64> = w.a_seq.to_rows().iter().map(|r| r[0]).collect();
    assert_eq!(anchors, [4.0, 5.0, 6.0, 7.0, 7.0, 7.0]);
    let first = &ds.records()[3].s;
    assert_eq!(&w.s_hist.to_rows()[0], first);
    assert_eq!(&w.s_hist.to_rows()[1], first);
    assert_eq!(&w.s_hist.to_rows()[2], &ds.records()[4].s);
}
