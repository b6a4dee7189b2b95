use std::collections::BTreeMap;

use coheat::corpus::{
    gen_synthetic, popularity_counts, read_pairs, split_scenario, write_pairs_to, DatasetBundle, InteractionTable,
    Scenario, ScenarioSplit, SyntheticSpec, DEFAULT_RATIOS,
};
use proptest::prelude::*;

fn synthetic(interactions: usize, seed: u64) -> DatasetBundle {
    gen_synthetic(&SyntheticSpec {
        users: 200,
        bundles: 100,
        items: 300,
        zipf_exponent: 1.2,
        interactions,
        seed,
    })
    .unwrap()
}

fn multiset(t: &InteractionTable) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for &p in t.pairs() {
        *m.entry(p).or_insert(0) += 1;
    }
    m
}

#[test]
fn ten_interactions_warm_split_sizes() {
    let ub = InteractionTable::new((0..10).map(|u| (u, u % 3)), 10, 3).unwrap();
    let bi = InteractionTable::new((0..3).map(|b| (b, 0)), 3, 1).unwrap();
    let data = DatasetBundle::new(ub, InteractionTable::empty(10, 1), bi).unwrap();
    let s = split_scenario(&data, Scenario::Warm, DEFAULT_RATIOS, 7).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
}

#[test]
fn top_decile_holds_most_interactions() {
    for seed in 0..3 {
        let data = synthetic(1000, seed);
        let mut counts = popularity_counts(&data.ub).counts().to_vec();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = counts[..10].iter().sum();
        let total: u64 = counts.iter().sum();
        assert_eq!(total, 1000);
        assert!(top as f64 / total as f64 > 0.5, "seed {seed}: {top}/{total}");
    }
}

#[test]
fn all_split_cold_half_has_no_training_interactions() {
    let data = synthetic(1000, 0);
    let s = split_scenario(&data, Scenario::All, DEFAULT_RATIOS, 3).unwrap();
    let pop = popularity_counts(&s.train);
    let cold_test = s.test.pairs().iter().filter(|p| pop.count(p.1) == 0).count();
    let cold_val = s.val.pairs().iter().filter(|p| pop.count(p.1) == 0).count();
    let holdout = s.val.len() + s.test.len();
    assert!(cold_test > 0 && cold_test < s.test.len());
    // Whole bundles fill at most half of the holdout.
    assert!(cold_test + cold_val <= holdout / 2);
    assert!((cold_test + cold_val) as f64 >= 0.4 * holdout as f64);
    for &(_, b) in s.test.pairs() {
        if s.cold_bundles.contains(&b) {
            assert_eq!(pop.count(b), 0);
        }
    }
}

#[test]
fn synthetic_output_is_reproducible_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synthetic(500, 42).write_dir(a.path()).unwrap();
    synthetic(500, 42).write_dir(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 4);
    for name in names {
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let loaded = DatasetBundle::load_dir(a.path()).unwrap();
    assert_eq!(loaded, synthetic(500, 42));
}

#[test]
fn split_files_round_trip() {
    let data = synthetic(400, 8);
    let dir = tempfile::tempdir().unwrap();
    for sc in [Scenario::Warm, Scenario::Cold, Scenario::All] {
        let s = split_scenario(&data, sc, DEFAULT_RATIOS, 1).unwrap();
        s.write_dir(dir.path()).unwrap();
        assert_eq!(ScenarioSplit::load_dir(dir.path(), sc, data.u_count, data.b_count).unwrap(), s);
    }
}

#[test]
fn crosscbr_layout_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("Toy_data_size.txt"), "3\t2\t2\n").unwrap();
    std::fs::write(p.join("user_bundle_train.txt"), "0\t0\n1\t0\n").unwrap();
    std::fs::write(p.join("user_bundle_tune.txt"), "2\t1\n").unwrap();
    std::fs::write(p.join("user_bundle_test.txt"), "2\t0\n").unwrap();
    std::fs::write(p.join("user_item.txt"), "0\t1\n").unwrap();
    std::fs::write(p.join("bundle_item.txt"), "0\t0\n1\t1\n").unwrap();
    let d = DatasetBundle::load_dir(p).unwrap();
    assert_eq!((d.u_count, d.b_count, d.i_count), (3, 2, 2));
    assert_eq!(d.ub.len(), 4);
}

fn scenario() -> impl Strategy<Value = Scenario> {
    prop::sample::select(vec![Scenario::Warm, Scenario::Cold, Scenario::All])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_partition(data_seed in 0u64..50, split_seed in any::<u64>(), sc in scenario()) {
        let data = synthetic(600, data_seed);
        let s = split_scenario(&data, sc, DEFAULT_RATIOS, split_seed).unwrap();
        let mut merged = multiset(&s.train);
        for t in [&s.val, &s.test] {
            for (p, n) in multiset(t) {
                *merged.entry(p).or_insert(0) += n;
            }
        }
        prop_assert_eq!(merged, multiset(&data.ub));
        let pop = popularity_counts(&s.train);
        prop_assert_eq!(&s.warm_bundles, &pop.warm_bundles());
        prop_assert_eq!(&s.cold_bundles, &pop.cold_bundles());
    }

    #[test]
    fn cold_test_bundles_never_train(data_seed in 0u64..50, split_seed in any::<u64>()) {
        let data = synthetic(600, data_seed);
        let s = split_scenario(&data, Scenario::Cold, DEFAULT_RATIOS, split_seed).unwrap();
        let pop = popularity_counts(&s.train);
        for &(_, b) in s.test.pairs().iter().chain(s.val.pairs()) {
            prop_assert_eq!(pop.count(b), 0);
        }
    }

    #[test]
    fn split_is_deterministic(split_seed in any::<u64>(), sc in scenario()) {
        let data = synthetic(300, 1);
        let a = split_scenario(&data, sc, DEFAULT_RATIOS, split_seed).unwrap();
        let b = split_scenario(&data, sc, DEFAULT_RATIOS, split_seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn write_then_read_is_identity(pairs in prop::collection::vec((0usize..30, 0usize..20), 0..100)) {
        let t = InteractionTable::new(pairs, 30, 20).unwrap();
        let mut buf = Vec::new();
        write_pairs_to(&t, &mut buf).unwrap();
        prop_assert_eq!(read_pairs(buf.as_slice(), 30, 20).unwrap(), t);
    }
}
