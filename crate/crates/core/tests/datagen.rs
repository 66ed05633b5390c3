//! Dataset generation: determinism, pair structure, export round trips.

use std::collections::BTreeSet;

use proptest::prelude::*;
use shortcutlab_core::datagen::{
    dataset_digest, export_dataset, generate_dataset, load_dataset, CorrelationMode, CorrelationSpec, FactorCatalog,
    FactorKind, Role, ShapeFamily, SplitSize, SplitSizes,
};

fn catalog(n: usize) -> FactorCatalog {
    let mut c = FactorCatalog::with_counts(ShapeFamily::Animal, &[n, n, 2, 2, 2]);
    c.image_size = 8;
    c
}

fn sizes(train: usize, test: usize) -> SplitSizes {
    SplitSizes { train: SplitSize::PerPair(train), val: SplitSize::PerPair(0), test: SplitSize::PerPair(test) }
}

#[test]
fn animal_full_target_has_one_seen_pair_per_object() {
    let c = FactorCatalog::target_default();
    let corr = CorrelationSpec::color_shape(&c, CorrelationMode::FullyCorrelated).unwrap();
    let pairs = corr.allowed_pairs(&c).unwrap();
    assert_eq!(pairs.len(), 10);
    let objects: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    let attributes: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    assert_eq!((objects.len(), attributes.len()), (10, 10));
}

#[test]
fn source_default_has_fifty_shapes() {
    let c = FactorCatalog::source_default();
    assert_eq!(c.count_of(FactorKind::Shape), Some(50));
    assert_eq!(c.class_counts(), vec![50, 12, 4, 5, 3]);
}

#[test]
fn export_round_trip_preserves_digest() {
    let c = catalog(3);
    let corr = CorrelationSpec::color_shape(&c, CorrelationMode::FullyCorrelated).unwrap();
    let ds = generate_dataset(Role::Target, &c, &corr, &sizes(2, 1), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(format!("{:016x}", dataset_digest(&back)), manifest.digest);
    assert_eq!(back.seen_pairs, ds.seen_pairs);
    assert_eq!(back.train, ds.train);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_a_function_of_the_seed(seed in 0u64..1000, n in 2usize..5) {
        let c = catalog(n);
        let corr = CorrelationSpec::color_shape(&c, CorrelationMode::Uncorrelated).unwrap();
        let a = generate_dataset(Role::Source, &c, &corr, &sizes(1, 1), seed).unwrap();
        let b = generate_dataset(Role::Source, &c, &corr, &sizes(1, 1), seed).unwrap();
        prop_assert_eq!(dataset_digest(&a), dataset_digest(&b));
        let other = generate_dataset(Role::Source, &c, &corr, &sizes(1, 1), seed + 1).unwrap();
        prop_assert_ne!(dataset_digest(&a), dataset_digest(&other));
    }

    #[test]
    fn train_uses_seen_pairs_and_test_covers_the_grid(seed in 0u64..1000, n in 3usize..6, m in 2usize..4, per_pair in 1usize..3) {
        prop_assume!(m < n);
        let c = catalog(n);
        let corr = CorrelationSpec::color_shape(&c, CorrelationMode::SemiCorrelated(m)).unwrap();
        let ds = generate_dataset(Role::Target, &c, &corr, &sizes(per_pair, 1), seed).unwrap();
        prop_assert_eq!(ds.seen_pairs.len(), n * m);
        let seen: BTreeSet<(usize, usize)> = ds.seen_pairs.iter().copied().collect();
        for s in &ds.train {
            prop_assert!(seen.contains(&ds.pair_of(s)));
            prop_assert_eq!(s.pixels.len(), c.pixel_len());
            prop_assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        prop_assert_eq!(ds.train.len(), n * m * per_pair);
        let tested: BTreeSet<(usize, usize)> = ds.test.iter().map(|s| ds.pair_of(s)).collect();
        prop_assert_eq!(tested.len(), n * n);
        for o in 0..n {
            prop_assert_eq!(seen.iter().filter(|p| p.1 == o).count(), m);
        }
    }
}
