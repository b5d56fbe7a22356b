use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use txfuse::labor::{labor_sample, labor_threshold, ns_sample, Neighborhoods};

/// Seeds 0 and 1 share the neighbors `2..2 + d`.
fn twins(d: usize) -> Neighborhoods {
    let shared: Vec<(usize, f64)> = (2..2 + d).map(|u| (u, 1.0)).collect();
    let mut lists = vec![shared.clone(), shared];
    lists.extend((0..d).map(|_| Vec::new()));
    Neighborhoods::from_lists(lists)
}

fn picked(edges: &[txfuse::labor::SampledEdge], dst: usize) -> BTreeSet<usize> {
    edges.iter().filter(|e| e.dst == dst).map(|e| e.src).collect()
}

#[test]
fn labor_shares_neighbors_where_ns_does_not() {
    let nb = twins(20);
    let mut differ = 0;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for key in 0..1000u64 {
        let l = labor_sample(&nb, &[0, 1], 10, key).unwrap();
        assert_eq!(picked(&l, 0), picked(&l, 1));
        let n = ns_sample(&nb, &[0, 1], 10, &mut r).unwrap();
        differ += usize::from(picked(&n, 0) != picked(&n, 1));
    }
    assert!(differ > 0);
}

#[test]
fn mean_sample_size_at_half_inclusion() {
    let nb = twins(20);
    assert_eq!(labor_threshold(20, 10), 0.5);
    let trials = 100_000u64;
    let total: usize = (0..trials).map(|key| picked(&labor_sample(&nb, &[0], 10, key).unwrap(), 0).len()).sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - 10.0).abs() <= 0.1, "mean {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn importance_is_inverse_inclusion(d in 1usize..40, k in 1usize..40, key in any::<u64>()) {
        let nb = twins(d);
        for e in labor_sample(&nb, &[0], k, key).unwrap() {
            prop_assert!((e.importance * labor_threshold(d, k) - 1.0).abs() < 1e-12);
            prop_assert_eq!(e.weight, 1.0);
        }
    }

    #[test]
    fn samples_stay_inside_the_neighborhood(d in 1usize..30, k in 1usize..30, key in any::<u64>()) {
        let nb = twins(d);
        let l = labor_sample(&nb, &[0, 1], k, key).unwrap();
        prop_assert!(l.iter().all(|e| (2..2 + d).contains(&e.src) && e.dst <= 1));
        if d <= k {
            prop_assert_eq!(picked(&l, 0).len(), d);
        }
    }
}
