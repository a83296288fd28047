use proptest::prelude::*;
use rand::Rng;
use rrlp_core::error::Error;
use rrlp_core::freezer::NeuronId;
use rrlp_core::memory::{
    check_budget, ensure_budget, herd_select, read_relevance_csv, representatives_needed,
    select_features_mean, write_relevance_csv, ExemplarStore, MemoryBudget, RelevanceDataset,
};
use rrlp_core::tensor::Tensor;

/// Naive herding oracle: literal transcription of the selection rule with no
/// running-sum bookkeeping.
fn oracle_herd(samples: &[Vec<f64>], k: usize) -> Vec<usize> {
    let dim = samples[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| samples.iter().map(|s| s[d]).sum::<f64>() / samples.len() as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (i, _) in samples.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut with: Vec<usize> = chosen.clone();
            with.push(i);
            let dist: f64 = (0..dim)
                .map(|d| {
                    let m = with.iter().map(|&j| samples[j][d]).sum::<f64>() / with.len() as f64;
                    (mean[d] - m) * (mean[d] - m)
                })
                .sum();
            if best.is_none() || dist < best.unwrap().1 {
                best = Some((i, dist));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

#[test]
fn herding_matches_hand_fixture() {
    // Mean of {0, 10, 4} is 14/3; 4 is nearest alone, then adding 10 brings
    // the running mean (7) closer than adding 0 (2) would.
    let samples = vec![vec![0.0], vec![10.0], vec![4.0]];
    assert_eq!(herd_select(&samples, 1).unwrap(), vec![2]);
    assert_eq!(herd_select(&samples, 2).unwrap(), vec![2, 1]);
    assert_eq!(herd_select(&samples, 3).unwrap(), vec![2, 1, 0]);
}

#[test]
fn herding_matches_naive_oracle() {
    for seed in 0..8u64 {
        let mut rng = rrlp_core::rng::rng_from(seed, 41);
        let n = 20 + (seed as usize % 10);
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        for k in [1usize, 5, n / 2, n] {
            assert_eq!(
                herd_select(&samples, k).unwrap(),
                oracle_herd(&samples, k),
                "seed {seed}, k {k}"
            );
        }
    }
}

#[test]
fn herding_ties_go_to_the_lowest_index() {
    let samples = vec![vec![1.0, 0.0]; 4];
    assert_eq!(herd_select(&samples, 3).unwrap(), vec![0, 1, 2]);
}

#[test]
fn herding_rejects_bad_requests() {
    let samples = vec![vec![1.0], vec![2.0]];
    assert!(herd_select(&samples, 0).unwrap().is_empty());
    assert!(matches!(
        herd_select(&samples, 3),
        Err(Error::Input(_))
    ));
    let ragged = vec![vec![1.0], vec![2.0, 3.0]];
    assert!(matches!(
        herd_select(&ragged, 1),
        Err(Error::Dimension(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Selecting k exemplars always yields a prefix of selecting k+1, and
    /// every index appears at most once.
    #[test]
    fn herding_prefix_property(
        flat in prop::collection::vec(-10.0f64..10.0, 6..60),
        k in 1usize..8,
    ) {
        let dim = 3;
        let n = flat.len() / dim;
        prop_assume!(n >= 2);
        let samples: Vec<Vec<f64>> = (0..n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect();
        let k = k.min(n - 1);
        let small = herd_select(&samples, k).unwrap();
        let large = herd_select(&samples, k + 1).unwrap();
        prop_assert_eq!(&small[..], &large[..k]);
        let mut sorted = large.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), large.len());
        prop_assert_eq!(&large, &oracle_herd(&samples, k + 1));
    }
}

#[test]
fn exemplar_store_orders_by_class_then_rank() {
    let mut store = ExemplarStore::new(0, 2);
    let t = |v: f64| Tensor::from_vec(vec![v]).unwrap();
    store.insert_class(3, vec![t(30.0), t(31.0)]).unwrap();
    store.insert_class(1, vec![t(10.0), t(11.0)]).unwrap();
    assert_eq!(store.total(), 4);
    assert_eq!(store.class_count(), 2);
    let flat: Vec<f64> = store.ordered().iter().map(|t| t.values()[0]).collect();
    assert_eq!(flat, vec![10.0, 11.0, 30.0, 31.0]);

    assert!(matches!(
        store.insert_class(5, vec![t(1.0), t(2.0), t(3.0)]),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        store.insert_class(1, vec![t(9.0)]),
        Err(Error::Input(_))
    ));
}

#[test]
fn feature_selection_ranks_by_mean_abs_with_id_tiebreak() {
    let mean_abs = vec![vec![0.5, 0.9], vec![0.9, 0.1]];
    let sel = select_features_mean(0, &mean_abs, 2).unwrap();
    assert_eq!(
        sel.neurons,
        vec![NeuronId { layer: 0, unit: 1 }, NeuronId { layer: 1, unit: 0 }]
    );
    let sel3 = select_features_mean(0, &mean_abs, 3).unwrap();
    assert_eq!(sel3.neurons[2], NeuronId { layer: 0, unit: 0 });
    assert_eq!(sel3.n_f(), 3);
    assert!(matches!(
        select_features_mean(0, &mean_abs, 5),
        Err(Error::Input(_))
    ));
}

#[test]
fn relevance_dataset_tracks_source_groups() {
    let mut ds = RelevanceDataset::new(0, 2);
    ds.append(0, vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    ds.append(1, vec![vec![5.0, 6.0]]).unwrap();
    ds.append(2, vec![vec![7.0, 8.0]]).unwrap();
    assert_eq!(ds.group_count(), 3);
    assert_eq!(ds.rows.len(), 4);
    let own = ds.rows_of(0);
    assert_eq!(own.len(), 2);
    assert_eq!(own[1].features, vec![3.0, 4.0]);
    assert!(ds.rows_of(9).is_empty());
    assert!(matches!(
        ds.append(3, vec![vec![1.0]]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn relevance_csv_round_trips_exactly() {
    let mut ds = RelevanceDataset::new(2, 3);
    let mut rng = rrlp_core::rng::rng_from(0, 42);
    for source in [2usize, 3, 4] {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        ds.append(source, rows).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rel.csv");
    write_relevance_csv(&path, &ds).unwrap();
    let back = read_relevance_csv(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn relevance_csv_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");

    std::fs::write(&path, "wrong,header,f0\n0,0,1.0\n").unwrap();
    assert!(matches!(read_relevance_csv(&path), Err(Error::Format(_))));

    std::fs::write(&path, "task,source_task,f0\n0,0,1.0\n1,1,2.0\n").unwrap();
    assert!(matches!(read_relevance_csv(&path), Err(Error::Format(_))));

    std::fs::write(&path, "task,source_task,f0\n0,0,not_a_number\n").unwrap();
    assert!(matches!(read_relevance_csv(&path), Err(Error::Format(_))));

    std::fs::write(&path, "task,source_task,f0\n").unwrap();
    assert!(matches!(read_relevance_csv(&path), Err(Error::Format(_))));
}

#[test]
fn representatives_follow_the_triangular_series() {
    assert_eq!(representatives_needed(0), 0);
    assert_eq!(representatives_needed(1), 1);
    assert_eq!(representatives_needed(5), 15);
    assert_eq!(representatives_needed(13), 91);
    for t in 1..50 {
        assert_eq!(
            representatives_needed(t),
            representatives_needed(t - 1) + t
        );
    }
}

#[test]
fn budget_check_is_non_strict_and_exact() {
    // 28x28 inputs, 13 tasks, 6 exemplars per class as the raw reference;
    // the stored product sits 182 below it.
    let tight = MemoryBudget {
        n_f: 10,
        n_r: representatives_needed(13),
        s: 67,
        reference: 784 * 13 * 6,
    };
    let report = check_budget(&tight);
    assert!(report.ok);
    assert_eq!(report.product, 60970);
    assert_eq!(report.reference, 61152);

    // Exact equality still passes: the inequality is non-strict.
    let equal = MemoryBudget { n_f: 4, n_r: 5, s: 6, reference: 120 };
    assert!(check_budget(&equal).ok);
    let over = MemoryBudget { n_f: 4, n_r: 5, s: 6, reference: 119 };
    assert!(!check_budget(&over).ok);
    assert!(matches!(
        ensure_budget(&over),
        Err(Error::BudgetViolation(_))
    ));

    // Any +1 on a stored factor of the tight budget tips it over.
    for bumped in [
        MemoryBudget { n_f: 11, ..tight },
        MemoryBudget { n_r: 92, ..tight },
        MemoryBudget { s: 68, ..tight },
    ] {
        assert!(!check_budget(&bumped).ok, "{bumped:?} should violate");
    }
}

#[test]
fn budget_report_prints_both_products() {
    let report = check_budget(&MemoryBudget { n_f: 2, n_r: 3, s: 4, reference: 100 });
    let text = format!("{report}");
    assert!(text.contains("24"));
    assert!(text.contains("100"));
    assert!(text.contains("ok"));
}
