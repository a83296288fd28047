use proptest::prelude::*;
use rand::Rng;
use rrlp_core::dataio::{
    apply_normalization, compute_normalization, load_checkpoint, load_idx, make_blobs,
    resolve_path, resolve_source, save_checkpoint, split_tasks, BlobSpec, Checkpoint,
    DatasetSource, TaskSplit, IMAGES_MAGIC, LABELS_MAGIC,
};
use rrlp_core::error::Error;
use rrlp_core::freezer::{freeze_task, FreezeState, NeuronId};
use rrlp_core::lrp::LrpConfig;
use rrlp_core::memory::{FeatureSelection, RelevanceDataset};
use rrlp_core::nncore::{LayerDef, Network};
use rrlp_core::taskinfer::{chain_fit, ForestConfig};
use rrlp_core::tensor::Tensor;
use std::path::Path;

fn idx_pair(images: &[u8], labels: &[u8]) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (dir, ip, lp)
}

fn valid_images() -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend(IMAGES_MAGIC.to_be_bytes());
    bytes.extend(2u32.to_be_bytes()); // two samples
    bytes.extend(2u32.to_be_bytes()); // 2x2 pixels
    bytes.extend(2u32.to_be_bytes());
    bytes.extend([0u8, 51, 102, 153, 204, 255, 0, 255]);
    bytes
}

fn valid_labels() -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend(LABELS_MAGIC.to_be_bytes());
    bytes.extend(2u32.to_be_bytes());
    bytes.extend([1u8, 0]);
    bytes
}

#[test]
fn idx_parsing_scales_pixels_and_shapes_tensors() {
    let (_d, ip, lp) = idx_pair(&valid_images(), &valid_labels());
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.input_shape, vec![1, 2, 2]);
    assert_eq!(ds.labels, vec![1, 0]);
    assert_eq!(ds.n_classes, 2);
    assert_eq!(
        ds.inputs[0].values(),
        &[0.0, 51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0]
    );
    assert_eq!(ds.inputs[1].values()[0], 204.0 / 255.0);
}

/// Corrupting any of the first eight header bytes (magic + count) must be
/// rejected, for both files of the pair.
#[test]
fn idx_rejects_every_corrupted_header_byte()
{
    for pos in 0..8usize {
        let mut images = valid_images();
        images[pos] ^= 0xFF;
        let (_d, ip, lp) = idx_pair(&images, &valid_labels());
        assert!(
            load_idx(&ip, &lp).is_err(),
            "flipping images byte {pos} went unnoticed"
        );

        let mut labels = valid_labels();
        labels[pos] ^= 0xFF;
        let (_d2, ip2, lp2) = idx_pair(&valid_images(), &labels);
        assert!(
            load_idx(&ip2, &lp2).is_err(),
            "flipping labels byte {pos} went unnoticed"
        );
    }
}

#[test]
fn idx_rejects_truncation_trailing_bytes_and_count_mismatch() {
    let (_d, ip, lp) = idx_pair(&valid_images()[..20], &valid_labels());
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));

    let mut long = valid_images();
    long.push(7);
    let (_d, ip, lp) = idx_pair(&long, &valid_labels());
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));

    let mut labels3 = valid_labels();
    labels3[7] = 3; // claims three labels
    labels3.push(1);
    let (_d, ip, lp) = idx_pair(&valid_images(), &labels3);
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));

    let (_d, ip, lp) = idx_pair(&[], &valid_labels());
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));
}

#[test]
fn blobs_are_deterministic_and_centered() {
    let spec = BlobSpec {
        classes: 3,
        dims: 2,
        train_per_class: 200,
        test_per_class: 50,
        spread: 0.2,
        seed: 5,
        centers: Some(vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]]),
        center_box: 5.0,
    };
    let a = make_blobs(&spec, 200, 0).unwrap();
    let b = make_blobs(&spec, 200, 0).unwrap();
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.len(), 600);
    assert_eq!(a.input_shape, vec![2]);

    // Class means land near the requested centers.
    for (class, center) in spec.centers.as_ref().unwrap().iter().enumerate() {
        let points: Vec<&Tensor> = a
            .inputs
            .iter()
            .zip(&a.labels)
            .filter(|(_, &l)| l == class)
            .map(|(x, _)| x)
            .collect();
        assert_eq!(points.len(), 200);
        for d in 0..2 {
            let mean: f64 =
                points.iter().map(|p| p.values()[d]).sum::<f64>() / points.len() as f64;
            assert!((mean - center[d]).abs() < 0.1, "class {class} dim {d}: {mean}");
        }
    }

    // A different stream draws different points around the same centers.
    let c = make_blobs(&spec, 200, 1).unwrap();
    assert_ne!(a.inputs, c.inputs);
}

#[test]
fn blob_spec_validation_catches_mistakes() {
    let mut spec = BlobSpec::default();
    spec.classes = 1;
    assert!(matches!(make_blobs(&spec, 10, 0), Err(Error::Config(_))));
    let mut spec = BlobSpec::default();
    spec.dims = 0;
    assert!(matches!(make_blobs(&spec, 10, 0), Err(Error::Config(_))));
    let mut spec = BlobSpec::default();
    spec.centers = Some(vec![vec![0.0]]);
    assert!(matches!(make_blobs(&spec, 10, 0), Err(Error::Config(_))));
}

#[test]
fn blob_source_shares_centers_across_splits() {
    let spec = BlobSpec {
        classes: 2,
        dims: 2,
        train_per_class: 300,
        test_per_class: 300,
        spread: 0.1,
        seed: 9,
        centers: None,
        center_box: 4.0,
    };
    let (train, test) = resolve_source(&DatasetSource::SyntheticBlobs(spec)).unwrap();
    assert_ne!(train.inputs, test.inputs);
    for class in 0..2 {
        for d in 0..2 {
            let mean_of = |ds: &rrlp_core::dataio::LabeledDataset| {
                let pts: Vec<f64> = ds
                    .inputs
                    .iter()
                    .zip(&ds.labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(x, _)| x.values()[d])
                    .collect();
                pts.iter().sum::<f64>() / pts.len() as f64
            };
            assert!(
                (mean_of(&train) - mean_of(&test)).abs() < 0.05,
                "class {class} dim {d} drifted between splits"
            );
        }
    }
}

#[test]
fn schedule_slices_class_order_into_groups() {
    let split = TaskSplit::from_schedule(&[3, 1, 4, 0, 2], &[2, 3]).unwrap();
    assert_eq!(split.groups, vec![vec![3, 1], vec![4, 0, 2]]);
    assert!(split.validate(5).is_ok());
    assert!(matches!(
        TaskSplit::from_schedule(&[0, 1], &[2, 1]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        TaskSplit::from_schedule(&[0, 1], &[2, 0]),
        Err(Error::Config(_))
    ));

    let dup = TaskSplit { groups: vec![vec![0, 1], vec![1]] };
    assert!(matches!(dup.validate(2), Err(Error::Config(_))));
    let missing = TaskSplit { groups: vec![vec![0]] };
    assert!(matches!(missing.validate(2), Err(Error::Config(_))));
    let oob = TaskSplit { groups: vec![vec![0, 7]] };
    assert!(matches!(oob.validate(2), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Splitting relabels every sample exactly once, bijectively per task.
    #[test]
    fn task_split_is_a_label_bijection(seed in 0u64..500, tasks in 2usize..5) {
        let classes = tasks * 2;
        let spec = BlobSpec {
            classes,
            dims: 2,
            train_per_class: 8,
            test_per_class: 4,
            spread: 1.0,
            seed,
            centers: None,
            center_box: 5.0,
        };
        let (train, test) = resolve_source(&DatasetSource::SyntheticBlobs(spec)).unwrap();
        // Deterministically shuffled class order derived from the seed.
        let mut order: Vec<usize> = (0..classes).collect();
        let mut rng = rrlp_core::rng::rng_from(seed, 71);
        for i in (1..classes).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let split = TaskSplit::from_schedule(&order, &vec![2; tasks]).unwrap();
        let data = split_tasks(&train, &test, &split).unwrap();

        prop_assert_eq!(data.len(), tasks);
        let mut train_total = 0usize;
        for td in &data {
            prop_assert_eq!(td.classes.len(), 2);
            train_total += td.train.len();
            for s in &td.train {
                prop_assert!(s.label < 2);
            }
            // Local labels map back onto the global ids of this task.
            for (local, &global) in td.classes.iter().enumerate() {
                prop_assert_eq!(td.local_label(global), Some(local));
                let count = td.train.iter().filter(|s| s.label == local).count();
                prop_assert_eq!(count, 8);
                let original = train
                    .labels
                    .iter()
                    .filter(|&&l| l == global)
                    .count();
                prop_assert_eq!(count, original);
            }
        }
        prop_assert_eq!(train_total, train.len());
        let test_total: usize = data.iter().map(|td| td.test.len()).sum();
        prop_assert_eq!(test_total, test.len());
    }
}

#[test]
fn normalization_standardizes_per_channel() {
    let a = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]).unwrap();
    let b = Tensor::new(vec![2, 1, 2], vec![5.0, 7.0, 50.0, 70.0]).unwrap();
    let norm = compute_normalization(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(norm.mean, vec![4.0, 40.0]);

    let mut batch = [a, b];
    apply_normalization(&norm, &mut batch);
    for c in 0..2 {
        let vals: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.values()[c * 2..(c + 1) * 2].to_vec())
            .collect();
        let mean: f64 = vals.iter().sum::<f64>() / 4.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    assert!(matches!(
        compute_normalization(&[]),
        Err(Error::Input(_))
    ));
    // Constant channels keep a floor on std instead of dividing by zero.
    let flat = Tensor::from_vec(vec![2.0, 2.0]).unwrap();
    let n = compute_normalization(&[flat]).unwrap();
    assert!(n.std[0] > 0.0);
}

#[test]
fn absolute_paths_bypass_the_data_dir() {
    let p = Path::new("/tmp/somewhere/images.idx");
    assert_eq!(resolve_path(p), p);
}

fn populated_checkpoint() -> Checkpoint {
    let defs = [
        LayerDef::Dense { output: 8 },
        LayerDef::Relu,
        LayerDef::Dense { output: 6 },
        LayerDef::Relu,
    ];
    let mut net = Network::seeded(vec![4], &defs, 33).unwrap();
    net.add_head(0, 2).unwrap();
    net.add_head(1, 3).unwrap();

    let freeze = FreezeState::new(&net);
    let freeze = freeze_task(
        &freeze,
        &[NeuronId { layer: 0, unit: 1 }, NeuronId { layer: 1, unit: 2 }],
        0,
    )
    .unwrap();
    let freeze = freeze_task(&freeze, &[NeuronId { layer: 0, unit: 5 }], 1).unwrap();

    let selections = vec![
        FeatureSelection {
            task: 0,
            neurons: vec![NeuronId { layer: 0, unit: 1 }, NeuronId { layer: 1, unit: 2 }],
        },
        FeatureSelection {
            task: 1,
            neurons: vec![NeuronId { layer: 0, unit: 5 }, NeuronId { layer: 0, unit: 0 }],
        },
    ];

    let mut rng = rrlp_core::rng::rng_from(2, 81);
    let mut ds0 = RelevanceDataset::new(0, 2);
    ds0.append(0, (0..6).map(|_| vec![rng.random_range(2.0..3.0), 1.0]).collect())
        .unwrap();
    ds0.append(1, (0..6).map(|_| vec![rng.random_range(0.0..1.0), 0.0]).collect())
        .unwrap();
    let mut ds1 = RelevanceDataset::new(1, 2);
    ds1.append(1, (0..6).map(|_| vec![rng.random_range(2.0..3.0), 1.0]).collect())
        .unwrap();
    let chain = chain_fit(
        &[ds0, ds1],
        &ForestConfig { n_trees: 10, max_depth: 4, min_samples_leaf: 1, seed: 3 },
    )
    .unwrap();

    Checkpoint {
        network: net,
        freeze,
        selections,
        chain: Some(chain),
        normalization: Some(rrlp_core::dataio::Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        }),
        lrp: LrpConfig { epsilon: 1e-5 },
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let ckpt = populated_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    // Saving the loaded copy reproduces the file byte for byte.
    let path2 = dir.path().join("again.bin");
    save_checkpoint(&path2, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn minimal_checkpoint_round_trips_too() {
    let mut net = Network::seeded(vec![3], &[LayerDef::Dense { output: 4 }], 1).unwrap();
    net.add_head(0, 2).unwrap();
    let freeze = FreezeState::new(&net);
    let ckpt = Checkpoint {
        network: net,
        freeze,
        selections: Vec::new(),
        chain: None,
        normalization: None,
        lrp: LrpConfig::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("min.bin");
    save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn checkpoint_rejects_corruption() {
    let ckpt = populated_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    save_checkpoint(&path, &ckpt).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let bad_magic = {
        let mut b = bytes.clone();
        b[0] = b'X';
        b
    };
    std::fs::write(&path, bad_magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    let bad_version = {
        let mut b = bytes.clone();
        b[4] = 99;
        b
    };
    std::fs::write(&path, bad_version).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
