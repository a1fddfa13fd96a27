use std::fs;

use ltvit_core::data::{
    batch_indices, batch_iter, decode_dataset, encode_dataset, gen_synthetic, quadrant_bounds, read_dataset,
    write_dataset, Dataset, Sample, SyntheticConfig,
};
use ltvit_core::{Error, Tensor};
use proptest::prelude::*;

fn clean(labels: usize) -> SyntheticConfig {
    SyntheticConfig {
        labels,
        noise_std: 0.0,
        ..SyntheticConfig::default()
    }
}

#[test]
fn negatives_without_noise_are_blank() {
    let ds = gen_synthetic(300, 1, &clean(4)).unwrap();
    let blank: Vec<&Sample> = ds.samples.iter().filter(|s| s.targets.iter().all(|&t| t == 0)).collect();
    assert!(!blank.is_empty());
    for s in blank {
        assert!(s.image.data().iter().all(|&v| v == 0.0));
        assert!(s.gt_region.iter().all(Option::is_none));
    }
}

#[test]
fn positive_pattern_stays_inside_its_quadrant() {
    let cfg = clean(4);
    let ds = gen_synthetic(400, 2, &cfg).unwrap();
    for s in &ds.samples {
        for k in 0..4 {
            assert_eq!(s.gt_region[k].is_some(), s.targets[k] == 1);
            let (rows, cols) = quadrant_bounds(cfg.height, cfg.width, k);
            let mut lit = 0;
            for i in rows.clone() {
                for j in cols.clone() {
                    let v = s.image.data()[i * cfg.width + j];
                    if v > 0.0 {
                        lit += 1;
                        assert!((0.7..=1.0).contains(&v), "intensity {v}");
                    }
                }
            }
            assert_eq!(lit > 0, s.targets[k] == 1, "label {k}");
        }
    }
}

#[test]
fn low_noise_positives_keep_mass_in_quadrant() {
    let cfg = SyntheticConfig {
        noise_std: 0.05,
        ..SyntheticConfig::default()
    };
    let ds = gen_synthetic(200, 3, &cfg).unwrap();
    let floor = 0.25;
    for s in &ds.samples {
        let positives: Vec<usize> = (0..4).filter(|&k| s.targets[k] == 1).collect();
        if positives.len() != 1 {
            continue;
        }
        let k = positives[0];
        let (rows, cols) = quadrant_bounds(cfg.height, cfg.width, k);
        let (mut inside, mut total) = (0.0, 0.0);
        for (idx, &v) in s.image.data().iter().enumerate() {
            if v > floor {
                total += v;
                if rows.contains(&(idx / cfg.width)) && cols.contains(&(idx % cfg.width)) {
                    inside += v;
                }
            }
        }
        assert!(inside / total >= 0.95, "fraction {}", inside / total);
    }
}

#[test]
fn label_marginals_are_balanced() {
    let ds = gen_synthetic(2000, 4, &SyntheticConfig::default()).unwrap();
    for (k, p) in ds.positives().into_iter().enumerate() {
        let rate = p as f64 / 2000.0;
        assert!((0.45..=0.55).contains(&rate), "label {k} rate {rate}");
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let cfg = SyntheticConfig {
        noise_std: 0.3,
        ..SyntheticConfig::default()
    };
    let a = gen_synthetic(50, 5, &cfg).unwrap();
    let b = gen_synthetic(50, 5, &cfg).unwrap();
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    assert!(a.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    let c = gen_synthetic(50, 6, &cfg).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generator_rejects_bad_configs() {
    let e = gen_synthetic(1, 0, &clean(5)).unwrap_err();
    assert!(e.to_string().contains("labels must be ≤ 4"), "{e}");
    let odd = SyntheticConfig {
        height: 31,
        ..clean(4)
    };
    assert!(matches!(gen_synthetic(1, 0, &odd), Err(Error::Config(_))));
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ltds");
    let ds = gen_synthetic(20, 7, &SyntheticConfig::default()).unwrap();
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);

    let bytes = fs::read(&path).unwrap();
    let short = dir.path().join("short.ltds");
    fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_dataset(&short), Err(Error::Truncated { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_dataset(&magic, &path), Err(Error::BadMagic { .. })));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_dataset(&version, &path), Err(Error::Version { found: 9, .. })));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long, &path), Err(Error::Format { .. })));

    let missing = dir.path().join("nope.ltds");
    let err = read_dataset(&missing).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nope.ltds"));
}

#[test]
fn empty_dataset_round_trips() {
    let ds = gen_synthetic(0, 8, &SyntheticConfig::default()).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(bytes.len(), 16);
    let back = decode_dataset(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, ds);
    assert!(back.is_empty());
}

#[test]
fn batches_examples() {
    let single = batch_indices(5, 10, 3);
    assert_eq!(single.len(), 1);
    let mut sorted = single[0].clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    assert_eq!(batch_indices(37, 8, 9), batch_indices(37, 8, 9));
    assert_ne!(batch_indices(37, 8, 9), batch_indices(37, 8, 10));

    let ds = gen_synthetic(10, 9, &SyntheticConfig::default()).unwrap();
    let sizes: Vec<usize> = batch_iter(&ds, 4, 1).map(|b| b.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..4, 1usize..3, 0usize..4, 1usize..6).prop_flat_map(|(h, w, ch, c, count)| {
        let sample = (
            proptest::collection::vec(0.0f32..=1.0, h * w * ch),
            proptest::collection::vec(0u8..2, c),
            proptest::collection::vec(proptest::option::of(0u8..4), c),
        )
            .prop_map(move |(px, targets, gt_region)| Sample {
                image: Tensor::new(&[h, w, ch], px.into_iter().map(f64::from).collect()).unwrap(),
                targets,
                gt_region,
            });
        proptest::collection::vec(sample, count).prop_map(move |samples| Dataset {
            height: h,
            width: w,
            channels: ch,
            labels: c,
            samples,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn format_round_trip_is_identity(ds in arb_dataset()) {
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn batches_partition_the_dataset(count in 0usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let batches = batch_indices(count, bs, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        for b in batches.iter().take(batches.len().saturating_sub(1)) {
            prop_assert_eq!(b.len(), bs);
        }
    }
}
