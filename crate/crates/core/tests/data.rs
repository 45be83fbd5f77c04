use std::fs;
use std::path::Path;

use nlct::data::{
    extract_patches, generate_phantom, simulate_low_dose, write_dataset, Dataset, DatasetConfig, DoseModel, Role,
    SlicePair, Split, AIR_HU,
};
use nlct::io::{decode_nlt1, encode_nlt1, read_nlt1, write_nlt1};
use nlct::metrics::{hu_window, HuWindow};
use nlct::{Error, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn air_fraction_stays_between_20_and_70_percent() {
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for seed in 0..100 {
        let p = generate_phantom(seed, 64, 64, 2).unwrap();
        let air = p.clean.data().iter().filter(|&&v| v == AIR_HU).count() as f64 / p.clean.len() as f64;
        lo = lo.min(air);
        hi = hi.max(air);
    }
    assert!(lo >= 0.2 && hi <= 0.7, "air fraction range [{lo}, {hi}]");
}

#[test]
fn lesion_contrast_matches_requested_value() {
    for seed in 0..30 {
        let p = generate_phantom(seed, 64, 64, 2).unwrap();
        let lesion = p.geometry.lesion;
        let r = lesion.region_pair(64, 64).unwrap();
        let mean = |m: &[bool]| {
            let v: Vec<f64> = p
                .clean
                .data()
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let measured = mean(&r.foreground) - mean(&r.background);
        assert!(
            (measured - lesion.contrast_hu as f64).abs() <= 1.0,
            "seed {seed}: measured {measured}, requested {}",
            lesion.contrast_hu
        );
    }
}

#[test]
fn geometry_masks_tile_the_rendered_image() {
    for seed in 0..10 {
        let p = generate_phantom(seed, 48, 56, 3).unwrap();
        let g = &p.geometry;
        assert_eq!(g.render(), p.clean);
        // Every pixel shows the HU of the last primitive covering it, or air.
        for i in 0..48 * 56 {
            let (x, y) = ((i % 56) as f64, (i / 56) as f64);
            let want = g
                .primitives
                .iter()
                .rev()
                .find(|q| q.shape.contains(x, y))
                .map_or(AIR_HU, |q| q.hu);
            assert_eq!(p.clean.data()[i], want);
        }
        let lesion = g.primitives.iter().find(|q| q.role == Role::Lesion).unwrap();
        assert!((lesion.hu - g.host().hu - g.lesion.contrast_hu).abs() < 1e-4);
    }
}

#[test]
fn zero_noise_limit_is_exact() {
    let p = generate_phantom(4, 64, 64, 2).unwrap();
    let d = DoseModel {
        dose_factor: 1.0,
        gain: 0.0,
        floor: 0.0,
        seed: 9,
    };
    assert_eq!(simulate_low_dose(&p.clean, &d).unwrap(), p.clean);
}

fn sample_variance(x: &Tensor<f32>, mean: f64) -> f64 {
    x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / x.len() as f64
}

#[test]
fn halving_dose_doubles_signal_variance() {
    // Uniform 0 HU image, no floor, so the variance is the signal term alone.
    let clean = Tensor::<f32>::zeros(&[1, 1000, 100]);
    let base = DoseModel {
        dose_factor: 0.5,
        gain: 300.0,
        floor: 0.0,
        seed: 1,
    };
    let half = DoseModel {
        dose_factor: 0.25,
        seed: 2,
        ..base
    };
    let v1 = sample_variance(&simulate_low_dose(&clean, &base).unwrap(), 0.0);
    let v2 = sample_variance(&simulate_low_dose(&clean, &half).unwrap(), 0.0);
    let ratio = v2 / v1;
    assert!((ratio - 2.0).abs() <= 0.1, "variance ratio {ratio}");
    let expected = 300.0 * (1000.0 / 1400.0) / 0.5;
    assert!((v1 / expected - 1.0).abs() <= 0.05, "variance {v1} vs {expected}");
}

#[test]
fn dense_tissue_is_noisier_than_air() {
    let mut img = vec![AIR_HU; 200 * 100];
    img[100 * 100..].iter_mut().for_each(|v| *v = 300.0);
    let clean = Tensor::new(&[1, 200, 100], img).unwrap();
    let noisy = simulate_low_dose(&clean, &DoseModel::default()).unwrap();
    let (air, dense) = noisy.data().split_at(100 * 100);
    let sd = |xs: &[f32], m: f64| (xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    assert!(sd(dense, 300.0) > sd(air, -1000.0));
}

fn noise_pair() -> SlicePair {
    let p = generate_phantom(8, 64, 64, 2).unwrap();
    let noisy = simulate_low_dose(&p.clean, &DoseModel::default()).unwrap();
    let w = HuWindow::default();
    SlicePair::new("x", hu_window(&p.clean, &w), hu_window(&noisy, &w)).unwrap()
}

#[test]
fn patches_are_crops_of_the_full_images() {
    let pair = noise_pair();
    let b = extract_patches(&pair, 10, 24, 5).unwrap();
    for (k, &(y, x)) in b.offsets.iter().enumerate() {
        for r in 0..24 {
            for c in 0..24 {
                let i = k * 576 + r * 24 + c;
                let j = (y + r) * 64 + x + c;
                assert_eq!(b.clean.data()[i], pair.clean.data()[j]);
                let field = pair.noisy.data()[j] - pair.clean.data()[j];
                assert_eq!(b.noisy.data()[i] - b.clean.data()[i], field);
            }
        }
    }
}

#[test]
fn patch_offsets_pass_chi_square() {
    // 16x16 slice, 12x12 crops: 25 equally likely offsets.
    let clean = Tensor::<f32>::zeros(&[1, 16, 16]);
    let pair = SlicePair::new("u", clean.clone(), clean).unwrap();
    let draws = 10_000;
    let b = extract_patches(&pair, draws, 12, 77).unwrap();
    let mut counts = [0f64; 25];
    for &(y, x) in &b.offsets {
        counts[y * 5 + x] += 1.0;
    }
    let expected = draws as f64 / 25.0;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(24.0).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi2 {stat} >= {critical}");
}

#[test]
fn oversized_patch_is_a_config_error() {
    let pair = noise_pair();
    assert!(matches!(extract_patches(&pair, 1, 65, 0), Err(Error::Config(_))));
}

#[test]
fn nlt1_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nlt1");
    let t = Tensor::new(&[2, 3], vec![f32::MIN_POSITIVE, -0.0, 1e30, f32::EPSILON, -7.25, 3.0]).unwrap();
    write_nlt1(&path, &t).unwrap();
    let back = read_nlt1(&path).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(bits(&back), bits(&t));

    let mut bytes = Vec::new();
    encode_nlt1(&t, &mut bytes).unwrap();
    fs::write(&path, &bytes[..20]).unwrap();
    match read_nlt1(&path) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, 13);
            assert!(message.contains("expected 24") && message.contains("found 7"), "{message}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
    assert!(decode_nlt1(b"NLT1", 0).is_err());
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_dataset(seed: u64) -> DatasetConfig {
    DatasetConfig {
        count: 12,
        test_count: 3,
        seed,
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_bytes_depend_only_on_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &small_dataset(3)).unwrap();
    write_dataset(b.path(), &small_dataset(3)).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 12 * 3 + 1);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    write_dataset(c.path(), &small_dataset(4)).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn dataset_split_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_dataset(1)).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.ids(Split::Train).len(), 9);
    assert_eq!(ds.ids(Split::Test), vec!["00009", "00010", "00011"]);
    let meta = ds.load_meta("00010").unwrap();
    let (clean, _) = ds.load_hu("00010").unwrap();
    let p = generate_phantom(meta.seed, 64, 64, 2).unwrap();
    assert_eq!(p.clean, clean);
    assert!(meta.region_pair().unwrap().is_some());
}

#[test]
fn missing_files_are_listed_by_id() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_dataset(1)).unwrap();
    fs::remove_file(dir.path().join("phantoms/00009_low.nlt1")).unwrap();
    fs::remove_file(dir.path().join("phantoms/00011_meta.txt")).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let err = ds.load_split(Split::Test, &HuWindow::default()).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("00009") && text.contains("00011"), "{text}");
    assert!(!text.contains("00010"), "{text}");
}
