use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nlct::checkpoint::Checkpoint;
use nlct::data::{write_dataset, Dataset, DatasetConfig, Split};
use nlct::losses::FeatureExtractor;
use nlct::metrics::{cnr, hu_window, psnr, rmse, ssim, SsimConfig};
use nlct::networks::{build_variant, Variant, VariantConfig};
use nlct::train::{
    ablate, evaluate_noisy, lr_at, score_image, spec_fields, train, EvalReport, TrainConfig, TrainState,
    CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};
use nlct::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(root: &Path) -> DatasetConfig {
    let cfg = DatasetConfig {
        count: 8,
        test_count: 2,
        height: 32,
        width: 32,
        seed: 5,
        ..DatasetConfig::default()
    };
    write_dataset(root, &cfg).unwrap();
    cfg
}

fn tiny_train(variant: Variant, data: &Path, out: &Path, iters: u64) -> TrainConfig {
    TrainConfig {
        variant,
        max_iters: iters,
        batch_size: 2,
        patches_per_slice: 2,
        data_dir: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        ..TrainConfig::desk()
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 1, h, w], |_| rng.gen_range(0.0f32..1.0))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_gives_bit_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m6.nlck");
    let state = TrainState::init(&TrainConfig {
        variant: Variant::M6,
        ..TrainConfig::desk()
    })
    .unwrap();
    state.save(&path).unwrap();
    let back = TrainState::load(&path).unwrap();
    assert_eq!(back, state);

    let x = image(1, 32, 32);
    let a = state.denoise_normalized(&x).unwrap();
    let b = back.denoise_normalized(&x).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let (ca, cb) = (state.critic.as_ref().unwrap(), back.critic.as_ref().unwrap());
    let sa = ca.net.score(&ca.params, &ca.spectral, &x).unwrap();
    let sb = cb.net.score(&cb.params, &cb.spectral, &x).unwrap();
    assert_eq!(bits(&sa), bits(&sb));
}

#[test]
fn zeroed_output_layer_gives_zero_image() {
    let mut state = TrainState::init(&TrainConfig::desk()).unwrap();
    for name in ["g.out.w", "g.out.b"] {
        state.gen_params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let y = state.denoise_normalized(&image(2, 64, 64)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn odd_sized_input_is_padded_and_cropped() {
    let state = TrainState::init(&TrainConfig::desk()).unwrap();
    let x = image(3, 63, 63);
    let y = state.denoise_normalized(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 63, 63]);
    let hu = state.denoise_hu(&Tensor::full(&[1, 63, 63], 40.0f32)).unwrap();
    assert_eq!(hu.shape(), &[1, 63, 63]);
    assert_eq!(bits(&y), bits(&state.denoise_normalized(&x).unwrap()));
}

#[test]
fn architecture_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m2.nlck");
    TrainState::init(&TrainConfig::desk()).unwrap().save(&path).unwrap();
    let state = TrainState::load(&path).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.scale.nl_radius = 3;
    let expected = build_variant(&cfg.variant_config(), &cfg.scale).unwrap();
    match state.ensure_matches(&expected) {
        Err(Error::Config(msg)) => assert!(msg.contains("gen.nl_radius"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn m1_and_m2_differ_only_in_the_nonlocal_flag() {
    let a = build_variant(&VariantConfig::of(Variant::M1), &TrainConfig::desk().scale).unwrap();
    let b = build_variant(&VariantConfig::of(Variant::M2), &TrainConfig::desk().scale).unwrap();
    let diff: Vec<_> = spec_fields(&a)
        .into_iter()
        .zip(spec_fields(&b))
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0)
        .collect();
    assert_eq!(diff, vec!["variant", "use_nonlocal"]);
}

fn config_lines(path: &Path) -> BTreeSet<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("variant") && !l.starts_with("out_dir"))
        .map(String::from)
        .collect()
}

#[test]
fn ablation_logs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let fx = FeatureExtractor::random(7);
    let base = tiny_train(Variant::M2, &data, &dir.path().join("abl"), 4);
    let rows = ablate(&base, &[Variant::M1, Variant::M2, Variant::M2], &fx).unwrap();
    assert_eq!(rows.len(), 3);

    let (c1, c2) = (
        config_lines(&base.out_dir.join("M1").join(CONFIG_FILE)),
        config_lines(&base.out_dir.join("M2").join(CONFIG_FILE)),
    );
    let diff: Vec<_> = c1.symmetric_difference(&c2).collect();
    assert_eq!(diff, vec!["# use_nonlocal = false", "# use_nonlocal = true"]);
    // The repeated M2 row retrains from the same seed.
    assert_eq!(rows[1].metrics, rows[2].metrics);
    assert!(ablate(&base, &[Variant::M2], &fx).is_err());
}

#[test]
fn evaluation_matches_direct_metric_calls() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let fx = FeatureExtractor::random(7);
    let w = TrainConfig::desk().window;
    let report = evaluate_noisy(&ds, Split::Test, &w, &fx).unwrap();
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        let (clean, low) = ds.load_hu(&row.id).unwrap();
        let c = hu_window(&clean, &w).reshape(&[1, 1, 32, 32]).unwrap();
        let n = hu_window(&low, &w).reshape(&[1, 1, 32, 32]).unwrap();
        assert_eq!(row.rmse, rmse(&n, &c).unwrap());
        assert_eq!(row.psnr, psnr(&n, &c, 1.0).unwrap());
        assert_eq!(row.ssim, ssim(&n, &c, &SsimConfig::default()).unwrap());
        let region = ds.load_meta(&row.id).unwrap().region_pair().unwrap().unwrap();
        assert_eq!(row.cnr, Some(cnr(&n, &region).unwrap()));
    }

    let csv = report.to_csv();
    let parsed: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let (rows, mean) = parsed.split_at(parsed.len() - 1);
    for col in 0..5 {
        let avg = rows.iter().map(|r| r[col]).sum::<f64>() / rows.len() as f64;
        assert!((avg - mean[0][col]).abs() <= 1e-9, "column {col}");
    }
}

#[test]
fn clean_against_itself_hits_the_sentinels() {
    let x = image(4, 32, 32);
    let row = score_image("a", &x, &x, None, &FeatureExtractor::random(7)).unwrap();
    assert_eq!(row.rmse, 0.0);
    assert_eq!(row.psnr, f64::INFINITY);
    assert_eq!(row.ssim, 1.0);
    assert_eq!(row.tml, 0.0);
    let csv = EvalReport::new(vec![row]).unwrap().to_csv();
    assert_eq!(csv.lines().nth(1).unwrap(), "a,0,inf,1,,0");
}

#[test]
fn training_log_follows_the_decay_rule() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let cfg = TrainConfig {
        lr_decay_every: 3,
        divergence_bound: 1e-12,
        ..tiny_train(Variant::M6, &data, &dir.path().join("run"), 8)
    };
    let (_, outcome) = train(&cfg).unwrap();
    let log = fs::read_to_string(outcome.log()).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "iter,l_gp,l_d,lr_g,lr_d,d_real,d_fake,flag");
    for (it, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0].parse::<u64>().unwrap(), it as u64);
        assert_eq!(f[3].parse::<f64>().unwrap(), lr_at(cfg.lr_g, 0.5, 3, it as u64));
        assert_eq!(f[3].parse::<f64>().unwrap(), cfg.lr_g * 0.5f64.powi(it as i32 / 3));
        assert_eq!(f[4].parse::<f64>().unwrap(), cfg.lr_d * 0.5f64.powi(it as i32 / 3));
        // A vanishing bound flags every step with a non-zero critic gap.
        assert_eq!(f[7], "diverged");
    }
    let timing = fs::read_to_string(dir.path().join("run/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 9);
}

#[test]
fn numeric_blow_up_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let cfg = TrainConfig {
        lr_g: 1e30,
        checkpoint_every: 1,
        ..tiny_train(Variant::M2, &data, &dir.path().join("run"), 20)
    };
    let err = train(&cfg).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    let ck = dir.path().join("run").join(CHECKPOINT_FILE);
    let state = TrainState::load(&ck).unwrap();
    assert!(state.iteration < 20);
    let rows = fs::read_to_string(dir.path().join("run").join(LOG_FILE)).unwrap().lines().count() - 1;
    assert_eq!(state.iteration as usize, rows);
    assert!(Checkpoint::load(&ck).is_ok());
}
