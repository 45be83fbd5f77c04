use std::path::Path;

use nlct::checkpoint::Checkpoint;
use nlct::io::{decode_nlt1, encode_nlt1};
use nlct::kernels::{conv2d_forward, maxpool2_forward, softmax_forward, upsample_nearest2_forward, ConvAlgo, Padding};
use nlct::metrics::HuWindow;
use nlct::networks::Variant;
use nlct::nonlocal::attention_forward;
use nlct::train::{crop_to, reflect_pad_to, TrainConfig};
use nlct::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-4.0f32..4.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn dims4(max_hw: usize) -> impl Strategy<Value = Vec<usize>> {
    (1usize..3, 1usize..4, 1..=max_hw, 1..=max_hw).prop_map(|(n, c, h, w)| vec![n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nlt1_round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 1..40)) {
        let n = bits.len();
        let t = Tensor::new(&[1, n], bits.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let mut buf = Vec::new();
        encode_nlt1(&t, &mut buf).unwrap();
        let (back, used) = decode_nlt1(&buf, 0).unwrap();
        prop_assert_eq!(used, buf.len());
        let got: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
        for cut in [0, 4, 5, buf.len() - 1] {
            prop_assert!(decode_nlt1(&buf[..cut], 0).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip(
        a in tensor(vec![2, 3]),
        b in tensor(vec![4]),
        key in "[a-z]{1,8}",
        value in "[ -~]{0,20}",
    ) {
        let mut ck = Checkpoint::default();
        ck.tensors.insert("g.a".into(), a);
        ck.tensors.insert("d.b".into(), b);
        ck.set_meta(&key, &value);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        prop_assert_eq!(back.meta(&key).unwrap(), value.as_str());
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn softmax_is_a_distribution(x in tensor(vec![3, 7]), axis in 0usize..2) {
        let p = softmax_forward(&x.map(|v| 20.0 * v), axis).unwrap();
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (outer, len, stride) = if axis == 0 { (7, 3, 7) } else { (3, 7, 1) };
        for o in 0..outer {
            let base = if axis == 0 { o } else { o * 7 };
            let s: f32 = (0..len).map(|k| p.data()[base + k * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_stays_in_the_value_hull(
        (q, k, v) in dims4(6).prop_flat_map(|s| {
            let vs = vec![s[0], 2, s[2], s[3]];
            (tensor(s.clone()), tensor(s), tensor(vs))
        }),
        r in 0usize..4,
    ) {
        let (out, weights) = attention_forward(&q, &k, &v, r).unwrap();
        let (n, _, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let slots = weights.len() / (n * h * w);
        for row in weights.chunks(slots) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
        for b in 0..n {
            for c in 0..2 {
                let plane = &v.data()[(b * 2 + c) * h * w..][..h * w];
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                for &o in &out.data()[(b * 2 + c) * h * w..][..h * w] {
                    prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear(
        (x, y) in dims4(7).prop_flat_map(|s| (tensor(s.clone()), tensor(s))),
        a in -2.0f32..2.0,
        seed in any::<u64>(),
    ) {
        let cin = x.shape()[1];
        let w = Tensor::from_fn(&[2, cin, 3, 3], |i| ((seed.wrapping_add(i as u64) % 13) as f32 - 6.0) / 6.0);
        let conv = |t: &Tensor<f32>| conv2d_forward(t, &w, None, 1, Padding::zero(1), ConvAlgo::Tiled).unwrap();
        let mixed = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let lhs = conv(&mixed);
        let rhs = conv(&x).zip_map(&conv(&y), |p, q| a * p + q).unwrap();
        let scale = 1.0 + lhs.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * scale as f64);
    }

    #[test]
    fn pooling_undoes_upsampling(x in dims4(5).prop_flat_map(tensor)) {
        let (back, _) = maxpool2_forward(&upsample_nearest2_forward(&x).unwrap()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(
        x in (2usize..9, 2usize..9).prop_flat_map(|(h, w)| tensor(vec![1, 1, h, w])),
        dh in 0usize..2,
        dw in 0usize..2,
    ) {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let padded = reflect_pad_to(&x, h + dh, w + dw).unwrap();
        prop_assert_eq!(crop_to(&padded, h, w).unwrap(), x);
    }

    #[test]
    fn window_inverts_inside_its_range(v in -160.0f32..240.0) {
        let w = HuWindow::default();
        prop_assert!((w.invert(w.apply(v)) - v).abs() < 1e-3);
    }

    #[test]
    fn config_text_round_trips(
        batch in 1usize..64,
        lr in 1e-7f64..1e-2,
        seed in any::<u64>(),
        radius in 0usize..8,
        variant in 0usize..6,
    ) {
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = batch;
        cfg.lr_g = lr;
        cfg.seed = seed;
        cfg.scale.nl_radius = radius;
        cfg.variant = Variant::ALL[variant];
        let back = TrainConfig::parse(&cfg.to_text(), Path::new("cfg.txt")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
