//! Kernels checked against naive reference loops written independently here.

use nlct::kernels::{
    conv2d_forward, maxpool2_forward, softmax_forward, upsample_nearest2_forward, ConvAlgo, PadMode, Padding,
};
use nlct::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn padded_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect if i < 0 => Some((-i) as usize),
        PadMode::Reflect => Some(2 * (n - 1) - i as usize),
    }
}

fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: Padding) -> Tensor<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let k = w.shape();
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let p = pad.size as isize;
    let ho = (h + 2 * pad.size - kh) / stride + 1;
    let wo = (wd + 2 * pad.size - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - p;
                                let ix = (ox * stride + kx) as isize - p;
                                if let (Some(y), Some(xx)) =
                                    (padded_index(iy, h, pad.mode), padded_index(ix, wd, pad.mode))
                                {
                                    acc += x.at4(bi, ci, y, xx) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_naive_loop() {
    let cases = [
        (3, 1, Padding::zero(1)),
        (3, 2, Padding::zero(1)),
        (5, 1, Padding::reflect(2)),
        (3, 2, Padding::reflect(1)),
        (1, 1, Padding::NONE),
        (3, 1, Padding::NONE),
    ];
    for (seed, (k, stride, pad)) in cases.into_iter().enumerate() {
        let x = random(&[2, 3, 9, 8], seed as u64);
        let w = random(&[4, 3, k, k], 100 + seed as u64);
        let b = random(&[4], 200 + seed as u64);
        let want = conv_reference(&x, &w, b.data(), stride, pad);
        for algo in [ConvAlgo::Direct, ConvAlgo::Tiled] {
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad, algo).unwrap();
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} stride={stride} {pad:?} {algo:?}");
        }
    }
}

#[test]
fn conv2d_f32_tracks_f64_reference() {
    let x = random(&[1, 2, 12, 12], 7);
    let w = random(&[3, 2, 3, 3], 8);
    let b = random(&[3], 9);
    let want = conv_reference(&x, &w, b.data(), 1, Padding::zero(1));
    let got = conv2d_forward(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), 1, Padding::zero(1), ConvAlgo::Tiled)
        .unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&want) < 1e-5);
}

#[test]
fn maxpool_and_upsample_match_loops() {
    let x = random(&[2, 3, 6, 8], 11);
    let (pooled, _) = maxpool2_forward(&x).unwrap();
    assert_eq!(pooled.shape(), &[2, 3, 3, 4]);
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..3 {
                for xx in 0..4 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.at4(b, c, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(pooled.at4(b, c, y, xx), m);
                }
            }
        }
    }
    let up = upsample_nearest2_forward(&pooled).unwrap();
    assert_eq!(up.shape(), &[2, 3, 6, 8]);
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..6 {
                for xx in 0..8 {
                    assert_eq!(up.at4(b, c, y, xx), pooled.at4(b, c, y / 2, xx / 2));
                }
            }
        }
    }
}

#[test]
fn softmax_matches_f64_formula_on_every_axis() {
    let x = random(&[3, 4, 5], 21).map(|v| 30.0 * v);
    let shape = x.shape().to_vec();
    for axis in 0..3 {
        let got = softmax_forward(&x, axis).unwrap();
        let strides = [shape[1] * shape[2], shape[2], 1];
        for i in 0..x.len() {
            let base = i - (i / strides[axis] % shape[axis]) * strides[axis];
            let row: Vec<f64> = (0..shape[axis]).map(|k| x.data()[base + k * strides[axis]]).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let want = (x.data()[i] - m).exp() / z;
            assert!((got.data()[i] - want).abs() < 1e-14, "axis {axis} index {i}");
        }
    }
}

#[test]
fn softmax_survives_large_logits() {
    let x = Tensor::new(&[1, 3], vec![1000.0f32, 1000.0, -1000.0]).unwrap();
    let p = softmax_forward(&x, 1).unwrap();
    assert!(p.all_finite());
    assert!((p.data()[0] - 0.5).abs() < 1e-6);
    assert_eq!(p.data()[2], 0.0);
}
