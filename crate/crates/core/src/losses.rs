//! Training objectives: noise-conscious MSE, Wasserstein critic terms and
//! the Gram-matrix texture distance.
//!
//! The noise-conscious weight map is computed on plain tensors from the
//! current residual and enters the graph as a constant, so the generator is
//! pushed to reduce error where noise is strong rather than to move error
//! around.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::networks::LossKind;
use crate::tensor::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// Softmax output as is: sums to 1 per image.
    Paper,
    /// Rescaled by `H·W` so a uniform map is all ones.
    MeanOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseWeightConfig {
    pub h_g: usize,
    pub sigma_g: f64,
    pub scale_mode: ScaleMode,
}

impl Default for NoiseWeightConfig {
    fn default() -> Self {
        Self {
            h_g: 5,
            sigma_g: 1.5,
            scale_mode: ScaleMode::MeanOne,
        }
    }
}

impl NoiseWeightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_g % 2 == 0 || self.h_g < 3 {
            return Err(Error::config(format!(
                "h_g must be odd and >= 3, got {}",
                self.h_g
            )));
        }
        if !(self.sigma_g > 0.0) {
            return Err(Error::config(format!("sigma_g must be positive, got {}", self.sigma_g)));
        }
        Ok(())
    }
}

/// Centered `h × h` Gaussian normalised to unit sum.
pub fn gaussian_window(h: usize, sigma: f64) -> Result<Tensor<f64>> {
    if h % 2 == 0 {
        return Err(Error::config(format!("window side must be odd, got {h}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let c = (h / 2) as f64;
    let mut w = Tensor::from_fn(&[h, h], |i| {
        let (y, x) = ((i / h) as f64 - c, (i % h) as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let z = w.sum_f64();
    w.data_mut().iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Per-pixel noise-awareness weights, `[N, C, H, W]`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub p: Tensor<f32>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Local standard deviation of the Gaussian-windowed residual
/// `G = W_g ⊙ (I − R)` around every pixel (reflect padding, population
/// variance over the `h_g²` window values).
pub fn windowed_residual_std<T: Element>(
    target: &Tensor<T>,
    recon: &Tensor<T>,
    h_g: usize,
    sigma_g: f64,
) -> Result<Tensor<f64>> {
    target.expect_same_shape(recon)?;
    let (n, c, h, w) = target.dims4()?;
    let win = gaussian_window(h_g, sigma_g)?;
    let r = (h_g / 2) as isize;
    let m = (h_g * h_g) as f64;
    let resid: Vec<f64> = target
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| a.to_f64() - b.to_f64())
        .collect();
    let mut out = vec![0.0; resid.len()];
    let mut vals = vec![0.0; h_g * h_g];
    for plane in 0..n * c {
        let d = &resid[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                for (k, v) in vals.iter_mut().enumerate() {
                    let dy = (k / h_g) as isize - r;
                    let dx = (k % h_g) as isize - r;
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    *v = win.data()[k] * d[sy * w + sx];
                }
                let mean = vals.iter().sum::<f64>() / m;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                out[plane * h * w + y * w + x] = var.sqrt();
            }
        }
    }
    Tensor::new(target.shape(), out)
}

/// Softmax over every pixel of each image plane of the local residual std.
pub fn noise_weight_map<T: Element>(
    target: &Tensor<T>,
    recon: &Tensor<T>,
    cfg: &NoiseWeightConfig,
) -> Result<WeightMap> {
    cfg.validate()?;
    let s = windowed_residual_std(target, recon, cfg.h_g, cfg.sigma_g)?;
    let (n, c, h, w) = s.dims4()?;
    let hw = h * w;
    let scale = match cfg.scale_mode {
        ScaleMode::Paper => 1.0,
        ScaleMode::MeanOne => hw as f64,
    };
    let mut p = vec![0f32; s.len()];
    for plane in 0..n * c {
        let sp = &s.data()[plane * hw..(plane + 1) * hw];
        let mx = sp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sp.iter().map(|v| (v - mx).exp()).sum();
        for (o, v) in p[plane * hw..(plane + 1) * hw].iter_mut().zip(sp) {
            *o = ((v - mx).exp() / z * scale) as f32;
        }
    }
    Ok(WeightMap {
        p: Tensor::new(s.shape(), p)?,
    })
}

/// `mean(p ⊙ (I − R)²)`; `p` is a constant.
pub fn noise_aware_mse<T: Element>(g: &mut Graph<T>, target: Var, recon: Var, p: &WeightMap) -> Result<Var> {
    if p.p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("noise weight map has negative entries"));
    }
    if p.p.shape() != g.value(recon).shape() {
        return Err(Error::dim(format!(
            "weight map {:?} does not match reconstruction {:?}",
            p.p.shape(),
            g.value(recon).shape()
        )));
    }
    let pv = g.constant(p.p.cast());
    let d = g.sub(target, recon)?;
    let d2 = g.square(d)?;
    let wd = g.mul(pv, d2)?;
    g.mean(wd)
}

pub fn mse<T: Element>(g: &mut Graph<T>, target: Var, recon: Var) -> Result<Var> {
    let d = g.sub(target, recon)?;
    let d2 = g.square(d)?;
    g.mean(d2)
}

/// `−mean(D(G(z)))` over every score-map element.
pub fn wgan_generator_loss<T: Element>(g: &mut Graph<T>, fake_scores: Var) -> Result<Var> {
    let m = g.mean(fake_scores)?;
    g.mul_scalar(m, -1.0)
}

/// `−mean(D(x)) + mean(D(G(z)))`.
pub fn wgan_discriminator_loss<T: Element>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = g.mean(real_scores)?;
    let f = g.mean(fake_scores)?;
    g.sub(f, r)
}

/// One fixed conv layer of a [`FeatureExtractor`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub relu: bool,
}

/// Fixed, never-trained conv stack whose activations feed the Gram
/// matrices of the texture distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub layers: Vec<FeatureLayer>,
}

impl FeatureExtractor {
    /// Two 3×3 ReLU layers (1→8→16) with Gaussian weights drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        Self::random_with(seed, &[8, 16])
    }

    pub fn random_with(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let layers = widths
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut rng) as f32);
                let bias = Tensor::from_fn(&[cout], |_| rng.gen_range(-0.05f32..0.05));
                cin = cout;
                FeatureLayer {
                    weight,
                    bias,
                    relu: true,
                }
            })
            .collect();
        Self { seed, layers }
    }

    /// A single 1×1 unit-weight layer: features equal the image.
    pub fn identity() -> Self {
        Self {
            seed: 0,
            layers: vec![FeatureLayer {
                weight: Tensor::ones(&[1, 1, 1, 1]),
                bias: Tensor::zeros(&[1]),
                relu: false,
            }],
        }
    }

    /// Activations of every layer.
    pub fn features<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = g.constant(layer.weight.cast());
            let b = g.constant(layer.bias.cast());
            let k = layer.weight.shape()[2];
            h = g.conv2d(h, w, Some(b), 1, Padding::zero(k / 2))?;
            if layer.relu {
                h = g.relu(h)?;
            }
            out.push(h);
        }
        Ok(out)
    }
}

/// `Σ_l ‖Gram(φ_l(a)) − Gram(φ_l(b))‖²_F`, summed over the batch.
pub fn texture_matching_loss<T: Element>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    g.value(a).expect_same_shape(g.value(b))?;
    let fa = fx.features(g, a)?;
    let fb = fx.features(g, b)?;
    let mut total: Option<Var> = None;
    for (la, lb) in fa.into_iter().zip(fb) {
        let ga = g.gram(la)?;
        let gb = g.gram(lb)?;
        let d = g.sub(ga, gb)?;
        let d2 = g.square(d)?;
        let s = g.sum(d2)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::config("feature extractor has no layers"))
}

/// Texture distance between two image batches, outside any training graph.
pub fn tml(a: &Tensor<f32>, b: &Tensor<f32>, fx: &FeatureExtractor) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let av = g.constant(a.cast());
    let bv = g.constant(b.cast());
    let l = texture_matching_loss(&mut g, av, bv, fx)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub weights: NoiseWeightConfig,
    pub adversarial: bool,
    pub lambda_adv: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::NcMse,
            weights: NoiseWeightConfig::default(),
            adversarial: false,
            lambda_adv: 1.0,
        }
    }
}

/// Handles to the parts of the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub adversarial: Option<Var>,
}

/// `L_Gp + λ·L_GA`, with the weight map computed from the current residual.
pub fn total_generator_loss<T: Element>(
    g: &mut Graph<T>,
    target: Var,
    recon: Var,
    fake_scores: Option<Var>,
    cfg: &LossConfig,
) -> Result<GeneratorLoss> {
    let reconstruction = match cfg.kind {
        LossKind::Mse => mse(g, target, recon)?,
        LossKind::NcMse => {
            let p = noise_weight_map(g.value(target), g.value(recon), &cfg.weights)?;
            noise_aware_mse(g, target, recon, &p)?
        }
    };
    if !cfg.adversarial {
        return Ok(GeneratorLoss {
            total: reconstruction,
            reconstruction,
            adversarial: None,
        });
    }
    let scores = fake_scores
        .ok_or_else(|| Error::config("adversarial variant needs critic scores for the generator loss"))?;
    let adv = wgan_generator_loss(g, scores)?;
    let weighted = g.mul_scalar(adv, cfg.lambda_adv)?;
    let total = g.add(reconstruction, weighted)?;
    Ok(GeneratorLoss {
        total,
        reconstruction,
        adversarial: Some(adv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn degenerate_and_default_windows() {
        assert_eq!(gaussian_window(1, 1.5).unwrap().data(), &[1.0]);
        let w = gaussian_window(5, 1.5).unwrap();
        assert!((w.sum_f64() - 1.0).abs() < 1e-12);
        let at = |y: usize, x: usize| w.data()[y * 5 + x];
        for y in 0..5 {
            for x in 0..5 {
                assert!((at(y, x) - at(x, 4 - y)).abs() < 1e-15);
                assert!((at(y, x) - at(y, 4 - x)).abs() < 1e-15);
            }
        }
        let ratio = at(2, 2) / at(0, 0);
        let expect = 1.0 / (-8.0f64 / (2.0 * 1.5 * 1.5)).exp();
        assert!((ratio - expect).abs() < 1e-6 * expect);
        assert!(matches!(gaussian_window(4, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_residual_gives_uniform_map() {
        let i = rand_img(1, &[2, 1, 8, 6]);
        for (mode, v) in [(ScaleMode::Paper, 1.0 / 48.0), (ScaleMode::MeanOne, 1.0)] {
            let cfg = NoiseWeightConfig {
                scale_mode: mode,
                ..Default::default()
            };
            let p = noise_weight_map(&i, &i, &cfg).unwrap();
            assert!(p.p.data().iter().all(|&x| (x as f64 - v).abs() < 1e-7));
        }
    }

    #[test]
    fn invalid_window_config() {
        let i = rand_img(1, &[1, 1, 8, 8]);
        let cfg = NoiseWeightConfig {
            h_g: 4,
            ..Default::default()
        };
        assert!(matches!(noise_weight_map(&i, &i, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn weight_map_shape_mismatch() {
        let a = rand_img(1, &[1, 1, 8, 8]);
        let b = rand_img(1, &[1, 1, 8, 6]);
        assert!(matches!(
            noise_weight_map(&a, &b, &NoiseWeightConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn wgan_values() {
        let mut g = Graph::<f32>::new();
        let ones = g.constant(Tensor::ones(&[2, 1, 3, 3]));
        let zeros = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let lg = wgan_generator_loss(&mut g, ones).unwrap();
        assert_eq!(g.value(lg).item(), -1.0);
        let lg0 = wgan_generator_loss(&mut g, zeros).unwrap();
        assert_eq!(g.value(lg0).item(), 0.0);
        let ld = wgan_discriminator_loss(&mut g, ones, zeros).unwrap();
        assert_eq!(g.value(ld).item(), -1.0);
        let same = wgan_discriminator_loss(&mut g, ones, ones).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn identical_images_have_zero_texture_distance() {
        let a = rand_img(3, &[1, 1, 8, 8]);
        assert_eq!(tml(&a, &a, &FeatureExtractor::random(7)).unwrap(), 0.0);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let p = WeightMap {
            p: Tensor::full(&[1, 1, 2, 2], -1.0),
        };
        assert!(matches!(noise_aware_mse(&mut g, a, b, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn adversarial_config_needs_scores() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let b = g.variable(Tensor::full(&[1, 1, 8, 8], 0.1));
        let cfg = LossConfig {
            adversarial: true,
            ..Default::default()
        };
        assert!(matches!(
            total_generator_loss(&mut g, a, b, None, &cfg),
            Err(Error::Config(_))
        ));
    }
}
