//! Encoder-decoder generator with a non-local block at the bottleneck.
//!
//! Topology for a downsample factor of 4 (two pooling levels), every conv
//! `k×k` with `C` feature maps and ReLU unless noted:
//!
//! ```text
//! enc0 (1→C) ─────────────────────────────────────────────── + dec0 ── out (C→1, linear)
//! enc1 ──────────────────────────────────────────── + dec1 ─┘
//!  └ pool ─ enc2 ───────────────────────── + dec2 ─┘ (up)
//!            └ pool ─ enc3 ─ [NL ⊕ concat ─ merge] ─┘ (up)
//! ```
//!
//! Skip connections add same-resolution encoder activations before the
//! ReLU; the non-local response is concatenated and merged back to `C`
//! channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::nonlocal::{fuse_concat, neighborhood_attention, NeighborhoodSpec, NonLocalParams};
use crate::params::{Binder, Params};
use crate::tensor::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub kernel: usize,
    pub downsample_factor: usize,
    pub nl_radius: NeighborhoodSpec,
    pub use_nonlocal: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_channels: 64,
            kernel: 5,
            downsample_factor: 4,
            nl_radius: NeighborhoodSpec::default(),
            use_nonlocal: true,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample_factor must be a power of two >= 2, got {f}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Encoder → decoder pairs joined by additive skips.
    pub fn skip_pairs(&self) -> Vec<(String, String)> {
        (0..self.levels() + 1)
            .map(|l| (format!("g.enc{l}"), format!("g.dec{l}")))
            .collect()
    }

    pub fn nonlocal_block(&self) -> NonLocalParams {
        NonLocalParams::new("g.nl", self.base_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generator {
    pub spec: GeneratorSpec,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Params<f32> {
        let c = self.spec.base_channels;
        let k = self.spec.kernel;
        let levels = self.spec.levels();
        let mut p = Params::new();
        p.insert_conv("g.enc0", c, 1, k, rng);
        for l in 1..=levels + 1 {
            p.insert_conv(&format!("g.enc{l}"), c, c, k, rng);
        }
        if self.spec.use_nonlocal {
            self.spec.nonlocal_block().init(&mut p, rng);
            p.insert_conv("g.merge", c, 2 * c, k, rng);
        }
        for l in 0..=levels {
            p.insert_conv(&format!("g.dec{l}"), c, c, k, rng);
        }
        p.insert_conv("g.out", 1, c, k, rng);
        p
    }

    fn conv<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
        let w = b.weight(g, &format!("{name}.w"))?;
        let bias = b.bind(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(bias), 1, Padding::zero(self.spec.kernel / 2))
    }

    pub fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.spec.downsample_factor;
        if c != 1 {
            return Err(Error::dim(format!("generator expects 1 channel, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!(
                "generator input {h}x{w} is not divisible by {f}"
            )));
        }
        Ok(())
    }

    /// Encoder half: the skip activations and the bottleneck features.
    pub fn encode<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<(Vec<Var>, Var)> {
        self.check_input(g.value(x))?;
        let levels = self.spec.levels();

        let mut skips = Vec::with_capacity(levels + 1);
        let e = self.conv(g, b, x, "g.enc0")?;
        let mut h = g.relu(e)?;
        skips.push(h);
        for l in 1..=levels {
            let e = self.conv(g, b, h, &format!("g.enc{l}"))?;
            let e = g.relu(e)?;
            skips.push(e);
            h = g.maxpool2(e)?;
        }
        let e = self.conv(g, b, h, &format!("g.enc{}", levels + 1))?;
        Ok((skips, g.relu(e)?))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let levels = self.spec.levels();
        let (skips, mut h) = self.encode(g, b, x)?;

        if self.spec.use_nonlocal {
            let y = neighborhood_attention(g, b, h, &self.spec.nonlocal_block(), &self.spec.nl_radius)?;
            let cat = fuse_concat(g, h, y)?;
            let m = self.conv(g, b, cat, "g.merge")?;
            h = g.relu(m)?;
        }

        for l in (0..=levels).rev() {
            if l > 0 {
                h = g.upsample_nearest2(h)?;
            }
            let d = self.conv(g, b, h, &format!("g.dec{l}"))?;
            let d = g.add(d, skips[l])?;
            h = g.relu(d)?;
        }
        self.conv(g, b, h, "g.out")
    }

    /// Features entering the non-local block, `[N, C, H/f, W/f]`.
    pub fn bottleneck(&self, params: &Params<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let xv = g.constant(x.clone());
        let (_, h) = self.encode(&mut g, &mut b, xv)?;
        Ok(g.value(h).clone())
    }

    /// Forward pass outside of training.
    pub fn infer(&self, params: &Params<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &mut b, xv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(use_nonlocal: bool) -> Generator {
        Generator::new(GeneratorSpec {
            base_channels: 4,
            kernel: 3,
            downsample_factor: 4,
            nl_radius: NeighborhoodSpec::new(1, 4),
            use_nonlocal,
        })
        .unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let gen = tiny(true);
        let p = gen.init(&mut ChaCha8Rng::seed_from_u64(0));
        for s in [32, 64, 120] {
            let x = Tensor::full(&[1, 1, s, s], 0.5f32);
            assert_eq!(gen.infer(&p, &x).unwrap().shape(), &[1, 1, s, s]);
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let gen = tiny(true);
        let mut p = gen.init(&mut ChaCha8Rng::seed_from_u64(1));
        p.get_mut("g.out.w").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(0.0f32..1.0));
        assert!(gen.infer(&p, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let gen = tiny(false);
        let p = gen.init(&mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::zeros(&[1, 1, 18, 16]);
        assert!(matches!(gen.infer(&p, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn baseline_has_fewer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let with = tiny(true).init(&mut rng).count();
        let without = tiny(false).init(&mut rng).count();
        assert!(without < with);
        let p = tiny(false).init(&mut rng);
        assert!(p.names().all(|n| !n.starts_with("g.nl") && n != "g.merge.w"));
    }

    #[test]
    fn skip_pairs_are_symmetric() {
        let spec = GeneratorSpec::default();
        assert_eq!(
            spec.skip_pairs(),
            vec![
                ("g.enc0".to_string(), "g.dec0".to_string()),
                ("g.enc1".to_string(), "g.dec1".to_string()),
                ("g.enc2".to_string(), "g.dec2".to_string()),
            ]
        );
    }
}
