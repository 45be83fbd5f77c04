//! Fully convolutional patch critic.
//!
//! Every conv weight passes through spectral normalisation. Two strided
//! layers reduce the map by four, so each output element scores one
//! receptive-field patch. An optional full-image self-attention block with
//! a zero-initialised residual gate sits after a late layer, and the
//! vanilla head averages the score map down to one value per image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::nonlocal::{self_attention_residual, AttentionGamma, NonLocalParams};
use crate::params::{Binder, Params};
use crate::spectral::SpectralState;
use crate::tensor::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Self-attention follows the layer with this (0-based) index.
    pub self_attention_position: Option<usize>,
    pub spectral_norm: bool,
    /// Average the score map to a single value per image.
    pub global_mean_head: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            widths: vec![64, 64, 128, 128, 256, 1],
            strides: vec![1, 2, 1, 2, 1, 1],
            kernel: 3,
            leaky_slope: 0.2,
            self_attention_position: Some(4),
            spectral_norm: true,
            global_mean_head: false,
        }
    }
}

impl DiscriminatorSpec {
    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config(format!(
                "discriminator needs one stride per layer ({} widths, {} strides)",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.reduction() != 4 {
            return Err(Error::config(format!(
                "discriminator strides must reduce by 4, got {}",
                self.reduction()
            )));
        }
        if let Some(p) = self.self_attention_position {
            if p + 1 >= self.widths.len() {
                return Err(Error::config(format!(
                    "self-attention position {p} must precede the last layer"
                )));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("discriminator kernel must be odd"));
        }
        Ok(())
    }

    fn attention_block(&self, position: usize) -> NonLocalParams {
        NonLocalParams::new("d.sa", self.widths[position])
    }

    fn gamma(&self) -> AttentionGamma {
        AttentionGamma::new("d.sa.gamma")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// Weights, plus registered power-iteration vectors for each of them.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Params<f32>, SpectralState)> {
        let mut p = Params::new();
        let mut cin = 1;
        for (i, &w) in self.spec.widths.iter().enumerate() {
            p.insert_conv(&format!("d.l{i}"), w, cin, self.spec.kernel, rng);
            cin = w;
        }
        if let Some(pos) = self.spec.self_attention_position {
            self.spec.attention_block(pos).init(&mut p, rng);
            self.spec.gamma().init(&mut p);
        }
        let mut s = SpectralState::default();
        if self.spec.spectral_norm {
            let names: Vec<String> = p.names().filter(|n| n.ends_with(".w")).cloned().collect();
            for n in names {
                s.register(&n, p.get(&n)?, rng)?;
            }
        }
        Ok((p, s))
    }

    pub fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::dim(format!("discriminator expects 1 channel, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(format!(
                "discriminator input {h}x{w} is not divisible by 4"
            )));
        }
        Ok(())
    }

    /// Score map `[N, c, H/4, W/4]`, or `[N, c, 1, 1]` with the vanilla head.
    ///
    /// `attention` toggles the self-attention block, which lets the attentive
    /// critic be compared against its plain twin on the same weights.
    pub fn forward_with<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        x: Var,
        attention: bool,
    ) -> Result<Var> {
        self.check_input(g.value(x))?;
        let last = self.spec.widths.len() - 1;
        let pad = Padding::zero(self.spec.kernel / 2);
        let mut h = x;
        for (i, &stride) in self.spec.strides.iter().enumerate() {
            let w = b.weight(g, &format!("d.l{i}.w"))?;
            let bias = b.bind(g, &format!("d.l{i}.b"))?;
            h = g.conv2d(h, w, Some(bias), stride, pad)?;
            if i < last {
                h = g.leaky_relu(h, self.spec.leaky_slope)?;
            }
            if attention && self.spec.self_attention_position == Some(i) {
                h = self_attention_residual(g, b, h, &self.spec.attention_block(i), &self.spec.gamma())?;
            }
        }
        if self.spec.global_mean_head {
            h = g.spatial_mean(h)?;
        }
        Ok(h)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(g, b, x, true)
    }

    /// Scores without recording gradients or updating spectral vectors.
    pub fn score(&self, params: &Params<f32>, sstate: &SpectralState, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut s = sstate.clone();
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        if self.spec.spectral_norm {
            b = b.with_spectral(&mut s, false);
        }
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

    fn small(attn: bool) -> Discriminator {
        Discriminator::new(DiscriminatorSpec {
            widths: vec![4, 4, 8, 8, 8, 1],
            self_attention_position: attn.then_some(4),
            ..DiscriminatorSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn score_map_is_quarter_size() {
        let d = small(true);
        let (p, s) = d.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::full(&[1, 1, 120, 120], 0.3f32);
        assert_eq!(d.score(&p, &s, &x).unwrap().shape(), &[1, 1, 30, 30]);
    }

    #[test]
    fn vanilla_head_reduces_to_scalar_per_image() {
        let mut spec = small(false).spec;
        spec.global_mean_head = true;
        let d = Discriminator::new(spec).unwrap();
        let (p, s) = d.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::full(&[3, 1, 16, 16], 0.3f32);
        assert_eq!(d.score(&p, &s, &x).unwrap().shape(), &[3, 1, 1, 1]);
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = DiscriminatorSpec {
            strides: vec![1, 2, 1, 1, 1, 1],
            ..DiscriminatorSpec::default()
        };
        assert!(matches!(Discriminator::new(spec), Err(Error::Config(_))));
        let spec = DiscriminatorSpec {
            self_attention_position: Some(5),
            ..DiscriminatorSpec::default()
        };
        assert!(Discriminator::new(spec).is_err());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let d = small(false);
        let (p, s) = d.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[1, 1, 18, 16]);
        assert!(matches!(d.score(&p, &s, &x), Err(Error::Dimension(_))));
    }
}
