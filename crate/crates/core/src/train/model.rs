//! Trainable state, its checkpoint mapping and inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::checkpoint::Checkpoint;
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{hu_unwindow, hu_window, HuWindow};
use crate::networks::{
    build_variant, Adversary, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ModelScale, ResolvedVariant,
    Variant, VariantConfig,
};
use crate::nonlocal::NeighborhoodSpec;
use crate::params::Params;
use crate::spectral::SpectralState;
use crate::tensor::Tensor;

use super::config::{format_radius, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub net: Discriminator,
    pub params: Params<f32>,
    pub spectral: SpectralState,
    pub adam: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub variant: ResolvedVariant,
    pub generator: Generator,
    pub gen_params: Params<f32>,
    pub gen_adam: AdamState,
    pub critic: Option<CriticState>,
    pub iteration: u64,
    pub window: HuWindow,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Architecture fields recorded in checkpoints, in a fixed order.
pub fn spec_fields(v: &ResolvedVariant) -> Vec<(&'static str, String)> {
    let g = &v.generator;
    let mut out = vec![
        ("variant", v.config.name.to_string()),
        ("use_nonlocal", v.config.use_nonlocal.to_string()),
        ("loss", v.config.loss.to_string()),
        ("adversary", v.config.adversary.to_string()),
        ("gen.base_channels", g.base_channels.to_string()),
        ("gen.kernel", g.kernel.to_string()),
        ("gen.downsample_factor", g.downsample_factor.to_string()),
        ("gen.nl_radius", format_radius(g.nl_radius.radius_module)),
    ];
    if let Some(d) = &v.discriminator {
        out.extend([
            ("disc.widths", join(&d.widths)),
            ("disc.strides", join(&d.strides)),
            ("disc.kernel", d.kernel.to_string()),
            ("disc.leaky_slope", d.leaky_slope.to_string()),
            (
                "disc.self_attention_position",
                d.self_attention_position.map_or("none".into(), |p| p.to_string()),
            ),
            ("disc.spectral_norm", d.spectral_norm.to_string()),
            ("disc.global_mean_head", d.global_mean_head.to_string()),
        ]);
    }
    out
}

fn list(ck: &Checkpoint, key: &str) -> Result<Vec<usize>> {
    ck.meta(key)?
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::config(format!("checkpoint field `{key}` has bad entry `{s}`")))
        })
        .collect()
}

fn variant_from_meta(ck: &Checkpoint) -> Result<ResolvedVariant> {
    let name: Variant = ck.meta("variant")?.parse()?;
    let config = VariantConfig::of(name);
    let radius = match ck.meta("gen.nl_radius")? {
        "full" => NeighborhoodSpec::full(),
        r => {
            let r: usize = r
                .parse()
                .map_err(|_| Error::config(format!("checkpoint field `gen.nl_radius` has bad value `{r}`")))?;
            NeighborhoodSpec::new(r, ck.meta_parse("gen.downsample_factor")?)
        }
    };
    let generator = GeneratorSpec {
        base_channels: ck.meta_parse("gen.base_channels")?,
        kernel: ck.meta_parse("gen.kernel")?,
        downsample_factor: ck.meta_parse("gen.downsample_factor")?,
        nl_radius: radius,
        use_nonlocal: config.use_nonlocal,
    };
    let discriminator = if config.adversary.is_some() {
        Some(DiscriminatorSpec {
            widths: list(ck, "disc.widths")?,
            strides: list(ck, "disc.strides")?,
            kernel: ck.meta_parse("disc.kernel")?,
            leaky_slope: ck.meta_parse("disc.leaky_slope")?,
            self_attention_position: match ck.meta("disc.self_attention_position")? {
                "none" => None,
                _ => Some(ck.meta_parse("disc.self_attention_position")?),
            },
            spectral_norm: ck.meta_parse("disc.spectral_norm")?,
            global_mean_head: ck.meta_parse("disc.global_mean_head")?,
        })
    } else {
        None
    };
    let v = ResolvedVariant {
        config,
        generator,
        discriminator,
        loss: config.loss,
    };
    // Toggles are implied by the variant name; make sure the file agrees.
    for (k, want) in spec_fields(&v) {
        let have = ck.meta(k)?;
        if have != want {
            return Err(Error::config(format!(
                "checkpoint field `{k}` is `{have}` but variant {name} implies `{want}`"
            )));
        }
    }
    Ok(v)
}

fn put_params(ck: &mut Checkpoint, prefix: &str, p: &Params<f32>) {
    for (k, t) in p.iter() {
        ck.tensors.insert(format!("{prefix}{k}"), t.clone());
    }
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, a: &AdamState) {
    ck.set_meta(&format!("{prefix}.t"), a.t);
    ck.set_meta(&format!("{prefix}.beta1"), a.beta1);
    ck.set_meta(&format!("{prefix}.beta2"), a.beta2);
    ck.set_meta(&format!("{prefix}.eps"), a.eps);
    for (k, t) in &a.m {
        ck.tensors.insert(format!("{prefix}.m/{k}"), t.clone());
    }
    for (k, t) in &a.v {
        ck.tensors.insert(format!("{prefix}.v/{k}"), t.clone());
    }
}

/// Copies tensors named like `expected` out of the checkpoint, checking
/// that the name set and every shape agree.
fn take_params(ck: &Checkpoint, prefix: &str, expected: &Params<f32>) -> Result<Params<f32>> {
    let mut out = Params::new();
    for (k, t) in expected.iter() {
        let got = ck
            .tensors
            .get(&format!("{prefix}{k}"))
            .ok_or_else(|| Error::config(format!("checkpoint lacks parameter `{k}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::config(format!(
                "parameter `{k}` has shape {:?} in the checkpoint, architecture needs {:?}",
                got.shape(),
                t.shape()
            )));
        }
        out.insert(k, got.clone());
    }
    if let Some((extra, _)) = ck.with_prefix(prefix).find(|(k, _)| !expected.contains(k)) {
        return Err(Error::config(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(out)
}

fn take_adam(ck: &Checkpoint, prefix: &str, params: &Params<f32>) -> Result<AdamState> {
    let mut a = AdamState::new(
        ck.meta_parse(&format!("{prefix}.beta1"))?,
        ck.meta_parse(&format!("{prefix}.beta2"))?,
        ck.meta_parse(&format!("{prefix}.eps"))?,
    );
    a.t = ck.meta_parse(&format!("{prefix}.t"))?;
    if a.t > 0 {
        a.m = take_params(ck, &format!("{prefix}.m/"), params)?.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        a.v = take_params(ck, &format!("{prefix}.v/"), params)?.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    }
    Ok(a)
}

impl TrainState {
    /// Fresh weights for `cfg`, seeded from `cfg.seed`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let variant = build_variant(&cfg.variant_config(), &cfg.scale)?;
        Self::init_variant(variant, cfg.power_iterations, cfg.window, derive_seed(cfg.seed, "init"))
    }

    pub fn init_variant(variant: ResolvedVariant, power_iterations: usize, window: HuWindow, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(variant.generator.clone())?;
        let gen_params = generator.init(&mut rng);
        let critic = match &variant.discriminator {
            Some(spec) => {
                let net = Discriminator::new(spec.clone())?;
                let (params, mut spectral) = net.init(&mut rng)?;
                spectral.power_iterations = power_iterations;
                Some(CriticState {
                    net,
                    params,
                    spectral,
                    adam: AdamState::default(),
                })
            }
            None => None,
        };
        Ok(Self {
            variant,
            generator,
            gen_params,
            gen_adam: AdamState::default(),
            critic,
            iteration: 0,
            window,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, v) in spec_fields(&self.variant) {
            ck.set_meta(k, v);
        }
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("hu_lo", self.window.lo);
        ck.set_meta("hu_hi", self.window.hi);
        put_params(&mut ck, "g/", &self.gen_params);
        put_adam(&mut ck, "g.adam", &self.gen_adam);
        if let Some(c) = &self.critic {
            put_params(&mut ck, "d/", &c.params);
            put_adam(&mut ck, "d.adam", &c.adam);
            ck.set_meta("d.power_iterations", c.spectral.power_iterations);
            for name in c.spectral.names() {
                let (u, v) = c.spectral.get(name).expect("listed name");
                ck.tensors.insert(format!("d.sn.u/{name}"), Tensor::new(&[u.len()], u.to_vec()).expect("1-D"));
                ck.tensors.insert(format!("d.sn.v/{name}"), Tensor::new(&[v.len()], v.to_vec()).expect("1-D"));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let variant = variant_from_meta(ck)?;
        let window = HuWindow::new(ck.meta_parse("hu_lo")?, ck.meta_parse("hu_hi")?)?;
        let template = Self::init_variant(variant, 1, window, 0)?;
        let gen_params = take_params(ck, "g/", &template.gen_params)?;
        let gen_adam = take_adam(ck, "g.adam", &gen_params)?;
        let critic = match template.critic {
            Some(t) => {
                let params = take_params(ck, "d/", &t.params)?;
                let adam = take_adam(ck, "d.adam", &params)?;
                let mut spectral = SpectralState::new(ck.meta_parse("d.power_iterations")?);
                for name in t.spectral.names() {
                    let u = ck.tensor(&format!("d.sn.u/{name}"))?;
                    let v = ck.tensor(&format!("d.sn.v/{name}"))?;
                    let u: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
                    let v: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
                    spectral.set(name, &u, &v);
                }
                Some(CriticState {
                    net: t.net,
                    params,
                    spectral,
                    adam,
                })
            }
            None => None,
        };
        Ok(Self {
            variant: template.variant,
            generator: template.generator,
            gen_params,
            gen_adam,
            critic,
            iteration: ck.meta_parse("iteration")?,
            window,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails with a config error naming the first architecture field that
    /// differs from `expected`.
    pub fn ensure_matches(&self, expected: &ResolvedVariant) -> Result<()> {
        let have = spec_fields(&self.variant);
        let want = spec_fields(expected);
        for (k, w) in &want {
            match have.iter().find(|(hk, _)| hk == k) {
                Some((_, h)) if h == w => {}
                Some((_, h)) => {
                    return Err(Error::config(format!(
                        "checkpoint `{k}` is `{h}`, configuration expects `{w}`"
                    )))
                }
                None => return Err(Error::config(format!("checkpoint lacks `{k}`, configuration expects `{w}`"))),
            }
        }
        if let Some((k, _)) = have.iter().find(|(k, _)| !want.iter().any(|(wk, _)| wk == k)) {
            return Err(Error::config(format!("checkpoint has `{k}`, configuration has no critic")));
        }
        Ok(())
    }

    pub fn matches_scale(&self, scale: &ModelScale) -> Result<()> {
        let expected = build_variant(&self.variant.config, scale)?;
        self.ensure_matches(&expected)
    }

    pub fn is_adversarial(&self) -> bool {
        self.variant.config.adversary != Adversary::None
    }

    /// Generator output for windowed input `[N, 1, H, W]` of any size;
    /// sides that are not multiples of the downsampling factor are
    /// reflect-padded and cropped back.
    pub fn denoise_normalized(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::dim(format!("denoise expects 1 channel, got {c}")));
        }
        let f = self.generator.spec.downsample_factor;
        let (hp, wp) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        if hp == h && wp == w {
            return self.generator.infer(&self.gen_params, x);
        }
        let padded = reflect_pad_to(x, hp, wp)?;
        let y = self.generator.infer(&self.gen_params, &padded)?;
        crop_to(&y, h, w)
    }

    /// Windows an HU image `[1, H, W]` or `[N, 1, H, W]`, denoises it and
    /// maps the result back to HU.
    pub fn denoise_hu(&self, hu: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = hu.shape().to_vec();
        let x = match shape.len() {
            3 => hu.reshape(&[1, shape[0], shape[1], shape[2]])?,
            4 => hu.clone(),
            _ => return Err(Error::dim(format!("denoise expects [1,H,W] or [N,1,H,W], got {shape:?}"))),
        };
        let y = self.denoise_normalized(&hu_window(&x, &self.window))?;
        hu_unwindow(&y, &self.window).reshape(&shape)
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Extends the bottom and right edges by mirror reflection (no edge repeat).
pub fn reflect_pad_to(x: &Tensor<f32>, hp: usize, wp: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    if hp < h || wp < w || hp - h >= h || wp - w >= w {
        return Err(Error::dim(format!("cannot reflect-pad {h}x{w} to {hp}x{wp}")));
    }
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in x.data().chunks(h * w) {
        for y in 0..hp {
            let row = &plane[reflect_index(y, h) * w..][..w];
            out.extend((0..wp).map(|xx| row[reflect_index(xx, w)]));
        }
    }
    Tensor::new(&[n, c, hp, wp], out)
}

pub fn crop_to(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, hh, ww) = x.dims4()?;
    if h > hh || w > ww {
        return Err(Error::dim(format!("cannot crop {hh}x{ww} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(hh * ww) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * ww..y * ww + w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}
