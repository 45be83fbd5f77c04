//! Central finite-difference checks of every differentiable operation.
//!
//! All checks run in f64. Each case reduces the operation's output to a
//! scalar through a fixed random weighting, so every output element
//! contributes a distinct upstream gradient. The error of one input is
//! `max|a − n| / max(‖a‖∞, ‖n‖∞)` over the checked entries.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::splitmix64;
use crate::error::{Error, Result};
use crate::graph::{Graph, OpTag, Var};
use crate::kernels::Padding;
use crate::losses::{
    noise_aware_mse, noise_weight_map, texture_matching_loss, wgan_discriminator_loss, wgan_generator_loss,
    FeatureExtractor, NoiseWeightConfig,
};
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::nonlocal::{self_attention_residual, AttentionGamma, NeighborhoodSpec, NonLocalParams, FULL_RADIUS};
use crate::params::{Binder, Params};
use crate::spectral::SpectralState;
use crate::tensor::Tensor;

/// Step for smooth operations.
pub const H_SMOOTH: f64 = 1e-3;
/// Smaller step for composites with ReLU kinks, so a perturbation rarely
/// crosses one.
pub const H_KINKED: f64 = 1e-5;
pub const TOL_OP: f64 = 1e-4;
/// Relative floor of an input's error denominator.
pub const SCALE_FLOOR: f64 = 1e-3;
pub const TOL_COMPOSITE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: usize,
    /// Entries checked per input tensor; larger tensors are subsampled.
    pub max_entries: usize,
    /// Scales the input gradient of one op kind, to prove failures surface.
    pub fault: Option<(OpTag, f64)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            max_entries: 24,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Seed and input name of the worst error.
    pub worst: (u64, String),
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|o| !o.passed()).map(|o| o.op).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<5} {:<28} seeds={:<3} max_rel_err={:.3e} threshold={:.0e} worst=seed {} `{}`",
                if o.passed() { "PASS" } else { "FAIL" },
                o.op,
                o.seeds,
                o.max_rel_err,
                o.threshold,
                o.worst.0,
                o.worst.1
            );
        }
        let _ = writeln!(
            s,
            "{} of {} ops passed in {:.1}s",
            self.ops.iter().filter(|o| o.passed()).count(),
            self.ops.len(),
            self.elapsed.as_secs_f64()
        );
        s
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &mut Binder<'_, f64>) -> Result<Var>>;

struct Case {
    inputs: Params<f64>,
    spectral: Option<SpectralState>,
    h: f64,
    build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `Σ out ⊙ R` with `R` drawn from `seed`.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = randn(&mut rng, g.value(out).shape(), 1.0);
    let rv = g.constant(r);
    let p = g.mul(out, rv)?;
    g.sum(p)
}

fn eval(case: &Case, inputs: &Params<f64>, fault: Option<(OpTag, f64)>) -> Result<(f64, Option<Graph<f64>>, Var)> {
    let mut g = Graph::<f64>::new();
    if let Some((tag, s)) = fault {
        g.inject_backward_fault(tag, s);
    }
    let mut sn = case.spectral.clone();
    let mut b = Binder::trainable(inputs);
    if let Some(s) = sn.as_mut() {
        b = b.with_spectral(s, false);
    }
    let out = (case.build)(&mut g, &mut b)?;
    let v = g.value(out).item();
    Ok((v, Some(g), out))
}

/// Largest relative error over all inputs, with the input's name.
fn check_case(case: &Case, max_entries: usize, fault: Option<(OpTag, f64)>, seed: u64) -> Result<(f64, String)> {
    let (_, g, root) = eval(case, &case.inputs, fault)?;
    let grads = g.expect("graph").backward(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xfd));
    let mut checked = Vec::new();
    for (name, t) in case.inputs.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        let idx: Vec<usize> = if t.len() <= max_entries {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), max_entries).into_vec()
        };
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut p = case.inputs.clone();
            let base = t.data()[i];
            p.get_mut(name)?.data_mut()[i] = base + case.h;
            let (lp, _, _) = eval(case, &p, None)?;
            p.get_mut(name)?.data_mut()[i] = base - case.h;
            let (lm, _, _) = eval(case, &p, None)?;
            pairs.push(((lp - lm) / (2.0 * case.h), analytic.data()[i]));
        }
        checked.push((name.clone(), pairs));
    }
    let inf_norm = |ps: &[(f64, f64)]| ps.iter().map(|(n, a)| n.abs().max(a.abs())).fold(0.0, f64::max);
    let global = checked.iter().map(|(_, ps)| inf_norm(ps)).fold(0.0, f64::max);
    let mut worst = (0.0, String::new());
    for (name, ps) in &checked {
        let diff = ps.iter().map(|(n, a)| (n - a).abs()).fold(0.0, f64::max);
        // Gradients that vanish exactly (e.g. a key bias under softmax)
        // are measured against a small fraction of the case's scale.
        let scale = inf_norm(ps).max(SCALE_FLOOR * global).max(1e-300);
        let err = diff / scale;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}

fn param(p: &mut Params<f64>, name: &str, t: Tensor<f64>) {
    p.insert(name, t);
}

/// Zero-initialised biases put ReLU inputs exactly on the kink when an
/// upstream activation is dead; random biases move them off it.
fn jitter_biases(p: &mut Params<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") {
            *t = randn(rng, t.shape(), 0.1);
        }
    }
}

/// Values at least 0.1 apart so a small step never changes the argmax.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, order.into_iter().map(|k| 0.1 * k as f64 - 0.05 * n as f64).collect()).expect("size")
}

fn case_conv(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stride, pad) = if seed % 2 == 0 {
        (1, Padding::zero(1))
    } else {
        (2, Padding::reflect(1))
    };
    let mut p = Params::new();
    param(&mut p, "x", randn(&mut rng, &[2, 3, 7, 6], 1.0));
    param(&mut p, "w", randn(&mut rng, &[4, 3, 3, 3], 0.5));
    param(&mut p, "b", randn(&mut rng, &[4], 0.5));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let (x, w, bias) = (b.bind(g, "x")?, b.bind(g, "w")?, b.bind(g, "b")?);
            let y = g.conv2d(x, w, Some(bias), stride, pad)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_maxpool(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    param(&mut p, "x", separated(&mut rng, &[2, 2, 6, 4]));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = g.maxpool2(x)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_upsample(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    param(&mut p, "x", randn(&mut rng, &[2, 2, 3, 4], 1.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = g.upsample_nearest2(x)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_softmax(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = (seed % 3) as usize;
    let mut p = Params::new();
    param(&mut p, "x", randn(&mut rng, &[3, 5, 4], 2.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = g.softmax(x, axis)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_elementwise(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    param(&mut p, "a", randn(&mut rng, &[2, 3, 4, 4], 1.0));
    param(&mut p, "b", randn(&mut rng, &[2, 2, 4, 4], 1.0));
    param(&mut p, "s", randn(&mut rng, &[1], 1.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, bd| {
            let (a, b, s) = (bd.bind(g, "a")?, bd.bind(g, "b")?, bd.bind(g, "s")?);
            let c = g.concat_channels(a, b)?;
            let sl = g.slice_channels(c, 1, 3)?;
            let sq = g.square(sl)?;
            let m = g.mul(sq, a)?;
            let d = g.sub(m, a)?;
            let e = g.scale_by(s, d)?;
            let f = g.mul_scalar(e, 0.7)?;
            let sm = g.spatial_mean(f)?;
            let t1 = weighted_sum(g, sm, seed)?;
            let t2 = g.mean(f)?;
            let gm = g.gram(b)?;
            let t3 = weighted_sum(g, gm, seed + 1)?;
            let r = g.reshape(a, &[2, 48])?;
            let t4 = weighted_sum(g, r, seed + 2)?;
            let u = g.add(t1, t2)?;
            let v = g.add(t3, t4)?;
            g.add(u, v)
        }),
    }
}

fn case_attention(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = [0, 1, 2, FULL_RADIUS][(seed % 4) as usize];
    let (h, w) = (4 + (seed % 3) as usize, 5);
    let mut p = Params::new();
    param(&mut p, "q", randn(&mut rng, &[1, 3, h, w], 1.0));
    param(&mut p, "k", randn(&mut rng, &[1, 3, h, w], 1.0));
    param(&mut p, "v", randn(&mut rng, &[1, 4, h, w], 1.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let (q, k, v) = (b.bind(g, "q")?, b.bind(g, "k")?, b.bind(g, "v")?);
            let y = g.attention(q, k, v, radius)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_self_attention(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = NonLocalParams::new("sa", 4);
    let gamma = AttentionGamma::new("sa.gamma");
    let mut p32 = Params::new();
    block.init(&mut p32, &mut rng);
    gamma.init(&mut p32);
    let mut p = p32.cast::<f64>();
    jitter_biases(&mut p, &mut rng);
    param(&mut p, "sa.gamma", randn(&mut rng, &[1], 1.0));
    param(&mut p, "x", randn(&mut rng, &[1, 4, 5, 5], 1.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_KINKED,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = self_attention_residual(g, b, x, &block, &gamma)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_spectral(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w32 = randn(&mut rng, &[5, 2, 3, 3], 1.0).cast::<f32>();
    let mut s = SpectralState::new(3);
    s.register("w", &w32, &mut rng).expect("non-zero");
    s.vectors("w", &w32, true).expect("registered");
    let mut p = Params::new();
    param(&mut p, "w", w32.cast());
    Case {
        inputs: p,
        spectral: Some(s),
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let w = b.weight(g, "w")?;
            weighted_sum(g, w, seed)
        }),
    }
}

fn case_discriminator(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Discriminator::new(DiscriminatorSpec {
        widths: vec![2, 2, 4, 4, 4, 1],
        self_attention_position: Some(4),
        ..DiscriminatorSpec::default()
    })
    .expect("valid spec");
    let (p32, s) = net.init(&mut rng).expect("init");
    let mut p = p32.cast::<f64>();
    jitter_biases(&mut p, &mut rng);
    param(&mut p, "d.sa.gamma", randn(&mut rng, &[1], 1.0));
    param(&mut p, "x", randn(&mut rng, &[1, 1, 8, 8], 1.0));
    Case {
        inputs: p,
        spectral: Some(s),
        h: H_KINKED,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = net.forward(g, b, x)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn case_noise_aware_mse(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let r = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    // The weights are computed once and stay fixed under perturbation.
    let wm = noise_weight_map(&t, &r, &NoiseWeightConfig::default()).expect("valid");
    let mut p = Params::new();
    param(&mut p, "target", t);
    param(&mut p, "recon", r);
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let (t, r) = (b.bind(g, "target")?, b.bind(g, "recon")?);
            noise_aware_mse(g, t, r, &wm)
        }),
    }
}

fn case_wgan(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    param(&mut p, "real", randn(&mut rng, &[2, 1, 2, 2], 1.0));
    param(&mut p, "fake", randn(&mut rng, &[2, 1, 2, 2], 1.0));
    Case {
        inputs: p,
        spectral: None,
        h: H_SMOOTH,
        build: Box::new(move |g, b| {
            let (r, f) = (b.bind(g, "real")?, b.bind(g, "fake")?);
            let d = wgan_discriminator_loss(g, r, f)?;
            let gl = wgan_generator_loss(g, f)?;
            let s = g.mul_scalar(gl, 0.5)?;
            g.add(d, s)
        }),
    }
}

fn case_tml(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = FeatureExtractor::random_with(seed, &[3, 4]);
    let mut p = Params::new();
    param(&mut p, "a", Tensor::from_fn(&[1, 1, 6, 6], |_| rng.gen_range(0.0..1.0)));
    param(&mut p, "b", Tensor::from_fn(&[1, 1, 6, 6], |_| rng.gen_range(0.0..1.0)));
    Case {
        inputs: p,
        spectral: None,
        h: H_KINKED,
        build: Box::new(move |g, b| {
            let (x, y) = (b.bind(g, "a")?, b.bind(g, "b")?);
            texture_matching_loss(g, x, y, &fx)
        }),
    }
}

fn case_generator(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Generator::new(GeneratorSpec {
        base_channels: 4,
        kernel: 3,
        downsample_factor: 4,
        nl_radius: NeighborhoodSpec::new(1, 4),
        use_nonlocal: true,
    })
    .expect("valid spec");
    let mut p = net.init(&mut rng).cast::<f64>();
    jitter_biases(&mut p, &mut rng);
    param(&mut p, "x", Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(0.0..1.0)));
    Case {
        inputs: p,
        spectral: None,
        h: H_KINKED,
        build: Box::new(move |g, b| {
            let x = b.bind(g, "x")?;
            let y = net.forward(g, b, x)?;
            weighted_sum(g, y, seed)
        }),
    }
}

type Maker = fn(u64) -> Case;

/// Checked operations with their case builder and tolerance.
pub const OPS: [(&str, f64); 13] = [
    ("conv2d", TOL_OP),
    ("maxpool2", TOL_OP),
    ("upsample_nearest2", TOL_OP),
    ("softmax", TOL_OP),
    ("elementwise_reductions", TOL_OP),
    ("neighborhood_attention", TOL_OP),
    ("self_attention_residual", TOL_OP),
    ("spectral_normalize", TOL_OP),
    ("discriminator_forward", TOL_OP),
    ("noise_aware_mse", TOL_OP),
    ("wgan_losses", TOL_OP),
    ("texture_matching_loss", TOL_OP),
    ("generator_composite", TOL_COMPOSITE),
];

const MAKERS: [Maker; 13] = [
    case_conv,
    case_maxpool,
    case_upsample,
    case_softmax,
    case_elementwise,
    case_attention,
    case_self_attention,
    case_spectral,
    case_discriminator,
    case_noise_aware_mse,
    case_wgan,
    case_tml,
    case_generator,
];

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.seeds == 0 || cfg.max_entries == 0 {
        return Err(Error::config("gradcheck needs at least one seed and one entry"));
    }
    let start = Instant::now();
    let mut ops = Vec::with_capacity(OPS.len());
    for ((op, threshold), make) in OPS.iter().zip(MAKERS) {
        let mut rep = OpReport {
            op,
            seeds: cfg.seeds,
            max_rel_err: 0.0,
            threshold: *threshold,
            worst: (0, String::new()),
        };
        for s in 0..cfg.seeds as u64 {
            let seed = splitmix64(s);
            let (err, name) = check_case(&make(seed), cfg.max_entries, cfg.fault, seed)?;
            if err > rep.max_rel_err || rep.worst.1.is_empty() {
                rep.max_rel_err = err;
                rep.worst = (s, name);
            }
        }
        log::debug!("{op}: max relative error {:.3e}", rep.max_rel_err);
        ops.push(rep);
    }
    Ok(GradcheckReport {
        ops,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_seeds_pass() {
        let r = run_gradcheck(&GradcheckConfig {
            seeds: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn corrupted_conv_backward_is_named() {
        let r = run_gradcheck(&GradcheckConfig {
            seeds: 1,
            fault: Some((OpTag::Conv2d, 1.5)),
            ..Default::default()
        })
        .unwrap();
        assert!(r.failing().contains(&"conv2d"), "{}", r.render());
    }
}
