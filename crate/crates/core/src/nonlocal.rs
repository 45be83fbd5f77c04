//! Neighborhood-restricted non-local attention.
//!
//! For each location `i` the response is
//! `y_i = Σ_{j∈N_i} softmax_j(θ(x_i)·φ(x_j)) g(x_j)`, where `N_i` is the
//! `(2r+1)²` square around `i` clipped to the feature map. A radius that
//! covers the whole map turns this into full-image self-attention, which the
//! discriminator uses with a residual `γ` fusion. The generator fuses by
//! channel concatenation instead.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{to_channels_last, Padding};
use crate::params::{Binder, Params};
use crate::tensor::element::Element;
use crate::tensor::{concat_channels, Tensor};

/// Radius large enough to cover any feature map: full self-attention.
pub const FULL_RADIUS: usize = usize::MAX;

/// Radius actually used on an `h × w` map.
pub fn effective_radius(radius: usize, h: usize, w: usize) -> usize {
    radius.min(h.max(w).saturating_sub(1))
}

fn window_side(r: usize) -> usize {
    2 * r + 1
}

/// Forward kernel. Returns the response `[N, Cv, H, W]` and the normalised
/// weights laid out `[N, H, W, (2r+1)²]` (zero outside the clipped window).
pub fn attention_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    radius: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, e, h, w) = q.dims4()?;
    let (nk, ek, hk, wk) = k.dims4()?;
    let (nv, cv, hv, wv) = v.dims4()?;
    if (nk, ek, hk, wk) != (n, e, h, w) {
        return Err(Error::dim(format!(
            "query embedding {:?} and key embedding {:?} differ",
            q.shape(),
            k.shape()
        )));
    }
    if (nv, hv, wv) != (n, h, w) {
        return Err(Error::dim(format!(
            "value map {:?} does not match embedding {:?}",
            v.shape(),
            q.shape()
        )));
    }
    let r = effective_radius(radius, h, w);
    let side = window_side(r);
    let slots = side * side;
    let hw = h * w;
    let mut out = vec![T::ZERO; n * cv * hw];
    let mut weights = vec![T::ZERO; n * hw * slots];
    let mut logits = vec![0f64; slots];
    let mut acc = vec![0f64; cv];

    for b in 0..n {
        let qs = to_channels_last(&q.data()[b * e * hw..(b + 1) * e * hw], e, hw);
        let ks = to_channels_last(&k.data()[b * e * hw..(b + 1) * e * hw], e, hw);
        let vs = to_channels_last(&v.data()[b * cv * hw..(b + 1) * cv * hw], cv, hw);
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let i = y * w + x;
                let qi = &qs[i * e..(i + 1) * e];
                let mut m = f64::NEG_INFINITY;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let j = yy * w + xx;
                        let kj = &ks[j * e..(j + 1) * e];
                        let l: f64 = qi.iter().zip(kj).map(|(a, c)| a.to_f64() * c.to_f64()).sum();
                        let s = (yy + r - y) * side + (xx + r - x);
                        logits[s] = l;
                        m = m.max(l);
                    }
                }
                let mut z = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let s = (yy + r - y) * side + (xx + r - x);
                        logits[s] = (logits[s] - m).exp();
                        z += logits[s];
                    }
                }
                acc.fill(0.0);
                let wrow = &mut weights[(b * hw + i) * slots..(b * hw + i + 1) * slots];
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let s = (yy + r - y) * side + (xx + r - x);
                        let a = logits[s] / z;
                        wrow[s] = T::from_f64(a);
                        let j = yy * w + xx;
                        for (c, vj) in acc.iter_mut().zip(&vs[j * cv..(j + 1) * cv]) {
                            *c += a * vj.to_f64();
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out[(b * cv + c) * hw + i] = T::from_f64(*a);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, cv, h, w], out)?, weights))
}

/// Adjoint of [`attention_forward`]: `(d_q, d_k, d_v)`.
pub fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    radius: usize,
    weights: &[T],
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, e, h, w) = q.dims4()?;
    let (_, cv, _, _) = v.dims4()?;
    let r = effective_radius(radius, h, w);
    let side = window_side(r);
    let slots = side * side;
    let hw = h * w;
    let mut dq = vec![0f64; n * e * hw];
    let mut dk = vec![0f64; n * e * hw];
    let mut dv = vec![0f64; n * cv * hw];
    let mut dlogit = vec![0f64; slots];

    for b in 0..n {
        let qs = to_channels_last(&q.data()[b * e * hw..(b + 1) * e * hw], e, hw);
        let ks = to_channels_last(&k.data()[b * e * hw..(b + 1) * e * hw], e, hw);
        let vs = to_channels_last(&v.data()[b * cv * hw..(b + 1) * cv * hw], cv, hw);
        let gs = to_channels_last(&d_out.data()[b * cv * hw..(b + 1) * cv * hw], cv, hw);
        // channels-last accumulators for this sample
        let mut dq_b = vec![0f64; e * hw];
        let mut dk_b = vec![0f64; e * hw];
        let mut dv_b = vec![0f64; cv * hw];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let i = y * w + x;
                let gi = &gs[i * cv..(i + 1) * cv];
                let wrow = &weights[(b * hw + i) * slots..(b * hw + i + 1) * slots];
                let mut dot = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let s = (yy + r - y) * side + (xx + r - x);
                        let j = yy * w + xx;
                        let a = wrow[s].to_f64();
                        let mut da = 0.0;
                        for ((dvj, vj), gc) in dv_b[j * cv..(j + 1) * cv]
                            .iter_mut()
                            .zip(&vs[j * cv..(j + 1) * cv])
                            .zip(gi)
                        {
                            let gc = gc.to_f64();
                            *dvj += a * gc;
                            da += gc * vj.to_f64();
                        }
                        dlogit[s] = da;
                        dot += a * da;
                    }
                }
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let s = (yy + r - y) * side + (xx + r - x);
                        let j = yy * w + xx;
                        let dl = wrow[s].to_f64() * (dlogit[s] - dot);
                        for c in 0..e {
                            dq_b[i * e + c] += dl * ks[j * e + c].to_f64();
                            dk_b[j * e + c] += dl * qs[i * e + c].to_f64();
                        }
                    }
                }
            }
        }
        for p in 0..hw {
            for c in 0..e {
                dq[(b * e + c) * hw + p] = dq_b[p * e + c];
                dk[(b * e + c) * hw + p] = dk_b[p * e + c];
            }
            for c in 0..cv {
                dv[(b * cv + c) * hw + p] = dv_b[p * cv + c];
            }
        }
    }
    let cast = |d: Vec<f64>| d.into_iter().map(T::from_f64).collect::<Vec<T>>();
    Ok((
        Tensor::new(q.shape(), cast(dq))?,
        Tensor::new(k.shape(), cast(dk))?,
        Tensor::new(v.shape(), cast(dv))?,
    ))
}

/// Neighborhood extent. `radius_module` is measured at the resolution the
/// block runs at; `radius_fullres` is the same extent in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub radius_module: usize,
    pub radius_fullres: usize,
}

impl NeighborhoodSpec {
    pub fn new(radius_module: usize, downsample: usize) -> Self {
        Self {
            radius_module,
            radius_fullres: radius_module.saturating_mul(downsample),
        }
    }

    pub fn full() -> Self {
        Self {
            radius_module: FULL_RADIUS,
            radius_fullres: FULL_RADIUS,
        }
    }

    pub fn window_side(&self) -> usize {
        2 * self.radius_module + 1
    }
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self::new(5, 4)
    }
}

/// Where the θ, φ and g weights of one block live in a [`Params`] store.
///
/// θ and φ are 1×1 convolutions to `embed_dim` channels; g is
/// conv3×3 → ReLU → conv3×3 producing `g_width` channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonLocalParams {
    pub prefix: String,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub g_width: usize,
}

impl NonLocalParams {
    /// Embedding of half the input width, g keeping the width.
    pub fn new(prefix: impl Into<String>, in_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            embed_dim: (in_channels / 2).max(1),
            g_width: in_channels,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut Params<f32>, rng: &mut R) {
        let (c, e, cg) = (self.in_channels, self.embed_dim, self.g_width);
        params.insert_conv(&self.name("theta"), e, c, 1, rng);
        params.insert_conv(&self.name("phi"), e, c, 1, rng);
        params.insert_conv(&self.name("g1"), cg, c, 3, rng);
        params.insert_conv(&self.name("g2"), cg, cg, 3, rng);
    }

    fn conv<T: Element>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
        part: &str,
        pad: usize,
    ) -> Result<Var> {
        let w = binder.weight(g, &format!("{}.w", self.name(part)))?;
        let b = binder.bind(g, &format!("{}.b", self.name(part)))?;
        g.conv2d(x, w, Some(b), 1, Padding::zero(pad))
    }

    /// `(θ(x), φ(x), g(x))`.
    pub fn embeddings<T: Element>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "non-local block {} expects {} channels, got {c}",
                self.prefix, self.in_channels
            )));
        }
        let theta = self.conv(g, binder, x, "theta", 0)?;
        let phi = self.conv(g, binder, x, "phi", 0)?;
        let h = self.conv(g, binder, x, "g1", 1)?;
        let h = g.relu(h)?;
        let gx = self.conv(g, binder, h, "g2", 1)?;
        Ok((theta, phi, gx))
    }
}

/// Scalar gate of the residual fusion `z = γ·y + x`, initialised at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGamma {
    pub name: String,
}

impl AttentionGamma {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    pub fn init(&self, params: &mut Params<f32>) {
        params.insert(&self.name, Tensor::scalar(0.0));
    }
}

pub fn neighborhood_attention<T: Element>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    p: &NonLocalParams,
    n: &NeighborhoodSpec,
) -> Result<Var> {
    let (theta, phi, gx) = p.embeddings(g, binder, x)?;
    g.attention(theta, phi, gx, n.radius_module)
}

/// Full-image attention added back through the residual gate: `γ·y + x`.
pub fn self_attention_residual<T: Element>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    p: &NonLocalParams,
    gamma: &AttentionGamma,
) -> Result<Var> {
    let c = g.value(x).dims4()?.1;
    if p.g_width != c {
        return Err(Error::dim(format!(
            "residual fusion needs g width {} to equal input channels {c}",
            p.g_width
        )));
    }
    let y = neighborhood_attention(g, binder, x, p, &NeighborhoodSpec::full())?;
    let gm = binder.bind(g, &gamma.name)?;
    let gy = g.scale_by(gm, y)?;
    g.add(gy, x)
}

/// Concatenation fusion `[x ; y]` along channels.
pub fn fuse_concat<T: Element>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    g.concat_channels(x, y)
}

/// Normalised attention weights `[N, H, W, (2r+1)²]` for inspection.
pub fn attention_weights_debug(
    x: &Tensor<f32>,
    params: &Params<f32>,
    p: &NonLocalParams,
    n: &NeighborhoodSpec,
) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::frozen(params);
    let xv = g.constant(x.clone());
    let (theta, phi, gx) = p.embeddings(&mut g, &mut binder, xv)?;
    let (_, weights) = attention_forward(g.value(theta), g.value(phi), g.value(gx), n.radius_module)?;
    let (b, _, h, w) = x.dims4()?;
    let side = window_side(effective_radius(n.radius_module, h, w));
    Tensor::new(&[b, h, w, side * side], weights)
}

/// Plain-tensor concat fusion, for callers outside a graph.
pub fn fuse_concat_tensors<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    concat_channels(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn radius_zero_returns_values() {
        let q = random(&[1, 2, 4, 5], 1);
        let k = random(&[1, 2, 4, 5], 2);
        let v = random(&[1, 3, 4, 5], 3);
        let (y, wts) = attention_forward(&q, &k, &v, 0).unwrap();
        assert_eq!(y, v);
        assert!(wts.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn zero_query_averages_window() {
        let q = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let k = random(&[1, 2, 3, 3], 5);
        let v = random(&[1, 1, 3, 3], 6);
        let (y, _) = attention_forward(&q, &k, &v, 1).unwrap();
        // corner (0,0) sees the 2×2 block in the top-left
        let corner = (v.data()[0] + v.data()[1] + v.data()[3] + v.data()[4]) / 4.0;
        assert!((y.data()[0] - corner).abs() < 1e-12);
        let centre = v.data().iter().sum::<f64>() / 9.0;
        assert!((y.data()[4] - centre).abs() < 1e-12);
    }

    #[test]
    fn weights_rows_sum_to_one_including_borders() {
        let q = random(&[2, 3, 5, 4], 7);
        let k = random(&[2, 3, 5, 4], 8);
        let v = random(&[2, 1, 5, 4], 9);
        let (_, wts) = attention_forward(&q, &k, &v, 2).unwrap();
        for row in wts.chunks(25) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn embedding_mismatch_is_a_dimension_error() {
        let q = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let v = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            attention_forward(&q, &k, &v, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn effective_radius_caps_at_extent() {
        assert_eq!(effective_radius(FULL_RADIUS, 9, 7), 8);
        assert_eq!(effective_radius(2, 9, 7), 2);
        assert_eq!(effective_radius(FULL_RADIUS, 1, 1), 0);
        assert_eq!(NeighborhoodSpec::default().radius_fullres, 20);
    }
}
