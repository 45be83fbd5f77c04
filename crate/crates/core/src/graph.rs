//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op pushes one node
//! whose parents already live in the arena, so insertion order is a valid
//! topological order and the graph is acyclic by construction. A graph is
//! built for one forward pass, consumed by [`Graph::backward`] and dropped.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvAlgo, Padding};
use crate::nonlocal;
use crate::tensor::element::Element;
use crate::tensor::{concat_channels, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of the operation that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Conv2d,
    Relu,
    LeakyRelu,
    MaxPool2,
    Upsample2,
    Softmax,
    Concat,
    SliceChannels,
    Add,
    Sub,
    Mul,
    Square,
    ScaleBy,
    MulScalar,
    Sum,
    Mean,
    SpatialMean,
    Attention,
    SpectralNorm,
    Gram,
    Reshape,
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpTag::Leaf => "leaf",
            OpTag::Conv2d => "conv2d",
            OpTag::Relu => "relu",
            OpTag::LeakyRelu => "leaky_relu",
            OpTag::MaxPool2 => "maxpool2",
            OpTag::Upsample2 => "upsample_nearest2",
            OpTag::Softmax => "softmax",
            OpTag::Concat => "concat_channels",
            OpTag::SliceChannels => "slice_channels",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Square => "square",
            OpTag::ScaleBy => "scale_by",
            OpTag::MulScalar => "mul_scalar",
            OpTag::Sum => "sum",
            OpTag::Mean => "mean",
            OpTag::SpatialMean => "spatial_mean",
            OpTag::Attention => "neighborhood_attention",
            OpTag::SpectralNorm => "spectral_normalize",
            OpTag::Gram => "gram",
            OpTag::Reshape => "reshape",
        };
        f.write_str(s)
    }
}

enum Saved<T> {
    Nothing,
    Conv { stride: usize, pad: Padding },
    Slope(f64),
    Argmax(Vec<usize>),
    Axis(usize),
    Split(usize),
    Slice { start: usize },
    Factor(T),
    Attention { radius: usize, weights: Vec<T> },
    Spectral { u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    tag: OpTag,
    parents: Vec<Var>,
    saved: Saved<T>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    conv_algo: ConvAlgo,
    fault: Option<(OpTag, f64)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    named: BTreeMap<String, Tensor<T>>,
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            conv_algo: ConvAlgo::Tiled,
            fault: None,
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    /// Scales the first-parent adjoint of every `tag` node by `scale`.
    /// Used to prove the gradient checker notices a broken backward rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, tag: OpTag, scale: f64) {
        self.fault = Some((tag, scale));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].tag
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            tag: OpTag::Leaf,
            parents: Vec::new(),
            saved: Saved::Nothing,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf reported by name in [`Gradients`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.leaf(value, true, Some(name.into()))
    }

    /// Unnamed leaf that still receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    fn push(&mut self, tag: OpTag, parents: Vec<Var>, value: Tensor<T>, saved: Saved<T>) -> Result<Var> {
        value.check_finite(&tag.to_string())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            tag,
            parents,
            saved,
            requires_grad,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            self.conv_algo,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(OpTag::Conv2d, parents, out, Saved::Conv { stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(OpTag::Relu, vec![x], out, Saved::Nothing)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { s * v });
        self.push(OpTag::LeakyRelu, vec![x], out, Saved::Slope(slope))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::maxpool2_forward(self.value(x))?;
        self.push(OpTag::MaxPool2, vec![x], out, Saved::Argmax(arg))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2_forward(self.value(x))?;
        self.push(OpTag::Upsample2, vec![x], out, Saved::Nothing)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax_forward(self.value(x), axis)?;
        self.push(OpTag::Softmax, vec![x], out, Saved::Axis(axis))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        self.push(OpTag::Concat, vec![a, b], out, Saved::Split(ca))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        self.push(OpTag::SliceChannels, vec![x], out, Saved::Slice { start })
    }

    fn binary(&mut self, tag: OpTag, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.push(tag, vec![a, b], out, Saved::Nothing)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpTag::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpTag::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpTag::Mul, a, b, |x, y| x * y)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(OpTag::Square, vec![x], out, Saved::Nothing)
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!(
                "scale_by expects a scalar, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| k * v);
        self.push(OpTag::ScaleBy, vec![s, x], out, Saved::Nothing)
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::from_f64(k);
        let out = self.value(x).map(|v| k * v);
        self.push(OpTag::MulScalar, vec![x], out, Saved::Factor(k))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        self.push(OpTag::Sum, vec![x], out, Saved::Nothing)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(T::from_f64(self.value(x).mean_f64()));
        self.push(OpTag::Mean, vec![x], out, Saved::Nothing)
    }

    /// `[N, C, H, W]` → `[N, C, 1, 1]` by averaging each plane.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() / hw as f64))
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        self.push(OpTag::SpatialMean, vec![x], out, Saved::Nothing)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(OpTag::Reshape, vec![x], out, Saved::Nothing)
    }

    /// Softmax-normalised attention of queries `q` over keys `k` within a
    /// `(2·radius+1)²` window, aggregating values `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, radius: usize) -> Result<Var> {
        let (out, weights) =
            nonlocal::attention_forward(self.value(q), self.value(k), self.value(v), radius)?;
        self.push(
            OpTag::Attention,
            vec![q, k, v],
            out,
            Saved::Attention { radius, weights },
        )
    }

    /// `W / (uᵀ W v)` with `u`, `v` held constant.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::dim(format!(
                "spectral vectors ({}, {}) do not match a {rows}x{cols} weight",
                u.len(),
                v.len()
            )));
        }
        let sigma = bilinear(wt.data(), u, v);
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::numeric(format!(
                "spectral norm estimate {sigma} is not positive"
            )));
        }
        let out = wt.map(|x| T::from_f64(x.to_f64() / sigma));
        self.push(
            OpTag::SpectralNorm,
            vec![w],
            out,
            Saved::Spectral {
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    /// Per-sample Gram matrix `F Fᵀ` of features viewed as `C × (H·W)`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * c];
        for b in 0..n {
            let f = &xs[b * c * p..(b + 1) * c * p];
            // SAFETY: f is c×p, its transpose view p×c, output c×c.
            unsafe {
                T::gemm(
                    c,
                    p,
                    c,
                    T::ONE,
                    f.as_ptr(),
                    p as isize,
                    1,
                    f.as_ptr(),
                    1,
                    p as isize,
                    T::ZERO,
                    out[b * c * c..].as_mut_ptr(),
                    c as isize,
                    1,
                );
            }
        }
        let out = Tensor::new(&[n, c, c], out)?;
        self.push(OpTag::Gram, vec![x], out, Saved::Nothing)
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Every named parameter gets an entry in the result; parameters the
    /// root does not depend on receive zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", root.0)));
        }
        if self.nodes[root.0].value.shape() != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parents.iter().find(|p| p.0 >= i) {
                return Err(Error::Graph(format!(
                    "cycle: node {i} ({}) consumes node {}",
                    node.tag, p.0
                )));
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(&[1]));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.adjoint(node, &g)?;
            grads[i] = Some(g);
            for (k, (p, dp)) in node.parents.iter().zip(contributions).enumerate() {
                let Some(mut dp) = dp else { continue };
                if k == 0 {
                    if let Some((tag, scale)) = self.fault {
                        if tag == node.tag {
                            let s = T::from_f64(scale);
                            dp = dp.map(|v| v * s);
                        }
                    }
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&dp),
                    slot @ None => *slot = Some(dp),
                }
            }
        }

        let mut named = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                named.insert(name.clone(), g);
            }
        }
        Ok(Gradients {
            named,
            by_node: grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint contributions for each parent of `node` (None when unused).
    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let ps = &node.parents;
        let val = |k: usize| &self.nodes[ps[k].0].value;
        let want = |k: usize| self.wants(ps[k]);
        Ok(match (&node.tag, &node.saved) {
            (OpTag::Conv2d, Saved::Conv { stride, pad }) => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(0), val(1), *stride, *pad, g, want(0))?;
                let mut out = vec![dx, want(1).then_some(dw)];
                if ps.len() == 3 {
                    out.push(want(2).then_some(db));
                }
                out
            }
            (OpTag::Relu, _) => vec![Some(
                val(0).zip_map(g, |x, d| if x > T::ZERO { d } else { T::ZERO })?,
            )],
            (OpTag::LeakyRelu, Saved::Slope(s)) => {
                let s = T::from_f64(*s);
                vec![Some(val(0).zip_map(g, |x, d| if x > T::ZERO { d } else { s * d })?)]
            }
            (OpTag::MaxPool2, Saved::Argmax(arg)) => {
                vec![Some(kernels::maxpool2_backward(val(0).shape(), arg, g)?)]
            }
            (OpTag::Upsample2, _) => vec![Some(kernels::upsample_nearest2_backward(g)?)],
            (OpTag::Softmax, Saved::Axis(axis)) => {
                vec![Some(kernels::softmax_backward(&node.value, g, *axis)?)]
            }
            (OpTag::Concat, Saved::Split(ca)) => {
                let total = g.shape()[1];
                vec![
                    want(0).then(|| g.slice_channels(0, *ca)).transpose()?,
                    want(1).then(|| g.slice_channels(*ca, total - ca)).transpose()?,
                ]
            }
            (OpTag::SliceChannels, Saved::Slice { start }) => {
                let (n, c, h, w) = val(0).dims4()?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![Some(dx)]
            }
            (OpTag::Add, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            (OpTag::Sub, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
            (OpTag::Mul, _) => vec![
                want(0).then(|| g.zip_map(val(1), |d, b| d * b)).transpose()?,
                want(1).then(|| g.zip_map(val(0), |d, a| d * a)).transpose()?,
            ],
            (OpTag::Square, _) => {
                let two = T::from_f64(2.0);
                vec![Some(val(0).zip_map(g, |x, d| two * x * d)?)]
            }
            (OpTag::ScaleBy, _) => {
                let k = val(0).item();
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(1).data())
                    .map(|(d, x)| d.to_f64() * x.to_f64())
                    .sum();
                vec![
                    want(0).then(|| Tensor::scalar(T::from_f64(ds))),
                    want(1).then(|| g.map(|d| k * d)),
                ]
            }
            (OpTag::MulScalar, Saved::Factor(k)) => vec![Some(g.map(|d| *k * d))],
            (OpTag::Sum, _) => vec![Some(Tensor::full(val(0).shape(), g.item()))],
            (OpTag::Mean, _) => {
                let n = val(0).len() as f64;
                vec![Some(Tensor::full(
                    val(0).shape(),
                    T::from_f64(g.item().to_f64() / n),
                ))]
            }
            (OpTag::SpatialMean, _) => {
                let (n, c, h, w) = val(0).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let mut dx = Vec::with_capacity(n * c * hw);
                for d in g.data() {
                    let v = T::from_f64(d.to_f64() * inv);
                    dx.extend(std::iter::repeat(v).take(hw));
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx)?)]
            }
            (OpTag::Reshape, _) => vec![Some(g.reshape(val(0).shape())?)],
            (OpTag::Attention, Saved::Attention { radius, weights }) => {
                let (dq, dk, dv) =
                    nonlocal::attention_backward(val(0), val(1), val(2), *radius, weights, g)?;
                vec![want(0).then_some(dq), want(1).then_some(dk), want(2).then_some(dv)]
            }
            (OpTag::SpectralNorm, Saved::Spectral { u, v, sigma }) => {
                let w = val(0);
                let cols = v.len();
                let inner: f64 = g
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(d, x)| d.to_f64() * x.to_f64())
                    .sum();
                let coef = inner / (sigma * sigma);
                let dw = Tensor::from_fn(w.shape(), |i| {
                    let (r, c) = (i / cols, i % cols);
                    T::from_f64(g.data()[i].to_f64() / sigma - coef * u[r] * v[c])
                });
                vec![Some(dw)]
            }
            (OpTag::Gram, _) => {
                let (n, c, h, w) = val(0).dims4()?;
                let p = h * w;
                let x = val(0).data();
                let mut dx = vec![T::ZERO; x.len()];
                for b in 0..n {
                    let gb = &g.data()[b * c * c..(b + 1) * c * c];
                    let sym: Vec<T> = (0..c * c)
                        .map(|i| gb[i] + gb[(i % c) * c + i / c])
                        .collect();
                    // SAFETY: sym is c×c, features c×p, dx slice c×p.
                    unsafe {
                        T::gemm(
                            c,
                            c,
                            p,
                            T::ONE,
                            sym.as_ptr(),
                            c as isize,
                            1,
                            x[b * c * p..].as_ptr(),
                            p as isize,
                            1,
                            T::ZERO,
                            dx[b * c * p..].as_mut_ptr(),
                            p as isize,
                            1,
                        );
                    }
                }
                vec![Some(Tensor::new(val(0).shape(), dx)?)]
            }
            (tag, _) => {
                return Err(Error::Graph(format!("no adjoint recorded for {tag}")));
            }
        })
    }
}

fn bilinear<T: Element>(w: &[T], u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, ur)| {
            ur * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(x, vc)| x.to_f64() * vc)
                .sum::<f64>()
        })
        .sum()
}
