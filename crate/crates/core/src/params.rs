//! Named parameter storage and binding of parameters into a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::spectral::SpectralState;
use crate::tensor::element::Element;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl Params<f32> {
    /// Registers `{prefix}.w` (He-normal) and `{prefix}.b` (zeros).
    pub fn insert_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
    ) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(rng) as f32);
        self.insert(&format!("{prefix}.w"), w);
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }
}

/// Lends parameters to one graph, creating each leaf at most once.
///
/// With a [`SpectralState`] attached, [`Binder::weight`] divides the weight
/// by its spectral-norm estimate before handing it out.
pub struct Binder<'p, T: Element> {
    params: &'p Params<T>,
    vars: BTreeMap<String, Var>,
    normalized: BTreeMap<String, Var>,
    trainable: bool,
    spectral: Option<(&'p mut SpectralState, bool)>,
}

impl<'p, T: Element> Binder<'p, T> {
    pub fn trainable(params: &'p Params<T>) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
            normalized: BTreeMap::new(),
            trainable: true,
            spectral: None,
        }
    }

    /// Parameters enter the graph as constants.
    pub fn frozen(params: &'p Params<T>) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(params)
        }
    }

    /// Spectrally normalise weights; `update` runs a power iteration first.
    pub fn with_spectral(mut self, state: &'p mut SpectralState, update: bool) -> Self {
        self.spectral = Some((state, update));
        self
    }

    pub fn params(&self) -> &Params<T> {
        self.params
    }

    pub fn bind(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable {
            g.param(name, t)
        } else {
            g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn weight(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.normalized.get(name) {
            return Ok(v);
        }
        let w = self.bind(g, name)?;
        let Some((state, update)) = self.spectral.as_mut() else {
            return Ok(w);
        };
        let (u, v) = state.vectors(name, g.value(w), *update)?;
        let out = g.spectral_normalize(w, &u, &v)?;
        self.normalized.insert(name.to_string(), out);
        Ok(out)
    }
}
