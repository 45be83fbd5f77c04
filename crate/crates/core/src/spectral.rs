//! Spectral normalisation by power iteration.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::element::Element;
use crate::tensor::Tensor;

/// Per-weight singular-vector estimates `u` (left) and `v` (right).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub power_iterations: usize,
    vectors: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for SpectralState {
    fn default() -> Self {
        Self::new(1)
    }
}

fn normalize(x: &mut [f64]) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::numeric("power iteration collapsed to a zero vector"));
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// One power-iteration step on a row-major `rows × cols` matrix starting
/// from `u`. Returns the refreshed `(u, v)`.
pub fn power_step(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; cols];
    for (r, ur) in u.iter().enumerate() {
        for (vc, x) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += x * ur;
        }
    }
    normalize(&mut v)?;
    let mut u: Vec<f64> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(x, vc)| x * vc).sum())
        .collect();
    normalize(&mut u)?;
    Ok((u, v))
}

fn matrix_dims<T: Element>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

impl SpectralState {
    pub fn new(power_iterations: usize) -> Self {
        Self {
            power_iterations,
            vectors: BTreeMap::new(),
        }
    }

    /// Random unit `u` for `name`, with `v` set from one half-step.
    pub fn register<R: Rng + ?Sized>(&mut self, name: &str, w: &Tensor<f32>, rng: &mut R) -> Result<()> {
        let (rows, cols) = matrix_dims(w);
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u)?;
        let wd: Vec<f64> = w.data().iter().map(|&x| x as f64).collect();
        let mut v = vec![0.0; cols];
        for (r, ur) in u.iter().enumerate() {
            for (vc, x) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *vc += x * ur;
            }
        }
        normalize(&mut v)?;
        self.set(name, &u, &v);
        Ok(())
    }

    pub fn set(&mut self, name: &str, u: &[f64], v: &[f64]) {
        self.vectors.insert(
            name.to_string(),
            (
                u.iter().map(|&x| x as f32).collect(),
                v.iter().map(|&x| x as f32).collect(),
            ),
        );
    }

    pub fn get(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.vectors.get(name).map(|(u, v)| (u.as_slice(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Vectors to normalise `w` with. When `update` is set, runs
    /// `power_iterations` steps from the stored `u` and stores the result;
    /// otherwise returns the stored pair unchanged.
    pub fn vectors<T: Element>(&mut self, name: &str, w: &Tensor<T>, update: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let (rows, cols) = matrix_dims(w);
        let (u, v) = self
            .vectors
            .get(name)
            .ok_or_else(|| Error::config(format!("no spectral vectors registered for `{name}`")))?;
        if u.len() != rows || v.len() != cols {
            return Err(Error::dim(format!(
                "spectral vectors for `{name}` are {}x{}, weight is {rows}x{cols}",
                u.len(),
                v.len()
            )));
        }
        let mut u: Vec<f64> = u.iter().map(|&x| x as f64).collect();
        let mut v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        if update {
            let wd: Vec<f64> = w.data().iter().map(|x| x.to_f64()).collect();
            for _ in 0..self.power_iterations {
                (u, v) = power_step(&wd, rows, cols, &u)?;
            }
            self.set(name, &u, &v);
        }
        Ok((u, v))
    }
}

/// Returns `weight / σ̂` after one update of the stored vectors.
pub fn spectral_normalize(weight: &Tensor<f32>, name: &str, state: &mut SpectralState) -> Result<Tensor<f32>> {
    let (u, v) = state.vectors(name, weight, true)?;
    let mut g = Graph::<f32>::new();
    let w = g.constant(weight.clone());
    let out = g.spectral_normalize(w, &u, &v)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registered(w: &Tensor<f32>, seed: u64) -> SpectralState {
        let mut s = SpectralState::default();
        s.register("w", w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn diagonal_converges_to_unit_norm() {
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut s = registered(&w, 3);
        let mut out = w.clone();
        for _ in 0..5 {
            out = spectral_normalize(&w, "w", &mut s).unwrap();
        }
        // largest singular value of a diagonal matrix is its largest |entry|
        assert!((out.data()[0] - 1.0).abs() < 0.02, "{out:?}");
    }

    #[test]
    fn orthogonal_matrix_is_unchanged() {
        let (c, s) = (0.6f32, 0.8f32);
        let w = Tensor::new(&[2, 2], vec![c, -s, s, c]).unwrap();
        let mut st = registered(&w, 4);
        let out = spectral_normalize(&w, "w", &mut st).unwrap();
        assert!(out.max_abs_diff(&w) < 1e-4);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::from_fn(&[4, 3, 1, 1], |_| rng.gen_range(-1.0f32..1.0));
        let w5 = w.map(|x| 5.0 * x);
        let mut a = registered(&w, 1);
        let mut b = registered(&w, 1);
        let na = spectral_normalize(&w, "w", &mut a).unwrap();
        let nb = spectral_normalize(&w5, "w", &mut b).unwrap();
        assert!(na.max_abs_diff(&nb) < 1e-5);
    }

    #[test]
    fn zero_matrix_is_a_numeric_error() {
        let w = Tensor::<f32>::zeros(&[2, 2]);
        let mut s = SpectralState::default();
        let r = s.register("w", &w, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn unregistered_weight_is_reported() {
        let w = Tensor::<f32>::ones(&[2, 2]);
        let mut s = SpectralState::default();
        assert!(matches!(spectral_normalize(&w, "nope", &mut s), Err(Error::Config(_))));
    }

    #[test]
    fn u_stays_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::from_fn(&[5, 7], |_| rng.gen_range(-1.0f32..1.0));
        let mut s = registered(&w, 2);
        for _ in 0..3 {
            spectral_normalize(&w, "w", &mut s).unwrap();
            let (u, _) = s.get("w").unwrap();
            let n: f64 = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
