//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

/// Moments are stored in f32 and combined in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter in `params`.
///
/// Fails without touching anything when a gradient is missing, misshapen or
/// non-finite.
pub fn adam_step(
    params: &mut Params<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::dim(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient for `{name}`; step refused"
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
            let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *pi = (*pi as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> Params<f32> {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(0.0), &mut s, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut p = single(0.0);
        let mut s = AdamState::default();
        let lr = 1e-3;
        let mut prev = 0.0f64;
        for _ in 0..200 {
            adam_step(&mut p, &grad(0.37), &mut s, lr).unwrap();
            let now = p.get("w").unwrap().item() as f64;
            let step = (prev - now).abs();
            assert!((step - lr).abs() / lr < 0.01, "step {step}");
            prev = now;
        }
    }

    #[test]
    fn descends_on_square() {
        let mut p = single(1.0);
        let mut s = AdamState::default();
        // d/dw w² = 2w
        adam_step(&mut p, &grad(2.0), &mut s, 0.1).unwrap();
        assert!(p.get("w").unwrap().item() < 1.0);
    }

    #[test]
    fn nan_gradient_is_refused() {
        let mut p = single(1.0);
        let mut s = AdamState::default();
        let r = adam_step(&mut p, &grad(f32::NAN), &mut s, 0.1);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(s.t, 0);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = single(1.0);
        let mut s = AdamState::default();
        assert!(adam_step(&mut p, &grad(1.0), &mut s, 0.0).is_err());
    }
}
