//! Signal-dependent Gaussian noise standing in for a reduced-dose scan.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseModel {
    pub dose_factor: f64,
    /// Gain of the signal-dependent variance term, in HU².
    pub gain: f64,
    /// Electronic noise floor, in HU².
    pub floor: f64,
    pub seed: u64,
}

impl Default for DoseModel {
    fn default() -> Self {
        Self {
            dose_factor: 0.25,
            gain: 300.0,
            floor: 25.0,
            seed: 0,
        }
    }
}

/// Attenuation proxy `(v + 1000) / 1400` clipped to `[0, 1]`.
#[inline]
pub fn mapped_intensity(hu: f64) -> f64 {
    ((hu + 1000.0) / 1400.0).clamp(0.0, 1.0)
}

impl DoseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.dose_factor > 0.0 && self.dose_factor <= 1.0) {
            return Err(Error::config(format!(
                "dose_factor must lie in (0, 1], got {}",
                self.dose_factor
            )));
        }
        if !(self.gain >= 0.0 && self.floor >= 0.0) {
            return Err(Error::config("noise gain and floor must be non-negative"));
        }
        Ok(())
    }

    /// Noise standard deviation at `hu`.
    pub fn sigma(&self, hu: f64) -> f64 {
        (self.gain * mapped_intensity(hu) / self.dose_factor + self.floor).sqrt()
    }
}

/// Adds independent `N(0, σ(v)²)` noise to every pixel of `clean` (HU).
pub fn simulate_low_dose(clean: &Tensor<f32>, d: &DoseModel) -> Result<Tensor<f32>> {
    d.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v as f64 + d.sigma(v as f64) * z) as f32
        })
        .collect();
    Tensor::new(clean.shape(), data)
}
