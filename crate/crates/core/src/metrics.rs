//! Image-quality metrics on HU-windowed images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Display window in HU; values are clipped to it and mapped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    pub lo: f32,
    pub hi: f32,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { lo: -160.0, hi: 240.0 }
    }
}

impl HuWindow {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::config(format!("HU window needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    #[inline]
    pub fn invert(&self, v: f32) -> f32 {
        v * (self.hi - self.lo) + self.lo
    }
}

pub fn hu_window(image: &Tensor<f32>, w: &HuWindow) -> Tensor<f32> {
    image.map(|v| w.apply(v))
}

/// Maps normalised values back to HU (no clipping).
pub fn hu_unwindow(image: &Tensor<f32>, w: &HuWindow) -> Tensor<f32> {
    image.map(|v| w.invert(v))
}

pub fn rmse(x: &Tensor<f32>, g: &Tensor<f32>) -> Result<f64> {
    x.expect_same_shape(g)?;
    let se: f64 = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((se / x.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+∞`.
pub fn psnr(x: &Tensor<f32>, g: &Tensor<f32>, max_val: f64) -> Result<f64> {
    let e = rmse(x, g)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_val / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
        }
    }
}

fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Separable "valid" Gaussian filter of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let wo = w - n + 1;
    let ho = h - n + 1;
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained windows, averaged
/// over every image plane. Luminance, contrast and structure terms are
/// combined with unit exponents and `c3 = c2 / 2`.
pub fn ssim(x: &Tensor<f32>, g: &Tensor<f32>, cfg: &SsimConfig) -> Result<f64> {
    x.expect_same_shape(g)?;
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim("ssim needs at least a 2-D image"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < cfg.window || w < cfg.window {
        return Err(Error::dim(format!(
            "ssim window {} larger than image {h}x{w}",
            cfg.window
        )));
    }
    let c1 = (0.01 * cfg.dynamic_range).powi(2);
    let c2 = (0.03 * cfg.dynamic_range).powi(2);
    let c3 = c2 / 2.0;
    let k = gaussian_1d(cfg.window, cfg.sigma);
    let planes = x.len() / (h * w);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let a: Vec<f64> = x.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = g.data()[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
        let ma = filter_valid(&a, h, w, &k);
        let mb = filter_valid(&b, h, w, &k);
        let saa = filter_valid(&aa, h, w, &k);
        let sbb = filter_valid(&bb, h, w, &k);
        let sab = filter_valid(&ab, h, w, &k);
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = (saa[i] - mx * mx).max(0.0);
            let vy = (sbb[i] - my * my).max(0.0);
            let cov = sab[i] - mx * my;
            let (sx, sy) = (vx.sqrt(), vy.sqrt());
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
            let s = (cov + c3) / (sx * sy + c3);
            total += l * c * s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Foreground (lesion) and background masks over one `h × w` image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPair {
    pub height: usize,
    pub width: usize,
    pub foreground: Vec<bool>,
    pub background: Vec<bool>,
}

impl RegionPair {
    pub fn new(height: usize, width: usize, foreground: Vec<bool>, background: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if foreground.len() != n || background.len() != n {
            return Err(Error::dim("region masks must match the image size"));
        }
        if foreground.iter().zip(&background).any(|(a, b)| *a && *b) {
            return Err(Error::contract("foreground and background masks overlap"));
        }
        Ok(Self {
            height,
            width,
            foreground,
            background,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            foreground: self.background.clone(),
            background: self.foreground.clone(),
            ..*self
        }
    }
}

fn region_stats(values: &[f32], mask: &[bool]) -> Result<(f64, f64)> {
    let sel: Vec<f64> = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if sel.is_empty() {
        return Err(Error::contract("CNR region mask is empty"));
    }
    let n = sel.len() as f64;
    let mean = sel.iter().sum::<f64>() / n;
    let var = sel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Contrast-to-noise ratio `(μ_fg − μ_bg) / √(σ_fg² + σ_bg²)` on a single
/// `h × w` plane (population variances).
pub fn cnr(image: &Tensor<f32>, r: &RegionPair) -> Result<f64> {
    if image.len() != r.height * r.width {
        return Err(Error::dim(format!(
            "image has {} pixels, masks cover {}x{}",
            image.len(),
            r.height,
            r.width
        )));
    }
    let (m1, v1) = region_stats(image.data(), &r.foreground)?;
    let (m2, v2) = region_stats(image.data(), &r.background)?;
    Ok((m1 - m2) / (v1 + v2).sqrt())
}
