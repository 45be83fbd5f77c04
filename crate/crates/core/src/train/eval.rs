//! Held-out evaluation and the metrics CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{tml, FeatureExtractor};
use crate::metrics::{cnr, hu_window, psnr, rmse, ssim, HuWindow, RegionPair, SsimConfig};
use crate::tensor::Tensor;

use super::model::TrainState;

pub const EVAL_HEADER: &str = "id,rmse,psnr,ssim,cnr,tml";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub cnr: Option<f64>,
    pub tml: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

/// Metrics of one windowed output against its windowed reference, both
/// `[1, 1, H, W]`.
pub fn score_image(
    id: &str,
    output: &Tensor<f32>,
    clean: &Tensor<f32>,
    region: Option<&RegionPair>,
    fx: &FeatureExtractor,
) -> Result<EvalRow> {
    Ok(EvalRow {
        id: id.to_string(),
        rmse: rmse(output, clean)?,
        psnr: psnr(output, clean, 1.0)?,
        ssim: ssim(output, clean, &SsimConfig::default())?,
        cnr: region.map(|r| cnr(output, r)).transpose()?,
        tml: tml(output, clean, fx)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("nothing to evaluate"));
        }
        let cnrs: Vec<f64> = rows.iter().filter_map(|r| r.cnr).collect();
        let mean = EvalRow {
            id: "mean".into(),
            rmse: mean(rows.iter().map(|r| r.rmse)),
            psnr: mean(rows.iter().map(|r| r.psnr)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
            cnr: (!cnrs.is_empty()).then(|| mean(cnrs.iter().copied())),
            tml: mean(rows.iter().map(|r| r.tml)),
        };
        Ok(Self { rows, mean })
    }

    /// Full-precision CSV; infinite PSNR prints as `inf`, a missing CNR as
    /// an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let cnr = r.cnr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{cnr},{}", r.id, r.rmse, r.psnr, r.ssim, r.tml);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn as_batch(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    t.reshape(&[1, 1, s[s.len() - 2], s[s.len() - 1]])
}

/// Scores `produce(noisy)` against the clean image for every id in `split`.
pub fn evaluate_with(
    ds: &Dataset,
    split: Split,
    window: &HuWindow,
    fx: &FeatureExtractor,
    mut produce: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<EvalReport> {
    let ids = ds.ids(split);
    if ids.is_empty() {
        return Err(Error::config(format!("split `{}` is empty", split.as_str())));
    }
    ds.check_files(&ids)?;
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let (clean, low) = ds.load_hu(id)?;
        let meta = ds.load_meta(id)?;
        let clean = as_batch(&hu_window(&clean, window))?;
        let noisy = as_batch(&hu_window(&low, window))?;
        let out = produce(&noisy)?;
        rows.push(score_image(id, &out, &clean, meta.region_pair()?.as_ref(), fx)?);
    }
    EvalReport::new(rows)
}

/// Metrics of the trained generator on `split`.
pub fn evaluate(state: &TrainState, ds: &Dataset, split: Split, fx: &FeatureExtractor) -> Result<EvalReport> {
    evaluate_with(ds, split, &state.window, fx, |x| state.denoise_normalized(x))
}

/// Metrics of the unprocessed low-dose input.
pub fn evaluate_noisy(ds: &Dataset, split: Split, window: &HuWindow, fx: &FeatureExtractor) -> Result<EvalReport> {
    evaluate_with(ds, split, window, fx, |x| Ok(x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_sentinels() {
        let x = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 7) as f32 / 7.0);
        let r = score_image("a", &x, &x, None, &FeatureExtractor::random(1)).unwrap();
        assert_eq!((r.rmse, r.psnr, r.ssim, r.tml), (0.0, f64::INFINITY, 1.0, 0.0));
        let rep = EvalReport::new(vec![r]).unwrap();
        assert!(rep.to_csv().contains("a,0,inf,1,,0\nmean,0,inf,1,,0\n"));
    }
}
