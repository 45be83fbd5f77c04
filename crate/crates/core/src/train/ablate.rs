//! Variant ablation and the neighborhood-radius sweep.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::networks::{Variant, VariantConfig};

use super::config::{format_radius, TrainConfig};
use super::eval::{evaluate, EvalRow};
use super::run::train_on;

pub const ABLATION_HEADER: &str = "variant,use_nonlocal,loss,adversary,nl_radius,iterations,rmse,psnr,ssim,cnr,tml";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: VariantConfig,
    pub nl_radius: usize,
    pub iterations: u64,
    pub metrics: EvalRow,
}

/// Trains `cfg` and scores it on the test split.
pub fn train_and_score(cfg: &TrainConfig, ds: &Dataset, fx: &FeatureExtractor) -> Result<AblationRow> {
    let slices = ds.load_split(Split::Train, &cfg.window)?;
    let (state, outcome) = train_on(cfg, &slices)?;
    let report = evaluate(&state, ds, Split::Test, fx)?;
    report.write_csv(&cfg.out_dir.join("eval.csv"))?;
    Ok(AblationRow {
        config: cfg.variant_config(),
        nl_radius: cfg.scale.nl_radius,
        iterations: outcome.iterations,
        metrics: report.mean,
    })
}

/// Trains each variant from the same seed into `base.out_dir/<variant>`.
pub fn ablate(base: &TrainConfig, variants: &[Variant], fx: &FeatureExtractor) -> Result<Vec<AblationRow>> {
    if variants.len() < 2 {
        return Err(Error::config("ablation needs at least two variants"));
    }
    let ds = Dataset::open(&base.data_dir)?;
    variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                variant: v,
                out_dir: base.out_dir.join(v.to_string()),
                ..base.clone()
            };
            log::info!("ablation: training {v}");
            train_and_score(&cfg, &ds, fx)
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.config.name,
            r.config.use_nonlocal,
            r.config.loss,
            r.config.adversary,
            format_radius(r.nl_radius),
            r.iterations,
            m.rmse,
            m.psnr,
            m.ssim,
            m.cnr.map(|v| v.to_string()).unwrap_or_default(),
            m.tml
        );
    }
    s
}

/// Trains `base.variant` once per radius into `base.out_dir/radius_<r>`.
pub fn radius_sweep(base: &TrainConfig, radii: &[usize], fx: &FeatureExtractor) -> Result<Vec<(usize, f64)>> {
    if !base.variant_config().use_nonlocal {
        return Err(Error::config(format!(
            "radius sweep needs a variant with the non-local block, got {}",
            base.variant
        )));
    }
    let ds = Dataset::open(&base.data_dir)?;
    radii
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.scale.nl_radius = r;
            cfg.out_dir = base.out_dir.join(format!("radius_{}", format_radius(r)));
            log::info!("radius sweep: training radius {}", format_radius(r));
            Ok((r, train_and_score(&cfg, &ds, fx)?.metrics.psnr))
        })
        .collect()
}

pub fn radius_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("radius,psnr\n");
    for (r, p) in rows {
        let _ = writeln!(s, "{},{p}", format_radius(*r));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
