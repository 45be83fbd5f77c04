//! Training configuration and its `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{parse_key_values, DatasetConfig, DoseModel};
use crate::error::{Error, Result};
use crate::losses::{NoiseWeightConfig, ScaleMode};
use crate::metrics::HuWindow;
use crate::networks::{ModelScale, Variant, VariantConfig};
use crate::nonlocal::FULL_RADIUS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub patch_size: usize,
    pub patches_per_slice: usize,
    /// Iterations without a new best smoothed reconstruction loss.
    pub patience: u64,
    /// Length of the running mean used for early stopping.
    pub loss_smoothing: usize,
    pub max_iters: u64,
    pub n_critic: usize,
    pub lambda_adv: f64,
    /// `|mean D(real) − mean D(fake)|` above this flags the log row.
    pub divergence_bound: f64,
    pub checkpoint_every: u64,
    pub power_iterations: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub scale: ModelScale,
    pub weights: NoiseWeightConfig,
    pub window: HuWindow,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

fn parse_radius(v: &str) -> Option<usize> {
    if v == "full" {
        Some(FULL_RADIUS)
    } else {
        v.parse().ok()
    }
}

pub fn format_radius(r: usize) -> String {
    if r == FULL_RADIUS {
        "full".into()
    } else {
        r.to_string()
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let paper = Self {
            preset: Preset::Paper,
            variant: Variant::M6,
            batch_size: 64,
            lr_g: 1e-6,
            lr_d: 4e-6,
            lr_decay_every: 5000,
            lr_decay_factor: 0.5,
            patch_size: 120,
            patches_per_slice: 10,
            patience: 15000,
            loss_smoothing: 200,
            max_iters: 100_000,
            n_critic: 1,
            lambda_adv: 1.0,
            divergence_bound: 1e3,
            checkpoint_every: 100,
            power_iterations: 1,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            scale: ModelScale::paper(),
            weights: NoiseWeightConfig::default(),
            window: HuWindow::default(),
            dataset: DatasetConfig {
                height: 120,
                width: 120,
                ..DatasetConfig::default()
            },
        };
        match p {
            Preset::Paper => paper,
            Preset::Desk => Self {
                preset: Preset::Desk,
                batch_size: 16,
                lr_g: 2e-3,
                lr_d: 4e-4,
                patch_size: 32,
                max_iters: 500,
                scale: ModelScale::desk(),
                dataset: DatasetConfig::default(),
                ..paper
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn variant_config(&self) -> VariantConfig {
        VariantConfig::of(self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad(format!("learning rates must be positive, got {} / {}", self.lr_g, self.lr_d));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 || self.patience == 0 || self.loss_smoothing == 0 {
            return bad("lr_decay_every, patience and loss_smoothing must be positive".into());
        }
        if self.batch_size == 0 || self.patches_per_slice == 0 || self.n_critic == 0 || self.max_iters == 0 {
            return bad("batch_size, patches_per_slice, n_critic and max_iters must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return bad(format!("patch_size must be a positive multiple of 4, got {}", self.patch_size));
        }
        if self.patch_size > self.dataset.height.min(self.dataset.width) {
            return bad(format!(
                "patch_size {} exceeds phantom size {}x{}",
                self.patch_size, self.dataset.height, self.dataset.width
            ));
        }
        if !(self.lambda_adv >= 0.0 && self.divergence_bound > 0.0) {
            return bad("lambda_adv must be non-negative and divergence_bound positive".into());
        }
        self.weights.validate()?;
        self.dataset.validate()
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let bad = || Error::config(format!("bad value `{v}` for `{k}`"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k.as_str() {
                "preset" => {}
                "variant" => self.variant = v.parse()?,
                "batch_size" => self.batch_size = num!(),
                "lr_g" => self.lr_g = num!(),
                "lr_d" => self.lr_d = num!(),
                "lr_decay_every" => self.lr_decay_every = num!(),
                "lr_decay_factor" => self.lr_decay_factor = num!(),
                "patch_size" => self.patch_size = num!(),
                "patches_per_slice" => self.patches_per_slice = num!(),
                "patience" => self.patience = num!(),
                "loss_smoothing" => self.loss_smoothing = num!(),
                "max_iters" => self.max_iters = num!(),
                "n_critic" => self.n_critic = num!(),
                "lambda_adv" => self.lambda_adv = num!(),
                "divergence_bound" => self.divergence_bound = num!(),
                "checkpoint_every" => self.checkpoint_every = num!(),
                "power_iterations" => self.power_iterations = num!(),
                "seed" => self.seed = num!(),
                "data_dir" => self.data_dir = PathBuf::from(v),
                "out_dir" => self.out_dir = PathBuf::from(v),
                "gen_channels" => self.scale.gen_channels = num!(),
                "gen_kernel" => self.scale.gen_kernel = num!(),
                "nl_radius" => self.scale.nl_radius = parse_radius(v).ok_or_else(bad)?,
                "disc_widths" => {
                    self.scale.disc_widths = v
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?
                }
                "h_g" => self.weights.h_g = num!(),
                "sigma_g" => self.weights.sigma_g = num!(),
                "weight_scale" => {
                    self.weights.scale_mode = match v.as_str() {
                        "paper" => ScaleMode::Paper,
                        "mean_one" => ScaleMode::MeanOne,
                        _ => return Err(bad()),
                    }
                }
                "hu_lo" => self.window = HuWindow::new(num!(), self.window.hi)?,
                "hu_hi" => self.window = HuWindow::new(self.window.lo, num!())?,
                "phantom_count" => self.dataset.count = num!(),
                "phantom_size" => {
                    let s: usize = num!();
                    self.dataset.height = s;
                    self.dataset.width = s;
                }
                "test_count" => self.dataset.test_count = num!(),
                "complexity" => self.dataset.complexity = num!(),
                "dose_factor" => self.dataset.dose.dose_factor = num!(),
                "noise_gain" => self.dataset.dose.gain = num!(),
                "noise_floor" => self.dataset.dose.floor = num!(),
                "data_seed" => self.dataset.seed = num!(),
                other => return Err(Error::config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(())
    }

    /// Parses a config file body; a `preset` key selects the starting point.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let kv = parse_key_values(text, origin)?;
        let mut cfg = match kv.get("preset").map(String::as_str) {
            None | Some("paper") => Self::preset(Preset::Paper),
            Some("desk") => Self::preset(Preset::Desk),
            Some(other) => return Err(Error::config(format!("unknown preset `{other}`"))),
        };
        cfg.apply(&kv)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every setting, one per line, in a fixed order. Parsing the output
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        let vc = self.variant_config();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.as_str().into());
        kv("variant", self.variant.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_g", self.lr_g.to_string());
        kv("lr_d", self.lr_d.to_string());
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("patches_per_slice", self.patches_per_slice.to_string());
        kv("patience", self.patience.to_string());
        kv("loss_smoothing", self.loss_smoothing.to_string());
        kv("max_iters", self.max_iters.to_string());
        kv("n_critic", self.n_critic.to_string());
        kv("lambda_adv", self.lambda_adv.to_string());
        kv("divergence_bound", self.divergence_bound.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("power_iterations", self.power_iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("gen_channels", self.scale.gen_channels.to_string());
        kv("gen_kernel", self.scale.gen_kernel.to_string());
        kv("nl_radius", format_radius(self.scale.nl_radius));
        kv(
            "disc_widths",
            self.scale
                .disc_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("h_g", self.weights.h_g.to_string());
        kv("sigma_g", self.weights.sigma_g.to_string());
        kv(
            "weight_scale",
            match self.weights.scale_mode {
                ScaleMode::Paper => "paper".into(),
                ScaleMode::MeanOne => "mean_one".into(),
            },
        );
        kv("hu_lo", self.window.lo.to_string());
        kv("hu_hi", self.window.hi.to_string());
        kv("phantom_count", self.dataset.count.to_string());
        kv("phantom_size", self.dataset.height.to_string());
        kv("test_count", self.dataset.test_count.to_string());
        kv("complexity", self.dataset.complexity.to_string());
        kv("dose_factor", self.dataset.dose.dose_factor.to_string());
        kv("noise_gain", self.dataset.dose.gain.to_string());
        kv("noise_floor", self.dataset.dose.floor.to_string());
        kv("data_seed", self.dataset.seed.to_string());
        let _ = writeln!(s, "# use_nonlocal = {}", vc.use_nonlocal);
        let _ = writeln!(s, "# loss = {}", vc.loss);
        let _ = writeln!(s, "# adversary = {}", vc.adversary);
        s
    }

    pub fn dose(&self) -> DoseModel {
        self.dataset.dose
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.patch_size, c.patches_per_slice), (64, 120, 10));
        assert_eq!((c.lr_g, c.lr_d), (1e-6, 4e-6));
        assert_eq!((c.lr_decay_every, c.lr_decay_factor, c.patience), (5000, 0.5, 15000));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk();
        c.scale.nl_radius = FULL_RADIUS;
        c.variant = Variant::M3;
        let back = TrainConfig::parse(&c.to_text(), Path::new("t")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_settings() {
        let p = Path::new("t");
        assert!(TrainConfig::parse("lr_g = 0", p).unwrap().validate().is_err());
        assert!(TrainConfig::parse("lr_decay_factor = 1", p).unwrap().validate().is_err());
        assert!(TrainConfig::parse("patience = 0", p).unwrap().validate().is_err());
        assert!(matches!(TrainConfig::parse("bogus = 1", p), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("lr_g = fast", p), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("preset = huge", p), Err(Error::Config(_))));
    }
}
