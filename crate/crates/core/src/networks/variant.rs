use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nonlocal::NeighborhoodSpec;

use super::{DiscriminatorSpec, GeneratorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    NcMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adversary {
    None,
    Vanilla,
    Snmp,
    SaSnmp,
}

impl Adversary {
    pub fn is_some(self) -> bool {
        self != Adversary::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Variant::M1,
            "M2" => Variant::M2,
            "M3" => Variant::M3,
            "M4" => Variant::M4,
            "M5" => Variant::M5,
            "M6" => Variant::M6,
            other => return Err(Error::config(format!("unknown variant `{other}`"))),
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::NcMse => "nc_mse",
        })
    }
}

impl fmt::Display for Adversary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adversary::None => "none",
            Adversary::Vanilla => "vanilla",
            Adversary::Snmp => "snmp",
            Adversary::SaSnmp => "sa_snmp",
        })
    }
}

/// Toggles that distinguish the six ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantConfig {
    pub name: Variant,
    pub use_nonlocal: bool,
    pub loss: LossKind,
    pub adversary: Adversary,
}

impl VariantConfig {
    pub fn of(name: Variant) -> Self {
        use Adversary as A;
        use LossKind as L;
        let (use_nonlocal, loss, adversary) = match name {
            Variant::M1 => (false, L::Mse, A::None),
            Variant::M2 => (true, L::Mse, A::None),
            Variant::M3 => (true, L::NcMse, A::None),
            Variant::M4 => (true, L::NcMse, A::Vanilla),
            Variant::M5 => (true, L::NcMse, A::Snmp),
            Variant::M6 => (true, L::NcMse, A::SaSnmp),
        };
        Self {
            name,
            use_nonlocal,
            loss,
            adversary,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::of(name.parse()?))
    }
}

/// Width and radius knobs shared by all variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScale {
    pub gen_channels: usize,
    pub gen_kernel: usize,
    pub nl_radius: usize,
    pub disc_widths: Vec<usize>,
}

impl ModelScale {
    pub fn paper() -> Self {
        Self {
            gen_channels: 64,
            gen_kernel: 5,
            nl_radius: 5,
            disc_widths: vec![64, 64, 128, 128, 256, 1],
        }
    }

    pub fn desk() -> Self {
        Self {
            gen_channels: 8,
            gen_kernel: 5,
            nl_radius: 2,
            disc_widths: vec![8, 8, 16, 16, 16, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedVariant {
    pub config: VariantConfig,
    pub generator: GeneratorSpec,
    pub discriminator: Option<DiscriminatorSpec>,
    pub loss: LossKind,
}

pub fn build_variant(cfg: &VariantConfig, scale: &ModelScale) -> Result<ResolvedVariant> {
    let generator = GeneratorSpec {
        base_channels: scale.gen_channels,
        kernel: scale.gen_kernel,
        downsample_factor: 4,
        nl_radius: NeighborhoodSpec::new(scale.nl_radius, 4),
        use_nonlocal: cfg.use_nonlocal,
    };
    generator.validate()?;
    let base = DiscriminatorSpec {
        widths: scale.disc_widths.clone(),
        ..DiscriminatorSpec::default()
    };
    let discriminator = match cfg.adversary {
        Adversary::None => None,
        Adversary::Vanilla => Some(DiscriminatorSpec {
            self_attention_position: None,
            global_mean_head: true,
            ..base
        }),
        Adversary::Snmp => Some(DiscriminatorSpec {
            self_attention_position: None,
            ..base
        }),
        Adversary::SaSnmp => Some(base),
    };
    if let Some(d) = &discriminator {
        d.validate()?;
    }
    Ok(ResolvedVariant {
        config: *cfg,
        generator,
        discriminator,
        loss: cfg.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_table() {
        let m3 = build_variant(&VariantConfig::parse("M3").unwrap(), &ModelScale::paper()).unwrap();
        assert!(m3.generator.use_nonlocal);
        assert_eq!(m3.loss, LossKind::NcMse);
        assert!(m3.discriminator.is_none());

        let m6 = build_variant(&VariantConfig::parse("m6").unwrap(), &ModelScale::paper()).unwrap();
        let d = m6.discriminator.unwrap();
        assert_eq!(d.self_attention_position, Some(4));
        assert!(d.spectral_norm && !d.global_mean_head);

        let m4 = VariantConfig::of(Variant::M4);
        let d = build_variant(&m4, &ModelScale::paper()).unwrap().discriminator.unwrap();
        assert!(d.global_mean_head && d.self_attention_position.is_none());

        let m1 = VariantConfig::of(Variant::M1);
        assert!(!m1.use_nonlocal && m1.loss == LossKind::Mse && m1.adversary == Adversary::None);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(VariantConfig::parse("M7"), Err(Error::Config(_))));
    }
}
