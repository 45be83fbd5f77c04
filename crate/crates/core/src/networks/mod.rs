//! Generator and critic architectures and the variant table.

mod discriminator;
mod generator;
mod variant;

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
pub use variant::{build_variant, Adversary, LossKind, ModelScale, ResolvedVariant, Variant, VariantConfig};
