//! Synthetic phantoms, low-dose simulation and patch sampling.

mod dataset;
mod dose;
mod patches;
mod phantom;

pub use dataset::{parse_key_values, write_dataset, Dataset, DatasetConfig, SliceMeta, Split, MANIFEST, PHANTOM_DIR};
pub use dose::{mapped_intensity, simulate_low_dose, DoseModel};
pub use patches::{extract_patches, PatchBatch, PatchSampler, SlicePair};
pub use phantom::{generate_phantom, Geometry, Lesion, Phantom, Primitive, Role, Shape, AIR_HU, MAX_HU};

/// One round of the splitmix64 mixer, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named sub-stream of `master`.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(splitmix64(master), |acc, b| splitmix64(acc ^ b as u64))
}
