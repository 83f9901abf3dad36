//! Volumes, patches, augmentation and synthetic phantoms.

mod augment;
mod patches;
mod phantom;
mod transform;
mod volume;

pub use augment::{augment, blur, flip_patch, rotate_patch, warp, Affine, AugmentConfig};
pub use patches::{
    extract_patches, inference_starts, training_starts, PatchRecord, VolumePair, PATCH_SLICES,
};
pub use phantom::{gen_phantom, TUMOR_RADIUS_FRACTION};
pub use transform::{normalize_minmax, resize_image, resize_mask, sample_bilinear, sample_nearest};
pub use volume::{
    read_image, read_manifest, read_mask, read_volume, write_image, write_manifest, write_mask,
    Dtype, ManifestEntry, Volume,
};

use std::path::Path;

use crate::error::Result;

/// Reads both volumes of a manifest entry and normalizes the image.
pub fn load_pair(entry: &ManifestEntry) -> Result<VolumePair> {
    let image = normalize_minmax(&read_image(&entry.image)?);
    VolumePair::new(entry.id.clone(), image, read_mask(&entry.mask)?)
}

/// Loads every patient listed in a manifest, in file order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<VolumePair>> {
    read_manifest(path)?.iter().map(load_pair).collect()
}

/// Stable 64-bit seed for one (run seed, patient, epoch) stream.
pub fn derive_seed(seed: u64, patient: &str, epoch: u64) -> u64 {
    // FNV-1a over the id, then two rounds of the splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(mix(seed ^ h) ^ epoch)
}
