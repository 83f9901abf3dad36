//! Eight-slice windows over a volume.

use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::tensor::Tensor;

pub const PATCH_SLICES: usize = 8;

/// An image volume with its tumor mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub id: String,
    /// Intensities `[D, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl VolumePair {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "volume pair",
                left: image.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.mask.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: String,
    pub start: usize,
    /// `[8, H, W, 1]`.
    pub image: Tensor<f32>,
    /// `[8, H, W, 1]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    /// Slice count of the source volume when it had to be edge-padded up to
    /// eight slices.
    pub padded_from: Option<usize>,
}

impl PatchRecord {
    pub fn has_tumor(&self) -> bool {
        self.mask.data().iter().any(|&v| v > 0.0)
    }
}

/// Repeats the last slice until there are eight.
fn pad_to_patch(pair: &VolumePair) -> (Tensor<f32>, BinaryMask, Option<usize>) {
    let [d, h, w] = pair.shape();
    if d >= PATCH_SLICES {
        return (pair.image.clone(), pair.mask.clone(), None);
    }
    let n = h * w;
    let last = d - 1;
    let pick = |s: usize| s.min(last);
    let image: Vec<f32> = (0..PATCH_SLICES)
        .flat_map(|s| pair.image.data()[pick(s) * n..(pick(s) + 1) * n].iter().copied())
        .collect();
    let mask: Vec<u8> = (0..PATCH_SLICES)
        .flat_map(|s| pair.mask.slice(pick(s)).iter().copied())
        .collect();
    (
        Tensor::from_vec([PATCH_SLICES, h, w], image).expect("padded extent"),
        BinaryMask::new([PATCH_SLICES, h, w], mask).expect("copied from a binary mask"),
        Some(d),
    )
}

/// Start slices of the training windows: stride 8, plus a final window
/// flush with the end when the depth is not a multiple of 8.
pub fn training_starts(depth: usize) -> Vec<usize> {
    if depth < PATCH_SLICES {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=depth - PATCH_SLICES).step_by(PATCH_SLICES).collect();
    if !depth.is_multiple_of(PATCH_SLICES) {
        starts.push(depth - PATCH_SLICES);
    }
    starts
}

/// Start slices of the stride-1 inference windows.
pub fn inference_starts(depth: usize) -> Vec<usize> {
    (0..=depth.max(PATCH_SLICES) - PATCH_SLICES).collect()
}

/// Cuts a volume into eight-slice patches. Training keeps only windows with
/// at least one tumor voxel; inference returns every window. Volumes with
/// fewer than eight slices are edge-padded first.
pub fn extract_patches(pair: &VolumePair, training: bool) -> Result<Vec<PatchRecord>> {
    let [d, h, w] = pair.shape();
    if d == 0 {
        return Err(Error::invalid(format!("volume {} has no slices", pair.id)));
    }
    let (image, mask, padded_from) = pad_to_patch(pair);
    let depth = d.max(PATCH_SLICES);
    let starts = if training {
        training_starts(depth)
    } else {
        inference_starts(depth)
    };
    let n = h * w;
    let mut out = Vec::with_capacity(starts.len());
    for start in starts {
        let range = start * n..(start + PATCH_SLICES) * n;
        let m = &mask.data()[range.clone()];
        if training && !m.contains(&1) {
            continue;
        }
        out.push(PatchRecord {
            id: pair.id.clone(),
            start,
            image: Tensor::from_vec([PATCH_SLICES, h, w, 1], image.data()[range].to_vec())?,
            mask: Tensor::from_vec([PATCH_SLICES, h, w, 1], m.iter().map(|&v| v as f32).collect())?,
            padded_from,
        });
    }
    Ok(out)
}
