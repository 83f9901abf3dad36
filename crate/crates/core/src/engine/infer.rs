//! Stride-1 sliding-window inference with overlap averaging.

use rayon::prelude::*;

use crate::data::{inference_starts, PATCH_SLICES};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::tensor::Tensor;

/// Anything that maps an eight-slice patch `[B, 8, H, W, 1]` to
/// probabilities of the same shape.
pub trait PatchModel: Sync {
    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize {
        8
    }
}

impl PatchModel for ModelParams {
    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        model::predict(self, x)
    }

    fn spatial_multiple(&self) -> usize {
        1 << self.config().depth
    }
}

/// Number of windows covering each slice of a `depth`-slice volume, counted
/// by accumulating over the windows themselves.
pub fn overlap_counts(depth: usize) -> Vec<usize> {
    let padded = depth.max(PATCH_SLICES);
    let mut counts = vec![0usize; padded];
    for s in inference_starts(padded) {
        for c in &mut counts[s..s + PATCH_SLICES] {
            *c += 1;
        }
    }
    counts.truncate(depth);
    counts
}

/// Probability volume `[D, H, W]` for an image `[D, H, W]`: every stride-1
/// window of eight slices is predicted and each slice takes the mean of the
/// windows that contain it. Volumes shorter than eight slices are padded by
/// repeating the last slice and cropped afterwards.
pub fn predict_sliding<M: PatchModel + ?Sized>(model: &M, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [d, h, w] = <[usize; 3]>::try_from(image.shape()).map_err(|_| Error::InvalidShape {
        shape: image.shape().to_vec(),
        reason: "sliding-window inference expects [slices, height, width]".into(),
    })?;
    let k = model.spatial_multiple();
    if d == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: format!("needs at least one slice and height and width divisible by {k}"),
        });
    }
    let n = h * w;
    let padded = d.max(PATCH_SLICES);
    let mut volume = image.data().to_vec();
    for _ in d..padded {
        volume.extend_from_within((d - 1) * n..d * n);
    }
    let starts = inference_starts(padded);
    let windows = starts
        .par_iter()
        .map(|&s| {
            let x = Tensor::from_vec(
                [1, PATCH_SLICES, h, w, 1],
                volume[s * n..(s + PATCH_SLICES) * n].to_vec(),
            )?;
            let y = model.predict_patch(&x)?;
            if y.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "patch model output",
                    left: y.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    // accumulate in window order so the sum is independent of scheduling
    let mut sum = vec![0f64; padded * n];
    let mut count = vec![0usize; padded];
    for (&s, y) in starts.iter().zip(&windows) {
        for (acc, &v) in sum[s * n..(s + PATCH_SLICES) * n].iter_mut().zip(y.data()) {
            *acc += v as f64;
        }
        for c in &mut count[s..s + PATCH_SLICES] {
            *c += 1;
        }
    }
    let out = (0..d * n).map(|i| (sum[i] / count[i / n] as f64) as f32).collect();
    Tensor::from_vec([d, h, w], out)
}
