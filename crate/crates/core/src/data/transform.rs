//! Intensity normalization, per-slice resizing and 2D sampling.

use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::tensor::Tensor;

/// Rescales to `[0, 1]` by the volume's own minimum and maximum. A constant
/// volume maps to zeros.
pub fn normalize_minmax(image: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return Tensor::zeros(image.shape().to_vec());
    }
    image.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Bilinear value at continuous pixel coordinates `(y, x)`, with `fill`
/// outside the slice.
#[inline]
pub fn sample_bilinear(slice: &[f32], h: usize, w: usize, y: f32, x: f32, fill: f32) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f32, xx: f32| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
            fill
        } else {
            slice[yy as usize * w + xx as usize]
        }
    };
    // lerp as a + t (b - a) keeps constant fields exact
    let top = at(y0, x0) + fx * (at(y0, x0 + 1.0) - at(y0, x0));
    let bottom = at(y0 + 1.0, x0) + fx * (at(y0 + 1.0, x0 + 1.0) - at(y0 + 1.0, x0));
    top + fy * (bottom - top)
}

/// Nearest value at continuous coordinates, 0 outside the slice.
#[inline]
pub fn sample_nearest(slice: &[u8], h: usize, w: usize, y: f32, x: f32) -> u8 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
        0
    } else {
        slice[yy as usize * w + xx as usize]
    }
}

/// Source coordinate of destination pixel `i` under pixel-centre alignment,
/// clamped into the source.
#[inline]
fn source_coord(i: usize, scale: f32, extent: usize) -> f32 {
    ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f32)
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("resize target {h}x{w} has a zero extent")));
    }
    Ok(())
}

/// Bilinear resize of every slice of `[D, H, W]` to `[D, h, w]`.
pub fn resize_image(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    check_target(h, w)?;
    let [d, sh, sw] = <[usize; 3]>::try_from(image.shape()).map_err(|_| Error::InvalidShape {
        shape: image.shape().to_vec(),
        reason: "resize expects [slices, height, width]".into(),
    })?;
    let (ky, kx) = (sh as f32 / h as f32, sw as f32 / w as f32);
    let mut out = Vec::with_capacity(d * h * w);
    for slice in image.data().chunks(sh * sw) {
        for i in 0..h {
            let y = source_coord(i, ky, sh);
            for j in 0..w {
                let x = source_coord(j, kx, sw);
                // at a clamped edge the interpolation weight of the fill is zero
                out.push(sample_bilinear(slice, sh, sw, y, x, 0.0));
            }
        }
    }
    Tensor::from_vec([d, h, w], out)
}

/// Nearest-neighbour resize, which keeps the mask binary.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    check_target(h, w)?;
    let [d, sh, sw] = mask.shape();
    let (ky, kx) = (sh as f32 / h as f32, sw as f32 / w as f32);
    let mut out = Vec::with_capacity(d * h * w);
    for slice in mask.slices() {
        for i in 0..h {
            let y = (((i as f32 + 0.5) * ky) as usize).min(sh - 1);
            for j in 0..w {
                let x = (((j as f32 + 0.5) * kx) as usize).min(sw - 1);
                out.push(slice[y * sw + x]);
            }
        }
    }
    BinaryMask::new([d, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_maps_to_unit_interval() {
        let t = Tensor::from_vec([1, 1, 3], vec![-2.0, 0.0, 6.0]).unwrap();
        assert_eq!(normalize_minmax(&t).data(), &[0.0, 0.25, 1.0]);
        assert!(normalize_minmax(&Tensor::full([1, 2, 2], 3.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let t = Tensor::from_vec([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_image(&t, 1, 1).unwrap();
        assert_eq!(r.data(), &[1.5]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let t = Tensor::full([3, 64, 48], 0.37f32);
        let r = resize_image(&t, 32, 20).unwrap();
        assert_eq!(r.shape(), &[3, 32, 20]);
        assert!(r.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn mask_resize_stays_binary_and_keeps_slices() {
        let data: Vec<u8> = (0..2 * 16 * 16).map(|i| ((i / 3) % 2) as u8).collect();
        let m = BinaryMask::new([2, 16, 16], data).unwrap();
        let r = resize_mask(&m, 8, 8).unwrap();
        assert_eq!(r.shape(), [2, 8, 8]);
        assert!(resize_mask(&m, 0, 8).is_err());
    }
}
