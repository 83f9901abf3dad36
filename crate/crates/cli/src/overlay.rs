//! Per-slice grayscale overlays with the mask contour burned in.

use std::path::{Path, PathBuf};

use rdunet::eval::BinaryMask;
use rdunet::Tensor;

/// Mask pixels with a 4-neighbour outside the mask or on the slice border.
pub fn contour(slice: &[u8], h: usize, w: usize) -> Vec<bool> {
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && slice[y as usize * w + x as usize] == 1
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
        })
        .collect()
}

/// Binary PGM (P5) of one slice: intensities in `[0, 1]` scaled to
/// `0..=200`, contour pixels at 255.
pub fn pgm(image: &[f32], edge: &[bool], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.iter().zip(edge).map(|(&v, &e)| {
        if e {
            255
        } else {
            (v.clamp(0.0, 1.0) * 200.0).round() as u8
        }
    }));
    out
}

/// Writes `<id>_slice<NNN>.pgm` for every slice; returns the paths.
pub fn write_overlays(dir: &Path, id: &str, image: &Tensor<f32>, mask: &BinaryMask) -> Result<Vec<PathBuf>, String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let [_, h, w] = mask.shape();
    let n = h * w;
    let mut paths = Vec::new();
    for (d, slice) in mask.slices().enumerate() {
        let bytes = pgm(&image.data()[d * n..(d + 1) * n], &contour(slice, h, w), h, w);
        let path = dir.join(format!("{id}_slice{d:03}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}
