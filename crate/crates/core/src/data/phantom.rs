//! Synthetic chest volumes: a body outline with a smooth noisy background,
//! two dark lung ellipsoids and one or more bright tumor ellipsoids placed
//! inside a lung. The mask is exactly the tumor voxel set.

use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::patches::{VolumePair, PATCH_SLICES};
use super::transform::normalize_minmax;
use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::tensor::Tensor;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Integer bounding box, inclusive.
    fn bounds(&self) -> [(isize, isize); 3] {
        std::array::from_fn(|i| {
            (
                (self.center[i] - self.radii[i]).floor() as isize,
                (self.center[i] + self.radii[i]).ceil() as isize,
            )
        })
    }

    fn voxels(&self) -> impl Iterator<Item = [isize; 3]> + '_ {
        let [(z0, z1), (y0, y1), (x0, x1)] = self.bounds();
        (z0..=z1).flat_map(move |z| {
            (y0..=y1).flat_map(move |y| {
                (x0..=x1)
                    .map(move |x| [z, y, x])
                    .filter(|v| self.contains(v.map(|c| c as f64)))
            })
        })
    }
}

/// Tumor in-plane radius range as a fraction of the slice extent.
pub const TUMOR_RADIUS_FRACTION: (f64, f64) = (0.08, 0.14);

/// Generates a seeded phantom of shape `[depth, height, width]` with a tumor
/// count drawn from `tumors`. Fails when a tumor cannot be placed inside a
/// lung without touching the volume border.
pub fn gen_phantom(
    rng: &mut impl Rng,
    id: impl Into<String>,
    shape: [usize; 3],
    tumors: RangeInclusive<usize>,
) -> Result<VolumePair> {
    let [d, h, w] = shape;
    if d < PATCH_SLICES || h < 8 || w < 8 {
        return Err(Error::invalid(format!(
            "phantom needs at least {PATCH_SLICES} slices of 8x8, got {shape:?}"
        )));
    }
    if tumors.is_empty() || *tumors.start() == 0 {
        return Err(Error::invalid("phantom needs a tumor count range starting at 1 or more"));
    }
    let (df, hf, wf) = (d as f64, h as f64, w as f64);
    let mid = [(df - 1.0) / 2.0, (hf - 1.0) / 2.0, (wf - 1.0) / 2.0];
    let lungs = [0.3, 0.7].map(|fx| Ellipsoid {
        center: [mid[0], mid[1] + rng.random_range(-0.03..0.03) * hf, fx * wf],
        radii: [0.7 * df, rng.random_range(0.28..0.33) * hf, rng.random_range(0.14..0.17) * wf],
    });

    // low-frequency background texture
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..2.0) / hf,
                rng.random_range(0.5..2.0) / wf,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            ]
        })
        .collect();
    let noise = Normal::new(0.0, 0.02).expect("positive sigma");

    let count = rng.random_range(tumors);
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let lung = lungs[rng.random_range(0..2)];
            let (lo, hi) = TUMOR_RADIUS_FRACTION;
            let radii = [
                rng.random_range(1.5..(df / 4.0).max(2.0)),
                rng.random_range(lo..hi) * hf,
                rng.random_range(lo..hi) * wf,
            ];
            let center: [f64; 3] = std::array::from_fn(|i| {
                let r = lung.radii[i] * 0.8;
                lung.center[i] + rng.random_range(-r..=r)
            });
            let t = Ellipsoid { center, radii };
            let [(z0, z1), (y0, y1), (x0, x1)] = t.bounds();
            let inside_volume = z0 >= 1
                && y0 >= 1
                && x0 >= 1
                && z1 <= d as isize - 2
                && y1 <= h as isize - 2
                && x1 <= w as isize - 2;
            if inside_volume
                && t.voxels().next().is_some()
                && t.voxels().all(|v| lung.contains(v.map(|c| c as f64)))
            {
                ok = Some(t);
                break;
            }
        }
        placed.push(ok.ok_or_else(|| {
            Error::invalid(format!(
                "could not place a tumor inside a lung of a {shape:?} phantom after {PLACEMENT_RETRIES} attempts"
            ))
        })?);
    }

    let mut mask = vec![0u8; d * h * w];
    for t in &placed {
        for [z, y, x] in t.voxels() {
            mask[(z as usize * h + y as usize) * w + x as usize] = 1;
        }
    }
    let body = Ellipsoid {
        center: mid,
        radii: [f64::INFINITY, 0.47 * hf, 0.47 * wf],
    };
    let mut image = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let base = if mask[(z * h + y) * w + x] == 1 {
                    0.85
                } else if lungs.iter().any(|l| l.contains(p)) {
                    0.15
                } else if body.contains(p) {
                    0.55 + waves
                        .iter()
                        .map(|[fy, fx, ph, a]| a * (std::f64::consts::TAU * (fy * p[1] + fx * p[2]) + ph).sin())
                        .sum::<f64>()
                } else {
                    0.0
                };
                let v = if base > 0.0 { base + noise.sample(rng) } else { 0.0 };
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let image = normalize_minmax(&Tensor::from_vec([d, h, w], image)?);
    VolumePair::new(id, image, BinaryMask::new(shape, mask)?)
}
