//! Random augmentation of eight-slice patches. Every slice of a patch gets
//! the same transform. Geometric operations are composed into a single
//! affine resampling applied to the image (bilinear) and mask (nearest);
//! intensity operations touch the image only.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::patches::PatchRecord;
use super::transform::{sample_bilinear, sample_nearest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Each field is `None` when that augmentation is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability that each enabled operation (other than the flip) fires.
    pub apply_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: Option<f64>,
    /// Smallest crop side as a fraction of the slice; the crop is resized
    /// back to full size.
    pub crop_min: Option<f64>,
    /// Maximum shift as a fraction of the slice extent.
    pub shift_frac: Option<f64>,
    pub scale: Option<(f64, f64)>,
    /// Maximum standard deviation of additive Gaussian noise.
    pub noise_sigma: Option<f64>,
    pub multiply: Option<(f64, f64)>,
    /// Probability of a horizontal flip.
    pub flip_prob: Option<f64>,
    /// Maximum Gaussian blur standard deviation in pixels.
    pub blur_sigma: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            apply_prob: 0.5,
            rotation_deg: Some(10.0),
            crop_min: Some(0.85),
            shift_frac: Some(0.1),
            scale: Some((0.9, 1.1)),
            noise_sigma: Some(0.03),
            multiply: Some((0.9, 1.1)),
            flip_prob: Some(0.5),
            blur_sigma: Some(1.0),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            apply_prob: 0.0,
            rotation_deg: None,
            crop_min: None,
            shift_frac: None,
            scale: None,
            noise_sigma: None,
            multiply: None,
            flip_prob: None,
            blur_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} probability {p} outside [0, 1]")))
            }
        };
        let non_negative = |name: &str, v: Option<f64>| match v {
            Some(v) if v.is_nan() || v < 0.0 => Err(Error::invalid(format!("{name} {v} is negative"))),
            _ => Ok(()),
        };
        let interval = |name: &str, r: Option<(f64, f64)>| match r {
            Some((lo, hi)) if !(lo > 0.0 && lo <= hi) => {
                Err(Error::invalid(format!("{name} range ({lo}, {hi}) is not a positive interval")))
            }
            _ => Ok(()),
        };
        prob("apply", self.apply_prob)?;
        if let Some(p) = self.flip_prob {
            prob("flip", p)?;
        }
        non_negative("rotation", self.rotation_deg)?;
        non_negative("shift", self.shift_frac)?;
        non_negative("noise sigma", self.noise_sigma)?;
        non_negative("blur sigma", self.blur_sigma)?;
        interval("scale", self.scale)?;
        interval("multiply", self.multiply)?;
        if let Some(c) = self.crop_min {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::invalid(format!("crop fraction {c} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Maps destination pixel coordinates `(y, x)` to source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        (
            self.m[0][0] * y + self.m[0][1] * x + self.t[0],
            self.m[1][0] * y + self.m[1][1] * x + self.t[1],
        )
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        let n = &next.m;
        let s = &self.m;
        let mut m = [[0.0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = n[i][0] * s[0][j] + n[i][1] * s[1][j];
            }
        }
        let (ty, tx) = next.apply(self.t[0], self.t[1]);
        Affine { m, t: [ty, tx] }
    }

    /// Linear map `m` about the slice centre.
    fn about_center(m: [[f64; 2]; 2], h: usize, w: usize) -> Affine {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Affine {
            m,
            t: [
                cy - m[0][0] * cy - m[0][1] * cx,
                cx - m[1][0] * cy - m[1][1] * cx,
            ],
        }
    }

    /// Sampling map that rotates the content by `degrees`.
    pub fn rotation(degrees: f64, h: usize, w: usize) -> Affine {
        let (s, c) = degrees.to_radians().sin_cos();
        Self::about_center([[c, s], [-s, c]], h, w)
    }

    /// Sampling map that magnifies the content by `factor`.
    pub fn zoom(factor: f64, h: usize, w: usize) -> Affine {
        Self::about_center([[1.0 / factor, 0.0], [0.0, 1.0 / factor]], h, w)
    }

    pub fn shift(dy: f64, dx: f64) -> Affine {
        Affine {
            t: [-dy, -dx],
            ..Self::identity()
        }
    }

    /// Reads the window of side fraction `frac` starting at `(oy, ox)`,
    /// stretched over the whole slice.
    pub fn crop(frac: f64, oy: f64, ox: f64) -> Affine {
        let off = |o: f64| o + 0.5 * frac - 0.5;
        Affine {
            m: [[frac, 0.0], [0.0, frac]],
            t: [off(oy), off(ox)],
        }
    }

    pub fn flip_horizontal(w: usize) -> Affine {
        Affine {
            m: [[1.0, 0.0], [0.0, -1.0]],
            t: [0.0, w as f64 - 1.0],
        }
    }
}

fn patch_dims(p: &PatchRecord) -> (usize, usize, usize) {
    let s = p.image.shape();
    (s[0], s[1], s[2])
}

/// Resamples image and mask through `map`; out-of-slice samples read 0.
pub fn warp(p: &PatchRecord, map: &Affine) -> PatchRecord {
    let (d, h, w) = patch_dims(p);
    let n = h * w;
    let mut image = Vec::with_capacity(d * n);
    let mut mask = Vec::with_capacity(d * n);
    let mask_bytes: Vec<u8> = p.mask.data().iter().map(|&v| (v > 0.5) as u8).collect();
    for s in 0..d {
        let src_img = &p.image.data()[s * n..(s + 1) * n];
        let src_mask = &mask_bytes[s * n..(s + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map.apply(y as f64, x as f64);
                let (sy, sx) = (sy as f32, sx as f32);
                image.push(sample_bilinear(src_img, h, w, sy, sx, 0.0));
                mask.push(sample_nearest(src_mask, h, w, sy, sx) as f32);
            }
        }
    }
    let shape = p.image.shape().to_vec();
    PatchRecord {
        image: Tensor::from_vec(shape.clone(), image).expect("same extent"),
        mask: Tensor::from_vec(shape, mask).expect("same extent"),
        ..p.clone()
    }
}

/// Rotation alone.
pub fn rotate_patch(p: &PatchRecord, degrees: f64) -> PatchRecord {
    let (_, h, w) = patch_dims(p);
    warp(p, &Affine::rotation(degrees, h, w))
}

/// Exact horizontal mirror of image and mask.
pub fn flip_patch(p: &PatchRecord) -> PatchRecord {
    let (d, h, w) = patch_dims(p);
    let mirror = |t: &Tensor<f32>| {
        let src = t.data();
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let x = i % w;
            src[i - x + (w - 1 - x)]
        })
    };
    debug_assert_eq!(p.image.numel(), d * h * w);
    PatchRecord {
        image: mirror(&p.image),
        mask: mirror(&p.mask),
        ..p.clone()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur of every slice with clamped borders.
pub fn blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = image.to_vec();
    for slice in out.chunks_mut(h * w) {
        let src = slice.to_vec();
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                slice[y * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out).expect("same extent")
}

/// Draws unconditionally so the stream does not depend on which operations
/// are enabled.
fn fires(rng: &mut impl Rng, enabled: bool, prob: f64) -> bool {
    let u: f64 = rng.random();
    enabled && u < prob
}

/// Applies a random subset of the configured augmentations. The draw
/// sequence is fixed, so a seeded generator gives a reproducible result.
pub fn augment(p: &PatchRecord, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<PatchRecord> {
    cfg.validate()?;
    let (_, h, w) = patch_dims(p);
    let mut map = Affine::identity();
    let mut geometric = false;
    let mut push = |map: &mut Affine, next: Affine| {
        // sampling maps compose in reverse: the last image operation is undone first
        *map = next.then(map);
        geometric = true;
    };
    if fires(rng, cfg.flip_prob.is_some(), cfg.flip_prob.unwrap_or(0.0)) {
        push(&mut map, Affine::flip_horizontal(w));
    }
    if fires(rng, cfg.rotation_deg.is_some(), cfg.apply_prob) {
        let max = cfg.rotation_deg.unwrap_or(0.0);
        push(&mut map, Affine::rotation(rng.random_range(-max..=max), h, w));
    }
    if fires(rng, cfg.scale.is_some(), cfg.apply_prob) {
        let (lo, hi) = cfg.scale.unwrap_or((1.0, 1.0));
        push(&mut map, Affine::zoom(rng.random_range(lo..=hi), h, w));
    }
    if fires(rng, cfg.crop_min.is_some(), cfg.apply_prob) {
        let f = rng.random_range(cfg.crop_min.unwrap_or(1.0)..=1.0);
        let oy = rng.random_range(0.0..=(1.0 - f)) * h as f64;
        let ox = rng.random_range(0.0..=(1.0 - f)) * w as f64;
        push(&mut map, Affine::crop(f, oy, ox));
    }
    if fires(rng, cfg.shift_frac.is_some(), cfg.apply_prob) {
        let s = cfg.shift_frac.unwrap_or(0.0);
        let dy = rng.random_range(-s..=s) * h as f64;
        let dx = rng.random_range(-s..=s) * w as f64;
        push(&mut map, Affine::shift(dy, dx));
    }
    let mut out = if geometric { warp(p, &map) } else { p.clone() };

    if fires(rng, cfg.multiply.is_some(), cfg.apply_prob) {
        let (lo, hi) = cfg.multiply.unwrap_or((1.0, 1.0));
        let k = rng.random_range(lo..=hi) as f32;
        out.image = out.image.map(|v| v * k);
    }
    if fires(rng, cfg.blur_sigma.is_some(), cfg.apply_prob) {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma.unwrap_or(0.0));
        out.image = blur(&out.image, sigma);
    }
    if fires(rng, cfg.noise_sigma.is_some(), cfg.apply_prob) {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma.unwrap_or(0.0));
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma as f32).expect("positive sigma");
            let src = out.image.to_vec();
            out.image = Tensor::from_fn(out.image.shape().to_vec(), |i| src[i] + normal.sample(rng));
        }
    }
    Ok(out)
}
