//! Slice-level dice, false-positive/false-negative slice accounting,
//! thresholding and disk dilation of predicted masks.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary volume `[slices, height, width]` stored as bytes in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("mask holds {} values", data.len()),
            });
        }
        check_binary(&data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    /// Accepts a `[D, H, W]` (or `[D, H, W, 1]`) tensor holding only 0 and 1.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let shape = match *s {
            [d, h, w] | [d, h, w, 1] => [d, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "mask must be [slices, height, width]".into(),
                })
            }
        };
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(index, &v)| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::NonBinary {
                    value: v as f64,
                    index,
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.shape.to_vec(), self.data.iter().map(|&v| v as f32).collect())
            .expect("shape matches data")
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, d: usize) -> &[u8] {
        let n = self.shape[1] * self.shape[2];
        &self.data[d * n..(d + 1) * n]
    }

    pub fn slices(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks(self.shape[1] * self.shape[2])
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

fn check_binary(data: &[u8]) -> Result<()> {
    match data.iter().position(|&v| v > 1) {
        Some(index) => Err(Error::NonBinary {
            value: data[index] as f64,
            index,
        }),
        None => Ok(()),
    }
}

fn overlap(pred: &[u8], gt: &[u8]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    check_binary(pred)?;
    check_binary(gt)?;
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a & b) as usize;
    }
    Ok((p, g, both))
}

/// `2 |X n Y| / (|X| + |Y|)`; 1 when both are empty and 0 when only the
/// ground truth is empty.
pub fn dice_slice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (p, g, both) = overlap(pred, gt)?;
    Ok(dice_from_counts(p, g, both))
}

fn dice_from_counts(p: usize, g: usize, both: usize) -> f64 {
    match (p, g) {
        (0, 0) => 1.0,
        (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    }
}

/// Slices with empty ground truth but a non-empty prediction (false
/// positives), and the reverse (false negatives).
pub fn count_fp_fn(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    if pred.shape != gt.shape {
        return Err(Error::ShapeMismatch {
            op: "count_fp_fn",
            left: pred.shape.to_vec(),
            right: gt.shape.to_vec(),
        });
    }
    let (mut fp, mut fn_) = (0, 0);
    for (p, g) in pred.slices().zip(gt.slices()) {
        let (p_any, g_any) = (p.contains(&1), g.contains(&1));
        fp += (p_any && !g_any) as usize;
        fn_ += (!p_any && g_any) as usize;
    }
    Ok((fp, fn_))
}

/// Voxel is set iff `prob >= tau`, compared in `f32` so that a probability
/// stored as `tau` counts as positive.
pub fn threshold_mask(prob: &Tensor<f32>, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    let s = prob.shape();
    let shape = match *s {
        [d, h, w] | [d, h, w, 1] => [d, h, w],
        _ => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "probabilities must be [slices, height, width]".into(),
            })
        }
    };
    let tau = tau as f32;
    let data = prob.data().iter().map(|&v| (v >= tau) as u8).collect();
    Ok(BinaryMask { shape, data })
}

/// Half-width of the disk `dx^2 + dy^2 <= 9` on rows `|dy| = 0, 1, 2, 3`:
///
/// ```text
///     . . . X . . .
///     . X X X X X .
///     . X X X X X .
///     X X X X X X X
///     . X X X X X .
///     . X X X X X .
///     . . . X . . .
/// ```
pub const DISK_HALF_WIDTHS: [usize; 4] = [3, 2, 2, 0];

/// The 29 structuring-element offsets `(dy, dx)`.
pub fn disk_offsets() -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(29);
    for dy in -3isize..=3 {
        let half = DISK_HALF_WIDTHS[dy.unsigned_abs()] as isize;
        out.extend((-half..=half).map(|dx| (dy, dx)));
    }
    out
}

/// Binary dilation of one `h x w` slice by the radius-3 disk, clipped at the
/// borders.
pub fn dilate_disk(slice: &[u8], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(slice.len(), h * w, "slice extent");
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if slice[y * w + x] == 0 {
                continue;
            }
            for dy in -3isize..=3 {
                let ty = y as isize + dy;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                let half = DISK_HALF_WIDTHS[dy.unsigned_abs()];
                let lo = x.saturating_sub(half);
                let hi = (x + half).min(w - 1);
                out[ty as usize * w + lo..=ty as usize * w + hi].fill(1);
            }
        }
    }
    out
}

/// Slice-by-slice [`dilate_disk`].
pub fn dilate_volume(mask: &BinaryMask) -> BinaryMask {
    let [_, h, w] = mask.shape;
    let data = mask.slices().flat_map(|s| dilate_disk(s, h, w)).collect();
    BinaryMask {
        shape: mask.shape,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub threshold: f64,
    pub dilate: bool,
    /// Score each patient by whole-volume dice instead of the mean of its
    /// slice dice values.
    pub volume_dice: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            dilate: true,
            volume_dice: false,
        }
    }
}

/// One patient's prediction and ground truth.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    /// Probabilities `[D, H, W]`.
    pub prob: Tensor<f32>,
    pub gt: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientScore {
    pub id: String,
    pub slices: usize,
    pub dice: f64,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub patients: Vec<PatientScore>,
    pub mean_dice: f64,
    pub median_dice: f64,
    pub fp: usize,
    pub fn_: usize,
}

/// Thresholds and optionally dilates one prediction.
pub fn postprocess(prob: &Tensor<f32>, settings: &EvalSettings) -> Result<BinaryMask> {
    let mask = threshold_mask(prob, settings.threshold)?;
    Ok(if settings.dilate {
        dilate_volume(&mask)
    } else {
        mask
    })
}

fn score(case: &EvalCase, settings: &EvalSettings) -> Result<PatientScore> {
    let pred = postprocess(&case.prob, settings)?;
    let [d, _, _] = pred.shape;
    if d == 0 {
        return Err(Error::invalid(format!("patient {} has no slices", case.id)));
    }
    let (fp, fn_) = count_fp_fn(&pred, &case.gt)?;
    let dice = if settings.volume_dice {
        let (p, g, both) = overlap(pred.data(), case.gt.data())?;
        dice_from_counts(p, g, both)
    } else {
        let mut total = 0.0;
        for (p, g) in pred.slices().zip(case.gt.slices()) {
            total += dice_slice(p, g)?;
        }
        total / d as f64
    };
    Ok(PatientScore {
        id: case.id.clone(),
        slices: d,
        dice,
        fp,
        fn_,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Threshold, optional dilation, per-slice dice averaged per patient, then
/// cohort mean and median. FP and FN are slice counts after
/// post-processing.
pub fn evaluate(cases: &[EvalCase], settings: &EvalSettings) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::invalid("evaluation needs at least one patient"));
    }
    let patients = cases
        .par_iter()
        .map(|c| score(c, settings))
        .collect::<Result<Vec<_>>>()?;
    let dice: Vec<f64> = patients.iter().map(|p| p.dice).collect();
    Ok(EvalReport {
        settings: *settings,
        mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
        median_dice: median(&dice),
        fp: patients.iter().map(|p| p.fp).sum(),
        fn_: patients.iter().map(|p| p.fn_).sum(),
        patients,
    })
}

impl EvalReport {
    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let s_ = &self.settings;
        let _ = writeln!(s, "threshold={}", s_.threshold);
        let _ = writeln!(s, "dilation={}", s_.dilate);
        let _ = writeln!(s, "volume_dice={}", s_.volume_dice);
        let _ = writeln!(s, "patients={}", self.patients.len());
        let _ = writeln!(s, "mean_dice={:.6}", self.mean_dice);
        let _ = writeln!(s, "median_dice={:.6}", self.median_dice);
        let _ = writeln!(s, "false_positives={}", self.fp);
        let _ = writeln!(s, "false_negatives={}", self.fn_);
        s
    }

    /// One row per patient after a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("patient,slices,dice,false_positives,false_negatives\n");
        for p in &self.patients {
            let _ = writeln!(s, "{},{},{:.6},{},{}", p.id, p.slices, p.dice, p.fp, p.fn_);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub dilate: bool,
    pub mean_dice: f64,
    pub median_dice: f64,
    pub fp: usize,
    pub fn_: usize,
}

/// Evaluates every (threshold, dilation) combination on the same
/// predictions, thresholds varying fastest.
pub fn sweep(
    cases: &[EvalCase],
    thresholds: &[f64],
    dilations: &[bool],
    volume_dice: bool,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(thresholds.len() * dilations.len());
    for &dilate in dilations {
        for &threshold in thresholds {
            let r = evaluate(
                cases,
                &EvalSettings {
                    threshold,
                    dilate,
                    volume_dice,
                },
            )?;
            rows.push(SweepRow {
                threshold,
                dilate,
                mean_dice: r.mean_dice,
                median_dice: r.median_dice,
                fp: r.fp,
                fn_: r.fn_,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated sweep table with a header.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold\tdilation\tmean_dice\tmedian_dice\tfalse_positives\tfalse_negatives\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            r.threshold, r.dilate, r.mean_dice, r.median_dice, r.fp, r.fn_
        );
    }
    s
}
