//! Segmentation losses on predicted probabilities. Soft counts are summed
//! over the whole batch.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1.0;
pub const DEFAULT_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Tversky,
    Focal,
    Iou,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Tversky => "tversky",
            LossKind::Focal => "focal",
            LossKind::Iou => "iou",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "tversky" | "dice" => Ok(LossKind::Tversky),
            "focal" => Ok(LossKind::Focal),
            "iou" => Ok(LossKind::Iou),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected bce, tversky, focal or iou)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Tversky weight on false positives; `1 - alpha` weighs false negatives.
    pub alpha: f64,
    pub gamma: f64,
    pub focal_weight: f64,
    /// Added to numerator and denominator of the overlap ratios.
    pub smooth: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before logarithms.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::Bce)
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            alpha: 0.5,
            gamma: 2.0,
            focal_weight: 0.25,
            smooth: DEFAULT_SMOOTH,
            clamp: DEFAULT_CLAMP,
        }
    }

    pub fn tversky(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::new(LossKind::Tversky)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("tversky alpha {} outside (0, 1)", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::invalid(format!("focal gamma {} is negative", self.gamma)));
        }
        if self.smooth.is_nan() || self.smooth <= 0.0 {
            return Err(Error::invalid(format!("smoothing {} must be positive", self.smooth)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::invalid(format!("clamp {} outside (0, 0.5)", self.clamp)));
        }
        Ok(())
    }

    /// Whether the loss equals the soft dice loss, so `1 - loss` reads as a
    /// dice score.
    pub fn is_dice_equivalent(&self) -> bool {
        self.kind == LossKind::Tversky && self.alpha == 0.5
    }

    pub fn compute<'g, T: Element>(&self, pred: &Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
        self.validate()?;
        match self.kind {
            LossKind::Bce => bce(pred, target, self.clamp),
            LossKind::Tversky => tversky_loss(pred, target, self.alpha, self.smooth),
            LossKind::Focal => focal_loss(pred, target, self.gamma, self.focal_weight, self.clamp),
            LossKind::Iou => iou_loss(pred, target, self.smooth),
        }
    }
}

fn target_var<'g, T: Element>(pred: &Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(pred.graph().constant(target.clone()))
}

/// Mean binary cross-entropy.
pub fn bce<'g, T: Element>(pred: &Var<'g, T>, target: &Tensor<T>, clamp: f64) -> Result<Var<'g, T>> {
    let y = target_var(pred, target)?;
    let p = pred.clamp(T::from_f64(clamp), T::from_f64(1.0 - clamp))?;
    let pos = y.mul(&p.ln()?)?;
    let neg = y.rsub_scalar(T::one())?.mul(&p.rsub_scalar(T::one())?.ln()?)?;
    pos.add(&neg)?.mean()?.neg()
}

struct SoftCounts<'g, T: Element> {
    tp: Var<'g, T>,
    sum_p: Var<'g, T>,
    sum_y: Var<'g, T>,
}

fn soft_counts<'g, T: Element>(pred: &Var<'g, T>, target: &Tensor<T>) -> Result<SoftCounts<'g, T>> {
    let y = target_var(pred, target)?;
    Ok(SoftCounts {
        tp: pred.mul(&y)?.sum()?,
        sum_p: pred.sum()?,
        sum_y: y.sum()?,
    })
}

/// `1 - (TP + s) / (TP + alpha FP + (1 - alpha) FN + s)`.
pub fn tversky_loss<'g, T: Element>(
    pred: &Var<'g, T>,
    target: &Tensor<T>,
    alpha: f64,
    smooth: f64,
) -> Result<Var<'g, T>> {
    let c = soft_counts(pred, target)?;
    let fp = c.sum_p.sub(&c.tp)?;
    let fn_ = c.sum_y.sub(&c.tp)?;
    let s = T::from_f64(smooth);
    let den = c
        .tp
        .add(&fp.mul_scalar(T::from_f64(alpha))?)?
        .add(&fn_.mul_scalar(T::from_f64(1.0 - alpha))?)?
        .add_scalar(s)?;
    c.tp.add_scalar(s)?.div(&den)?.rsub_scalar(T::one())
}

/// `1 - (2 TP + s) / (sum p + sum y + s)`. Tversky with `alpha = 0.5` and
/// smoothing `s` equals this with smoothing `2 s`.
pub fn dice_loss<'g, T: Element>(pred: &Var<'g, T>, target: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    let c = soft_counts(pred, target)?;
    let s = T::from_f64(smooth);
    let num = c.tp.mul_scalar(T::from_f64(2.0))?.add_scalar(s)?;
    let den = c.sum_p.add(&c.sum_y)?.add_scalar(s)?;
    num.div(&den)?.rsub_scalar(T::one())
}

/// Mean of `-weight (1 - p_t)^gamma ln p_t`, with `p_t` the probability of
/// the true class.
pub fn focal_loss<'g, T: Element>(
    pred: &Var<'g, T>,
    target: &Tensor<T>,
    gamma: f64,
    weight: f64,
    clamp: f64,
) -> Result<Var<'g, T>> {
    let y = target_var(pred, target)?;
    let p = pred.clamp(T::from_f64(clamp), T::from_f64(1.0 - clamp))?;
    let not_y = y.rsub_scalar(T::one())?;
    let pt = p.mul(&y)?.add(&p.rsub_scalar(T::one())?.mul(&not_y)?)?;
    let modulator = pt.rsub_scalar(T::one())?.powf(T::from_f64(gamma))?;
    modulator
        .mul(&pt.ln()?)?
        .mean()?
        .mul_scalar(T::from_f64(-weight))
}

/// `1 - (TP + s) / (sum p + sum y - TP + s)`.
pub fn iou_loss<'g, T: Element>(pred: &Var<'g, T>, target: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    let c = soft_counts(pred, target)?;
    let s = T::from_f64(smooth);
    let den = c.sum_p.add(&c.sum_y)?.sub(&c.tp)?.add_scalar(s)?;
    c.tp.add_scalar(s)?.div(&den)?.rsub_scalar(T::one())
}
