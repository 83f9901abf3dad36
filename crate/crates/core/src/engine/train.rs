//! The training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::infer::predict_sliding;
use super::optim::{Adam, Plateau};
use crate::autograd::Graph;
use crate::data::{augment, derive_seed, extract_patches, AugmentConfig, PatchRecord, VolumePair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalCase, EvalSettings};
use crate::losses::{LossConfig, LossKind};
use crate::model::{self, forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    /// Global-norm gradient clipping; off by default.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Threshold used for validation dice while training (no dilation).
    pub val_threshold: f64,
    /// Where to write the best checkpoint as it improves.
    pub checkpoint: Option<PathBuf>,
    /// Where to write the per-epoch log.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            epochs: 30,
            patience: 3,
            lr_factor: 0.5,
            loss: LossConfig::new(LossKind::Bce),
            seed: 0,
            val_fraction: 0.1,
            augment: AugmentConfig::default(),
            clip_norm: None,
            max_steps: None,
            val_threshold: 0.5,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("batch size, epochs and patience must be positive"));
        }
        if self.patience >= self.epochs && self.epochs > 1 {
            return Err(Error::invalid(format!(
                "patience {} must be below the epoch cap {}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::invalid(format!("lr factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "validation threshold must lie in (0, 1), got {}",
                self.val_threshold
            )));
        }
        if let Some(c) = self.clip_norm {
            if !positive(c) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max steps must be positive"));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:e}", self.epoch, self.loss, self.val_dice, self.lr)
    }
}

/// Comment line naming the loss, then the column header.
pub fn log_header(loss: &LossConfig) -> String {
    let mut s = format!("# loss={}", loss.kind);
    match loss.kind {
        LossKind::Tversky => {
            let _ = write!(s, " alpha={}", loss.alpha);
            if loss.is_dice_equivalent() {
                s.push_str(" (dice-equivalent)");
            }
        }
        LossKind::Focal => {
            let _ = write!(s, " gamma={} weight={}", loss.gamma, loss.focal_weight);
        }
        _ => {}
    }
    s.push_str("\nepoch\tloss\tval_dice\tlr\n");
    s
}

pub fn format_log(loss: &LossConfig, epochs: &[EpochLog]) -> String {
    let mut s = log_header(loss);
    for e in epochs {
        s.push_str(&e.line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    /// 1-based epoch of the best checkpoint.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Parameters after the last step.
    pub last: ModelParams,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

/// Splits patients into training and validation sets with a seeded shuffle;
/// at least one patient lands on each side.
pub fn split_validation(
    pairs: Vec<VolumePair>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<VolumePair>, Vec<VolumePair>)> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two patients to split off validation data, got {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "validation split", 0)));
    let n_val = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len() - 1);
    let mut slots: Vec<Option<VolumePair>> = pairs.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let val: Vec<VolumePair> = order[..n_val].iter().map(&mut take).collect();
    let train: Vec<VolumePair> = order[n_val..].iter().map(&mut take).collect();
    Ok((train, val))
}

/// Mean slice dice over `pairs` at `threshold`, without dilation.
pub fn dice_on(params: &ModelParams, pairs: &[VolumePair], threshold: f64) -> Result<f64> {
    let cases = pairs
        .iter()
        .map(|p| {
            Ok(EvalCase {
                id: p.id.clone(),
                prob: predict_sliding(params, &p.image)?,
                gt: p.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = EvalSettings {
        threshold,
        dilate: false,
        volume_dice: false,
    };
    Ok(evaluate(&cases, &settings)?.mean_dice)
}

fn stack(patches: &[PatchRecord]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(patches[0].image.shape());
    let image = patches.iter().flat_map(|p| p.image.data().iter().copied()).collect();
    let mask = patches.iter().flat_map(|p| p.mask.data().iter().copied()).collect();
    Ok((Tensor::from_vec(shape.clone(), image)?, Tensor::from_vec(shape, mask)?))
}

/// One forward, backward and Adam update on a batch. Returns the loss.
fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    cfg: &TrainConfig,
    x: Tensor<f32>,
    y: &Tensor<f32>,
    dropout_seed: u64,
) -> Result<f64> {
    let g = Graph::<f32>::new();
    let bound = params.bind(&g, true)?;
    let xv = g.constant(x);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = forward(&bound, &xv, true, &mut rng)?;
    let loss = cfg.loss.compute(&out.output, y)?;
    let value = loss.value().item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let grads = g.backward(&loss)?;
    let mut named: Vec<(String, Vec<f32>, Vec<f32>)> = bound
        .vars()
        .map(|(name, v)| {
            let theta = params.get(name).expect("bound from params").to_vec();
            (name.to_string(), theta, grads.get(v).into_vec())
        })
        .collect();
    if let Some(max) = cfg.clip_norm {
        let norm = named
            .iter()
            .flat_map(|(_, _, gr)| gr.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > max {
            let k = (max / norm) as f32;
            for (_, _, gr) in &mut named {
                gr.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    let mut slots: Vec<(&str, &mut [f32], &[f32])> = named
        .iter_mut()
        .map(|(n, t, gr)| (n.as_str(), t.as_mut_slice(), gr.as_slice()))
        .collect();
    adam.step(&mut slots)?;
    drop(slots);
    for (name, theta, _) in named {
        let shape = params.get(&name).expect("bound from params").shape().to_vec();
        params.set(&name, Tensor::from_vec(shape, theta)?)?;
    }
    params.apply_bn_updates(&out.bn_stats)?;
    Ok(value)
}

/// Trains from fresh parameters seeded by `cfg.seed`.
pub fn train(
    train_set: &[VolumePair],
    val_set: &[VolumePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
    let params = ModelParams::init(model_cfg, &mut rng)?;
    train_from(params, train_set, val_set, cfg)
}

/// Trains starting from `params`. Each epoch visits every tumor-bearing
/// training patch once in a seeded order, augments it with a generator
/// derived from (seed, patch, epoch), then scores validation dice and keeps
/// the first checkpoint reaching the highest value.
pub fn train_from(
    mut params: ModelParams,
    train_set: &[VolumePair],
    val_set: &[VolumePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs at least one training and one validation patient"));
    }
    let mut patches = Vec::new();
    for pair in train_set {
        patches.extend(extract_patches(pair, true)?);
    }
    if patches.is_empty() {
        return Err(Error::invalid("no training patch contains tumor voxels"));
    }
    let slices = params.config().patch[0];
    if patches[0].image.shape()[0] != slices {
        return Err(Error::invalid(format!(
            "model expects {slices}-slice patches, data provides {}",
            patches[0].image.shape()[0]
        )));
    }

    let mut adam = Adam::new(cfg.lr);
    let mut plateau = Plateau::new(cfg.lr, cfg.lr_factor, cfg.patience);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = plateau.lr;
        adam.lr = lr;
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let augmented = batch
                .par_iter()
                .map(|&i| {
                    let p = &patches[i];
                    let stream = format!("{}:{}", p.id, p.start);
                    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &stream, epoch as u64));
                    augment(p, &cfg.augment, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = stack(&augmented)?;
            let dropout_seed = derive_seed(cfg.seed, "dropout", step as u64);
            let loss = train_step(&mut params, &mut adam, cfg, x, &y, dropout_seed)?;
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
        let val_dice = dice_on(&params, val_set, cfg.val_threshold)?;
        let log = EpochLog {
            epoch: epoch + 1,
            loss: epoch_loss / epoch_steps as f64,
            val_dice,
            lr,
        };
        epochs.push(log);
        if best.as_ref().is_none_or(|(_, _, d)| val_dice > *d) {
            if let Some(path) = &cfg.checkpoint {
                model::save(&params, path)?;
            }
            best = Some((params.clone(), epoch + 1, val_dice));
        }
        if let Some(path) = &cfg.log {
            crate::binio::write_file(path, format_log(&cfg.loss, &epochs).as_bytes())?;
        }
        plateau.observe(val_dice);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    let (best, best_epoch, best_val_dice) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_dice,
        last: params,
        epochs,
        step_losses,
    })
}
