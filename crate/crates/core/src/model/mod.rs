//! The recurrent dense U-Net: dense conv blocks with per-slice pooling on the
//! way down, a stack of ConvLSTM layers across slices at the bottleneck, and
//! a mirrored decoder with skip concatenations.

mod checkpoint;

use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

pub use checkpoint::{load, load_for, save, FORMAT_VERSION, MAGIC};

use crate::autograd::{Graph, Var};
use crate::convlstm::{convlstm_sequence, ConvLstmParams, ConvLstmSpec};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm, concat_channels, conv3d, maxpool2d_slices, spatial_dropout, upsample2d_slices,
    BatchNormState, BatchStats, ConvSpec, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
use crate::tensor::{Element, Tensor};

const KERNEL: [usize; 3] = [3, 3, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Filters of the first encoder level; each level doubles it.
    pub base_filters: usize,
    /// Number of encoder (and decoder) levels.
    pub depth: usize,
    pub hidden: usize,
    pub recurrent_layers: usize,
    pub dropout: f64,
    /// `[slices, height, width, channels]`.
    pub patch: [usize; 4],
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub forget_bias: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            base_filters: 32,
            depth: 3,
            hidden: 256,
            recurrent_layers: 3,
            dropout: 0.1,
            patch: [8, 256, 256, 1],
            bn_momentum: DEFAULT_MOMENTUM,
            bn_epsilon: DEFAULT_EPSILON,
            forget_bias: 1.0,
        }
    }

    /// Desk-scale variant for CPU training.
    pub fn tiny() -> Self {
        Self {
            base_filters: 4,
            hidden: 16,
            patch: [8, 32, 32, 1],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w, c] = self.patch;
        let bad = |reason: String| Err(Error::invalid(format!("model config: {reason}")));
        if self.base_filters == 0 || self.hidden == 0 || self.depth == 0 {
            return bad("filters, hidden channels and depth must be positive".into());
        }
        if self.recurrent_layers == 0 {
            return bad("at least one recurrent layer is required".into());
        }
        if d == 0 || c == 0 {
            return bad(format!("patch {:?} has an empty axis", self.patch));
        }
        let step = 1usize << self.depth;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!("patch height and width must be multiples of {step}, got {h}x{w}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return bad("batch-norm momentum must be in [0, 1] and epsilon positive".into());
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    fn encoder_in(&self, level: usize) -> usize {
        if level == 0 {
            self.patch[3]
        } else {
            self.filters(level - 1)
        }
    }

    /// Input channels of the decoder block at `level` (counted from the
    /// bottom, so level `depth - 1` runs first).
    fn decoder_in(&self, level: usize) -> usize {
        if level + 1 == self.depth {
            self.hidden
        } else {
            2 * self.filters(level + 1)
        }
    }

    fn lstm_spec(&self, layer: usize) -> ConvLstmSpec {
        let cin = if layer == 0 {
            self.filters(self.depth - 1)
        } else {
            self.hidden
        };
        ConvLstmSpec::new(cin, self.hidden)
    }

    /// Every stored tensor by name and shape, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, cin: usize, f: usize| {
            for (i, cin) in [(1, cin), (2, cin + f)] {
                out.push((format!("{prefix}.conv{i}.weight"), ConvSpec::new(cin, f, KERNEL).weight_shape()));
                for stat in ["gamma", "beta", "running_mean", "running_var"] {
                    out.push((format!("{prefix}.bn{i}.{stat}"), vec![f]));
                }
            }
        };
        for level in 0..self.depth {
            block(&mut out, format!("enc{level}"), self.encoder_in(level), self.filters(level));
        }
        for layer in 0..self.recurrent_layers {
            let s = self.lstm_spec(layer);
            out.push((format!("lstm{layer}.input_weight"), s.input_weight_shape()));
            out.push((format!("lstm{layer}.hidden_weight"), s.hidden_weight_shape()));
            out.push((format!("lstm{layer}.bias"), vec![s.bias_len()]));
        }
        for level in (0..self.depth).rev() {
            block(&mut out, format!("dec{level}"), self.decoder_in(level), self.filters(level));
        }
        out.push(("head.weight".into(), self.head_spec().weight_shape()));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    fn head_spec(&self) -> ConvSpec {
        ConvSpec::new(2 * self.filters(0), 1, [1, 1, 1])
    }
}

/// Running statistics are stored but not trained.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn kernel_fans(shape: &[usize]) -> (usize, usize) {
    let taps: usize = shape[..shape.len() - 2].iter().product();
    (taps * shape[shape.len() - 2], taps * shape[shape.len() - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelParams {
    /// Fresh parameters: Glorot-uniform kernels, zero biases except the
    /// ConvLSTM forget gate, unit scale, zero shift, running mean 0 and
    /// variance 1.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape) in config.layout() {
            let value = if name.ends_with("weight") {
                let (fi, fo) = kernel_fans(&shape);
                let l = glorot_limit(fi, fo) as f32;
                let dist = Uniform::new_inclusive(-l, l).expect("finite limit");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            } else if name.ends_with("gamma") || name.ends_with("running_var") {
                Tensor::ones(shape)
            } else if name.starts_with("lstm") && name.ends_with("bias") {
                let spec = config.lstm_spec(0);
                let forget = spec.forget_range();
                let fb = config.forget_bias as f32;
                Tensor::from_fn(shape, |i| if forget.contains(&i) { fb } else { 0.0 })
            } else {
                Tensor::zeros(shape)
            };
            tensors.insert(name, value);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles parameters from named tensors, checking them against the
    /// layout of `config`.
    pub fn from_tensors(config: ModelConfig, tensors: IndexMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        for (name, shape) in &layout {
            match tensors.get(name) {
                None => return Err(Error::MissingParameter(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointMismatch {
                        layer: name.clone(),
                        detail: format!("expected shape {shape:?}, found {:?}", t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !layout.iter().any(|(n, _)| n == *k)) {
            return Err(Error::CheckpointMismatch {
                layer: extra.clone(),
                detail: "not part of this architecture".into(),
            });
        }
        let mut ordered = IndexMap::with_capacity(layout.len());
        let mut tensors = tensors;
        for (name, _) in layout {
            let t = tensors.swap_remove(&name).expect("checked above");
            ordered.insert(name, t);
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter update",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Folds training-batch statistics into the running batch-norm state.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let state = self.bn_state::<f32>(prefix)?.updated(stats);
            self.set(&format!("{prefix}.running_mean"), state.running_mean)?;
            self.set(&format!("{prefix}.running_var"), state.running_var)?;
        }
        Ok(())
    }

    fn bn_state<T: Element>(&self, prefix: &str) -> Result<BatchNormState<T>> {
        let fetch = |stat: &str| {
            let name = format!("{prefix}.{stat}");
            self.get(&name)
                .map(|t| t.cast::<T>())
                .ok_or(Error::MissingParameter(name))
        };
        Ok(BatchNormState {
            running_mean: fetch("running_mean")?,
            running_var: fetch("running_var")?,
            momentum: self.config.bn_momentum,
            epsilon: self.config.bn_epsilon,
        })
    }

    /// Places every trainable tensor on `g`, as parameters when `trainable`
    /// and as constants otherwise.
    pub fn bind<'g, T: Element>(&self, g: &'g Graph<T>, trainable: bool) -> Result<Bound<'g, T>> {
        let mut vars = IndexMap::new();
        let mut bn = IndexMap::new();
        for (name, t) in &self.tensors {
            if is_trainable(name) {
                vars.insert(name.clone(), g.leaf(t.cast::<T>(), trainable));
            } else if let Some(prefix) = name.strip_suffix(".running_mean") {
                bn.insert(prefix.to_string(), self.bn_state(prefix)?);
            }
        }
        Ok(Bound {
            config: self.config.clone(),
            vars,
            bn,
        })
    }
}

/// Parameters placed on a graph.
pub struct Bound<'g, T: Element> {
    config: ModelConfig,
    vars: IndexMap<String, Var<'g, T>>,
    bn: IndexMap<String, BatchNormState<T>>,
}

impl<'g, T: Element> Bound<'g, T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Result<&Var<'g, T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var<'g, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Substitutes the variable used for `name`, e.g. to differentiate with
    /// respect to a single tensor.
    pub fn replace(&mut self, name: &str, var: Var<'g, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != var.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter override",
                left: slot.shape().to_vec(),
                right: var.shape().to_vec(),
            });
        }
        *slot = var;
        Ok(())
    }
}

/// One row of the shape trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub block: &'static str,
    pub layer: &'static str,
    /// `[height, width, slices, channels]`.
    pub size: [usize; 4],
}

impl TraceRow {
    fn new(block: &'static str, layer: &'static str, shape: &[usize]) -> Self {
        Self {
            block,
            layer,
            size: [shape[2], shape[3], shape[1], shape[4]],
        }
    }

    /// `HxWxDxC` with multiplication signs.
    pub fn size_string(&self) -> String {
        let [h, w, d, c] = self.size;
        format!("{h}\u{d7}{w}\u{d7}{d}\u{d7}{c}")
    }
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.block, self.layer, self.size_string())
    }
}

pub struct ForwardOutput<'g, T: Element> {
    /// Probabilities `[B, D, H, W, 1]`.
    pub output: Var<'g, T>,
    pub trace: Vec<TraceRow>,
    /// Batch statistics per batch-norm prefix (training only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

struct Ctx<'a, 'g, T: Element> {
    p: &'a Bound<'g, T>,
    training: bool,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'g, T: Element> Ctx<'_, 'g, T> {
    fn conv_bn_relu(&mut self, x: &Var<'g, T>, prefix: &str, i: usize) -> Result<Var<'g, T>> {
        let w = self.p.var(&format!("{prefix}.conv{i}.weight"))?;
        let s = w.shape();
        let y = conv3d(x, &ConvSpec::new(s[3], s[4], KERNEL), w, None)?;
        let bn = format!("{prefix}.bn{i}");
        let state = self
            .p
            .bn
            .get(&bn)
            .ok_or_else(|| Error::MissingParameter(format!("{bn}.running_mean")))?;
        let (y, stats) = batchnorm(
            &y,
            self.p.var(&format!("{bn}.gamma"))?,
            self.p.var(&format!("{bn}.beta"))?,
            state,
            self.training,
        )?;
        if let Some(stats) = stats {
            self.bn_stats.push((bn, stats));
        }
        y.relu()
    }

    /// conv, BN, ReLU; concat with the block input; conv, BN, ReLU.
    fn dense_block(&mut self, x: &Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
        let r1 = self.conv_bn_relu(x, prefix, 1)?;
        let joined = concat_channels(&[x, &r1])?;
        self.conv_bn_relu(&joined, prefix, 2)
    }
}

/// Full forward pass on `x: [B, D, H, W, C]`.
pub fn forward<'g, T: Element>(
    params: &Bound<'g, T>,
    x: &Var<'g, T>,
    training: bool,
    rng: &mut impl Rng,
) -> Result<ForwardOutput<'g, T>> {
    let cfg = &params.config;
    let s = x.shape();
    let step = 1usize << cfg.depth;
    if s.len() != 5 || s[1] != cfg.patch[0] || s[4] != cfg.patch[3] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!(
                "expected [batch, {}, height, width, {}]",
                cfg.patch[0], cfg.patch[3]
            ),
        });
    }
    if !s[2].is_multiple_of(step) || !s[3].is_multiple_of(step) {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("height and width must be multiples of {step}"),
        });
    }
    let mut ctx = Ctx {
        p: params,
        training,
        bn_stats: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x.clone();
    for level in 0..cfg.depth {
        let y = ctx.dense_block(&h, &format!("enc{level}"))?;
        let y = spatial_dropout(&y, cfg.dropout, training, rng)?;
        trace.push(TraceRow::new("Encoder", "convolutional block", y.shape()));
        h = maxpool2d_slices(&y)?;
        trace.push(TraceRow::new("Encoder", "Maxpool2D", h.shape()));
        skips.push(y);
    }
    for layer in 0..cfg.recurrent_layers {
        let lstm = ConvLstmParams {
            input_weight: params.var(&format!("lstm{layer}.input_weight"))?.clone(),
            hidden_weight: params.var(&format!("lstm{layer}.hidden_weight"))?.clone(),
            bias: params.var(&format!("lstm{layer}.bias"))?.clone(),
        };
        h = convlstm_sequence(&h, &cfg.lstm_spec(layer), &lstm, true)?;
        trace.push(TraceRow::new("Recurrent", "ConvLSTM2D", h.shape()));
    }
    for level in (0..cfg.depth).rev() {
        let y = ctx.dense_block(&h, &format!("dec{level}"))?;
        trace.push(TraceRow::new("Decoder", "convolutional block", y.shape()));
        let up = upsample2d_slices(&y)?;
        trace.push(TraceRow::new("Decoder", "Upsampling2D", up.shape()));
        let skip = skips.pop().expect("one skip per level");
        h = concat_channels(&[&up, &skip])?;
    }
    let z = conv3d(
        &h,
        &cfg.head_spec(),
        params.var("head.weight")?,
        Some(params.var("head.bias")?),
    )?;
    let output = z.sigmoid()?;
    trace.push(TraceRow::new("Decoder", "Conv3D", output.shape()));
    Ok(ForwardOutput {
        output,
        trace,
        bn_stats: ctx.bn_stats,
    })
}

/// Inference on `x: [B, D, H, W, C]` without recording gradients.
pub fn predict(params: &ModelParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = Graph::with_check_finite(false);
    let bound = params.bind(&g, false)?;
    let xv = g.constant(x.clone());
    // dropout is inactive at inference, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(forward(&bound, &xv, false, &mut rng)?.output.value().clone())
}
