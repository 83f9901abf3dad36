//! Differentiable layers: 3D convolution, per-slice pooling and upsampling,
//! batch normalization, spatial dropout and channel concatenation.

mod conv;
mod norm;
mod pool;

use rand::Rng;

pub use conv::{conv3d, ConvSpec, Padding};
pub use norm::{batchnorm, BatchNormState, BatchStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use pool::{maxpool2d_slices, upsample2d_slices};

use crate::autograd::{concat, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenates along the trailing channel axis.
pub fn concat_channels<'g, T: Element>(xs: &[&Var<'g, T>]) -> Result<Var<'g, T>> {
    let rank = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels of an empty list"))?
        .shape()
        .len();
    if rank == 0 {
        return Err(Error::invalid("concat_channels on a scalar"));
    }
    concat(xs, rank - 1)
}

/// Keep-mask for spatial dropout: one entry per (batch, channel), either 0
/// or `1 / (1 - rate)`.
pub fn spatial_dropout_mask<T: Element>(
    batch: usize,
    channels: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn([batch, channels], |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Zeroes whole channels of `x: [B, ..., C]` with probability `rate` and
/// scales survivors by `1 / (1 - rate)`. Identity when not training or when
/// `rate` is 0.
pub fn spatial_dropout<'g, T: Element>(
    x: &Var<'g, T>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var<'g, T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::invalid("spatial dropout needs a batch and a channel axis"));
    }
    let mask = spatial_dropout_mask(s[0], s[s.len() - 1], rate, rng)?;
    apply_channel_mask(x, &mask)
}

/// Multiplies `x: [B, ..., C]` by a `[B, C]` mask broadcast over the middle
/// axes. With a fixed mask this is dropout with its randomness frozen.
pub fn apply_channel_mask<'g, T: Element>(x: &Var<'g, T>, mask: &Tensor<T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (b, c) = (s[0], s[s.len() - 1]);
    if s.len() < 2 || mask.shape() != [b, c] {
        return Err(Error::ShapeMismatch {
            op: "channel mask",
            left: vec![b, c],
            right: mask.shape().to_vec(),
        });
    }
    let per_batch = x.value().numel() / b;
    let scale = move |data: &[T], m: &[T]| -> Vec<T> {
        data.chunks(per_batch)
            .zip(m.chunks(c))
            .flat_map(|(block, mrow)| {
                block
                    .chunks(c)
                    .flat_map(move |pos| pos.iter().zip(mrow).map(|(&v, &k)| v * k))
            })
            .collect()
    };
    let out = scale(x.value().data(), mask.data());
    let mask = mask.clone();
    let shape = s.to_vec();
    x.graph().record(
        "spatial_dropout",
        Tensor::from_parts(shape.clone(), out),
        &[x],
        move |g| vec![Some(Tensor::from_parts(shape, scale(g.data(), mask.data())))],
    )
}
