//! Per-slice 2x2 max pooling and nearest-neighbour 2x upsampling. Neither
//! touches the slice axis.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims5(x: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(x).map_err(|_| Error::InvalidShape {
        shape: x.to_vec(),
        reason: format!("{op} expects [batch, slice, height, width, channel]"),
    })
}

/// 2x2 stride-2 max pool within each slice. The gradient goes to the first
/// maximum of each window in row-major order.
pub fn maxpool2d_slices<'g, T: Element>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let [b, d, h, w, c] = dims5(x.shape(), "maxpool2d_slices")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "maxpool2d_slices needs even height and width".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.value().data();
    let n_out = b * d * oh * ow * c;
    let mut out = Vec::with_capacity(n_out);
    // flat input index of each output's winner
    let mut winners: Vec<u32> = Vec::with_capacity(n_out);
    for plane in 0..b * d {
        let base = plane * h * w * c;
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = base + ((2 * i) * w + 2 * j) * c + ch;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + ((2 * i + di) * w + 2 * j + dj) * c + ch;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    winners.push(best as u32);
                }
            }
        }
    }
    let in_shape = x.shape().to_vec();
    x.graph().record(
        "maxpool2d_slices",
        Tensor::from_parts(vec![b, d, oh, ow, c], out),
        &[x],
        move |g| {
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for (&src, &gv) in winners.iter().zip(g.data()) {
                dx[src as usize] = dx[src as usize] + gv;
            }
            vec![Some(Tensor::from_parts(in_shape, dx))]
        },
    )
}

/// Nearest-neighbour 2x upsampling within each slice.
pub fn upsample2d_slices<'g, T: Element>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let [b, d, h, w, c] = dims5(x.shape(), "upsample2d_slices")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.value().data();
    let mut out = Vec::with_capacity(b * d * oh * ow * c);
    for plane in 0..b * d {
        for i in 0..oh {
            let row = plane * h * w * c + (i / 2) * w * c;
            for j in 0..ow {
                let at = row + (j / 2) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    let in_shape = x.shape().to_vec();
    x.graph().record(
        "upsample2d_slices",
        Tensor::from_parts(vec![b, d, oh, ow, c], out),
        &[x],
        move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for plane in 0..b * d {
                for i in 0..oh {
                    for j in 0..ow {
                        let src = ((plane * oh + i) * ow + j) * c;
                        let dst = ((plane * h + i / 2) * w + j / 2) * c;
                        for ch in 0..c {
                            dx[dst + ch] = dx[dst + ch] + gd[src + ch];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape, dx))]
        },
    )
}
