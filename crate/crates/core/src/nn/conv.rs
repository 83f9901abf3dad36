//! Same-padded, stride-1 3D cross-correlation over channels-last volumes.
//!
//! Forward lowers each group of output rows to a column matrix and runs one
//! GEMM per group, so the full im2col matrix is never materialized. The input
//! gradient is the same kernel applied to the output gradient with a flipped,
//! transposed filter bank.

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Target number of output positions per GEMM.
const ROWS_TARGET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves (slice, height, width) at stride 1.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (slice, height, width) extents.
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
        }
    }

    /// Weight tensor shape `[kd, kh, kw, in, out]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        vec![kd, kh, kw, self.in_channels, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn fan_out(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.kernel.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid(format!(
                "kernel extents must be odd, got {k} in {:?}",
                self.kernel
            )));
        }
        if self.stride != 1 {
            return Err(Error::invalid(format!(
                "only stride 1 is supported, got {}",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    depth: usize,
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.batch * self.depth * self.height
    }

    fn k(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn rows_per_chunk(&self) -> usize {
        ROWS_TARGET.div_ceil(self.width).max(1)
    }

    /// Fills `col` (row-major `[rows in chunk * width, k]`) for output rows
    /// `first_row..first_row + n_rows`.
    fn im2col<T: Element>(&self, x: &[T], first_row: usize, n_rows: usize, col: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let (w_ext, cin, k) = (self.width, self.cin, self.k());
        col[..n_rows * w_ext * k].fill(T::zero());
        for r in 0..n_rows {
            let row = first_row + r;
            let h = row % self.height;
            let d = (row / self.height) % self.depth;
            let b = row / (self.height * self.depth);
            for a in 0..kd {
                let Some(sd) = (d + a).checked_sub(pd).filter(|&s| s < self.depth) else {
                    continue;
                };
                for q in 0..kh {
                    let Some(sh) = (h + q).checked_sub(ph).filter(|&s| s < self.height) else {
                        continue;
                    };
                    let src_row = ((b * self.depth + sd) * self.height + sh) * w_ext * cin;
                    let tap = (a * kh + q) * kw;
                    for w in 0..w_ext {
                        let lo = w.saturating_sub(pw);
                        let hi = (w + pw).min(w_ext - 1);
                        let first_tap = lo + pw - w;
                        let dst = (r * w_ext + w) * k + (tap + first_tap) * cin;
                        let len = (hi - lo + 1) * cin;
                        col[dst..dst + len]
                            .copy_from_slice(&x[src_row + lo * cin..src_row + lo * cin + len]);
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(x: &[T], geo: Geometry, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (w_ext, cout, k) = (geo.width, geo.cout, geo.k());
    let rows_per_chunk = geo.rows_per_chunk();
    let mut out = vec![T::zero(); geo.rows() * w_ext * cout];
    out.par_chunks_mut(rows_per_chunk * w_ext * cout)
        .enumerate()
        .for_each_init(Vec::new, |col: &mut Vec<T>, (chunk, out_chunk)| {
            let n_rows = out_chunk.len() / (w_ext * cout);
            let m = n_rows * w_ext;
            col.resize(m * k, T::zero());
            geo.im2col(x, chunk * rows_per_chunk, n_rows, col);
            T::gemm(m, k, cout, col, k as isize, 1, weight, cout as isize, 1, out_chunk, cout as isize, 1, false);
            if let Some(bias) = bias {
                for pos in out_chunk.chunks_mut(cout) {
                    for (o, &b) in pos.iter_mut().zip(bias) {
                        *o = *o + b;
                    }
                }
            }
        });
    out
}

/// `[kd, kh, kw, cin, cout]` -> spatially flipped `[kd, kh, kw, cout, cin]`.
fn flip_transpose<T: Element>(weight: &[T], kernel: [usize; 3], cin: usize, cout: usize) -> Vec<T> {
    let taps: usize = kernel.iter().product();
    let mut out = vec![T::zero(); weight.len()];
    for t in 0..taps {
        let src = (taps - 1 - t) * cin * cout;
        let dst = t * cin * cout;
        for ci in 0..cin {
            for co in 0..cout {
                out[dst + co * cin + ci] = weight[src + ci * cout + co];
            }
        }
    }
    out
}

fn weight_grad<T: Element>(x: &[T], geo: Geometry, dy: &[T]) -> Vec<T> {
    let (w_ext, cout, k) = (geo.width, geo.cout, geo.k());
    let rows_per_chunk = geo.rows_per_chunk();
    let mut dw = vec![T::zero(); k * cout];
    let mut col = Vec::new();
    let rows = geo.rows();
    let mut first = 0;
    while first < rows {
        let n_rows = rows_per_chunk.min(rows - first);
        let m = n_rows * w_ext;
        col.resize(m * k, T::zero());
        geo.im2col(x, first, n_rows, &mut col);
        let dy_chunk = &dy[first * w_ext * cout..(first + n_rows) * w_ext * cout];
        T::gemm(k, m, cout, &col, 1, k as isize, dy_chunk, cout as isize, 1, &mut dw, cout as isize, 1, true);
        first += n_rows;
    }
    dw
}

/// Same-padded stride-1 convolution of `x: [B, D, H, W, Cin]` with
/// `weight: [kd, kh, kw, Cin, Cout]` and optional `bias: [Cout]`.
pub fn conv3d<'g, T: Element>(
    x: &Var<'g, T>,
    spec: &ConvSpec,
    weight: &Var<'g, T>,
    bias: Option<&Var<'g, T>>,
) -> Result<Var<'g, T>> {
    spec.validate()?;
    if weight.shape() != spec.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv3d weight",
            left: spec.weight_shape(),
            right: weight.shape().to_vec(),
        });
    }
    let xs = x.shape();
    if xs.len() != 5 || xs[4] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv3d input channels",
            left: vec![spec.in_channels],
            right: xs.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: vec![spec.out_channels],
                right: b.shape().to_vec(),
            });
        }
    }
    let geo = Geometry {
        batch: xs[0],
        depth: xs[1],
        height: xs[2],
        width: xs[3],
        cin: spec.in_channels,
        cout: spec.out_channels,
        kernel: spec.kernel,
    };
    let out = conv_forward(
        x.value().data(),
        geo,
        weight.value().data(),
        bias.map(|b| b.value().data()),
    );
    let out_shape = vec![geo.batch, geo.depth, geo.height, geo.width, geo.cout];

    let x_val = x.value().clone();
    let w_val = weight.value().clone();
    let need = [
        x.requires_grad(),
        weight.requires_grad(),
        bias.is_some_and(|b| b.requires_grad()),
    ];
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    x.graph().record(
        "conv3d",
        Tensor::from_parts(out_shape, out),
        &inputs,
        move |g| {
            let dy = g.data();
            let dx = need[0].then(|| {
                let flipped = flip_transpose(w_val.data(), geo.kernel, geo.cin, geo.cout);
                let back = Geometry {
                    cin: geo.cout,
                    cout: geo.cin,
                    ..geo
                };
                Tensor::from_parts(x_val.shape().to_vec(), conv_forward(dy, back, &flipped, None))
            });
            let dw = need[1].then(|| {
                Tensor::from_parts(w_val.shape().to_vec(), weight_grad(x_val.data(), geo, dy))
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut db = vec![0.0f64; geo.cout];
                    for pos in dy.chunks(geo.cout) {
                        for (acc, v) in db.iter_mut().zip(pos) {
                            *acc += v.as_f64();
                        }
                    }
                    Tensor::from_parts(vec![geo.cout], db.into_iter().map(T::from_f64).collect())
                }));
            }
            grads
        },
    )
}
