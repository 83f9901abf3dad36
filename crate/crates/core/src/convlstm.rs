//! Convolutional LSTM scanning the slice axis.
//!
//! Gates are packed along the channel axis in the order input, forget, cell
//! candidate, output, so one convolution per source computes all four.

use crate::autograd::{concat, Var};
use crate::error::{Error, Result};
use crate::nn::{conv3d, ConvSpec};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmSpec {
    pub in_channels: usize,
    pub hidden: usize,
    /// (height, width) extents.
    pub kernel: [usize; 2],
}

impl ConvLstmSpec {
    pub fn new(in_channels: usize, hidden: usize) -> Self {
        Self {
            in_channels,
            hidden,
            kernel: [3, 3],
        }
    }

    pub fn input_conv(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, 4 * self.hidden, [1, self.kernel[0], self.kernel[1]])
    }

    pub fn hidden_conv(&self) -> ConvSpec {
        ConvSpec::new(self.hidden, 4 * self.hidden, [1, self.kernel[0], self.kernel[1]])
    }

    /// `[1, kh, kw, in, 4 * hidden]`.
    pub fn input_weight_shape(&self) -> Vec<usize> {
        self.input_conv().weight_shape()
    }

    /// `[1, kh, kw, hidden, 4 * hidden]`.
    pub fn hidden_weight_shape(&self) -> Vec<usize> {
        self.hidden_conv().weight_shape()
    }

    pub fn bias_len(&self) -> usize {
        4 * self.hidden
    }

    /// Offset of the forget gate inside the packed bias.
    pub fn forget_range(&self) -> std::ops::Range<usize> {
        self.hidden..2 * self.hidden
    }
}

/// Weights of one layer, bound to a graph.
#[derive(Debug, Clone)]
pub struct ConvLstmParams<'g, T: Element> {
    pub input_weight: Var<'g, T>,
    pub hidden_weight: Var<'g, T>,
    pub bias: Var<'g, T>,
}

fn expect_shape(op: &'static str, want: &[usize], got: &[usize]) -> Result<()> {
    if want != got {
        return Err(Error::ShapeMismatch {
            op,
            left: want.to_vec(),
            right: got.to_vec(),
        });
    }
    Ok(())
}

/// Gate arithmetic on 5D slabs `[B, 1, H, W, *]`. A missing state means the
/// zero state, which skips the recurrent convolution.
fn step_slab<'g, T: Element>(
    x: &Var<'g, T>,
    state: Option<(&Var<'g, T>, &Var<'g, T>)>,
    spec: &ConvLstmSpec,
    p: &ConvLstmParams<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let mut z = conv3d(x, &spec.input_conv(), &p.input_weight, Some(&p.bias))?;
    if let Some((h, _)) = state {
        z = z.add(&conv3d(h, &spec.hidden_conv(), &p.hidden_weight, None)?)?;
    }
    let ch = spec.hidden;
    let gate = |k: usize| z.slice_axis(4, k * ch, ch);
    let i = gate(0)?.sigmoid()?;
    let g = gate(2)?.tanh()?;
    let o = gate(3)?.sigmoid()?;
    let c = match state {
        Some((_, c_prev)) => gate(1)?.sigmoid()?.mul(c_prev)?.add(&i.mul(&g)?)?,
        None => i.mul(&g)?,
    };
    let h = o.mul(&c.tanh()?)?;
    Ok((h, c))
}

fn check_params<T: Element>(spec: &ConvLstmSpec, p: &ConvLstmParams<'_, T>) -> Result<()> {
    expect_shape("convlstm input weight", &spec.input_weight_shape(), p.input_weight.shape())?;
    expect_shape("convlstm hidden weight", &spec.hidden_weight_shape(), p.hidden_weight.shape())?;
    expect_shape("convlstm bias", &[spec.bias_len()], p.bias.shape())
}

/// One recurrent step on `x: [B, H, W, Cin]` with states `[B, H, W, hidden]`.
/// Returns `(h, c)`.
pub fn convlstm_step<'g, T: Element>(
    x: &Var<'g, T>,
    h_prev: &Var<'g, T>,
    c_prev: &Var<'g, T>,
    spec: &ConvLstmSpec,
    params: &ConvLstmParams<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    check_params(spec, params)?;
    let xs = x.shape();
    if xs.len() != 4 || xs[3] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "convlstm input",
            left: vec![spec.in_channels],
            right: xs.to_vec(),
        });
    }
    let state_shape = [xs[0], xs[1], xs[2], spec.hidden];
    expect_shape("convlstm hidden state", &state_shape, h_prev.shape())?;
    expect_shape("convlstm cell state", &state_shape, c_prev.shape())?;
    let slab = |v: &Var<'g, T>| {
        let s = v.shape();
        v.reshape([s[0], 1, s[1], s[2], s[3]])
    };
    let (h, c) = step_slab(
        &slab(x)?,
        Some((&slab(h_prev)?, &slab(c_prev)?)),
        spec,
        params,
    )?;
    Ok((h.reshape(state_shape)?, c.reshape(state_shape)?))
}

/// Scans `x: [B, D, H, W, Cin]` over ascending slices from zero states.
/// Returns every hidden state `[B, D, H, W, hidden]`, or only the last one
/// `[B, 1, H, W, hidden]` when `return_all` is false.
pub fn convlstm_sequence<'g, T: Element>(
    x: &Var<'g, T>,
    spec: &ConvLstmSpec,
    params: &ConvLstmParams<'g, T>,
    return_all: bool,
) -> Result<Var<'g, T>> {
    check_params(spec, params)?;
    let xs = x.shape();
    if xs.len() != 5 || xs[4] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "convlstm sequence input",
            left: vec![spec.in_channels],
            right: xs.to_vec(),
        });
    }
    let depth = xs[1];
    let mut state: Option<(Var<'g, T>, Var<'g, T>)> = None;
    let mut outputs = Vec::with_capacity(depth);
    for t in 0..depth {
        let xt = if depth == 1 { x.clone() } else { x.slice_axis(1, t, 1)? };
        let next = step_slab(&xt, state.as_ref().map(|(h, c)| (h, c)), spec, params)?;
        if return_all {
            outputs.push(next.0.clone());
        }
        state = Some(next);
    }
    let (last, _) = state.ok_or_else(|| Error::invalid("convlstm sequence with no slices"))?;
    if !return_all {
        return Ok(last);
    }
    concat(&outputs.iter().collect::<Vec<_>>(), 1)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn params<'g>(
        g: &'g Graph<f64>,
        spec: &ConvLstmSpec,
        rng: &mut ChaCha8Rng,
    ) -> ConvLstmParams<'g, f64> {
        ConvLstmParams {
            input_weight: g.param(rand_tensor(spec.input_weight_shape(), 0.5, rng)),
            hidden_weight: g.param(rand_tensor(spec.hidden_weight_shape(), 0.5, rng)),
            bias: g.param(rand_tensor(vec![spec.bias_len()], 0.5, rng)),
        }
    }

    #[test]
    fn zero_everything_gives_zero_hidden_state() {
        let g = Graph::<f64>::new();
        let spec = ConvLstmSpec::new(2, 3);
        let p = ConvLstmParams {
            input_weight: g.constant(Tensor::zeros(spec.input_weight_shape())),
            hidden_weight: g.constant(Tensor::zeros(spec.hidden_weight_shape())),
            bias: g.constant(Tensor::zeros([spec.bias_len()])),
        };
        let x = g.constant(Tensor::ones([1, 4, 4, 2]));
        let zero = g.constant(Tensor::zeros([1, 4, 4, 3]));
        let (h, c) = convlstm_step(&x, &zero, &zero, &spec, &p).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_keeps_slices_and_bounds_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::<f64>::new();
        let spec = ConvLstmSpec::new(2, 3);
        let p = params(&g, &spec, &mut rng);
        let x = g.constant(rand_tensor(vec![2, 5, 4, 4, 2], 20.0, &mut rng));
        let y = convlstm_sequence(&x, &spec, &p, true).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4, 3]);
        assert!(y.value().data().iter().all(|v| v.abs() <= 1.0));
        let last = convlstm_sequence(&x, &spec, &p, false).unwrap();
        assert_eq!(last.value(), y.slice_axis(1, 4, 1).unwrap().value());
    }

    #[test]
    fn single_slice_sequence_equals_one_step_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::<f64>::new();
        let spec = ConvLstmSpec::new(3, 2);
        let p = params(&g, &spec, &mut rng);
        let x = rand_tensor(vec![2, 1, 5, 3, 3], 1.0, &mut rng);
        let seq = convlstm_sequence(&g.constant(x.clone()), &spec, &p, true).unwrap();
        let zero = g.constant(Tensor::zeros([2, 5, 3, 2]));
        let x4 = g.constant(x.reshape([2, 5, 3, 3]).unwrap());
        let (h, _) = convlstm_step(&x4, &zero, &zero, &spec, &p).unwrap();
        assert!(seq.value().reshape([2, 5, 3, 2]).unwrap().bit_eq(h.value()));
    }

    #[test]
    fn state_shape_mismatch_rejected() {
        let g = Graph::<f64>::new();
        let spec = ConvLstmSpec::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(&g, &spec, &mut rng);
        let x = g.constant(Tensor::ones([1, 4, 4, 2]));
        let bad = g.constant(Tensor::zeros([1, 4, 4, 2]));
        let ok = g.constant(Tensor::zeros([1, 4, 4, 3]));
        assert!(convlstm_step(&x, &bad, &ok, &spec, &p).is_err());
        assert!(convlstm_step(&x, &ok, &bad, &spec, &p).is_err());
    }

    #[test]
    fn first_slice_influences_last_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Graph::<f64>::new();
        let spec = ConvLstmSpec::new(1, 2);
        let p = params(&g, &spec, &mut rng);
        let x = g.param(rand_tensor(vec![1, 8, 3, 3, 1], 1.0, &mut rng));
        let y = convlstm_sequence(&x, &spec, &p, false).unwrap();
        let grads = g.backward(&y.sum().unwrap()).unwrap();
        let gx = grads.get(&x);
        let first: f64 = gx.data()[..9].iter().map(|v| v * v).sum();
        assert!(first > 0.0);
    }
}
