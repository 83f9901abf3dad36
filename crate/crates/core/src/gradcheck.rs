//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over checked elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function of several inputs
/// against central differences. `f` must be deterministic; a function whose
/// value changes between two evaluations at the same point is rejected.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let g = Graph::with_check_finite(true);
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let f0 = out.value().item()?;
    let grads = g.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::with_check_finite(true);
        let vars: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars)?.value().item()
    };

    let again = eval(inputs)?;
    if again.to_bits() != f0.to_bits() {
        return Err(Error::NonDeterministic((again - f0).abs()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let x = input.data()[idx];
            let (xp, xm) = (x + opts.step, x - opts.step);
            work[which] = with_element(input, idx, xp);
            let fp = eval(&work)?;
            work[which] = with_element(input, idx, xm);
            let fm = eval(&work)?;
            work[which] = input.clone();

            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[which].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check`].
pub fn grad_check_single<F>(f: F, x: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check(|g, xs| f(g, &xs[0]), std::slice::from_ref(x), opts)
}

fn with_element(t: &Tensor<f64>, idx: usize, v: f64) -> Tensor<f64> {
    let mut data = t.to_vec();
    data[idx] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use rand::Rng;

    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn([4, 5], |_| rng.random_range(-256i32..256) as f64 / 64.0);
        let opts = GradCheckOptions {
            step: 2f64.powi(-17),
            ..Default::default()
        };
        let r = grad_check_single(|_, x| x.sum(), &x, opts).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn sigmoid_sum_within_1e6() {
        for seed in 0..5 {
            let x = random(&[3, 4], seed);
            let r = grad_check_single(|_, x| x.sigmoid()?.sum(), &x, Default::default()).unwrap();
            assert!(r.passes(1e-6), "{r:?}");
        }
    }

    #[test]
    fn tanh_gradient_within_1e6() {
        for seed in 0..5 {
            let x = random(&[6], seed + 10);
            let r = grad_check_single(|_, x| x.tanh()?.sum(), &x, Default::default()).unwrap();
            assert!(r.passes(1e-6), "{r:?}");
        }
    }

    #[test]
    fn product_gradient_equals_other_factor() {
        let a = random(&[3, 4], 1);
        let b = random(&[3, 4], 2);
        let g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let grads = g.backward(&va.mul(&vb).unwrap().sum().unwrap()).unwrap();
        assert_eq!(grads.get(&va).data(), b.data());
        let r = grad_check(|_, xs| xs[0].mul(&xs[1])?.sum(), &[a, b], Default::default()).unwrap();
        assert!(r.passes(1e-8), "{r:?}");
    }

    #[test]
    fn non_deterministic_function_rejected() {
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let x = random(&[4], 0);
        let res = grad_check_single(
            |_, x| {
                let c: f64 = rng.borrow_mut().random();
                x.mul_scalar(c)?.sum()
            },
            &x,
            Default::default(),
        );
        assert!(matches!(res, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn subset_sampling_limits_work() {
        let x = random(&[50], 4);
        let opts = GradCheckOptions {
            max_elements: Some(7),
            ..Default::default()
        };
        let r = grad_check_single(|_, x| x.exp()?.sum(), &x, opts).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.passes(1e-6));
    }
}
