//! Trainable parameters and the linear layer.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Records the current value on `tape` as a gradient-carrying leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.param(self.value.clone())
    }

    /// Adds the gradient that `tape` computed for `var` into `self.grad`.
    pub fn accumulate_from(&mut self, tape: &Tape<T>, var: Var) {
        if let Some(g) = tape.grad(var) {
            self.grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out × in`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

/// Tape handles for one forward pass of a [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim])),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Fan-in scaled uniform init in `±sqrt(6 / in)`; bias set to zero.
    pub fn init_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = (6.0 / self.in_dim() as f64).sqrt();
        let shape = self.weight.value.shape().to_vec();
        self.weight.value = Tensor::uniform(&shape, -bound, bound, rng);
        if let Some(b) = &mut self.bias {
            b.value.fill(T::zero());
        }
    }

    /// `x · Wᵀ (+ b)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, LinearVars)> {
        if tape.value(x).cols() != self.in_dim() {
            return Err(Error::dim(
                "linear_forward",
                tape.value(x).shape(),
                self.weight.value.shape(),
            ));
        }
        let w = self.weight.record(tape)?;
        let mut y = tape.matmul_nt(x, w)?;
        let mut bias = None;
        if let Some(b) = &self.bias {
            let bv = b.record(tape)?;
            y = tape.add_row_bias(y, bv)?;
            bias = Some(bv);
        }
        Ok((y, LinearVars { weight: w, bias }))
    }

    pub fn accumulate_from(&mut self, tape: &Tape<T>, vars: &LinearVars) {
        self.weight.accumulate_from(tape, vars.weight);
        if let (Some(b), Some(bv)) = (&mut self.bias, vars.bias) {
            b.accumulate_from(tape, bv);
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_input_through() {
        let mut layer = Linear::<f64>::new("l", 3, 3, false);
        for i in 0..3 {
            layer.weight.value.data_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap())
            .unwrap();
        let (y, _) = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn hand_checked_bias_case() {
        let mut layer = Linear::<f64>::new("l", 2, 1, true);
        layer.weight.value = Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap();
        layer.bias.as_mut().unwrap().value = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let (y, _) = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn forward_matches_matmul_broadcast_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, i, o) in &[(1, 1, 1), (4, 7, 3), (9, 2, 5)] {
            let mut layer = Linear::<f64>::new("l", i, o, true);
            layer.init_weights(&mut rng);
            layer.bias.as_mut().unwrap().value = Tensor::uniform(&[o], -1.0, 1.0, &mut rng);
            let x = Tensor::<f64>::uniform(&[n, i], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let (y, _) = layer.forward(&mut tape, xv).unwrap();
            let w = layer.weight.value.data();
            let b = layer.bias.as_ref().unwrap().value.data();
            for r in 0..n {
                for c in 0..o {
                    let mut s = 0.0;
                    for k in 0..i {
                        s += x.data()[r * i + k] * w[c * i + k];
                    }
                    let got = tape.value(y).data()[r * o + c];
                    assert!((got - (s + b[c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let layer = Linear::<f64>::new("l", 3, 2, false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(layer.forward(&mut tape, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn init_bounds_mean_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = Linear::<f64>::new("l", 6, 2, true);
        layer.init_weights(&mut rng);
        assert!(layer.weight.value.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(layer.bias.as_ref().unwrap().value.data().iter().all(|&v| v == 0.0));

        let mut big = Linear::<f64>::new("big", 6, 10_000 / 6 + 1, false);
        big.init_weights(&mut rng);
        let d = big.weight.value.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }
}
