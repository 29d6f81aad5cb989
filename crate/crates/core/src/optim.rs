//! SGD with momentum, L2 weight decay and per-epoch learning-rate damping.

use crate::error::{Error, Result};
use crate::layers::ParamSlot;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_DAMPING: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SgdState {
    /// One buffer per parameter, in the order the parameters are presented.
    pub velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub damping: f64,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new(DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, DEFAULT_DAMPING)
    }
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, damping: f64) -> Self {
        Self {
            velocity: Vec::new(),
            momentum,
            weight_decay,
            lr,
            damping,
        }
    }

    /// Applies one update to every parameter:
    /// `v = momentum * v - lr * (grad + wd * param)`, `param += v`.
    ///
    /// Weight decay only touches parameters flagged `decay`. All gradients
    /// are validated before any parameter moves.
    pub fn step(&mut self, params: &mut [ParamSlot<'_>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!(
                    "optimizer tracks {} parameters but {} were given",
                    self.velocity.len(),
                    params.len()
                ),
            ));
        }
        for ((name, p), v) in params.iter().zip(&self.velocity) {
            if v.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!(
                        "{name}: value {:?}, gradient {:?}, velocity {:?}",
                        p.value.shape(),
                        p.grad.shape(),
                        v.shape()
                    ),
                ));
            }
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        for ((_, p), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for ((vel, x), g) in v.data_mut().iter_mut().zip(value.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel - self.lr * (g + wd * *x);
                *x += *vel;
            }
        }
        Ok(())
    }

    /// Multiplies the learning rate by the damping factor.
    pub fn end_epoch(&mut self) {
        self.lr *= self.damping;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Param;

    fn scalar_param(value: f64, grad: f64) -> Param {
        let mut p = Param::new(Tensor::scalar(value), true);
        p.grad = Tensor::scalar(grad);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_param(1.25, 0.0);
        let mut opt = SgdState::new(0.1, 0.9, 0.0, 0.5);
        opt.step(&mut [("x".into(), &mut p)]).unwrap();
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar_param(0.0, 1.0);
        let mut opt = SgdState::new(0.1, 0.0, 0.0, 0.5);
        opt.step(&mut [("x".into(), &mut p)]).unwrap();
        assert_eq!(p.value.data()[0], -0.1);
    }

    #[test]
    fn momentum_on_quadratic_matches_unrolled_recurrence() {
        // f(x) = x^2, grad = 2x; x0 = 1, lr = 0.1, momentum = 0.9
        // v1 = -0.2           x1 = 0.8
        // v2 = -0.18 - 0.16   x2 = 0.46
        // v3 = -0.306 - 0.092 x3 = 0.062
        let mut p = scalar_param(1.0, 0.0);
        let mut opt = SgdState::new(0.1, 0.9, 0.0, 0.5);
        let mut xs = Vec::new();
        for _ in 0..3 {
            p.grad = Tensor::scalar(2.0 * p.value.data()[0]);
            opt.step(&mut [("x".into(), &mut p)]).unwrap();
            xs.push(p.value.data()[0]);
        }
        for (got, want) in xs.iter().zip([0.8, 0.46, 0.062]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn weight_decay_respects_flag() {
        let mut decayed = scalar_param(2.0, 0.0);
        let mut plain = Param::new(Tensor::scalar(2.0), false);
        let mut opt = SgdState::new(0.1, 0.0, 0.5, 0.5);
        opt.step(&mut [("w".into(), &mut decayed), ("b".into(), &mut plain)]).unwrap();
        assert!((decayed.value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(plain.value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_param(0.0, f64::NAN);
        let mut opt = SgdState::default();
        match opt.step(&mut [("gen.head.weights".into(), &mut p)]) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "gen.head.weights"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.value.data()[0], 0.0);
    }

    #[test]
    fn damping_halves_lr_exactly() {
        let mut opt = SgdState::default();
        for e in 0..40 {
            assert_eq!(opt.lr, DEFAULT_LR * 0.5f64.powi(e));
            opt.end_epoch();
        }
    }
}
