use std::collections::BTreeMap;

use crate::error::{CtaError, Result};
use crate::numerics::Tensor;

/// Classical momentum SGD: `buf ← m·buf + g`, `p ← p − lr·buf`.
///
/// Buffers are keyed by parameter identity and created lazily at zero.
#[derive(Debug, Clone)]
pub struct Sgd<K: Ord> {
    lr: f64,
    momentum: f64,
    buffers: BTreeMap<K, Vec<f64>>,
}

impl<K: Ord + Copy> Sgd<K> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CtaError::InvalidArgument(format!("learning rate {lr} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CtaError::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, key: K, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.same_shape(grad)?;
        let buf = self
            .buffers
            .entry(key)
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, b), g) in param.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
            *b = self.momentum * *b + g;
            *p -= self.lr * *b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let mut p = Tensor::vector(vec![5.0, 3.0]);
        opt.step(0, &mut p, &Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert!((p.data()[0] - 4.9).abs() < 1e-12);
        assert!((p.data()[1] - 3.1).abs() < 1e-12);
    }

    #[test]
    fn momentum_two_steps_closed_form() {
        let (lr, g) = (0.01, 0.5);
        let mut opt = Sgd::new(lr, 0.9).unwrap();
        let mut p = Tensor::vector(vec![1.0]);
        let grad = Tensor::vector(vec![g]);
        opt.step(0, &mut p, &grad).unwrap();
        opt.step(0, &mut p, &grad).unwrap();
        let expected = 1.0 - lr * g * (1.0 + 1.9);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut opt = Sgd::new(0.3, 0.9).unwrap();
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let before = p.clone();
        opt.step(7, &mut p, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<u8>::new(0.0, 0.9).is_err());
        assert!(Sgd::<u8>::new(0.1, 1.0).is_err());
    }
}
