//! SGD with heavy-ball momentum, driven by a per-epoch cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::schedule::cosine_anneal_lr;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Keyed by parameter name; created lazily on the first step.
    pub velocity: BTreeMap<String, Tensor>,
    pub momentum: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl OptimizerState {
    pub fn new(momentum: f64, base_lr: f64, min_lr: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::invalid("sgd", format!("momentum {momentum} not in [0,1)")));
        }
        if base_lr <= 0.0 || min_lr < 0.0 || min_lr > base_lr {
            return Err(TensorError::invalid(
                "sgd",
                format!("need 0 <= min_lr <= base_lr and base_lr > 0, got {min_lr} / {base_lr}"),
            ));
        }
        if total_epochs == 0 {
            return Err(TensorError::invalid("sgd", "total_epochs must be positive"));
        }
        Ok(OptimizerState {
            velocity: BTreeMap::new(),
            momentum,
            base_lr,
            min_lr,
            epoch: 0,
            total_epochs,
        })
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        cosine_anneal_lr(self.base_lr, self.min_lr, self.epoch, self.total_epochs)
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
    }

    /// `v ← momentum·v + g; θ ← θ − lr·v`
    pub fn sgd_momentum_step(&mut self, name: &str, param: &mut Tensor, grad: Option<&Tensor>) -> Result<()> {
        let grad = grad.ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
        if grad.shape() != param.shape() {
            return Err(TensorError::mismatch("sgd", param.shape(), grad.shape()));
        }
        let lr = self.lr();
        let momentum = self.momentum;
        let v = match self.velocity.get_mut(name) {
            Some(v) if v.shape() == param.shape() => v,
            Some(v) => return Err(TensorError::mismatch("sgd", param.shape(), v.shape())),
            None => self
                .velocity
                .entry(name.to_string())
                .or_insert(Tensor::zeros(param.shape())?),
        };
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
        Ok(())
    }

    /// Extends a velocity buffer along its leading axis with zero rows, to
    /// follow a parameter that grew (e.g. an expanded classifier).
    pub fn grow_rows(&mut self, name: &str, new_rows: usize) -> Result<()> {
        if let Some(v) = self.velocity.get_mut(name) {
            let mut shape = v.shape().to_vec();
            shape[0] = new_rows;
            *v = v.concat_rows(&Tensor::zeros(&shape)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn plain_sgd() {
        let mut opt = OptimizerState::new(0.0, 0.1, 0.0, 10).unwrap();
        let mut p = scalar_param(1.0);
        opt.sgd_momentum_step("w", &mut p, Some(&scalar_param(1.0))).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut opt = OptimizerState::new(0.9, 0.1, 0.0, 10).unwrap();
        let mut p = scalar_param(1.0);
        let g = scalar_param(1.0);
        opt.sgd_momentum_step("w", &mut p, Some(&g)).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        opt.sgd_momentum_step("w", &mut p, Some(&g)).unwrap();
        // v = 0.9·1 + 1 = 1.9; θ = 0.9 − 0.19
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut opt = OptimizerState::new(0.9, 0.1, 0.0, 10).unwrap();
        let mut p = Tensor::vector(vec![0.3, -2.0]);
        let before = p.clone();
        for _ in 0..3 {
            opt.sgd_momentum_step("w", &mut p, Some(&Tensor::zeros(&[2]).unwrap())).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut opt = OptimizerState::new(0.9, 0.1, 0.0, 10).unwrap();
        let mut p = scalar_param(1.0);
        assert_eq!(
            opt.sgd_momentum_step("enc.w", &mut p, None),
            Err(TensorError::MissingGrad("enc.w".into()))
        );
    }

    #[test]
    fn grown_rows_start_at_zero_velocity() {
        let mut opt = OptimizerState::new(0.9, 0.1, 0.0, 10).unwrap();
        let mut p = Tensor::ones(&[2, 3]).unwrap();
        opt.sgd_momentum_step("cls", &mut p, Some(&Tensor::ones(&[2, 3]).unwrap())).unwrap();
        opt.grow_rows("cls", 1).unwrap();
        let v = &opt.velocity["cls"];
        assert_eq!(v.shape(), &[3, 3]);
        assert_eq!(&v.data()[6..], &[0.0; 3]);
        assert_eq!(&v.data()[..6], &[1.0; 6]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(OptimizerState::new(1.0, 0.1, 0.0, 10).is_err());
        assert!(OptimizerState::new(0.9, 0.1, 0.2, 10).is_err());
        assert!(OptimizerState::new(0.9, 0.1, 0.0, 0).is_err());
    }
}
