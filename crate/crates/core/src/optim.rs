//! Stochastic gradient descent with classic momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter in store order.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// `v ← m·v + g + wd·w;  w ← w − lr·v`, then clears gradients.
    ///
    /// Parameters without a gradient (unused in the last forward pass) are
    /// left untouched, momentum included.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.params().iter().all(|p| p.grad.is_none()) {
            return Err(Error::NoGradients);
        }
        let m = T::from_f64_lossy(self.config.momentum);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        let lr = T::from_f64_lossy(lr);
        self.velocity.resize(store.params().len(), None);
        for (p, vel) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let Some(grad) = p.grad.take() else {
                continue;
            };
            let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.dims()));
            for ((vi, &gi), wi) in v
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.value.data_mut())
            {
                *vi = m * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Step decay: multiply the base rate by `factor` at each milestone epoch passed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store_with(w: f64, g: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.add_param("w", [1, 1, 1, 1], Init::Constant(w)).unwrap();
        s.accumulate_grad(id, &Tensor::scalar(g));
        (s, id)
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = store_with(1.0, 0.5);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.0 - 0.1 * 0.5);
        assert!(s.param(id).grad.is_none());
    }

    #[test]
    fn zero_grad_keeps_weights() {
        let (mut s, id) = store_with(2.5, 0.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        opt.step(&mut s, 0.3).unwrap();
        assert_eq!(s.value(id).item(), 2.5);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let (w0, g1, g2) = (1.0, 0.5, -0.25);
        let (mut s, id) = store_with(w0, g1);
        let mut opt = Sgd::new(SgdConfig {
            lr,
            momentum: m,
            weight_decay: wd,
        });
        opt.step(&mut s, lr).unwrap();
        s.accumulate_grad(id, &Tensor::scalar(g2));
        opt.step(&mut s, lr).unwrap();
        // v1 = g1 + wd·w0; w1 = w0 − lr·v1; v2 = m·v1 + g2 + wd·w1; w2 = w1 − lr·v2
        let v1 = 0.5 + 0.01 * 1.0;
        let w1 = 1.0 - 0.1 * v1;
        let v2 = 0.9 * v1 - 0.25 + 0.01 * w1;
        let w2 = w1 - 0.1 * v2;
        assert!((s.value(id).item() - w2).abs() < 1e-15);
        assert!((w2 - 0.927151).abs() < 1e-12);
    }

    #[test]
    fn update_before_backward_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.add_param("w", [1, 1, 1, 1], Init::Constant(1.0)).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        assert_eq!(opt.step(&mut s, 0.1), Err(Error::NoGradients));
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = StepSchedule {
            base_lr: 0.05,
            milestones: vec![15, 22],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.05);
        assert!((s.lr_at(15) - 0.005).abs() < 1e-12);
        assert!((s.lr_at(29) - 0.0005).abs() < 1e-12);
    }
}
