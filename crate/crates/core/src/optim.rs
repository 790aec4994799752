//! SGD with classical momentum.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("parameter {param}: gradient has {got} values, parameter has {expected}")]
    Shape {
        param: usize,
        expected: usize,
        got: usize,
    },
    #[error("parameter {param}: non-finite gradient at index {index}")]
    NonFinite { param: usize, index: usize },
    #[error("expected {expected} parameters, got {got}")]
    Count { expected: usize, got: usize },
}

/// `v ← μ·v + g`, `w ← w − lr·v`, one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::LearningRate(lr));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Momentum(momentum));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// One update. Every gradient is checked before anything is written, so a
    /// rejected step leaves parameters and velocities untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if !self.velocity.is_empty() && self.velocity.len() != params.len() {
            return Err(OptimError::Count {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(OptimError::Shape {
                    param: i,
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite { param: i, index });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Step-decay schedule: `base` until 60% of `total`, ×0.1 until 85%, ×0.01 after.
pub fn step_decay(base: f64, iter: usize, total: usize) -> f64 {
    let f = iter as f64 / total.max(1) as f64;
    if f < 0.6 {
        base
    } else if f < 0.85 {
        base * 0.1
    } else {
        base * 0.01
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut w = [1.0];
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut w], &[&[2.0]]).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut w = [0.0];
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut w], &[&[1.0]]).unwrap();
        let d1 = w[0];
        opt.step(&mut [&mut w], &[&[1.0]]).unwrap();
        let d2 = w[0] - d1;
        assert!((d1 + 0.1).abs() < 1e-12);
        assert!((d2 + 0.19).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut w = [0.25, -3.0];
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut [&mut w], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(w, [0.25, -3.0]);
    }

    #[test]
    fn non_finite_aborts_whole_step() {
        let mut a = [1.0];
        let mut b = [2.0];
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let err = opt.step(&mut [&mut a, &mut b], &[&[1.0], &[f64::NAN]]).unwrap_err();
        assert_eq!(err, OptimError::NonFinite { param: 1, index: 0 });
        assert_eq!((a[0], b[0]), (1.0, 2.0));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.5).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }
}
