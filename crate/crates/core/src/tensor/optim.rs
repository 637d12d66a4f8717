use crate::error::{Error, Result};

use super::Tensor;

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("parameter list changed between steps"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} does not match gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[3], 0.5);
        let g = Tensor::zeros(&[3]);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn single_step_without_momentum() {
        let mut p = Tensor::full(&[1], 1.0);
        let g = Tensor::full(&[1], 1.0);
        Sgd::new(0.1, 0.0).unwrap().step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_steps_with_momentum_follow_recurrence() {
        let (g1, g2) = (1.0, 0.5);
        let mut p = Tensor::full(&[1], 1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut p], &[&Tensor::full(&[1], g1)]).unwrap();
        opt.step(&mut [&mut p], &[&Tensor::full(&[1], g2)]).unwrap();
        let expected = 1.0 - 0.1 * g1 - 0.1 * (0.9 * g1 + g2);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(Sgd::new(0.0, 0.9).is_err());
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(Sgd::new(0.1, 0.0).unwrap().step(&mut [&mut p], &[&g]).is_err());
    }
}
