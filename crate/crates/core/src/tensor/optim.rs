//! Stochastic gradient descent with classical (heavy-ball) momentum.

use super::{Result, Tensor, TensorError};

/// One in-place update: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    velocity: &mut Tensor,
) -> Result<()> {
    for other in [grad.shape(), velocity.shape()] {
        if other != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: param.shape().to_vec(),
                rhs: other.to_vec(),
            });
        }
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Tensor], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(super::invalid(
                "sgd",
                format!(
                    "{} params, {} grads, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, lr, self.momentum, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut param = p(3.0);
        let mut vel = p(0.0);
        sgd_step(&mut param, &p(1.0), 1.0, 0.0, &mut vel).unwrap();
        assert_eq!(param.data(), &[2.0]);
    }

    #[test]
    fn momentum_recursion_two_steps() {
        // v1 = 1, p drops 0.1; v2 = 0.99 + 1 = 1.99, p drops 0.199
        let mut param = p(0.0);
        let mut vel = p(0.0);
        sgd_step(&mut param, &p(1.0), 0.1, 0.99, &mut vel).unwrap();
        assert!((param.item() + 0.1).abs() < 1e-15);
        sgd_step(&mut param, &p(1.0), 0.1, 0.99, &mut vel).unwrap();
        assert!((param.item() + 0.1 + 0.199).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut param = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = param.clone();
        let mut vel = Tensor::zeros(&[3]);
        sgd_step(&mut param, &Tensor::zeros(&[3]), 0.5, 0.99, &mut vel).unwrap();
        assert_eq!(param, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut param = Tensor::zeros(&[2]);
        let mut vel = Tensor::zeros(&[2]);
        let err = sgd_step(&mut param, &Tensor::zeros(&[3]), 0.1, 0.9, &mut vel).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }
}
