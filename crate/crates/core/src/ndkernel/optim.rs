use super::{KernelError, Matrix};

/// SGD with momentum and coupled weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// Switching to decoupled decay means moving the `weight_decay * param` term
/// out of `v` and into the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    /// One zeroed velocity buffer per parameter shape.
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        shapes: &[(usize, usize)],
    ) -> Result<Self, KernelError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(KernelError::InvalidHyperparameter {
                name: "learning_rate",
                value: learning_rate,
            });
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<(), KernelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(KernelError::InvalidHyperparameter {
                name: "learning_rate",
                value: lr,
            });
        }
        self.learning_rate = lr;
        Ok(())
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    /// Applies one update. `grads[i] == None` freezes parameter `i` for this
    /// step: neither it nor its velocity changes.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Option<&Matrix>],
    ) -> Result<(), KernelError> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(KernelError::ParameterCount {
                expected: self.velocity.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(grad) = grad else { continue };
            if param.shape() != grad.shape() {
                return Err(KernelError::shape("sgd_step", param, grad));
            }
            if param.shape() != vel.shape() {
                return Err(KernelError::shape("sgd_step", param, vel));
            }
            let p = param.data_mut();
            for ((pv, gv), vv) in p.iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut opt = Sgd::new(0.1, 0.0, 0.0, &[(1, 2)]).unwrap();
        let mut p = Matrix::row_vector(&[1.0, -1.0]);
        let g = Matrix::row_vector(&[2.0, 0.5]);
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, Matrix::row_vector(&[1.0 - 0.2, -1.0 - 0.05]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Sgd::new(0.1, 0.9, 0.0, &[(2, 2)]).unwrap();
        let mut p = Matrix::filled(2, 2, 3.0);
        opt.step(&mut [&mut p], &[Some(&Matrix::zeros(2, 2))])
            .unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 3.0));
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.05, 0.8);
        let mut opt = Sgd::new(lr, 0.9, 0.0, &[(1, 1)]).unwrap();
        let mut p = Matrix::filled(1, 1, 0.0);
        let grad = Matrix::filled(1, 1, g);
        opt.step(&mut [&mut p], &[Some(&grad)]).unwrap();
        opt.step(&mut [&mut p], &[Some(&grad)]).unwrap();
        let displacement = -p.get(0, 0);
        assert!((displacement - lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut opt = Sgd::new(0.5, 0.9, 0.1, &[(1, 1)]).unwrap();
        let mut p = Matrix::filled(1, 1, 2.0);
        opt.step(&mut [&mut p], &[Some(&Matrix::zeros(1, 1))])
            .unwrap();
        // v = 0.1 * 2 = 0.2, p = 2 - 0.5 * 0.2
        assert!((p.get(0, 0) - 1.9).abs() < 1e-15);
        assert!((opt.velocity()[0].get(0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut opt = Sgd::new(0.5, 0.9, 0.1, &[(1, 1), (1, 1)]).unwrap();
        let mut a = Matrix::filled(1, 1, 1.0);
        let mut b = Matrix::filled(1, 1, 1.0);
        let g = Matrix::filled(1, 1, 1.0);
        opt.step(&mut [&mut a, &mut b], &[Some(&g), None]).unwrap();
        assert_ne!(a.get(0, 0), 1.0);
        assert_eq!(b.get(0, 0), 1.0);
        assert_eq!(opt.velocity()[1].get(0, 0), 0.0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(Sgd::new(0.0, 0.9, 0.0, &[]).is_err());
    }
}
