//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F], lr: F) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for other parameters");
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (F::one() - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (F::one() - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn sgd_step<F: Scalar>(params: &mut [F], grad: &[F], lr: F) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Either optimizer behind one interface; Adam state lives as long as the value.
#[derive(Clone, Debug)]
pub enum Optimizer<F> {
    Adam(Adam<F>),
    Sgd,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(n)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F], lr: F) {
        match self {
            Optimizer::Adam(a) => a.step(params, grad, lr),
            Optimizer::Sgd => sgd_step(params, grad, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = [1.0f64, -2.0];
        let mut adam = Adam::new(2);
        adam.step(&mut p, &[0.3, -40.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = [3.0f64];
        let mut adam = Adam::new(1);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = [1.0f32, 1.0];
        sgd_step(&mut p, &[2.0, -1.0], 0.5);
        assert_eq!(p, [0.0, 1.5]);
    }
}
