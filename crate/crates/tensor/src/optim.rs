//! Trainable parameters and first-order optimizers.

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::tape::{Gradients, Tape, Var};

/// A learned tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Puts the parameter on the tape; frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Var> {
        if trainable {
            tape.param(self.value.clone())
        } else {
            tape.constant(self.value.clone())
        }
    }

    /// Adds the gradient of `var` (if any) into `self.grad`.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

/// Minimizing optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Optimizer {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        )
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, weight_decay)
    }

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        self.steps += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let Parameter { value, grad } = &mut **p;
                    for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * (g + wd * *w);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != params.len() {
                    return Err(TensorError::Contract(format!(
                        "optimizer tracks {} parameters, got {}",
                        self.first.len(),
                        params.len()
                    )));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    if m.shape() != p.value.shape() {
                        return Err(TensorError::Shape {
                            op: "adam",
                            left: m.shape(),
                            right: p.value.shape(),
                        });
                    }
                    let Parameter { value, grad } = &mut **p;
                    for (((w, g), mi), vi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
        if params.iter().any(|p| !p.value.is_finite()) {
            return Err(TensorError::NonFinite { op: "optimizer_step" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Parameter::new(Matrix::from_rows(&[[1.0, -2.0]]).unwrap());
        let before = p.value.clone();
        let mut opt = Optimizer::adam(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
        let mut sgd = Optimizer::sgd(0.1, 0.0);
        sgd.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn plain_step() {
        let mut p = Parameter::new(Matrix::scalar(1.0));
        p.grad = Matrix::scalar(1.0);
        Optimizer::sgd(0.1, 0.0).step(&mut [&mut p]).unwrap();
        assert!((p.value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_moment_formulas() {
        let (lr, wd, b1, b2, eps) = (0.01, 5e-4, 0.9, 0.999, 1e-8);
        let mut p = Parameter::new(Matrix::from_rows(&[[0.5, -1.5]]).unwrap());
        let mut opt = Optimizer::adam(lr, wd);
        let grads = [[0.3, -0.7], [-0.2, 0.4]];
        let mut w = [0.5f64, -1.5];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, g) in grads.iter().enumerate() {
            p.grad = Matrix::from_rows(&[*g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            let t = (t + 1) as i32;
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
            }
            for i in 0..2 {
                assert!((p.value.data()[i] - w[i]).abs() < 1e-10);
            }
        }
    }
}
