use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient buffer. The value is shared with any
/// graph it is bound to and copied only when written while still shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            value: Arc::new(value),
            grad: None,
        }
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    /// Adds `g` into the gradient buffer, taking ownership on first use.
    pub fn accumulate_grad(&mut self, g: Vec<f64>) {
        match &mut self.grad {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                    *a += v;
                }
            }
            None => {
                self.grad = Some(Tensor::new(self.value.shape().to_vec(), g).expect("grad shape"))
            }
        }
    }
}

fn checked_grad<'a>(i: usize, p: &'a Param) -> Result<&'a Tensor> {
    let g = p
        .grad
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("parameter {i} has no gradient")))?;
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(g)
}

/// `p ← p − lr·grad(p)`, then clears the gradients.
///
/// All gradients are validated before any parameter is touched.
pub fn sgd_step(params: &mut [Param], lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    for (i, p) in params.iter().enumerate() {
        checked_grad(i, p)?;
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("validated");
        for (w, d) in p.value_mut().data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

/// Stateful wrapper; `Sgd` delegates to [`sgd_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if matches!(self.kind, OptimizerKind::Sgd) {
            return sgd_step(params, self.lr);
        }
        for (i, p) in params.iter().enumerate() {
            checked_grad(i, p)?;
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().expect("validated");
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Momentum { beta } => {
                    for ((w, v), d) in p.value_mut().data_mut().iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *v = beta * *v + d;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let s = &mut self.second[i];
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (j, d) in g.data().iter().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        s[j] = beta2 * s[j] + (1.0 - beta2) * d * d;
                        let mhat = m[j] / c1;
                        let shat = s[j] / c2;
                        p.value_mut().data_mut()[j] -= self.lr * mhat / (shat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => unreachable!(),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Param {
        Param {
            value: std::sync::Arc::new(Tensor::scalar(v)),
            grad: g.map(Tensor::scalar),
        }
    }

    #[test]
    fn one_step() {
        let mut ps = vec![param(1.0, Some(2.0))];
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps[0].value.item() - 0.8).abs() < 1e-15);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = vec![param(1.25, Some(-3.0))];
        sgd_step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].value.item(), 1.25);
    }

    #[test]
    fn nan_grad_and_missing_grad_rejected() {
        let mut ps = vec![param(1.0, Some(f64::NAN))];
        assert!(sgd_step(&mut ps, 0.1).is_err());
        assert_eq!(ps[0].value.item(), 1.0);
        let mut ps = vec![param(1.0, Some(1.0)), param(1.0, None)];
        assert!(sgd_step(&mut ps, 0.1).is_err());
        assert_eq!(ps[0].value.item(), 1.0);
    }
}
