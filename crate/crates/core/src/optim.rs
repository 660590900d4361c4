use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value, grad: None }
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only; 0 disables momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, momentum: 0.9, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, learning_rate, momentum, ..Self::default() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("momentum and beta coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct Optimizer<T: Element = f32> {
    config: OptimizerConfig,
    steps: u64,
    /// First-moment (or velocity) and second-moment buffers per parameter.
    state: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, steps: 0, state: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.state.is_empty() {
            self.state =
                params.iter().map(|p| (vec![T::zero(); p.value.numel()], vec![T::zero(); p.value.numel()])).collect();
        }
        if self.state.len() != params.len()
            || self.state.iter().zip(params.iter()).any(|(s, p)| s.0.len() != p.value.numel())
        {
            return Err(Error::invalid("optimizer_step", "parameter set changed shape between steps"));
        }
        self.steps += 1;
        let c = &self.config;
        let lr = T::lit(c.learning_rate);
        for (p, (m, v)) in params.iter_mut().zip(self.state.iter_mut()) {
            let grad = p.grad.take().expect("checked above");
            let w = p.value.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::lit(c.momentum);
                    for ((w, &g), m) in w.iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
                    let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
                    let eps = T::lit(c.epsilon);
                    for (((w, &g), m), v) in w.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Parameter<f32> {
        Parameter { name: "w".into(), value: Tensor::scalar(v), grad: Some(vec![g]) }
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut ps = vec![param(1.0, 1.0)];
        opt.step(&mut ps).unwrap();
        assert!((ps[0].value.data()[0] - 0.9).abs() < 1e-7);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        for g in [1e-4f32, 0.3, 250.0, -7.0] {
            let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2));
            let mut ps = vec![param(0.0, g)];
            opt.step(&mut ps).unwrap();
            let moved = ps[0].value.data()[0].abs() as f64;
            assert!((moved - 1e-2).abs() < 1e-3, "grad {g}: moved {moved}");
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(w) = (w - 4)^2; error shrinks by (1 - 2 lr) per step: 0.8^100 * 4 ≈ 8e-10.
        let mut opt = Optimizer::<f64>::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut ps = vec![Parameter::new("w", Tensor::scalar(0.0f64))];
        for _ in 0..100 {
            let w = ps[0].value.data()[0];
            ps[0].grad = Some(vec![2.0 * (w - 4.0)]);
            opt.step(&mut ps).unwrap();
        }
        assert!((ps[0].value.data()[0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut ps = vec![Parameter::new("enc0.weight", Tensor::<f32>::zeros([2]))];
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("enc0.weight"));
    }
}
