use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
            None => self.grad = Some(grad.to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created lazily on the first step
/// and matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears its gradient.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("state tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step_size = T::lit(learning_rate / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            if m.len() != grad.len() {
                return Err(Error::shape(
                    "adam",
                    format!("moment buffer size changed for `{}`", p.name),
                ));
            }
            if learning_rate == 0.0 {
                continue;
            }
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                *w = *w - step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(p: &mut Parameter<f64>) {
        // f(w) = sum(w_i^2) -> grad 2w
        let g: Vec<f64> = p.value.data().iter().map(|w| 2.0 * w).collect();
        p.grad = Some(g);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Parameter::new("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())];
        let before = params[0].value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        params[0].grad = Some(vec![0.0; 3]);
        adam.step(&mut params).unwrap();
        assert_eq!(params[0].value, before);
        assert!(params[0].grad.is_none());
    }

    #[test]
    fn single_step_descends() {
        let mut params = vec![Parameter::new("w", Tensor::new(vec![1], vec![1.0]).unwrap())];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        quad_grad(&mut params[0]);
        adam.step(&mut params).unwrap();
        assert!(params[0].value.data()[0] < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = vec![Parameter::new("w", Tensor::new(vec![2], vec![1.0, -1.5]).unwrap())];
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        let f = |p: &Parameter<f64>| p.value.data().iter().map(|w| w * w).sum::<f64>();
        for _ in 0..500 {
            quad_grad(&mut params[0]);
            adam.step(&mut params).unwrap();
        }
        assert!(f(&params[0]) < 1e-3, "f = {}", f(&params[0]));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Parameter::new("lonely", Tensor::<f32>::zeros(vec![2]))];
        let err = Adam::new(AdamConfig::default()).step(&mut params).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(name) if name == "lonely"));
    }
}
