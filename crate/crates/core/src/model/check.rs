use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::Tensor;

use super::{total_loss, CounterModel, ModelConfig, PerceptualExtractor};

/// Finite-difference check of the full training loss (density MSE plus
/// perceptual term) with respect to every model parameter, in f64 on a
/// 16x16 input. Probes at most `per_param` coordinates per tensor.
pub fn full_model_grad_check(config: &ModelConfig, seed: u64, per_param: usize) -> Result<GradCheckReport> {
    if !config.disentangle {
        return Err(Error::Config("the full-model check needs the style decoder".into()));
    }
    let mut m = CounterModel::<f64>::build(config.clone())?;
    // Zero biases put dead ReLUs exactly on their kink; move them off it.
    let mut r = rng::rng(seed);
    for p in m.params_mut() {
        if p.name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.05..0.3));
        }
    }
    let ex = PerceptualExtractor::snapshot(&m);
    let side = 16;
    let c = config.input_channels;
    let x = Tensor::from_fn(vec![1, c, side, side], |_| r.random_range(-1.0..1.0));
    let y = Tensor::from_fn(vec![1, 1, side, side], |i| (i % 3) as f64 * 0.5);
    let s = Tensor::from_fn(vec![1, config.style_channels, side, side], |i| (i % 4) as f64 / 4.0);
    let inputs: Vec<Tensor<f64>> = m.params().iter().map(|p| p.value.clone()).collect();
    grad_check(
        &inputs,
        |g, p| {
            let x = g.constant(x.clone());
            let out = m.forward(g, p, x)?;
            let y = g.constant(y.clone());
            let s = g.constant(s.clone());
            let style = out.style.ok_or(Error::Config("model has no style decoder".into()))?;
            let (vars, _) = total_loss(g, out.density, y, Some((style, s, &ex)))?;
            Ok(vars.total)
        },
        1e-6,
        per_param,
    )
}
