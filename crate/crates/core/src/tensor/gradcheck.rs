//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

use super::{Activation, ConvOpts, Graph, Tensor, Var};

/// Largest relative error seen over the sampled coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `build` with central differences.
///
/// `build` receives a fresh graph and the bound inputs (all differentiable)
/// and returns a scalar loss. At most `max_per_input` evenly spaced
/// coordinates of each input are probed. The relative error of one
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    eps: f64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss(g.value(loss).shape().to_vec()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        for idx in sample_indices(input.numel(), max_per_input) {
            let orig = input.data()[idx];
            probe[i].data_mut()[idx] = orig + eps;
            let up = evaluate(&probe)?;
            probe[i].data_mut()[idx] = orig - eps;
            let down = evaluate(&probe)?;
            probe[i].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // Evenly spaced, always including both ends.
    (0..max)
        .map(|j| j * (len - 1) / (max - 1).max(1))
        .collect()
}

/// Every differentiable operator of the engine, by name.
pub const REGISTERED_OPS: &[&str] = &[
    "conv2d",
    "conv2d_dilated",
    "max_pool2d",
    "upsample_nearest",
    "dense",
    "relu",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "global_avg_pool",
    "mse_loss",
    "spatial_gate",
    "channel_gate",
    "reshape",
    "add",
    "sum",
    "scale",
    "bce_with_logits",
];

fn random(shape: &[usize], rng: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Projects an op output to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut r = rng::rng(seed);
    let w = g.constant(random(&shape, &mut r));
    let shifted = g.add(out, w)?;
    let sq = g.mse_loss(shifted, w)?; // mean(out^2)
    let lin = g.sum(out);
    let lin = g.scale(lin, 0.37);
    g.add(sq, lin)
}

/// Finite-difference check of one registered operator on random inputs.
pub fn check_op(name: &str, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut r = rng::rng(seed);
    let ps = seed ^ 0x5eed;
    let n = 64;
    match name {
        "conv2d" | "conv2d_dilated" => {
            let (opts, k) = if name == "conv2d" {
                (ConvOpts { stride: 2, padding: 1, dilation: 1 }, 3)
            } else {
                (ConvOpts::same(3, 2), 3)
            };
            let inputs = [random(&[2, 3, 6, 6], &mut r), random(&[4, 3, k, k], &mut r), random(&[4], &mut r)];
            grad_check(&inputs, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], opts)?;
                project(g, y, ps)
            }, eps, n)
        }
        "max_pool2d" => grad_check(&[random(&[2, 2, 4, 6], &mut r)], |g, v| {
            let y = g.max_pool2d(v[0])?;
            project(g, y, ps)
        }, eps, n),
        "upsample_nearest" => grad_check(&[random(&[1, 2, 3, 3], &mut r)], |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y, ps)
        }, eps, n),
        "dense" => {
            let inputs = [random(&[3, 5], &mut r), random(&[4, 5], &mut r), random(&[4], &mut r)];
            grad_check(&inputs, |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                project(g, y, ps)
            }, eps, n)
        }
        "relu" | "sigmoid" | "tanh" | "leaky_relu" => {
            let kind = Activation::ALL.into_iter().find(|a| a.name() == name).expect("listed");
            grad_check(&[random(&[2, 7], &mut r)], |g, v| {
                let y = g.activation(v[0], kind);
                project(g, y, ps)
            }, eps, n)
        }
        "global_avg_pool" => grad_check(&[random(&[2, 3, 4, 4], &mut r)], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, ps)
        }, eps, n),
        "mse_loss" => {
            let target = random(&[2, 3, 3], &mut r);
            grad_check(&[random(&[2, 3, 3], &mut r)], |g, v| {
                let t = g.constant(target.clone());
                g.mse_loss(v[0], t)
            }, eps, n)
        }
        "spatial_gate" => {
            let inputs = [random(&[2, 3, 3, 3], &mut r), random(&[2, 1, 3, 3], &mut r)];
            grad_check(&inputs, |g, v| {
                let y = g.spatial_gate(v[0], v[1])?;
                project(g, y, ps)
            }, eps, n)
        }
        "channel_gate" => {
            let inputs = [random(&[2, 3, 2, 2], &mut r), random(&[2, 3], &mut r)];
            grad_check(&inputs, |g, v| {
                let y = g.channel_gate(v[0], v[1])?;
                project(g, y, ps)
            }, eps, n)
        }
        "reshape" => grad_check(&[random(&[2, 6], &mut r)], |g, v| {
            let y = g.reshape(v[0], vec![3, 4])?;
            project(g, y, ps)
        }, eps, n),
        "add" => grad_check(&[random(&[5], &mut r), random(&[5], &mut r)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, ps)
        }, eps, n),
        "sum" => grad_check(&[random(&[7], &mut r)], |g, v| {
            let y = g.sum(v[0]);
            project(g, y, ps)
        }, eps, n),
        "scale" => grad_check(&[random(&[7], &mut r)], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, ps)
        }, eps, n),
        "bce_with_logits" => grad_check(&[random(&[3, 4], &mut r)], |g, v| {
            let a = g.bce_with_logits(v[0], 1.0);
            let b = g.bce_with_logits(v[0], 0.25);
            g.add(a, b)
        }, eps, n),
        other => Err(Error::Config(format!("no gradient check registered for `{other}`"))),
    }
}
