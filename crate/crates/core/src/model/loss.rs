use crate::error::{Error, Result};
use crate::tensor::{ConvOpts, Graph, Real, Tensor, Var};

use super::CounterModel;

pub(crate) const EXTRACTOR_PREFIX: &str = "extractor.";

/// Frozen copy of the first two encoder blocks. Its feature maps define the
/// perceptual term; it never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T> {
    /// Conv weights and biases of each block, in order.
    blocks: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn snapshot(model: &CounterModel<T>) -> Self {
        let blocks = model.layout().encoder[..2]
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|l| {
                        (
                            model.params()[l.weight].value.clone(),
                            model.params()[l.bias].value.clone(),
                        )
                    })
                    .collect()
            })
            .collect();
        Self { blocks }
    }

    /// Named tensors `extractor.b{i}.c{j}.{weight,bias}` for persistence.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, (w, b)) in block.iter().enumerate() {
                out.push((format!("{EXTRACTOR_PREFIX}b{bi}.c{ci}.weight"), w.clone()));
                out.push((format!("{EXTRACTOR_PREFIX}b{bi}.c{ci}.bias"), b.clone()));
            }
        }
        out
    }

    /// Inverse of [`PerceptualExtractor::named_tensors`]; `None` when the
    /// set carries no extractor tensors.
    pub fn from_named(named: &[(String, Tensor<T>)]) -> Result<Option<Self>> {
        let mut blocks: Vec<Vec<(Option<Tensor<T>>, Option<Tensor<T>>)>> = Vec::new();
        for (name, t) in named {
            let Some(rest) = name.strip_prefix(EXTRACTOR_PREFIX) else {
                continue;
            };
            let parse = || -> Option<(usize, usize, bool)> {
                let mut it = rest.split('.');
                let b = it.next()?.strip_prefix('b')?.parse().ok()?;
                let c = it.next()?.strip_prefix('c')?.parse().ok()?;
                let is_weight = match it.next()? {
                    "weight" => true,
                    "bias" => false,
                    _ => return None,
                };
                it.next().is_none().then_some((b, c, is_weight))
            };
            let (b, c, is_weight) =
                parse().ok_or_else(|| Error::Partition(format!("malformed extractor tensor `{name}`")))?;
            if blocks.len() <= b {
                blocks.resize_with(b + 1, Vec::new);
            }
            if blocks[b].len() <= c {
                blocks[b].resize_with(c + 1, || (None, None));
            }
            let slot = if is_weight {
                &mut blocks[b][c].0
            } else {
                &mut blocks[b][c].1
            };
            *slot = Some(t.clone());
        }
        if blocks.is_empty() {
            return Ok(None);
        }
        let blocks = blocks
            .into_iter()
            .map(|block| {
                block
                    .into_iter()
                    .map(|(w, b)| match (w, b) {
                        (Some(w), Some(b)) => Ok((w, b)),
                        _ => Err(Error::Partition("incomplete extractor layer".into())),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(Self { blocks }))
    }

    pub fn cast<U: Real>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|(w, bias)| (w.cast(), bias.cast())).collect())
                .collect(),
        }
    }

    /// Feature map of `image`; the extractor's weights enter `g` as constants.
    pub fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let mut x = image;
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                x = g.max_pool2d(x)?;
            }
            for (w, b) in block {
                let w = g.constant(w.clone());
                let b = g.constant(b.clone());
                x = g.conv2d(x, w, b, ConvOpts::padded(1))?;
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Mean squared difference of extractor features of `pred` and `truth`.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    truth: Var,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var> {
    if g.value(pred).shape() != g.value(truth).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.value(pred).shape(), g.value(truth).shape()),
        ));
    }
    let phi_hat = extractor.features(g, pred)?;
    let phi = extractor.features(g, truth)?;
    g.mse_loss(phi_hat, phi)
}

/// Scalar values of the two loss terms for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Option<Var>,
}

/// `L = L_mse(density) + L_perc(style)`, unweighted. Without a style branch
/// the perceptual term is exactly zero.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    density_pred: Var,
    density_truth: Var,
    style: Option<(Var, Var, &PerceptualExtractor<T>)>,
) -> Result<(LossVars, LossReport)> {
    let batch_size = g.value(density_pred).shape().first().copied().unwrap_or(0);
    let mse = g.mse_loss(density_pred, density_truth)?;
    let (total, perceptual) = match style {
        Some((pred, truth, extractor)) => {
            let perc = perceptual_loss(g, pred, truth, extractor)?;
            (g.add(mse, perc)?, Some(perc))
        }
        None => (mse, None),
    };
    let report = LossReport {
        total: g.value(total).item().as_f64(),
        mse: g.value(mse).item().as_f64(),
        perceptual: perceptual.map_or(0.0, |v| g.value(v).item().as_f64()),
        batch_size,
    };
    Ok((
        LossVars {
            total,
            mse,
            perceptual,
        },
        report,
    ))
}
