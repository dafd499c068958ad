use rand::seq::SliceRandom;
use rand::Rng;

use crate::density::{self, DensityMap};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::rng;
use crate::tensor::{Adam, Graph, Real, Tensor};

use super::{total_loss, CounterModel, LossReport, PerceptualExtractor};

pub const DEFAULT_BATCH_SIZE: usize = 4;

/// One training triple: input image, ground-truth density, ground-truth style.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub density: DensityMap,
    pub style: Option<Image>,
}

/// Interleaved `w x h x c` grid under symmetry `k` of the square: bit 2
/// flips horizontally, bits 0-1 then count clockwise quarter turns.
fn dihedral_grid<T: Copy>(w: usize, h: usize, c: usize, data: &[T], k: u8) -> (usize, usize, Vec<T>) {
    let turns = k & 3;
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (mut px, mut py) = (if k & 4 != 0 { w - 1 - x } else { x }, y);
            let (mut cw, mut ch) = (w, h);
            for _ in 0..turns {
                (px, py) = (ch - 1 - py, px);
                (cw, ch) = (ch, cw);
            }
            let (d, s) = ((py * ow + px) * c, (y * w + x) * c);
            out[d..d + c].copy_from_slice(&data[s..s + c]);
        }
    }
    (ow, oh, out)
}

fn dihedral_image(img: &Image, k: u8) -> Image {
    let (w, h, data) = dihedral_grid(img.width, img.height, img.channels, &img.data, k);
    Image {
        width: w,
        height: h,
        channels: img.channels,
        data,
    }
}

impl TrainSample {
    pub fn count(&self) -> f64 {
        density::estimate_count(&self.density)
    }

    /// The sample under symmetry `k` (0..8) of the square; image, density
    /// and style move together.
    pub fn dihedral(&self, k: u8) -> TrainSample {
        let d = &self.density;
        let (w, h, values) = dihedral_grid(d.width, d.height, 1, &d.values, k);
        TrainSample {
            image: dihedral_image(&self.image, k),
            density: DensityMap {
                width: w,
                height: h,
                values,
                sigma: d.sigma,
            },
            style: self.style.as_ref().map(|s| dihedral_image(s, k)),
        }
    }

    /// Symmetries that keep the extent: all eight for square samples,
    /// otherwise identity, half turn and the two flips.
    pub fn symmetries(&self) -> &'static [u8] {
        if self.image.width == self.image.height {
            &[0, 1, 2, 3, 4, 5, 6, 7]
        } else {
            &[0, 2, 4, 6]
        }
    }
}

/// Each sample under a random extent-preserving symmetry drawn from `seed`.
pub fn augment_samples(data: &[TrainSample], seed: u64) -> Vec<TrainSample> {
    let mut r = rng::rng(seed);
    data.iter()
        .map(|s| {
            let ks = s.symmetries();
            s.dihedral(ks[r.random_range(0..ks.len())])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    /// Count MAE over the epoch's own forward passes.
    pub mae: f64,
}

fn density_batch<T: Real>(maps: &[&DensityMap], scale: f64) -> Result<Tensor<T>> {
    let first = maps.first().ok_or(Error::Empty("density batch"))?;
    let mut data = Vec::with_capacity(maps.len() * first.values.len());
    for m in maps {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::shape("density batch", "maps differ in extent"));
        }
        data.extend(m.values.iter().map(|&v| T::lit(v * scale)));
    }
    Tensor::new(vec![maps.len(), 1, first.height, first.width], data)
}

fn per_sample_counts<T: Real>(density: &Tensor<T>, scale: f64) -> Vec<f64> {
    let b = density.shape()[0];
    let per = density.numel() / b.max(1);
    density
        .data()
        .chunks(per.max(1))
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / scale)
        .collect()
}

/// One pass over `data` in a shuffled order drawn from `seed`, one Adam
/// step per mini-batch.
pub fn train_epoch<T: Real>(
    model: &mut CounterModel<T>,
    extractor: Option<&PerceptualExtractor<T>>,
    data: &[TrainSample],
    adam: &mut Adam<T>,
    batch_size: usize,
    seed: u64,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let disentangle = model.config().disentangle;
    let extractor = match (disentangle, extractor) {
        (true, Some(e)) => Some(e),
        (true, None) => {
            return Err(Error::Config(
                "disentangled training needs a perceptual extractor".into(),
            ))
        }
        (false, _) => None,
    };
    let scale = model.config().density_scale;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::rng(seed));

    let mut sums = LossReport::default();
    let mut abs_err = 0.0;
    for chunk in order.chunks(batch_size) {
        let items: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let images: Vec<&Image> = items.iter().map(|s| &s.image).collect();
        let input = g.constant(batch_tensor(&images)?);
        let maps: Vec<&DensityMap> = items.iter().map(|s| &s.density).collect();
        let target = g.constant(density_batch(&maps, scale)?);
        let out = model.forward(&mut g, &bound, input)?;

        let style = match (out.style, extractor) {
            (Some(pred), Some(ex)) => {
                let styles = items
                    .iter()
                    .map(|s| s.style.as_ref().ok_or(Error::Empty("style ground truth")))
                    .collect::<Result<Vec<_>>>()?;
                let truth = g.constant(batch_tensor(&styles)?);
                Some((pred, truth, ex))
            }
            _ => None,
        };
        let (vars, report) = total_loss(&mut g, out.density, target, style)?;
        for (pred, s) in per_sample_counts(g.value(out.density), scale)
            .into_iter()
            .zip(&items)
        {
            abs_err += (pred - s.count()).abs();
        }
        let n = items.len() as f64;
        sums.total += report.total * n;
        sums.mse += report.mse * n;
        sums.perceptual += report.perceptual * n;

        g.backward(vars.total)?;
        model.collect_grads(&g, &bound);
        adam.step(model.params_mut())?;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        total: sums.total / n,
        mse: sums.mse / n,
        perceptual: sums.perceptual / n,
        mae: abs_err / n,
    })
}

/// Estimated count per image (integral of the density head).
pub fn predict_counts<T: Real>(
    model: &CounterModel<T>,
    images: &[&Image],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let scale = model.config().density_scale;
    let mut counts = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let input = g.constant(batch_tensor(chunk)?);
        let density = model.forward_density(&mut g, &bound, input)?;
        counts.extend(per_sample_counts(g.value(density), scale));
    }
    Ok(counts)
}
