use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::{Activation, Adam, AdamConfig, Graph, Parameter, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    /// Width of the three hidden layers of both networks.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Discriminator learning rate as a multiple of `learning_rate`.
    pub discriminator_lr_scale: f64,
    pub beta1: f64,
    /// Decay of the moving average of generator weights used for sampling;
    /// 0 samples from the raw weights.
    pub ema_decay: f64,
    /// Standard deviation of Gaussian noise added to every discriminator
    /// input, real or generated.
    pub instance_noise: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 128,
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-4,
            discriminator_lr_scale: 4.0,
            beta1: 0.5,
            ema_decay: 0.995,
            instance_noise: 0.1,
        }
    }
}

/// Losses and mean discriminator probabilities of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStep {
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Stack of dense layers; `hidden` after every layer but the last.
#[derive(Clone, Debug)]
struct Mlp {
    params: Vec<Parameter<f32>>,
    hidden: Activation,
}

impl Mlp {
    fn new(prefix: &str, widths: &[usize], hidden: Activation, seed: u64) -> Self {
        let mut params = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fin, fout) = (pair[0], pair[1]);
            let name = format!("{prefix}.d{i}.weight");
            let normal = Normal::new(0.0, (2.0 / fin as f64).sqrt()).expect("finite std");
            let mut r = rng::rng(rng::derive_named(seed, &name));
            let w = Tensor::from_fn(vec![fout, fin], |_| normal.sample(&mut r) as f32);
            params.push(Parameter::new(name, w));
            params.push(Parameter::new(format!("{prefix}.d{i}.bias"), Tensor::zeros(vec![fout])));
        }
        Self { params, hidden }
    }

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    fn forward(&self, g: &mut Graph<f32>, bound: &[Var], x: Var) -> Result<Var> {
        let layers = bound.len() / 2;
        let mut x = x;
        for i in 0..layers {
            x = g.dense(x, bound[2 * i], bound[2 * i + 1])?;
            if i + 1 < layers {
                x = g.activation(x, self.hidden);
            }
        }
        Ok(x)
    }

    fn collect(&mut self, g: &Graph<f32>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(d) = g.grad(v) {
                p.accumulate(d);
            }
        }
    }
}

/// Fully connected patch GAN. Generated patches are flattened in the
/// interleaved `H x W x C` order of [`Image::data`].
#[derive(Clone, Debug)]
pub struct PatchGenerator {
    generator: Mlp,
    /// Moving average of the generator weights; sampling uses it.
    average: Mlp,
    discriminator: Mlp,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub log: Vec<GanStep>,
}

fn mean_probability(logits: &Tensor<f32>) -> f64 {
    let n = logits.numel().max(1) as f64;
    logits
        .data()
        .iter()
        .map(|&l| 1.0 / (1.0 + (-(l as f64)).exp()))
        .sum::<f64>()
        / n
}

impl PatchGenerator {
    fn latent(&self, rng: &mut rng::Rng, n: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![n, self.latent_dim], |_| StandardNormal.sample(rng))
    }

    fn generate(&self, g: &mut Graph<f32>, bound: &[Var], z: Var) -> Result<Var> {
        let logits = self.generator.forward(g, bound, z)?;
        Ok(g.sigmoid(logits))
    }

    /// Discriminator probability that each row of `flat` is a real patch.
    pub fn discriminate(&self, flat: Tensor<f32>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let d = self.discriminator.bind(&mut g, false);
        let x = g.constant(flat);
        let logits = self.discriminator.forward(&mut g, &d, x)?;
        Ok(g.value(logits)
            .data()
            .iter()
            .map(|&l| 1.0 / (1.0 + (-(l as f64)).exp()))
            .collect())
    }

    /// `n` generated patches drawn from latent codes seeded by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Image>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut r = rng::rng(seed);
        let z = self.latent(&mut r, n);
        let mut g = Graph::new();
        let gb = self.average.bind(&mut g, false);
        let z = g.constant(z);
        let out = self.generate(&mut g, &gb, z)?;
        let per = self.patch_size * self.patch_size * self.channels;
        g.value(out)
            .data()
            .chunks(per)
            .map(|c| {
                let mut img = Image::new(self.patch_size, self.patch_size, self.channels, c.to_vec())?;
                img.clamp01();
                Ok(img)
            })
            .collect()
    }
}

/// Alternating non-saturating GAN training on `patches` (all square and of
/// one extent). The discriminator step sees generated patches as constants;
/// the generator step sees the discriminator as constants.
pub fn train_patch_gan(patches: &[Image], cfg: &GanConfig, seed: u64) -> Result<PatchGenerator> {
    let first = patches.first().ok_or(Error::Empty("patch set"))?;
    if first.width != first.height {
        return Err(Error::shape("train_patch_gan", "patches must be square"));
    }
    if patches.iter().any(|p| !p.same_extent(first)) {
        return Err(Error::shape("train_patch_gan", "patches differ in extent"));
    }
    if cfg.latent_dim == 0 || cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("GAN widths and batch size must be positive".into()));
    }
    let (size, channels) = (first.width, first.channels);
    let flat = size * size * channels;
    let h = cfg.hidden;
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::Config(format!("ema_decay {} must lie in [0, 1)", cfg.ema_decay)));
    }
    let generator = Mlp::new("generator", &[cfg.latent_dim, h, h, h, flat], Activation::Relu, seed);
    let mut gan = PatchGenerator {
        average: generator.clone(),
        generator,
        discriminator: Mlp::new("discriminator", &[flat, h, h, h, 1], Activation::LeakyRelu, seed),
        latent_dim: cfg.latent_dim,
        patch_size: size,
        channels,
        log: Vec::with_capacity(cfg.steps),
    };
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let mut adam_g = Adam::new(adam_cfg.clone());
    let mut adam_d = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate * cfg.discriminator_lr_scale,
        ..adam_cfg
    });
    let mut r = rng::rng(rng::derive_named(seed, "gan.training"));
    let b = cfg.batch_size;

    for _ in 0..cfg.steps {
        let mut real = Vec::with_capacity(b * flat);
        for _ in 0..b {
            real.extend_from_slice(&patches[r.random_range(0..patches.len())].data);
        }
        let real = Tensor::new(vec![b, flat], real)?;
        let z = gan.latent(&mut r, b);
        let fake = {
            let mut g = Graph::new();
            let gb = gan.generator.bind(&mut g, false);
            let z = g.constant(z);
            let out = gan.generate(&mut g, &gb, z)?;
            g.value(out).clone()
        };

        let noise = Normal::new(0.0, cfg.instance_noise).map_err(|e| Error::Config(format!("instance_noise: {e}")))?;
        let mut jitter = |t: Tensor<f32>| -> Tensor<f32> {
            if cfg.instance_noise == 0.0 {
                return t;
            }
            let shape = t.shape().to_vec();
            let data = t.into_data().into_iter().map(|v| v + noise.sample(&mut r) as f32).collect();
            Tensor::new(shape, data).expect("same extent")
        };
        let (real, fake) = (jitter(real), jitter(fake));
        let g_noise = jitter(Tensor::zeros(vec![b, flat]));

        let mut g = Graph::new();
        let db = gan.discriminator.bind(&mut g, true);
        let xr = g.constant(real);
        let xf = g.constant(fake);
        let lr = gan.discriminator.forward(&mut g, &db, xr)?;
        let lf = gan.discriminator.forward(&mut g, &db, xf)?;
        let d_real = mean_probability(g.value(lr));
        let d_fake = mean_probability(g.value(lf));
        let a = g.bce_with_logits(lr, 1.0);
        let c = g.bce_with_logits(lf, 0.0);
        let d_loss = g.add(a, c)?;
        let d_loss_value = g.value(d_loss).item() as f64;
        g.backward(d_loss)?;
        gan.discriminator.collect(&g, &db);
        adam_d.step(&mut gan.discriminator.params)?;

        let z = gan.latent(&mut r, b);
        let mut g = Graph::new();
        let gb = gan.generator.bind(&mut g, true);
        let db = gan.discriminator.bind(&mut g, false);
        let z = g.constant(z);
        let x = gan.generate(&mut g, &gb, z)?;
        let n = g.constant(g_noise);
        let x = g.add(x, n)?;
        let logits = gan.discriminator.forward(&mut g, &db, x)?;
        let g_loss = g.bce_with_logits(logits, 1.0);
        let g_loss_value = g.value(g_loss).item() as f64;
        g.backward(g_loss)?;
        gan.generator.collect(&g, &gb);
        adam_g.step(&mut gan.generator.params)?;
        let decay = cfg.ema_decay as f32;
        for (avg, p) in gan.average.params.iter_mut().zip(&gan.generator.params) {
            for (a, &v) in avg.value.data_mut().iter_mut().zip(p.value.data()) {
                *a = decay * *a + (1.0 - decay) * v;
            }
        }

        gan.log.push(GanStep {
            d_loss: d_loss_value,
            g_loss: g_loss_value,
            d_real,
            d_fake,
        });
    }
    Ok(gan)
}
