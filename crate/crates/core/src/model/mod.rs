//! The dual-decoder counting network.
//!
//! Layout: a VGG-style encoder with three pooling stages, a feature
//! enhancement module (spatial attention, channel attention, six dilated
//! convolutions), and two decoders that both start from the enhanced
//! features. The domain-agnostic decoder emits a density map; the
//! domain-specific decoder emits a style image.
//!
//! Every parameter name starts with one of the four group prefixes in
//! [`ParamGroup`]. Transfer surgery relies on that partition.

mod check;
mod loss;
mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ConvOpts, Graph, Parameter, Real, Tensor, Var};

pub use check::full_model_grad_check;
pub use loss::{perceptual_loss, total_loss, LossReport, LossVars, PerceptualExtractor};
pub use train::{
    augment_samples, predict_counts, train_epoch, EpochMetrics, TrainSample, DEFAULT_BATCH_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Enhancement,
    DecoderSpecific,
    DecoderAgnostic,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Enhancement,
        ParamGroup::DecoderSpecific,
        ParamGroup::DecoderAgnostic,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder.",
            ParamGroup::Enhancement => "enhance.",
            ParamGroup::DecoderSpecific => "decoder_specific.",
            ParamGroup::DecoderAgnostic => "decoder_agnostic.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// 1 (grayscale) or 3 (RGB).
    pub input_channels: usize,
    /// `(conv count, output channels)` per encoder block; a 2x2 max pool
    /// follows every block.
    pub encoder_blocks: Vec<(usize, usize)>,
    pub attention_reduction: usize,
    pub dilation_rates: Vec<usize>,
    /// Widths of the three upsample + conv stages of each decoder.
    pub decoder_channels: Vec<usize>,
    pub style_channels: usize,
    /// `false` drops the domain-specific decoder and the perceptual term.
    pub disentangle: bool,
    /// The density head regresses `density_scale * Y`; counts divide it out.
    pub density_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            encoder_blocks: vec![(2, 16), (2, 32), (3, 64)],
            attention_reduction: 4,
            dilation_rates: vec![1, 2, 4, 8, 4, 2],
            decoder_channels: vec![32, 16, 16],
            style_channels: 1,
            disentangle: true,
            density_scale: 100.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Few channels, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_channels: 1,
            encoder_blocks: vec![(1, 2), (1, 3), (1, 4)],
            attention_reduction: 2,
            dilation_rates: vec![1, 2, 1, 2, 1, 1],
            decoder_channels: vec![3, 2, 2],
            style_channels: 1,
            disentangle: true,
            density_scale: 1.0,
            seed: 5,
        }
    }

    pub fn base_width(&self) -> usize {
        self.encoder_blocks.first().map_or(0, |b| b.1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        if self.encoder_blocks.len() != 3 {
            return bad(format!(
                "encoder needs exactly 3 pooled blocks, got {}",
                self.encoder_blocks.len()
            ));
        }
        if self.encoder_blocks.iter().any(|&(n, c)| n == 0 || c == 0) {
            return bad("every encoder block needs at least one conv with non-zero width".into());
        }
        if self.dilation_rates.len() != 6 || self.dilation_rates.contains(&0) {
            return bad(format!(
                "dilation_rates must be 6 positive integers, got {:?}",
                self.dilation_rates
            ));
        }
        if self.decoder_channels.len() != 3 || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder_channels must be 3 positive widths, got {:?}",
                self.decoder_channels
            ));
        }
        if self.attention_reduction == 0 {
            return bad("attention_reduction must be positive".into());
        }
        if self.disentangle && self.style_channels != self.input_channels {
            return bad("style_channels must equal input_channels so the perceptual extractor applies".into());
        }
        if !(self.density_scale > 0.0) {
            return bad("density_scale must be positive".into());
        }
        Ok(())
    }

    fn feature_channels(&self) -> usize {
        self.encoder_blocks[2].1
    }

    fn attention_hidden(&self) -> usize {
        (self.feature_channels() / self.attention_reduction).max(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub opts: ConvOpts,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DenseLayer {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    pub stages: Vec<ConvLayer>,
    pub head: ConvLayer,
}

/// Indices into the parameter list, derived from the config alone.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub encoder: Vec<Vec<ConvLayer>>,
    pub spatial: [ConvLayer; 2],
    pub channel: [DenseLayer; 2],
    pub dilated: Vec<ConvLayer>,
    pub agnostic: Decoder,
    pub specific: Option<Decoder>,
}

/// Parameter declaration: name, shape and He fan-in (0 for biases).
struct Decl {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

struct Builder {
    decls: Vec<Decl>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, opts: ConvOpts) -> ConvLayer {
        let weight = self.decls.len();
        self.decls.push(Decl {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            fan_in: cin * k * k,
        });
        self.decls.push(Decl {
            name: format!("{name}.bias"),
            shape: vec![cout],
            fan_in: 0,
        });
        ConvLayer {
            weight,
            bias: weight + 1,
            opts,
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> DenseLayer {
        let weight = self.decls.len();
        self.decls.push(Decl {
            name: format!("{name}.weight"),
            shape: vec![fout, fin],
            fan_in: fin,
        });
        self.decls.push(Decl {
            name: format!("{name}.bias"),
            shape: vec![fout],
            fan_in: 0,
        });
        DenseLayer {
            weight,
            bias: weight + 1,
        }
    }

    fn decoder(&mut self, prefix: &str, cin: usize, widths: &[usize], out: usize) -> Decoder {
        let mut c = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let layer = self.conv(&format!("{prefix}.up{i}"), c, w, 3, ConvOpts::padded(1));
                c = w;
                layer
            })
            .collect();
        let head = self.conv(&format!("{prefix}.head"), c, out, 1, ConvOpts::default());
        Decoder { stages, head }
    }
}

fn plan(config: &ModelConfig) -> (Layout, Vec<Decl>) {
    let mut b = Builder { decls: Vec::new() };
    let mut cin = config.input_channels;
    let encoder = config
        .encoder_blocks
        .iter()
        .enumerate()
        .map(|(bi, &(n, width))| {
            (0..n)
                .map(|ci| {
                    let l = b.conv(&format!("encoder.b{bi}.c{ci}"), cin, width, 3, ConvOpts::padded(1));
                    cin = width;
                    l
                })
                .collect()
        })
        .collect();
    let feat = config.feature_channels();
    let hidden = config.attention_hidden();
    let spatial = [
        b.conv("enhance.spatial.c0", feat, hidden, 3, ConvOpts::padded(1)),
        b.conv("enhance.spatial.c1", hidden, 1, 1, ConvOpts::default()),
    ];
    let channel = [
        b.dense("enhance.channel.d0", feat, hidden),
        b.dense("enhance.channel.d1", hidden, feat),
    ];
    let dilated = config
        .dilation_rates
        .iter()
        .enumerate()
        .map(|(i, &d)| b.conv(&format!("enhance.dilated.c{i}"), feat, feat, 3, ConvOpts::same(3, d)))
        .collect();
    let specific = config.disentangle.then(|| {
        b.decoder("decoder_specific", feat, &config.decoder_channels, config.style_channels)
    });
    let agnostic = b.decoder("decoder_agnostic", feat, &config.decoder_channels, 1);
    let layout = Layout {
        encoder,
        spatial,
        channel,
        dilated,
        agnostic,
        specific,
    };
    (layout, b.decls)
}

/// He-normal draw for one named parameter. Each name has its own stream, so
/// re-initialising a subset reproduces exactly what a full build would give.
fn init_tensor<T: Real>(decl: &Decl, seed: u64) -> Tensor<T> {
    if decl.fan_in == 0 {
        return Tensor::zeros(decl.shape.clone());
    }
    let std = (2.0 / decl.fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = rng::rng(rng::derive_named(seed, &decl.name));
    Tensor::from_fn(decl.shape.clone(), |_| T::lit(normal.sample(&mut rng)))
}

/// Output of [`CounterModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B,1,H,W]`, non-negative.
    pub density: Var,
    /// `[B,style_channels,H,W]` in `(0,1)`; absent without disentangling.
    pub style: Option<Var>,
    /// Enhanced features shared by both decoders.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct CounterModel<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Parameter<T>>,
}

impl<T: Real> CounterModel<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, decls) = plan(&config);
        let params = decls
            .iter()
            .map(|d| Parameter::new(d.name.clone(), init_tensor(d, config.seed)))
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuild from named tensors; every declared parameter must be present
    /// with its declared shape and no extras are allowed.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::build(config)?;
        let mut seen = 0;
        for (name, tensor) in named {
            if name.starts_with(loss::EXTRACTOR_PREFIX) {
                continue;
            }
            let p = model
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Partition(format!("unexpected tensor `{name}`")))?;
            if p.value.shape() != tensor.shape() {
                return Err(Error::Partition(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = tensor.clone();
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Partition(format!(
                "expected {} model tensors, found {seen}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| ParamGroup::of(&p.name) == Some(group))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CounterModel<U> {
        CounterModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// Fresh initialisation of every parameter in `group`, drawn from `seed`.
    pub fn reinitialize_group(&mut self, group: ParamGroup, seed: u64) {
        let (_, decls) = plan(&self.config);
        for (p, d) in self.params.iter_mut().zip(&decls) {
            if ParamGroup::of(&p.name) == Some(group) {
                p.value = init_tensor(d, seed);
            }
        }
    }

    /// Add every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Add gradients recorded in `g` to the parameters' accumulators.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.grad(v) {
                p.accumulate(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    fn conv(&self, g: &mut Graph<T>, p: &[Var], x: Var, l: &ConvLayer) -> Result<Var> {
        g.conv2d(x, p[l.weight], p[l.bias], l.opts)
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], input: Var) -> Result<Var> {
        let mut x = input;
        for block in &self.layout.encoder {
            for layer in block {
                x = self.conv(g, p, x, layer)?;
                x = g.relu(x);
            }
            x = g.max_pool2d(x)?;
        }
        Ok(x)
    }

    /// `f * sigmoid(conv(relu(conv(f))))`, single-channel mask.
    pub fn spatial_attention(&self, g: &mut Graph<T>, p: &[Var], f: Var) -> Result<Var> {
        let [c0, c1] = &self.layout.spatial;
        let h = self.conv(g, p, f, c0)?;
        let h = g.relu(h);
        let m = self.conv(g, p, h, c1)?;
        let m = g.sigmoid(m);
        g.spatial_gate(f, m)
    }

    /// `f * sigmoid(dense(relu(dense(gap(f)))))`, one weight per channel.
    pub fn channel_attention(&self, g: &mut Graph<T>, p: &[Var], f: Var) -> Result<Var> {
        let [d0, d1] = &self.layout.channel;
        let s = g.global_avg_pool(f)?;
        let s = g.dense(s, p[d0.weight], p[d0.bias])?;
        let s = g.relu(s);
        let s = g.dense(s, p[d1.weight], p[d1.bias])?;
        let s = g.sigmoid(s);
        g.channel_gate(f, s)
    }

    pub fn dilated_stack(&self, g: &mut Graph<T>, p: &[Var], f: Var) -> Result<Var> {
        let mut x = f;
        for layer in &self.layout.dilated {
            x = self.conv(g, p, x, layer)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Spatial attention, then channel attention, then the dilated stack.
    pub fn enhance(&self, g: &mut Graph<T>, p: &[Var], f: Var) -> Result<Var> {
        let x = self.spatial_attention(g, p, f)?;
        let x = self.channel_attention(g, p, x)?;
        self.dilated_stack(g, p, x)
    }

    fn decode(&self, g: &mut Graph<T>, p: &[Var], f: Var, dec: &Decoder) -> Result<Var> {
        let mut x = f;
        for layer in &dec.stages {
            x = g.upsample_nearest(x, 2)?;
            x = self.conv(g, p, x, layer)?;
            x = g.relu(x);
        }
        self.conv(g, p, x, &dec.head)
    }

    fn check_input(&self, g: &Graph<T>, input: Var) -> Result<()> {
        let (_, c, h, w) = g.value(input).dims4("forward")?;
        if c != self.config.input_channels {
            return Err(Error::Dimension {
                op: "forward",
                axis: "channels",
                expected: self.config.input_channels,
                got: c,
            });
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "forward",
                format!("input extent {h}x{w} must be a positive multiple of 8"),
            ));
        }
        Ok(())
    }

    /// Both heads: density (ReLU) and, when disentangling, style (sigmoid).
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], input: Var) -> Result<ForwardVars> {
        self.check_input(g, input)?;
        let features = self.encode(g, p, input)?;
        let features = self.enhance(g, p, features)?;
        let density = self.decode(g, p, features, &self.layout.agnostic)?;
        let density = g.relu(density);
        let style = match &self.layout.specific {
            Some(dec) => {
                let s = self.decode(g, p, features, dec)?;
                Some(g.sigmoid(s))
            }
            None => None,
        };
        Ok(ForwardVars {
            density,
            style,
            features,
        })
    }

    /// Density head only; used for inference.
    pub fn forward_density(&self, g: &mut Graph<T>, p: &[Var], input: Var) -> Result<Var> {
        self.check_input(g, input)?;
        let features = self.encode(g, p, input)?;
        let features = self.enhance(g, p, features)?;
        let density = self.decode(g, p, features, &self.layout.agnostic)?;
        Ok(g.relu(density))
    }

    /// Inference-only binding: parameters enter the graph as constants.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }
}

#[cfg(test)]
mod tests;
