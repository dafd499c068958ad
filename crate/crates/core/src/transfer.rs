//! Progressive transfer: source pretraining, domain-specific decoder
//! replacement, fine-tuning on synthesized target images, then on the few
//! annotated real ones. Also the ablation variants and the direct baseline.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, HistoryRow, Metadata, Stage};
use crate::datasets::AnnotatedImage;
use crate::density::{self, render_density_map};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{
    augment_samples, predict_counts, train_epoch, CounterModel, ModelConfig, ParamGroup, PerceptualExtractor,
    TrainSample,
};
use crate::rng;
use crate::synthesis::{self, style_of, Synthesis, SynthesisConfig};
use crate::tensor::{Adam, AdamConfig};

/// Which variant of the protocol to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No domain-specific decoder and no perceptual term, in every stage.
    NoDisentangle,
    /// Skip fine-tuning on synthesized images.
    NoSynth,
    /// One fine-tuning pass over synthesized and real images together.
    JointFinetune,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoDisentangle,
        Ablation::NoSynth,
        Ablation::JointFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDisentangle => "no_disentangle",
            Ablation::NoSynth => "no_synth",
            Ablation::JointFinetune => "joint_finetune",
        }
    }

    pub fn disentangle(self) -> bool {
        self != Ablation::NoDisentangle
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}` (expected none, no_disentangle, no_synth or joint_finetune)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub synth_finetune: usize,
    pub real_finetune: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            pretrain: 60,
            synth_finetune: 10,
            real_finetune: 10,
        }
    }
}

/// How the learning rate moves across the epochs of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate towards 0 over the stage.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for `epoch` (0-based) of a stage with `epochs` epochs.
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

/// Per-stage optimisation settings other than the base learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    /// Train each epoch on a random flip or quarter turn of every sample.
    pub augment: bool,
}

/// Base learning rate per stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageLrs {
    pub pretrain: f64,
    pub synth_finetune: f64,
    pub real_finetune: f64,
    pub schedule: LrSchedule,
}

impl Default for StageLrs {
    fn default() -> Self {
        Self {
            pretrain: 1e-3,
            synth_finetune: 1e-4,
            real_finetune: 1e-5,
            schedule: LrSchedule::default(),
        }
    }
}

impl StageLrs {
    fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("pretrain", self.pretrain),
            ("synth_finetune", self.synth_finetune),
            ("real_finetune", self.real_finetune),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} learning rate must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Everything one run of the protocol needs.
#[derive(Clone, Debug)]
pub struct TransferPlan {
    /// Model architecture; its `seed` is replaced by one derived from
    /// [`TransferPlan::seed`] and `disentangle` by the ablation.
    pub model: ModelConfig,
    pub source: Vec<AnnotatedImage>,
    /// The few annotated real target images.
    pub target_few: Vec<AnnotatedImage>,
    /// Held-out target images every stage is scored on. When empty the
    /// stages are scored on `target_few`.
    pub target_eval: Vec<AnnotatedImage>,
    pub synthesis: SynthesisConfig,
    pub epochs: StageEpochs,
    pub lrs: StageLrs,
    pub batch_size: usize,
    pub augment: bool,
    pub sigma: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub workers: usize,
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lrs.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Architecture actually trained: seeded from the plan, disentangled
    /// unless the ablation removes it.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: rng::derive_named(self.seed, "transfer.init"),
            disentangle: self.ablation.disentangle(),
            ..self.model.clone()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            schedule: self.lrs.schedule,
            batch_size: self.batch_size,
            augment: self.augment,
        }
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        rng::derive_named(self.seed, &format!("transfer.{stage}"))
    }
}

/// One row of the per-stage table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_images: usize,
    /// Losses of the stage's last epoch (0 when it ran no epochs).
    pub mse: f64,
    pub perceptual: f64,
    /// Count MAE on the evaluation images after the stage.
    pub mae: f64,
}

/// Count MAE with the per-image truth and prediction behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mae: f64,
    /// `(true count, predicted count)` per image, in input order.
    pub per_image: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<StageRow>,
}

/// Training triples of annotated images. `styles` overrides the images' own
/// style ground truth when given.
pub fn training_samples(
    items: &[AnnotatedImage],
    styles: Option<&[Image]>,
    sigma: f64,
) -> Result<Vec<TrainSample>> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            Ok(TrainSample {
                image: item.image.clone(),
                density: render_density_map(&item.annotations, sigma)?,
                style: match styles {
                    Some(s) => s.get(i).cloned(),
                    None => item.style.clone(),
                },
            })
        })
        .collect()
}

/// Train `epochs` epochs with a fresh Adam, appending to `history`.
#[allow(clippy::too_many_arguments)]
fn train_stage(
    model: &mut CounterModel<f32>,
    extractor: Option<&PerceptualExtractor<f32>>,
    data: &[TrainSample],
    epochs: usize,
    lr: f64,
    opts: &TrainOptions,
    seed: u64,
    stage: Stage,
    history: &mut Vec<HistoryRow>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut last = (0.0, 0.0);
    for epoch in 0..epochs {
        adam.config.learning_rate = opts.schedule.rate(lr, epoch, epochs);
        let epoch_seed = rng::derive(seed, epoch as u64);
        let augmented;
        let batch = if opts.augment {
            augmented = augment_samples(data, rng::derive_named(epoch_seed, "augment"));
            &augmented
        } else {
            data
        };
        let m = train_epoch(model, extractor, batch, &mut adam, opts.batch_size, epoch_seed)?;
        history.push(HistoryRow {
            stage,
            epoch,
            total: m.total,
            mse: m.mse,
            perceptual: m.perceptual,
            mae: m.mae,
        });
        last = (m.mse, m.perceptual);
    }
    Ok(last)
}

/// Stage 1: train a fresh model on the source domain. The returned
/// checkpoint carries the frozen perceptual extractor taken from the
/// trained encoder.
pub fn pretrain_source(plan: &TransferPlan) -> Result<Checkpoint> {
    plan.validate()?;
    if plan.source.is_empty() {
        return Err(Error::Empty("source training set"));
    }
    let config = plan.model_config();
    let mut model = CounterModel::<f32>::build(config.clone())?;
    let data = training_samples(&plan.source, None, plan.sigma)?;
    let init_extractor = config.disentangle.then(|| PerceptualExtractor::snapshot(&model));
    let seed = plan.stage_seed(Stage::Source);
    let mut history = Vec::new();
    train_stage(
        &mut model,
        init_extractor.as_ref(),
        &data,
        plan.epochs.pretrain,
        plan.lrs.pretrain,
        &plan.train_options(),
        seed,
        Stage::Source,
        &mut history,
    )?;
    let extractor = config.disentangle.then(|| PerceptualExtractor::snapshot(&model));
    let meta = Metadata {
        stage: Stage::Source,
        seed: plan.seed,
        rng_state: rng::derive(seed, u64::MAX),
        config,
        history,
    };
    Ok(Checkpoint::from_model(&model, extractor.as_ref(), meta))
}

/// Stage 2: re-initialise every `decoder_specific.` tensor from `seed` and
/// leave every other tensor untouched.
pub fn replace_domain_specific_decoder(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    ckpt.check_partition()?;
    let stage = ckpt.meta.stage.advance(Stage::Surgered)?;
    let mut fresh = ckpt.model()?;
    fresh.reinitialize_group(ParamGroup::DecoderSpecific, seed);
    let mut tensors = ckpt.tensors.clone();
    for (name, t) in &mut tensors {
        if ParamGroup::of(name) == Some(ParamGroup::DecoderSpecific) {
            let p = fresh
                .param(name)
                .ok_or_else(|| Error::Partition(format!("`{name}` is not a model parameter")))?;
            *t = p.value.clone();
        }
    }
    Ok(Checkpoint {
        tensors,
        meta: Metadata {
            stage,
            rng_state: rng::derive(seed, u64::MAX),
            ..ckpt.meta.clone()
        },
    })
}

/// Continue training `ckpt` on `data`, tagging the result with `stage`.
pub fn finetune(
    ckpt: &Checkpoint,
    data: &[TrainSample],
    epochs: usize,
    lr: f64,
    opts: &TrainOptions,
    stage: Stage,
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    let next = ckpt.meta.stage.advance(stage)?;
    let mut model = ckpt.model()?;
    let extractor = ckpt.extractor()?;
    if model.config().disentangle && extractor.is_none() {
        return Err(Error::Partition("checkpoint has no perceptual extractor tensors".into()));
    }
    let seed = ckpt.meta.rng_state;
    let mut history = ckpt.meta.history.clone();
    train_stage(&mut model, extractor.as_ref(), data, epochs, lr, opts, seed, next, &mut history)?;
    let meta = Metadata {
        stage: next,
        rng_state: rng::derive(seed, u64::MAX),
        history,
        ..ckpt.meta.clone()
    };
    Ok(Checkpoint::from_model(&model, extractor.as_ref(), meta))
}

/// Count MAE of `ckpt` on annotated images. Inference batches run on up
/// to `workers` threads; the result does not depend on it.
pub fn evaluate(ckpt: &Checkpoint, test: &[AnnotatedImage], batch_size: usize, workers: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let model = ckpt.model()?;
    let bs = batch_size.max(1);
    let chunks: Vec<&[AnnotatedImage]> = test.chunks(bs).collect();
    let predicted = synthesis::run_indexed(chunks.len(), workers, |i| {
        let images: Vec<_> = chunks[i].iter().map(|a| &a.image).collect();
        predict_counts(&model, &images, bs)
    })?;
    let per_image: Vec<(f64, f64)> = test
        .iter()
        .map(|a| a.annotations.len() as f64)
        .zip(predicted.into_iter().flatten())
        .collect();
    let (truth, pred): (Vec<f64>, Vec<f64>) = per_image.iter().copied().unzip();
    Ok(Evaluation {
        mae: density::mae(&pred, &truth)?,
        per_image,
    })
}

fn row(stage: Stage, epochs: usize, lr: f64, train_images: usize, losses: (f64, f64), ckpt: &Checkpoint, plan: &TransferPlan) -> Result<StageRow> {
    let eval = if plan.target_eval.is_empty() {
        &plan.target_few
    } else {
        &plan.target_eval
    };
    Ok(StageRow {
        stage,
        epochs,
        learning_rate: lr,
        train_images,
        mse: losses.0,
        perceptual: losses.1,
        mae: evaluate(ckpt, eval, plan.batch_size, plan.workers)?.mae,
    })
}

fn last_losses(ckpt: &Checkpoint, stage: Stage) -> (f64, f64) {
    ckpt.meta
        .history
        .iter()
        .rev()
        .find(|h| h.stage == stage)
        .map_or((0.0, 0.0), |h| (h.mse, h.perceptual))
}

/// Seed the synthesized target set of `plan` is drawn from.
pub fn synthesis_seed(plan: &TransferPlan) -> u64 {
    rng::derive_named(plan.seed, "transfer.synthesis")
}

/// Synthesized target images for `plan`, as stage 3 would draw them.
pub fn synthesize_target(plan: &TransferPlan) -> Result<Synthesis> {
    synthesis::synthesize_dataset(&plan.target_few, &plan.synthesis, plan.sigma, synthesis_seed(plan), plan.workers)
}

pub fn synthesized_samples(s: &Synthesis) -> Vec<TrainSample> {
    s.samples
        .iter()
        .map(|x| TrainSample {
            image: x.image.clone(),
            density: x.density.clone(),
            style: Some(x.style.clone()),
        })
        .collect()
}

/// Inpainted style image of every few-shot target image.
pub fn inpainted_styles(plan: &TransferPlan) -> Result<Vec<Image>> {
    plan.target_few
        .iter()
        .map(|a| style_of(a, plan.synthesis.patch_size, &plan.synthesis.inpaint).map(|s| s.0))
        .collect()
}

/// The full protocol. `source` reuses an already pretrained stage-1
/// checkpoint (it must match the plan's disentangle setting) and
/// `synthesized` a set from [`synthesize_target`]; either is computed when
/// absent.
pub fn run_progressive_transfer(
    plan: &TransferPlan,
    source: Option<&Checkpoint>,
    synthesized: Option<&Synthesis>,
) -> Result<TransferOutcome> {
    plan.validate()?;
    if plan.target_few.is_empty() {
        return Err(Error::Empty("annotated target images"));
    }
    let source = match source {
        Some(c) => {
            if c.meta.stage != Stage::Source {
                return Err(Error::StageOrder {
                    from: c.meta.stage.name().into(),
                    to: Stage::Surgered.name().into(),
                });
            }
            if c.meta.config.disentangle != plan.ablation.disentangle() {
                return Err(Error::Config(format!(
                    "source checkpoint disentangle={} does not match ablation `{}`",
                    c.meta.config.disentangle, plan.ablation
                )));
            }
            c.clone()
        }
        None => pretrain_source(plan)?,
    };
    let mut rows = vec![row(
        Stage::Source,
        plan.epochs.pretrain,
        plan.lrs.pretrain,
        plan.source.len(),
        last_losses(&source, Stage::Source),
        &source,
        plan,
    )?];

    let surgered = replace_domain_specific_decoder(&source, plan.stage_seed(Stage::Surgered))?;
    rows.push(row(Stage::Surgered, 0, 0.0, 0, (0.0, 0.0), &surgered, plan)?);

    let owned;
    let (synthetic, real_styles) = match (plan.ablation, synthesized) {
        (Ablation::NoSynth, _) => (Vec::new(), inpainted_styles(plan)?),
        (_, Some(s)) => (synthesized_samples(s), s.styles.clone()),
        (_, None) => {
            owned = synthesize_target(plan)?;
            (synthesized_samples(&owned), owned.styles.clone())
        }
    };
    let real = training_samples(&plan.target_few, Some(&real_styles), plan.sigma)?;
    let (opts, e, l) = (&plan.train_options(), plan.epochs, plan.lrs);

    let last = match plan.ablation {
        Ablation::None | Ablation::NoDisentangle => {
            let synth_ft = finetune(&surgered, &synthetic, e.synth_finetune, l.synth_finetune, opts, Stage::SynthFt)?;
            rows.push(row(Stage::SynthFt, e.synth_finetune, l.synth_finetune, synthetic.len(), last_losses(&synth_ft, Stage::SynthFt), &synth_ft, plan)?);
            let real_ft = finetune(&synth_ft, &real, e.real_finetune, l.real_finetune, opts, Stage::RealFt)?;
            rows.push(row(Stage::RealFt, e.real_finetune, l.real_finetune, real.len(), last_losses(&real_ft, Stage::RealFt), &real_ft, plan)?);
            real_ft
        }
        Ablation::NoSynth => {
            let real_ft = finetune(&surgered, &real, e.real_finetune, l.real_finetune, opts, Stage::RealFt)?;
            rows.push(row(Stage::RealFt, e.real_finetune, l.real_finetune, real.len(), last_losses(&real_ft, Stage::RealFt), &real_ft, plan)?);
            real_ft
        }
        Ablation::JointFinetune => {
            let mut joint = synthetic;
            joint.extend(real);
            let ft = finetune(&surgered, &joint, e.synth_finetune, l.synth_finetune, opts, Stage::JointFt)?;
            rows.push(row(Stage::JointFt, e.synth_finetune, l.synth_finetune, joint.len(), last_losses(&ft, Stage::JointFt), &ft, plan)?);
            ft
        }
    };
    Ok(TransferOutcome { checkpoint: last, rows })
}

/// Baseline: train a fresh model on the few real target images only, for
/// `epochs` epochs at the pretraining learning rate. Style ground truth is
/// the inpainted image of each input.
pub fn train_direct(plan: &TransferPlan, epochs: usize) -> Result<TransferOutcome> {
    plan.validate()?;
    if plan.target_few.is_empty() {
        return Err(Error::Empty("annotated target images"));
    }
    let config = plan.model_config();
    let mut model = CounterModel::<f32>::build(config.clone())?;
    let styles = inpainted_styles(plan)?;
    let data = training_samples(&plan.target_few, Some(&styles), plan.sigma)?;
    let extractor = config.disentangle.then(|| PerceptualExtractor::snapshot(&model));
    let seed = plan.stage_seed(Stage::Direct);
    let mut history = Vec::new();
    let losses = train_stage(
        &mut model,
        extractor.as_ref(),
        &data,
        epochs,
        plan.lrs.pretrain,
        &plan.train_options(),
        seed,
        Stage::Direct,
        &mut history,
    )?;
    let ckpt = Checkpoint::from_model(
        &model,
        extractor.as_ref(),
        Metadata {
            stage: Stage::Direct,
            seed: plan.seed,
            rng_state: rng::derive(seed, u64::MAX),
            config,
            history,
        },
    );
    let rows = vec![row(Stage::Direct, epochs, plan.lrs.pretrain, data.len(), losses, &ckpt, plan)?];
    Ok(TransferOutcome { checkpoint: ckpt, rows })
}
