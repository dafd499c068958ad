//! Experiment configuration: one TOML file with `[source]`, `[target]`,
//! `[synthesis]`, `[training]`, `[transfer]` and `[output]` sections.
//!
//! Every field has a default, so an empty file describes the built-in toy
//! benchmark. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_domain, load_dataset, AnnotatedImage, DomainSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng;
use crate::synthesis::{ComposeConfig, SynthesisConfig};
use crate::transfer::{Ablation, StageEpochs, StageLrs, TransferPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    /// Dataset directory; when absent, `images` images are generated
    /// from `domain`.
    pub dir: Option<PathBuf>,
    pub images: usize,
    pub domain: DomainSpec,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            dir: None,
            images: 40,
            domain: DomainSpec::toy_source(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// Dataset name in reports; defaults to the few-shot directory name,
    /// or the domain name when the images are generated.
    pub name: Option<String>,
    /// The few annotated real images; generated when absent.
    pub few_dir: Option<PathBuf>,
    /// Held-out test images; generated when absent.
    pub test_dir: Option<PathBuf>,
    pub few_images: usize,
    pub test_images: usize,
    pub domain: DomainSpec,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            name: None,
            few_dir: None,
            test_dir: None,
            few_images: 5,
            test_images: 20,
            domain: DomainSpec::toy_target(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub model: ModelConfig,
    pub batch_size: usize,
    /// Random flips and quarter turns of every training sample, each epoch.
    pub augment: bool,
    /// Gaussian sigma of every density map, in pixels.
    pub sigma: f64,
    /// Epochs of the direct baseline (fresh model, few real images only).
    pub direct_epochs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                encoder_blocks: vec![(1, 8), (1, 16), (2, 16)],
                decoder_channels: vec![16, 8, 8],
                ..ModelConfig::default()
            },
            batch_size: 4,
            augment: true,
            sigma: 1.5,
            direct_epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub ablation: Ablation,
    pub epochs: StageEpochs,
    pub lrs: StageLrs,
    /// Reuse this stage-1 checkpoint instead of pretraining.
    pub source_checkpoint: Option<PathBuf>,
    /// Independent repetitions of `bench`, each with its own data and seed.
    pub bench_repeats: usize,
    /// Also run the three ablations in `bench`.
    pub bench_ablations: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            ablation: Ablation::None,
            epochs: StageEpochs::default(),
            lrs: StageLrs::default(),
            source_checkpoint: None,
            bench_repeats: 3,
            bench_ablations: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Threads for compositing and evaluation inference.
    pub workers: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/toy"),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: SourceSection,
    pub target: TargetSection,
    pub synthesis: SynthesisConfig,
    pub training: TrainingSection,
    pub transfer: TransferSection,
    pub output: OutputSection,
}

/// Synthesis settings sized for 64x64 toy images with cells of radius ~3.
pub fn toy_synthesis() -> SynthesisConfig {
    SynthesisConfig {
        patch_size: 14,
        compose: ComposeConfig {
            count_range: (5, 25),
            min_distance: 4.0,
            paste_radius: Some(5.0),
            feather: 2.0,
            ..ComposeConfig::default()
        },
        ..SynthesisConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            source: SourceSection::default(),
            target: TargetSection::default(),
            synthesis: toy_synthesis(),
            training: TrainingSection::default(),
            transfer: TransferSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file. Keys it sets override [`ExperimentConfig::default`]
    /// one leaf at a time, so a partial table keeps the toy defaults of
    /// everything it does not mention.
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e: toml::de::Error| bad(&e.message()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| bad(&e))?;
        merge(&mut merged, user);
        let cfg = Self::deserialize(merged).map_err(|e| bad(&e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Write the fully resolved configuration as `dir/config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.source.domain.validate()?;
        self.target.domain.validate()?;
        self.training.model.validate()?;
        self.synthesis.compose.scale.validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(self.training.sigma.is_finite() && self.training.sigma > 0.0) {
            return Err(Error::Config(format!("training.sigma must be positive, got {}", self.training.sigma)));
        }
        if self.training.model.input_channels != self.source.domain.channels
            || self.source.domain.channels != self.target.domain.channels
        {
            return Err(Error::Config(format!(
                "channel mismatch: model {}, source {}, target {}",
                self.training.model.input_channels, self.source.domain.channels, self.target.domain.channels
            )));
        }
        Ok(())
    }

    /// Seed of one generated split (`source`, `target_few`, `target_test`).
    pub fn data_seed(&self, split: &str) -> u64 {
        rng::derive_named(self.seed, &format!("data.{split}"))
    }

    fn split(&self, dir: Option<&Path>, domain: &DomainSpec, n: usize, split: &str) -> Result<Vec<AnnotatedImage>> {
        match dir {
            Some(d) => load_dataset(d),
            None => generate_domain(domain, n, self.data_seed(split)),
        }
    }

    pub fn source_data(&self) -> Result<Vec<AnnotatedImage>> {
        self.split(self.source.dir.as_deref(), &self.source.domain, self.source.images, "source")
    }

    pub fn target_few(&self) -> Result<Vec<AnnotatedImage>> {
        self.split(self.target.few_dir.as_deref(), &self.target.domain, self.target.few_images, "target_few")
    }

    pub fn target_test(&self) -> Result<Vec<AnnotatedImage>> {
        self.split(self.target.test_dir.as_deref(), &self.target.domain, self.target.test_images, "target_test")
    }

    /// Name of the target dataset in reports.
    pub fn target_name(&self) -> String {
        if let Some(n) = &self.target.name {
            return n.clone();
        }
        match &self.target.few_dir {
            Some(d) => d
                .file_name()
                .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
            None => self.target.domain.name.clone(),
        }
    }

    /// Transfer plan over already loaded data.
    pub fn plan(
        &self,
        source: Vec<AnnotatedImage>,
        target_few: Vec<AnnotatedImage>,
        target_eval: Vec<AnnotatedImage>,
    ) -> TransferPlan {
        TransferPlan {
            model: self.training.model.clone(),
            source,
            target_few,
            target_eval,
            synthesis: self.synthesis.clone(),
            epochs: self.transfer.epochs,
            lrs: self.transfer.lrs,
            batch_size: self.training.batch_size,
            augment: self.training.augment,
            sigma: self.training.sigma,
            seed: self.seed,
            ablation: self.transfer.ablation,
            workers: self.output.workers.max(1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_toy_benchmark() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_keep_the_other_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[synthesis]\nnum_images = 7\n[training.model]\nseed = 2\n").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.synthesis.num_images, 7);
        assert_eq!(cfg.synthesis.patch_size, d.synthesis.patch_size);
        assert_eq!(cfg.synthesis.compose, d.synthesis.compose);
        assert_eq!(cfg.training.model.encoder_blocks, d.training.model.encoder_blocks);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in ["bogus = 1", "[transfer]\nepoch = 3", "[synthesis.gan]\nlayers = 2"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
            let key = text.rsplit(['\n', '[']).next().unwrap().split(' ').next().unwrap();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.target.few_dir = Some("few".into());
        cfg.transfer.ablation = Ablation::JointFinetune;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[training]\nsigma = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("[training]\nbatch_size = 0").is_err());
        assert!(ExperimentConfig::from_toml("[target.domain]\nchannels = 3").is_err());
        assert!(ExperimentConfig::from_toml("[transfer]\nablation = \"all\"").is_err());
        assert!(ExperimentConfig::from_toml("seed = \"one\"").is_err());
    }

    #[test]
    fn generated_splits_are_reproducible_and_distinct() {
        let cfg = ExperimentConfig {
            source: SourceSection {
                images: 2,
                ..SourceSection::default()
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.source_data().unwrap(), cfg.source_data().unwrap());
        assert_eq!(cfg.source_data().unwrap().len(), 2);
        assert_ne!(cfg.data_seed("target_few"), cfg.data_seed("target_test"));
        assert_eq!(cfg.target_name(), "toy_target");
    }
}
