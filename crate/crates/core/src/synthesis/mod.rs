//! Few-shot target image synthesis.
//!
//! From a handful of annotated target images: crop one patch per cell,
//! inpaint the holes to get a cell-free style image, train a small GAN on
//! the patches, then stitch real and generated patches into augmented
//! style images at random locations. Each composite carries the density
//! map of the exact centres used.

mod augment;
mod compose;
mod gan;
mod inpaint;
mod patches;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::AnnotatedImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub use augment::{
    augment, flip_horizontal, flip_vertical, rotate_quarter, scale_about_centre, AugmentSpec, ScaleRange,
};
pub use compose::{compose_image, patch_alpha, ComposeConfig, SynthesizedSample};
pub use gan::{train_patch_gan, GanConfig, GanStep, PatchGenerator};
pub use inpaint::{inpaint, InpaintConfig};
pub use patches::{extract_patches, reflect, Mask};

/// The GAN is never trained on fewer patches than this; smaller sets are
/// topped up with flipped and rotated copies.
pub const MIN_GAN_PATCHES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub num_images: usize,
    pub patch_size: usize,
    /// Patches drawn from the trained generator into the paste pool.
    pub generated_patches: usize,
    /// Keep the cropped real patches in the paste pool as well.
    pub include_real_patches: bool,
    /// Randomly flip, rotate and rescale the style image of each composite.
    pub augment_styles: bool,
    pub compose: ComposeConfig,
    pub inpaint: InpaintConfig,
    pub gan: GanConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            patch_size: 32,
            generated_patches: 64,
            include_real_patches: true,
            augment_styles: true,
            compose: ComposeConfig::default(),
            inpaint: InpaintConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

/// Everything produced by [`synthesize_dataset`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub samples: Vec<SynthesizedSample>,
    /// Inpainted style image of each input, in input order.
    pub styles: Vec<Image>,
    pub real_patches: Vec<Image>,
    pub generator: PatchGenerator,
}

/// Cell-free style image of one annotated image (crop holes, inpaint).
pub fn style_of(item: &AnnotatedImage, patch_size: usize, cfg: &InpaintConfig) -> Result<(Image, Vec<Image>)> {
    let (patches, mask) = extract_patches(&item.image, &item.annotations, patch_size)?;
    Ok((inpaint(&item.image, &mask, cfg)?, patches))
}

fn top_up(patches: &mut Vec<Image>, seed: u64) -> Result<()> {
    let originals = patches.len();
    let mut r = rng::rng(seed);
    let fixed = ScaleRange { min: 1.0, max: 1.0 };
    while patches.len() < MIN_GAN_PATCHES {
        let base = &patches[r.random_range(0..originals)];
        let spec = AugmentSpec::sample(&mut r, &fixed, true);
        let extra = augment(base, &spec, &fixed)?;
        patches.push(extra);
    }
    Ok(())
}

/// Run all four synthesis steps. `workers > 1` composites in parallel;
/// the output order and content do not depend on it.
pub fn synthesize_dataset(
    few: &[AnnotatedImage],
    cfg: &SynthesisConfig,
    sigma: f64,
    seed: u64,
    workers: usize,
) -> Result<Synthesis> {
    if few.is_empty() {
        return Err(Error::Empty("annotated target images"));
    }
    cfg.compose.scale.validate()?;
    let mut styles = Vec::with_capacity(few.len());
    let mut real_patches = Vec::new();
    for item in few {
        let (style, patches) = style_of(item, cfg.patch_size, &cfg.inpaint)?;
        styles.push(style);
        real_patches.extend(patches);
    }
    let mut gan_patches = real_patches.clone();
    if gan_patches.is_empty() {
        return Err(Error::Empty("cell patches (the annotated images contain no cells)"));
    }
    top_up(&mut gan_patches, rng::derive_named(seed, "synthesis.top_up"))?;
    let generator = train_patch_gan(&gan_patches, &cfg.gan, rng::derive_named(seed, "synthesis.gan"))?;

    let mut pool = generator.sample(cfg.generated_patches, rng::derive_named(seed, "synthesis.pool"))?;
    if cfg.include_real_patches {
        pool.extend(real_patches.iter().cloned());
    }

    let compose_seed = rng::derive_named(seed, "synthesis.compose");
    let make = |i: usize| -> Result<SynthesizedSample> {
        let s = rng::derive(compose_seed, i as u64);
        let mut r = rng::rng(s);
        let base = &styles[r.random_range(0..styles.len())];
        let style = if cfg.augment_styles {
            let square = base.width == base.height;
            let spec = AugmentSpec::sample(&mut r, &cfg.compose.scale, square);
            augment(base, &spec, &cfg.compose.scale)?
        } else {
            base.clone()
        };
        compose_image(&style, &pool, &cfg.compose, sigma, r.random())
            .map(|sample| SynthesizedSample { seed: s, ..sample })
    };
    let samples = run_indexed(cfg.num_images, workers, make)?;
    Ok(Synthesis {
        samples,
        styles,
        real_patches,
        generator,
    })
}

/// `f(0), ..., f(n - 1)` in index order, optionally on a worker pool.
pub(crate) fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        return pool.install(|| (0..n).into_par_iter().map(&f).collect());
    }
    let _ = workers;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests;
