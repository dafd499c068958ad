use super::*;
use crate::datasets::{generate_domain, DomainSpec};

fn small_cfg(num_images: usize) -> SynthesisConfig {
    SynthesisConfig {
        num_images,
        patch_size: 12,
        generated_patches: 8,
        compose: ComposeConfig {
            count_range: (5, 15),
            min_distance: 5.0,
            feather: 3.0,
            ..ComposeConfig::default()
        },
        gan: GanConfig {
            latent_dim: 8,
            hidden: 16,
            steps: 30,
            batch_size: 8,
            ..GanConfig::default()
        },
        ..SynthesisConfig::default()
    }
}

fn few(n: usize) -> Vec<AnnotatedImage> {
    let spec = DomainSpec { count_mean: 8.0, count_std: 2.0, ..DomainSpec::toy_target() };
    generate_domain(&spec, n, 21).unwrap()
}

#[test]
fn zero_images_still_trains_the_gan() {
    let s = synthesize_dataset(&few(1), &small_cfg(0), 1.5, 3, 1).unwrap();
    assert!(s.samples.is_empty());
    assert_eq!(s.generator.log.len(), 30);
    assert_eq!(s.styles.len(), 1);
}

#[test]
fn two_inputs_two_hundred_samples() {
    let inputs = few(2);
    let s = synthesize_dataset(&inputs, &small_cfg(200), 1.5, 4, 1).unwrap();
    assert_eq!(s.samples.len(), 200);
    for sample in &s.samples {
        assert!(sample.image.same_extent(&sample.style));
        assert_eq!((sample.density.width, sample.density.height), (64, 64));
        assert!((sample.density.count() - sample.annotations.len() as f64).abs() < 1e-6);
        assert!(sample.annotations.points.iter().all(|&(x, y)| x >= 6.0 && y >= 6.0 && x <= 58.0 && y <= 58.0));
    }
    // Styles keep unmasked pixels of their inputs.
    let (_, mask) = extract_patches(&inputs[0].image, &inputs[0].annotations, 12).unwrap();
    for (i, &m) in mask.bits.iter().enumerate() {
        if !m {
            assert_eq!(s.styles[0].data[i].to_bits(), inputs[0].image.data[i].to_bits());
        }
    }
}

#[test]
fn counts_are_uniform_over_the_range() {
    let s = synthesize_dataset(&few(1), &small_cfg(500), 1.5, 5, 1).unwrap();
    let mean = s.samples.iter().map(|x| x.annotations.len() as f64).sum::<f64>() / 500.0;
    assert!((mean - 10.0).abs() <= 1.0, "mean {mean}");
    let lo = s.samples.iter().map(|x| x.annotations.len()).min().unwrap();
    let hi = s.samples.iter().map(|x| x.annotations.len()).max().unwrap();
    assert_eq!((lo, hi), (5, 15));
}

#[test]
fn deterministic_regardless_of_workers() {
    let a = synthesize_dataset(&few(2), &small_cfg(12), 1.5, 6, 1).unwrap();
    let b = synthesize_dataset(&few(2), &small_cfg(12), 1.5, 6, 3).unwrap();
    assert_eq!(a.samples, b.samples);
    let c = synthesize_dataset(&few(2), &small_cfg(12), 1.5, 7, 1).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn empty_inputs_are_errors() {
    assert!(matches!(synthesize_dataset(&[], &small_cfg(1), 1.5, 0, 1), Err(Error::Empty(_))));
    let blank = DomainSpec { count_mean: 0.0, count_std: 0.0, ..DomainSpec::toy_target() };
    let items = generate_domain(&blank, 1, 0).unwrap();
    assert!(matches!(synthesize_dataset(&items, &small_cfg(1), 1.5, 0, 1), Err(Error::Empty(_))));
}
