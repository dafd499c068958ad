use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::density::{render_density_map, DensityMap, DotAnnotations};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

use super::augment::{augment, AugmentSpec, ScaleRange};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeConfig {
    /// Inclusive range of the uniform per-image cell count.
    pub count_range: (usize, usize),
    /// Minimum distance between cell centres; 0 allows any overlap.
    pub min_distance: f64,
    /// Radius of the pasted disc; `None` uses half the patch side. Smaller
    /// discs keep neighbouring cells in a crop out of the composite.
    pub paste_radius: Option<f64>,
    /// Width of the raised-cosine fall-off at the rim of each pasted patch.
    pub feather: f64,
    /// Paste whole squares instead of feathered discs.
    pub hard_paste: bool,
    /// Randomly rotate, flip and rescale each pasted patch.
    pub augment_patches: bool,
    pub scale: ScaleRange,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            count_range: (10, 30),
            min_distance: 12.0,
            paste_radius: None,
            feather: 6.0,
            hard_paste: false,
            augment_patches: true,
            scale: ScaleRange::default(),
        }
    }
}

/// A composited target-domain image with its exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    pub image: Image,
    pub density: DensityMap,
    pub style: Image,
    pub annotations: DotAnnotations,
    pub seed: u64,
}

impl ComposeConfig {
    /// Disc radius used for patches of side `size`, never beyond the patch.
    pub fn radius_for(&self, size: usize) -> f64 {
        let half = (size / 2) as f64;
        self.paste_radius.map_or(half, |r| r.min(half))
    }
}

/// Blend weight of patch pixel `(u, v)` for a patch of side `size` pasted
/// as a disc of `radius`. The disc is centred on pixel `size / 2`, where
/// the annotated cell sits.
pub fn patch_alpha(u: usize, v: usize, size: usize, radius: f64, feather: f64, hard: bool) -> f64 {
    if hard {
        return 1.0;
    }
    let c = (size / 2) as f64;
    let r = (u as f64 - c).hypot(v as f64 - c);
    let inner = radius - feather;
    if r >= radius {
        0.0
    } else if r <= inner {
        1.0
    } else {
        0.5 * (1.0 + (PI * (r - inner) / feather).cos())
    }
}

fn paste(canvas: &mut Image, patch: &Image, ix: usize, iy: usize, cfg: &ComposeConfig) {
    let size = patch.width;
    let radius = cfg.radius_for(size);
    let half = size / 2;
    let c = canvas.channels;
    for v in 0..size {
        for u in 0..size {
            let a = patch_alpha(u, v, size, radius, cfg.feather, cfg.hard_paste);
            if a <= 0.0 {
                continue;
            }
            let (x, y) = (ix + u - half, iy + v - half);
            let d = canvas.index(x, y, 0);
            let s = patch.index(u, v, 0);
            if a >= 1.0 {
                canvas.data[d..d + c].copy_from_slice(&patch.data[s..s + c]);
            } else {
                for k in 0..c {
                    let bg = canvas.data[d + k] as f64;
                    canvas.data[d + k] = (a * patch.data[s + k] as f64 + (1.0 - a) * bg) as f32;
                }
            }
        }
    }
}

/// Stitch `k ~ U[count_range]` patches from `pool` into `style` at random
/// centres at least `size / 2` pixels inside the image, and render the
/// density map from those exact centres.
pub fn compose_image(
    style: &Image,
    pool: &[Image],
    cfg: &ComposeConfig,
    sigma: f64,
    seed: u64,
) -> Result<SynthesizedSample> {
    let (lo, hi) = cfg.count_range;
    if lo > hi {
        return Err(Error::Config(format!("count_range ({lo}, {hi}) has min > max")));
    }
    let mut r = rng::rng(seed);
    let k = r.random_range(lo..=hi);
    let mut image = style.clone();
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(k);
    if k > 0 {
        let first = pool.first().ok_or(Error::Empty("patch pool"))?;
        let size = first.width;
        if pool.iter().any(|p| p.width != size || p.height != size) {
            return Err(Error::shape("compose_image", "pool patches must share one square extent"));
        }
        if first.channels != style.channels {
            return Err(Error::Dimension {
                op: "compose_image",
                axis: "channels",
                expected: style.channels,
                got: first.channels,
            });
        }
        let half = size / 2;
        if style.width < 2 * half + 1 || style.height < 2 * half + 1 {
            return Err(Error::shape(
                "compose_image",
                format!("{}x{} style cannot hold a {size}-pixel patch", style.width, style.height),
            ));
        }
        let max_attempts = 1000 * k;
        let mut attempts = 0;
        let min_d2 = cfg.min_distance * cfg.min_distance;
        let mut centres = Vec::with_capacity(k);
        while centres.len() < k {
            if attempts == max_attempts {
                return Err(Error::Placement {
                    wanted: k,
                    placed: centres.len(),
                    attempts,
                });
            }
            attempts += 1;
            let ix = r.random_range(half..style.width - half);
            let iy = r.random_range(half..style.height - half);
            let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
            let clear = points
                .iter()
                .all(|&(px, py)| (px - x).powi(2) + (py - y).powi(2) >= min_d2);
            if clear {
                centres.push((ix, iy));
                points.push((x, y));
            }
        }
        for (ix, iy) in centres {
            let base = &pool[r.random_range(0..pool.len())];
            let patch = if cfg.augment_patches {
                let spec = AugmentSpec::sample(&mut r, &cfg.scale, true);
                augment(base, &spec, &cfg.scale)?
            } else {
                base.clone()
            };
            paste(&mut image, &patch, ix, iy, cfg);
        }
    }
    let annotations = DotAnnotations::new(points, style.width, style.height)?;
    let density = render_density_map(&annotations, sigma)?;
    Ok(SynthesizedSample {
        image,
        density,
        style: style.clone(),
        annotations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> Image {
        let data = (0..64 * 64).map(|i| (i % 64) as f32 / 80.0).collect();
        Image::new(64, 64, 1, data).unwrap()
    }

    fn pool() -> Vec<Image> {
        vec![Image::filled(12, 12, 1, 0.9), Image::filled(12, 12, 1, 0.95)]
    }

    fn cfg(lo: usize, hi: usize) -> ComposeConfig {
        ComposeConfig {
            count_range: (lo, hi),
            min_distance: 6.0,
            feather: 3.0,
            ..ComposeConfig::default()
        }
    }

    #[test]
    fn alpha_profile() {
        assert_eq!(patch_alpha(6, 6, 12, 6.0, 3.0, false), 1.0);
        assert_eq!(patch_alpha(0, 6, 12, 6.0, 3.0, false), 0.0);
        let mid = patch_alpha(6 + 4, 6, 12, 6.0, 3.0, false);
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(patch_alpha(0, 0, 12, 6.0, 3.0, true), 1.0);
    }

    #[test]
    fn zero_cells_returns_style() {
        let s = compose_image(&style(), &pool(), &cfg(0, 0), 1.5, 3).unwrap();
        assert_eq!(s.image, style());
        assert!(s.density.values.iter().all(|&v| v == 0.0));
        assert!(s.annotations.is_empty());
    }

    #[test]
    fn fixed_count_integrates_to_count() {
        for seed in 0..5 {
            let s = compose_image(&style(), &pool(), &cfg(7, 7), 1.5, seed).unwrap();
            assert_eq!(s.annotations.len(), 7);
            assert!((s.density.count() - 7.0).abs() < 1e-6);
            assert!(s.annotations.points.iter().all(|&(x, y)| x >= 6.0 && y >= 6.0 && x <= 58.0 && y <= 58.0));
        }
    }

    #[test]
    fn untouched_outside_alpha_support() {
        let st = style();
        for hard in [false, true] {
            let c = ComposeConfig { hard_paste: hard, ..cfg(5, 9) };
            let s = compose_image(&st, &pool(), &c, 1.5, 17).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let covered = s.annotations.points.iter().any(|&(px, py)| {
                        let (ix, iy) = (px.floor(), py.floor());
                        let (dx, dy) = (x as f64 - ix, y as f64 - iy);
                        if hard {
                            dx >= -6.0 && dx < 6.0 && dy >= -6.0 && dy < 6.0
                        } else {
                            dx.hypot(dy) < 6.0
                        }
                    });
                    if !covered {
                        assert_eq!(s.image.get(x, y, 0).to_bits(), st.get(x, y, 0).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn min_distance_is_respected_and_overcrowding_fails() {
        let s = compose_image(&style(), &pool(), &cfg(12, 12), 1.5, 8).unwrap();
        let p = &s.annotations.points;
        for i in 0..p.len() {
            for j in 0..i {
                assert!((p[i].0 - p[j].0).hypot(p[i].1 - p[j].1) >= 6.0);
            }
        }
        let crowded = ComposeConfig { min_distance: 40.0, ..cfg(10, 10) };
        assert!(matches!(
            compose_image(&style(), &pool(), &crowded, 1.5, 1),
            Err(Error::Placement { wanted: 10, .. })
        ));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = compose_image(&style(), &pool(), &cfg(3, 9), 1.5, 5).unwrap();
        let b = compose_image(&style(), &pool(), &cfg(3, 9), 1.5, 5).unwrap();
        assert_eq!(a, b);
        let c = compose_image(&style(), &pool(), &cfg(3, 9), 1.5, 6).unwrap();
        assert_ne!(a.annotations, c.annotations);
    }
}
