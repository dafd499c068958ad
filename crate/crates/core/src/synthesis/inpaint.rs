use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    /// Stop once every hole pixel is filled and no value moved more than this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 5000,
        }
    }
}

const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Fill the masked pixels by iterative 8-neighbour diffusion.
///
/// Each sweep visits hole pixels in raster order and sets them to the mean
/// of their available neighbours (outside the hole, or already filled),
/// using values updated earlier in the same sweep. Unmasked pixels are
/// never written.
pub fn inpaint(image: &Image, mask: &Mask, cfg: &InpaintConfig) -> Result<Image> {
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(Error::shape(
            "inpaint",
            format!(
                "mask is {}x{}, image is {}x{}",
                mask.width, mask.height, image.width, image.height
            ),
        ));
    }
    let holes: Vec<(usize, usize)> = (0..image.height)
        .flat_map(|y| (0..image.width).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    if holes.is_empty() {
        return Ok(image.clone());
    }
    if holes.len() == mask.bits.len() {
        return Err(Error::FullyMasked);
    }
    let (w, h, c) = (image.width as i64, image.height as i64, image.channels);
    let mut out = image.clone();
    let mut filled: Vec<bool> = mask.bits.iter().map(|&m| !m).collect();
    let mut pending = holes.len();
    let mut acc = vec![0.0f64; c];
    for _ in 0..cfg.max_iterations {
        let mut max_change = 0.0f64;
        for &(x, y) in &holes {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut n = 0usize;
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !filled[ny * image.width + nx] {
                    continue;
                }
                let i = out.index(nx, ny, 0);
                for (a, &v) in acc.iter_mut().zip(&out.data[i..i + c]) {
                    *a += v as f64;
                }
                n += 1;
            }
            if n == 0 {
                continue;
            }
            let i = out.index(x, y, 0);
            let was_filled = filled[y * image.width + x];
            for (k, a) in acc.iter().enumerate() {
                let v = (a / n as f64) as f32;
                if was_filled {
                    max_change = max_change.max((v - out.data[i + k]).abs() as f64);
                }
                out.data[i + k] = v;
            }
            if !was_filled {
                filled[y * image.width + x] = true;
                pending -= 1;
                max_change = f64::INFINITY;
            }
        }
        if pending == 0 && max_change < cfg.tolerance {
            break;
        }
    }
    Ok(out)
}
