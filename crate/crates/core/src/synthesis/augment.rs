use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::patches::reflect;

/// Geometric augmentation applied as: scale about the centre, horizontal
/// flip, vertical flip, then clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub scale: f64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        quarter_turns: 0,
        flip_horizontal: false,
        flip_vertical: false,
        scale: 1.0,
    };

    /// Uniform draw over the dihedral group (restricted to half turns when
    /// `square` is false, so the extent is kept) and over the scale range.
    pub fn sample<R: Rng>(rng: &mut R, range: &ScaleRange, square: bool) -> Self {
        let turns = rng.random_range(0..4u8);
        AugmentSpec {
            quarter_turns: if square { turns } else { turns & 2 },
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            scale: if range.min < range.max {
                rng.random_range(range.min..=range.max)
            } else {
                range.min
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ScaleRange {
    fn default() -> Self {
        Self { min: 0.8, max: 1.2 }
    }
}

impl ScaleRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    let c = img.channels;
    for y in 0..img.height {
        for x in 0..img.width {
            let (d, s) = (out.index(x, y, 0), img.index(img.width - 1 - x, y, 0));
            out.data[d..d + c].copy_from_slice(&img.data[s..s + c]);
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let mut out = img.clone();
    let row = img.width * img.channels;
    for y in 0..img.height {
        let s = (img.height - 1 - y) * row;
        out.data[y * row..(y + 1) * row].copy_from_slice(&img.data[s..s + row]);
    }
    out
}

/// One clockwise quarter turn: `W x H` becomes `H x W`.
pub fn rotate_quarter(img: &Image) -> Image {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = Image::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (d, s) = (out.index(h - 1 - y, x, 0), img.index(x, y, 0));
            out.data[d..d + c].copy_from_slice(&img.data[s..s + c]);
        }
    }
    out
}

/// Bilinear zoom by `s` about the image centre; samples falling outside
/// are taken from the reflected image, so the extent is unchanged.
pub fn scale_about_centre(img: &Image, s: f64) -> Image {
    let (w, h, c) = (img.width, img.height, img.channels);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = img.clone();
    for y in 0..h {
        let sy = (y as f64 + 0.5 - cy) / s + cy - 0.5;
        let (y0, fy) = (sy.floor(), sy - sy.floor());
        let (ya, yb) = (reflect(y0 as i64, h), reflect(y0 as i64 + 1, h));
        for x in 0..w {
            let sx = (x as f64 + 0.5 - cx) / s + cx - 0.5;
            let (x0, fx) = (sx.floor(), sx - sx.floor());
            let (xa, xb) = (reflect(x0 as i64, w), reflect(x0 as i64 + 1, w));
            for k in 0..c {
                let top = img.get(xa, ya, k) as f64 * (1.0 - fx) + img.get(xb, ya, k) as f64 * fx;
                let bot = img.get(xa, yb, k) as f64 * (1.0 - fx) + img.get(xb, yb, k) as f64 * fx;
                out.set(x, y, k, (top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

/// Apply `spec`; the result always has the extent of `img`.
pub fn augment(img: &Image, spec: &AugmentSpec, range: &ScaleRange) -> Result<Image> {
    if !(spec.scale >= range.min && spec.scale <= range.max) {
        return Err(Error::ScaleOutOfRange {
            scale: spec.scale,
            lo: range.min,
            hi: range.max,
        });
    }
    if spec.quarter_turns % 2 == 1 && img.width != img.height {
        return Err(Error::shape(
            "augment",
            format!("a quarter turn would change the {}x{} extent", img.width, img.height),
        ));
    }
    let mut out = if spec.scale == 1.0 {
        img.clone()
    } else {
        scale_about_centre(img, spec.scale)
    };
    if spec.flip_horizontal {
        out = flip_horizontal(&out);
    }
    if spec.flip_vertical {
        out = flip_vertical(&out);
    }
    for _ in 0..spec.quarter_turns % 4 {
        out = rotate_quarter(&out);
    }
    Ok(out)
}
