use crate::density::DotAnnotations;
use crate::error::{Error, Result};
use crate::image::Image;

/// Binary `height x width` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize) {
        self.bits[y * self.width + x] = true;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Top-left corner of the `size`-square window whose centre pixel contains `(x, y)`.
pub(crate) fn window_origin(x: f64, y: f64, size: usize) -> (i64, i64) {
    let half = (size / 2) as i64;
    (x.floor() as i64 - half, y.floor() as i64 - half)
}

/// One `size x size` crop per annotation, centred on it, plus the union of
/// the crop windows (clipped to the image) as a hole mask. Windows that
/// reach past the border are completed by reflection.
pub fn extract_patches(
    image: &Image,
    ann: &DotAnnotations,
    size: usize,
) -> Result<(Vec<Image>, Mask)> {
    if size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if (ann.width, ann.height) != (image.width, image.height) {
        return Err(Error::shape(
            "extract_patches",
            format!(
                "annotations are for {}x{}, image is {}x{}",
                ann.width, ann.height, image.width, image.height
            ),
        ));
    }
    ann.validate()?;
    let c = image.channels;
    let mut mask = Mask::empty(image.width, image.height);
    let mut patches = Vec::with_capacity(ann.len());
    for &(x, y) in &ann.points {
        let (x0, y0) = window_origin(x, y, size);
        let mut data = Vec::with_capacity(size * size * c);
        for v in 0..size as i64 {
            let sy = reflect(y0 + v, image.height);
            for u in 0..size as i64 {
                let sx = reflect(x0 + u, image.width);
                let i = image.index(sx, sy, 0);
                data.extend_from_slice(&image.data[i..i + c]);
            }
        }
        patches.push(Image::new(size, size, c, data)?);
        let ys = y0.max(0)..(y0 + size as i64).min(image.height as i64);
        for py in ys {
            for px in x0.max(0)..(x0 + size as i64).min(image.width as i64) {
                mask.set(px as usize, py as usize);
            }
        }
    }
    Ok((patches, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h).map(|i| i as f32 / (w * h) as f32).collect();
        Image::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn interior_annotations() {
        let img = ramp(96, 96);
        let pts = vec![(20.0, 20.0), (50.5, 30.2), (70.0, 70.0), (40.0, 64.0), (22.0, 25.0)];
        let ann = DotAnnotations::new(pts, 96, 96).unwrap();
        let (patches, mask) = extract_patches(&img, &ann, 32).unwrap();
        assert_eq!(patches.len(), 5);
        assert!(patches.iter().all(|p| (p.width, p.height, p.channels) == (32, 32, 1)));
        assert!(mask.area() <= 5 * 1024);
        // Top-left of the first window is (4, 4).
        assert_eq!(patches[0].get(0, 0, 0), img.get(4, 4, 0));
        assert_eq!(patches[0].get(16, 16, 0), img.get(20, 20, 0));
    }

    #[test]
    fn no_annotations() {
        let img = ramp(40, 40);
        let (patches, mask) = extract_patches(&img, &DotAnnotations::empty(40, 40), 32).unwrap();
        assert!(patches.is_empty());
        assert_eq!(mask.area(), 0);
    }

    #[test]
    fn border_windows_are_reflected() {
        let (w, h) = (48, 40);
        let img = ramp(w, h);
        let ann = DotAnnotations::new(vec![(8.0, 8.0)], w, h).unwrap();
        let (patches, mask) = extract_patches(&img, &ann, 32).unwrap();
        // Explicit reflect-pad oracle: pad by 16 on every side, crop at the point.
        let pad = 16usize;
        let (pw, ph) = (w + 2 * pad, h + 2 * pad);
        let mut padded = vec![0.0f32; pw * ph];
        for y in 0..ph {
            for x in 0..pw {
                let sx = x as i64 - pad as i64;
                let sy = y as i64 - pad as i64;
                let sx = if sx < 0 { -sx } else if sx >= w as i64 { 2 * (w as i64 - 1) - sx } else { sx };
                let sy = if sy < 0 { -sy } else if sy >= h as i64 { 2 * (h as i64 - 1) - sy } else { sy };
                padded[y * pw + x] = img.get(sx as usize, sy as usize, 0);
            }
        }
        for v in 0..32 {
            for u in 0..32 {
                let want = padded[(8 + v) * pw + 8 + u];
                assert_eq!(patches[0].get(u, v, 0), want);
            }
        }
        assert_eq!(mask.area(), 24 * 24);
    }

    #[test]
    fn mismatched_extent_is_an_error() {
        let img = ramp(40, 40);
        let ann = DotAnnotations::new(vec![(1.0, 1.0)], 41, 40).unwrap();
        assert!(extract_patches(&img, &ann, 8).is_err());
    }
}
