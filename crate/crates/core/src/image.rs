//! Interleaved `H x W x C` float images in `[0, 1]` and their 8-bit PNG form.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} values, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Round every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize(&mut self) {
        self.data
            .iter_mut()
            .for_each(|v| *v = to_u8(*v) as f32 / 255.0);
    }

    /// Planar `[C, H, W]` copy for the network.
    pub fn to_chw<T: Real>(&self) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = T::lit(v as f64);
            }
        }
        out
    }

    /// Rebuild from one `[C, H, W]` slice of a batch tensor.
    pub fn from_chw<T: Real>(width: usize, height: usize, channels: usize, chw: &[T]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0f32; plane * channels];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = chw[c * plane + i].as_f64() as f32;
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer sized from extent")
                .save(path),
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer sized from extent")
                .save(path),
            c => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("cannot write {c}-channel image as PNG"),
                })
            }
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load an 8-bit PNG. Grayscale and RGB are kept as-is; anything else is
    /// rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img {
            image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
            image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("unsupported pixel format {:?}", other.color()),
                })
            }
        };
        let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(width, height, channels, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stack images into a `[B, C, H, W]` tensor.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_extent(first) {
            return Err(Error::shape("batch", "images differ in extent"));
        }
        data.extend(img.to_chw::<T>());
    }
    Tensor::new(
        vec![images.len(), first.channels, first.height, first.width],
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let chw = img.to_chw::<f32>();
        assert_eq!(chw, vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(Image::from_chw(2, 1, 3, &chw), img);
    }

    #[test]
    fn png_round_trip_of_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = Image::new(3, 2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        img.quantize();
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);
    }
}
