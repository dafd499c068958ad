//! Browser demo: click cells to annotate a generated microscopy image, then
//! render its density map, inpaint the cells away, or composite new cells
//! onto the cell-free background.

use dtl_count::datasets::{generate_image, DomainSpec};
use dtl_count::density::{estimate_count, render_density_map, DensityMap, DotAnnotations};
use dtl_count::image::Image;
use dtl_count::synthesis::{compose_image, extract_patches, inpaint, ComposeConfig, InpaintConfig};
use wasm_bindgen::prelude::*;

const PATCH_SIZE: usize = 14;

fn err(e: dtl_count::Error) -> String {
    e.to_string()
}

/// Grey or RGB image in [0, 1] to RGBA bytes.
pub fn rgba(img: &Image) -> Vec<u8> {
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(img.width * img.height * 4);
    for y in 0..img.height {
        for x in 0..img.width {
            let (r, g, b) = if img.channels == 1 {
                let v = byte(img.get(x, y, 0));
                (v, v, v)
            } else {
                (byte(img.get(x, y, 0)), byte(img.get(x, y, 1)), byte(img.get(x, y, 2)))
            };
            out.extend([r, g, b, 255]);
        }
    }
    out
}

/// Density map to RGBA with a black-red-yellow-white ramp, scaled to its peak.
pub fn heatmap(map: &DensityMap) -> Vec<u8> {
    let peak = map.values.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(map.values.len() * 4);
    for &v in &map.values {
        let t = if peak > 0.0 { v / peak } else { 0.0 };
        let ch = |lo: f64| ((3.0 * t - lo).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend([ch(0.0), ch(1.0), ch(2.0), 255]);
    }
    out
}

/// One generated image and the user's dot annotations on it.
#[wasm_bindgen]
pub struct Demo {
    image: Image,
    truth: usize,
    points: Vec<(f64, f64)>,
    style: Option<Image>,
    patches: Vec<Image>,
}

#[wasm_bindgen]
impl Demo {
    /// A toy target (`target = true`) or source image; annotations start
    /// at the generated cell centres.
    #[wasm_bindgen(constructor)]
    pub fn new(target: bool, seed: u64) -> Result<Demo, String> {
        let spec = if target { DomainSpec::toy_target() } else { DomainSpec::toy_source() };
        let item = generate_image(&spec, seed).map_err(err)?;
        Ok(Demo {
            image: item.image,
            truth: item.annotations.len(),
            points: item.annotations.points,
            style: None,
            patches: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Number of cells the generator drew.
    pub fn true_count(&self) -> usize {
        self.truth
    }

    pub fn annotation_count(&self) -> usize {
        self.points.len()
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    /// Add a dot, or remove the nearest one within `radius` pixels.
    pub fn toggle_point(&mut self, x: f64, y: f64, radius: f64) {
        let nearest = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &(px, py))| (i, (px - x).hypot(py - y)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((i, d)) if d <= radius => {
                self.points.remove(i);
            }
            _ if x >= 0.0 && y >= 0.0 && x < self.image.width as f64 && y < self.image.height as f64 => {
                self.points.push((x, y));
            }
            _ => {}
        }
        self.style = None;
    }

    pub fn clear_points(&mut self) {
        self.points.clear();
        self.style = None;
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image)
    }

    fn annotations(&self) -> Result<DotAnnotations, String> {
        DotAnnotations::new(self.points.clone(), self.image.width, self.image.height).map_err(err)
    }

    fn density(&self, sigma: f64) -> Result<DensityMap, String> {
        render_density_map(&self.annotations()?, sigma).map_err(err)
    }

    /// Heatmap of the Gaussian density map of the current dots.
    pub fn density_rgba(&self, sigma: f64) -> Result<Vec<u8>, String> {
        Ok(heatmap(&self.density(sigma)?))
    }

    /// Integral of the density map; equals the number of dots.
    pub fn density_count(&self, sigma: f64) -> Result<f64, String> {
        Ok(estimate_count(&self.density(sigma)?))
    }

    /// Crop a patch around every dot and fill the holes by diffusion.
    pub fn inpaint_rgba(&mut self) -> Result<Vec<u8>, String> {
        let (patches, mask) = extract_patches(&self.image, &self.annotations()?, PATCH_SIZE).map_err(err)?;
        let style = inpaint(&self.image, &mask, &InpaintConfig::default()).map_err(err)?;
        let out = rgba(&style);
        self.style = Some(style);
        self.patches = patches;
        Ok(out)
    }

    /// Paste `count` of the cropped cells at random places on the inpainted
    /// background. Needs at least one dot.
    pub fn compose_rgba(&mut self, count: usize, seed: u64) -> Result<Vec<u8>, String> {
        if self.style.is_none() {
            self.inpaint_rgba()?;
        }
        let style = self.style.as_ref().ok_or("no background")?;
        if self.patches.is_empty() {
            return Err("annotate at least one cell first".into());
        }
        let cfg = ComposeConfig {
            count_range: (count, count),
            min_distance: 4.0,
            paste_radius: Some(5.0),
            feather: 2.0,
            ..ComposeConfig::default()
        };
        let sample = compose_image(style, &self.patches, &cfg, 1.5, seed).map_err(err)?;
        Ok(rgba(&sample.image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_count_tracks_the_dots() {
        let mut d = Demo::new(true, 3).unwrap();
        assert_eq!(d.annotation_count(), d.true_count());
        let n = d.annotation_count() as f64;
        assert!((d.density_count(1.5).unwrap() - n).abs() < 1e-6);
        d.toggle_point(10.0, 10.0, 0.0);
        assert!((d.density_count(2.0).unwrap() - (n + 1.0)).abs() < 1e-6);
        d.toggle_point(10.2, 10.0, 1.0);
        assert_eq!(d.annotation_count() as f64, n);
        d.clear_points();
        assert_eq!(d.density_count(1.5).unwrap(), 0.0);
    }

    #[test]
    fn buffers_have_rgba_extent() {
        let mut d = Demo::new(false, 1).unwrap();
        let len = d.width() * d.height() * 4;
        assert_eq!(d.image_rgba().len(), len);
        assert_eq!(d.density_rgba(1.5).unwrap().len(), len);
        assert_eq!(d.inpaint_rgba().unwrap().len(), len);
        assert_eq!(d.compose_rgba(6, 2).unwrap().len(), len);
    }

    #[test]
    fn compose_without_dots_is_an_error() {
        let mut d = Demo::new(true, 4).unwrap();
        d.clear_points();
        assert!(d.compose_rgba(3, 0).is_err());
    }

    #[test]
    fn heatmap_peak_is_white() {
        let mut map = DensityMap::zeros(2, 1, 1.0);
        map.values = vec![0.0, 0.5];
        assert_eq!(heatmap(&map), vec![0, 0, 0, 255, 255, 255, 255, 255]);
    }
}
