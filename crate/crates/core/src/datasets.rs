//! Procedural source/target domains and dataset directories.
//!
//! A dataset directory holds `images/*.png` and stem-matched
//! `annotations/*.csv`, optionally `styles/*.png`, `densities/*.dtlc` and a
//! `manifest.tsv` with one `id, count, seed` row per image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_density;
use crate::density::{DensityMap, DotAnnotations};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// An image with dot annotations and, for generated domains, the exact
/// cell-free background it was drawn on.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub annotations: DotAnnotations,
    pub style: Option<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAppearance {
    GaussianBlob,
    Ring,
    TexturedBlob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Cell counts are `round(max(0, N(mean, std)))`.
    pub count_mean: f64,
    pub count_std: f64,
    pub appearance: CellAppearance,
    pub radius: (f64, f64),
    /// Signed peak contrast added to the background; negative gives dark cells.
    pub intensity: (f64, f64),
    pub background: Background,
    pub background_level: (f64, f64),
    /// Per-image range of the gradient's end-to-end rise, or of the smooth
    /// noise amplitude.
    pub background_variation: (f64, f64),
    /// Amplitude of independent per-pixel noise.
    pub pixel_noise: f64,
    /// Distance kept between cell centres and the image border.
    pub margin: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::toy_source()
    }
}

impl DomainSpec {
    /// Bright Gaussian blobs on a dark, slightly noisy flat background.
    pub fn toy_source() -> Self {
        Self {
            name: "toy_source".into(),
            width: 64,
            height: 64,
            channels: 1,
            count_mean: 20.0,
            count_std: 7.0,
            appearance: CellAppearance::GaussianBlob,
            radius: (2.0, 3.0),
            intensity: (0.45, 0.75),
            background: Background::Flat,
            background_level: (0.05, 0.2),
            background_variation: (0.0, 0.0),
            pixel_noise: 0.03,
            margin: 2.0,
        }
    }

    /// Dark rings on a bright gradient: different cells, background and contrast.
    pub fn toy_target() -> Self {
        Self {
            name: "toy_target".into(),
            count_mean: 15.0,
            count_std: 5.0,
            appearance: CellAppearance::Ring,
            radius: (2.5, 3.5),
            intensity: (-0.6, -0.4),
            background: Background::Gradient,
            background_level: (0.6, 0.8),
            background_variation: (0.1, 0.25),
            pixel_noise: 0.02,
            ..Self::toy_source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DomainSpec(format!("{}: {m}", self.name)));
        if self.width < 64 || self.height < 64 {
            return bad(format!("image size {}x{} is below 64x64", self.width, self.height));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.count_mean >= 0.0 && self.count_std >= 0.0) {
            return bad("count mean and std must be non-negative".into());
        }
        let ranges = [
            ("radius", self.radius),
            ("intensity", self.intensity),
            ("background_level", self.background_level),
            ("background_variation", self.background_variation),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return bad(format!("{name} range ({lo}, {hi}) is not ordered"));
            }
        }
        if self.radius.0 <= 0.0 {
            return bad("radius must be positive".into());
        }
        if !(self.margin >= 0.0 && 2.0 * self.margin < self.width.min(self.height) as f64) {
            return bad(format!("margin {} leaves no interior", self.margin));
        }
        Ok(())
    }

    /// Distance beyond which a cell of radius `r` leaves pixels untouched.
    pub fn influence_radius(&self, r: f64) -> f64 {
        2.0 * r
    }
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

/// Channel tint of cells and background in RGB domains.
const TINT: [f64; 3] = [1.0, 0.8, 0.6];

fn render_background(spec: &DomainSpec, r: &mut rng::Rng) -> Image {
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let level = uniform(r, spec.background_level);
    let variation = uniform(r, spec.background_variation);
    let field: Box<dyn Fn(f64, f64) -> f64> = match spec.background {
        Background::Flat => Box::new(move |_, _| level),
        Background::Gradient => {
            let angle = r.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let span = (w as f64).hypot(h as f64);
            Box::new(move |x, y| level + variation * ((x - cx) * dx + (y - cy) * dy) / span)
        }
        Background::Noise => {
            // Smooth value noise: random lattice every 16 px, bilinear in between.
            let cell = 16.0;
            let gw = (w as f64 / cell).ceil() as usize + 2;
            let gh = (h as f64 / cell).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..gw * gh).map(|_| r.random_range(-1.0..1.0)).collect();
            Box::new(move |x, y| {
                let (gx, gy) = (x / cell, y / cell);
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
                let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let top = at(x0, y0) * (1.0 - sx) + at(x0 + 1, y0) * sx;
                let bot = at(x0, y0 + 1) * (1.0 - sx) + at(x0 + 1, y0 + 1) * sx;
                level + variation * (top * (1.0 - sy) + bot * sy)
            })
        }
    };
    let mut img = Image::filled(w, h, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let base = field(x as f64 + 0.5, y as f64 + 0.5);
            for k in 0..c {
                let tint = if c == 3 { TINT[2 - k] } else { 1.0 };
                let noise = if spec.pixel_noise > 0.0 {
                    r.random_range(-spec.pixel_noise..spec.pixel_noise)
                } else {
                    0.0
                };
                img.set(x, y, k, (base * tint + noise) as f32);
            }
        }
    }
    img.clamp01();
    img.quantize();
    img
}

fn cell_profile(appearance: CellAppearance, d: f64, radius: f64, texture: f64) -> f64 {
    match appearance {
        CellAppearance::GaussianBlob => {
            let s = radius / 2.0;
            (-d * d / (2.0 * s * s)).exp()
        }
        CellAppearance::Ring => {
            let s = radius / 3.0;
            (-(d - radius).powi(2) / (2.0 * s * s)).exp()
        }
        CellAppearance::TexturedBlob => {
            let s = radius / 2.0;
            (-d * d / (2.0 * s * s)).exp() * (1.0 + 0.3 * texture)
        }
    }
}

/// Per-image seed used by [`generate_domain`] for image `index`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, index as u64)
}

/// Draw one image of the domain from `seed`.
pub fn generate_image(spec: &DomainSpec, seed: u64) -> Result<AnnotatedImage> {
    spec.validate()?;
    let mut r = rng::rng(seed);
    let style = render_background(spec, &mut r);
    let k = if spec.count_std > 0.0 {
        let n = Normal::new(spec.count_mean, spec.count_std).expect("validated std");
        n.sample(&mut r).max(0.0).round() as usize
    } else {
        spec.count_mean.round() as usize
    };
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let m = spec.margin;
    let mut points = Vec::with_capacity(k);
    let mut contrast = vec![0.0f64; w * h];
    for _ in 0..k {
        let x = uniform(&mut r, (m, w as f64 - m));
        let y = uniform(&mut r, (m, h as f64 - m));
        let radius = uniform(&mut r, spec.radius);
        let amp = uniform(&mut r, spec.intensity);
        let reach = spec.influence_radius(radius);
        let y0 = (y - reach).floor().max(0.0) as usize;
        let y1 = ((y + reach).ceil() as usize).min(h - 1);
        let x0 = (x - reach).floor().max(0.0) as usize;
        let x1 = ((x + reach).ceil() as usize).min(w - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = (px as f64 + 0.5 - x).hypot(py as f64 + 0.5 - y);
                if d >= reach {
                    continue;
                }
                let texture = if spec.appearance == CellAppearance::TexturedBlob {
                    r.random_range(-1.0..1.0)
                } else {
                    0.0
                };
                contrast[py * w + px] += amp * cell_profile(spec.appearance, d, radius, texture);
            }
        }
        points.push((x, y));
    }
    let mut image = style.clone();
    for (i, &v) in contrast.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for k in 0..c {
            let tint = if c == 3 { TINT[k] } else { 1.0 };
            let j = i * c + k;
            let q = (style.data[j] as f64 + v * tint).clamp(0.0, 1.0);
            image.data[j] = ((q * 255.0).round() / 255.0) as f32;
        }
    }
    let annotations = DotAnnotations::new(points, w, h)?;
    Ok(AnnotatedImage {
        image,
        annotations,
        style: Some(style),
    })
}

/// `n` images, image `i` drawn from [`image_seed`]`(seed, i)`.
pub fn generate_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    (0..n).map(|i| generate_image(spec, image_seed(seed, i))).collect()
}

/// One `manifest.tsv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub count: f64,
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.tsv";

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from("id\tcount\tseed\n");
    for r in rows {
        text.push_str(&format!("{}\t{}\t{}\n", r.id, r.count, r.seed));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "id\tcount\tseed")) => {}
        _ => {
            return Err(Error::Format {
                path,
                msg: "expected header `id<TAB>count<TAB>seed`".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |msg: &str| Error::Csv {
                path: path.clone(),
                line: i + 1,
                msg: msg.into(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, count, seed] = cols[..] else {
                return Err(bad("expected 3 tab-separated fields"));
            };
            Ok(ManifestRow {
                id: id.to_string(),
                count: count.parse().map_err(|_| bad("count is not a number"))?,
                seed: seed.parse().map_err(|_| bad("seed is not an unsigned integer"))?,
            })
        })
        .collect()
}

pub fn sample_id(index: usize) -> String {
    format!("{index:04}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write `items` as `NNNN` stems. Writes `styles/` only when every item has
/// a style image, and `densities/` when `densities` is given.
pub fn save_dataset(
    dir: &Path,
    items: &[AnnotatedImage],
    seeds: &[u64],
    densities: Option<&[DensityMap]>,
) -> Result<()> {
    if seeds.len() != items.len() || densities.is_some_and(|d| d.len() != items.len()) {
        return Err(Error::shape("save_dataset", "items, seeds and densities differ in length"));
    }
    let with_styles = !items.is_empty() && items.iter().all(|i| i.style.is_some());
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("annotations"))?;
    if with_styles {
        create_dir(&dir.join("styles"))?;
    }
    if densities.is_some() {
        create_dir(&dir.join("densities"))?;
    }
    let mut rows = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let id = sample_id(i);
        item.image.save_png(&dir.join("images").join(format!("{id}.png")))?;
        item.annotations
            .write_csv(&dir.join("annotations").join(format!("{id}.csv")))?;
        if with_styles {
            let style = item.style.as_ref().expect("checked above");
            style.save_png(&dir.join("styles").join(format!("{id}.png")))?;
        }
        let count = match densities {
            Some(d) => {
                write_density(&dir.join("densities").join(format!("{id}.dtlc")), &d[i])?;
                d[i].count()
            }
            None => item.annotations.len() as f64,
        };
        rows.push(ManifestRow {
            id,
            count,
            seed: seeds[i],
        });
    }
    write_manifest(dir, &rows)
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Stems of `images/*.png` in the order [`load_dataset`] returns them.
pub fn dataset_stems(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    Ok(stems(&images, "png")?.into_iter().map(|(s, _)| s).collect())
}

/// Load every `images/<stem>.png` with `annotations/<stem>.csv` and, if
/// present, `styles/<stem>.png`, in stem order. A directory without an
/// `images/` folder but with no entries at all is an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let images = dir.join("images");
    if !images.is_dir() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if empty {
            return Ok(Vec::new());
        }
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "not a dataset directory (no images/ folder)".into(),
        });
    }
    let styles = dir.join("styles");
    stems(&images, "png")?
        .into_iter()
        .map(|(stem, path)| {
            let image = Image::load_png(&path)?;
            let csv = dir.join("annotations").join(format!("{stem}.csv"));
            if !csv.is_file() {
                return Err(Error::MissingAnnotation(stem));
            }
            let annotations = DotAnnotations::read_csv(&csv, image.width, image.height)?;
            let style_path = styles.join(format!("{stem}.png"));
            let style = if style_path.is_file() {
                let s = Image::load_png(&style_path)?;
                if !s.same_extent(&image) {
                    return Err(Error::Format {
                        path: style_path,
                        msg: "style image extent differs from its image".into(),
                    });
                }
                Some(s)
            } else {
                None
            };
            Ok(AnnotatedImage {
                image,
                annotations,
                style,
            })
        })
        .collect()
}
