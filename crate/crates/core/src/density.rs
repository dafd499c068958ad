//! Ground-truth density maps from dot annotations, counting by integration,
//! and the mean absolute count error.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Kernel support in units of sigma.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// One `(x, y)` point per cell, pixel units, origin at the top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotations {
    pub points: Vec<(f64, f64)>,
    pub width: usize,
    pub height: usize,
}

impl DotAnnotations {
    pub fn new(points: Vec<(f64, f64)>, width: usize, height: usize) -> Result<Self> {
        let ann = Self {
            points,
            width,
            height,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            points: Vec::new(),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (index, &(x, y)) in self.points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..self.width as f64).contains(&x)
                && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err(Error::PointOutOfBounds {
                    index,
                    x,
                    y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV text with header `x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}").expect("writing to a String");
        }
        out
    }

    pub fn parse_csv(text: &str, width: usize, height: usize, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "x,y" => {}
            Some((_, header)) => return Err(err(1, format!("expected header `x,y`, got `{header}`"))),
            None => return Err(err(1, "missing header `x,y`".into())),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 {
                return Err(err(line_no, format!("expected 2 fields, got {}", fields.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| err(line_no, format!("`{}`: {e}", s.trim())))
            };
            let (x, y) = (parse(fields[0])?, parse(fields[1])?);
            points.push((x, y));
        }
        let ann = Self {
            points,
            width,
            height,
        };
        ann.validate().map_err(|e| match e {
            Error::PointOutOfBounds { index, .. } => err(index + 2, e.to_string()),
            other => other,
        })?;
        Ok(ann)
    }

    pub fn read_csv(path: &Path, width: usize, height: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, width, height, path)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel non-negative map, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub sigma: f64,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize, sigma: f64) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            sigma,
        }
    }

    pub fn count(&self) -> f64 {
        estimate_count(self)
    }
}

/// Sum of unit-mass isotropic Gaussians, one per annotated point.
///
/// Each kernel is truncated at `4 * sigma`, clipped to the image and then
/// renormalised so that every cell contributes exactly one unit of mass.
/// Points are accumulated in `(y, x)` order, which makes the result
/// independent of the order of `ann.points`.
pub fn render_density_map(ann: &DotAnnotations, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::shape("render_density_map", format!("sigma must be positive, got {sigma}")));
    }
    ann.validate()?;
    let (w, h) = (ann.width, ann.height);
    let mut map = DensityMap::zeros(w, h, sigma);
    let mut order: Vec<(f64, f64)> = ann.points.clone();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));

    let reach = TRUNCATE_SIGMAS * sigma;
    let reach2 = reach * reach;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for (x, y) in order {
        let (xi, yi) = (x.floor(), y.floor());
        let (xf, yf) = (x - xi, y - yi);
        let (xi, yi) = (xi as i64, yi as i64);
        let r = reach.ceil() as i64 + 1;
        kernel.clear();
        let mut mass = 0.0;
        for py in (yi - r).max(0)..=(yi + r).min(h as i64 - 1) {
            let dy = ((py - yi) as f64 + 0.5) - yf;
            for px in (xi - r).max(0)..=(xi + r).min(w as i64 - 1) {
                let dx = ((px - xi) as f64 + 0.5) - xf;
                let d2 = dx * dx + dy * dy;
                if d2 > reach2 {
                    continue;
                }
                let v = (-d2 * inv).exp();
                if v > 0.0 {
                    kernel.push((py as usize * w + px as usize, v));
                    mass += v;
                }
            }
        }
        if mass > 0.0 {
            for &(i, v) in &kernel {
                map.values[i] += v / mass;
            }
        } else {
            // Kernel narrower than a pixel: all mass on the containing pixel.
            map.values[yi as usize * w + xi as usize] += 1.0;
        }
    }
    Ok(map)
}

/// Integral of a density map, i.e. the estimated number of cells.
pub fn estimate_count(map: &DensityMap) -> f64 {
    map.values.iter().sum()
}

/// Mean absolute error between predicted and true counts.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::Empty("count lists"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "mae",
            axis: "length",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, w: usize, h: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = crate::rng::rng(seed);
        (0..n)
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect()
    }

    #[test]
    fn empty_annotations_render_zero() {
        let map = render_density_map(&DotAnnotations::empty(16, 12), 3.0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(estimate_count(&map), 0.0);
    }

    #[test]
    fn single_center_point_has_unit_mass() {
        for sigma in [0.5, 1.0, 3.0, 8.0] {
            let ann = DotAnnotations::new(vec![(32.0, 32.0)], 64, 64).unwrap();
            let map = render_density_map(&ann, sigma).unwrap();
            assert!((estimate_count(&map) - 1.0).abs() < 1e-6, "sigma {sigma}");
        }
    }

    #[test]
    fn fifty_points_integrate_to_fifty() {
        let ann = DotAnnotations::new(random_points(50, 64, 48, 3), 64, 48).unwrap();
        let map = render_density_map(&ann, 3.0).unwrap();
        // Independent summation oracle: pairwise in reverse order.
        let oracle: f64 = map.values.iter().rev().fold(0.0, |a, v| a + v);
        assert!((oracle - 50.0).abs() < 1e-6);
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn corner_points_keep_unit_mass_after_clipping() {
        let ann = DotAnnotations::new(vec![(0.0, 0.0), (63.9, 0.1), (0.2, 63.99)], 64, 64).unwrap();
        let map = render_density_map(&ann, 5.0).unwrap();
        assert!((estimate_count(&map) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_sigma_falls_back_to_containing_pixel() {
        let ann = DotAnnotations::new(vec![(3.9, 2.1)], 8, 8).unwrap();
        let map = render_density_map(&ann, 1e-3).unwrap();
        assert_eq!(map.values[2 * 8 + 3], 1.0);
    }

    #[test]
    fn out_of_bounds_point_reports_index() {
        let ann = DotAnnotations {
            points: vec![(1.0, 1.0), (10.0, 2.0)],
            width: 10,
            height: 10,
        };
        match render_density_map(&ann, 2.0) {
            Err(Error::PointOutOfBounds { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mae(&[12.0, 17.0], &[10.0, 20.0]).unwrap(), 2.5);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_matches_loop_oracle() {
        let mut rng = crate::rng::rng(11);
        let p: Vec<f64> = (0..37).map(|_| rng.random_range(0.0..50.0)).collect();
        let t: Vec<f64> = (0..37).map(|_| rng.random_range(0.0..50.0)).collect();
        let mut acc = 0.0;
        for i in 0..p.len() {
            acc += (p[i] - t[i]).abs();
        }
        assert_eq!(mae(&p, &t).unwrap(), acc / 37.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ann = DotAnnotations::new(vec![(1.5, 2.25), (0.1, 7.3)], 8, 8).unwrap();
        let path = Path::new("mem.csv");
        let back = DotAnnotations::parse_csv(&ann.to_csv(), 8, 8, path).unwrap();
        assert_eq!(back, ann);
        let bad = DotAnnotations::parse_csv("x,y\n1,2\n3;4\n", 8, 8, path).unwrap_err();
        assert!(matches!(bad, Error::Csv { line: 3, .. }), "{bad}");
        let outside = DotAnnotations::parse_csv("x,y\n1,2\n9,1\n", 8, 8, path).unwrap_err();
        assert!(matches!(outside, Error::Csv { line: 3, .. }), "{outside}");
        assert!(DotAnnotations::parse_csv("x,y\n", 8, 8, path).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn integral_equals_count(n in 0usize..120, seed in any::<u64>(), sigma in 0.5f64..6.0) {
            let ann = DotAnnotations::new(random_points(n, 40, 40, seed), 40, 40).unwrap();
            let map = render_density_map(&ann, sigma).unwrap();
            prop_assert!((estimate_count(&map) - n as f64).abs() < 1e-6);
        }

        #[test]
        fn render_is_permutation_invariant(seed in any::<u64>(), rot in 0usize..20) {
            let pts = random_points(20, 32, 32, seed);
            let mut shuffled = pts.clone();
            shuffled.rotate_left(rot);
            shuffled.reverse();
            let a = render_density_map(&DotAnnotations::new(pts, 32, 32).unwrap(), 2.0).unwrap();
            let b = render_density_map(&DotAnnotations::new(shuffled, 32, 32).unwrap(), 2.0).unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn integer_translation_translates_map(
            pts in proptest::collection::vec((0u32..64, 0u32..64), 0..10),
            dx in 0usize..8, dy in 0usize..8,
        ) {
            // Dyadic coordinates away from the borders.
            let base: Vec<(f64, f64)> = pts.iter()
                .map(|&(a, b)| (20.0 + a as f64 / 8.0, 20.0 + b as f64 / 8.0))
                .collect();
            let moved: Vec<(f64, f64)> = base.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
            let a = render_density_map(&DotAnnotations::new(base, 64, 64).unwrap(), 1.5).unwrap();
            let b = render_density_map(&DotAnnotations::new(moved, 64, 64).unwrap(), 1.5).unwrap();
            for y in 0..64 - dy {
                for x in 0..64 - dx {
                    prop_assert_eq!(a.values[y * 64 + x], b.values[(y + dy) * 64 + x + dx]);
                }
            }
        }

        #[test]
        fn mae_symmetric_and_triangle(
            v in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..20)
        ) {
            let a: Vec<f64> = v.iter().map(|t| t.0).collect();
            let b: Vec<f64> = v.iter().map(|t| t.1).collect();
            let c: Vec<f64> = v.iter().map(|t| t.2).collect();
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
        }
    }
}
