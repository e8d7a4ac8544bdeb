//! Homographies, bilinear warping with validity masks, cost volumes, mutual
//! nearest-neighbour matching and robust homography fitting.
//!
//! Coordinates: pixel centers at integer positions, origin top-left,
//! homographies act on `(x, y, 1)` with `x` the column. A feature cell `u` of a
//! stride-`s` grid has its center at pixel `s * u + (s - 1) / 2`.

mod cost;
mod homography;

use nalgebra::Matrix3;

pub use cost::{cost_volume, minmax_norm, mutual_matches, CostVolume, Match, MatchSet};
pub use homography::{dlt, fit_homography, HomographyFit, RansacConfig};

use crate::error::{Error, Result};
use crate::graph::SamplePlan;
use crate::image::{FeatureMap, Image};
use crate::tensor::Tensor;

const MIN_ABS_DET: f64 = 1e-12;

/// A planar homography normalized so that its bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform(Matrix3<f64>);

impl Transform {
    pub fn identity() -> Self {
        Transform(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Transform(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::Degenerate(format!("homography with bottom-right entry {s:e}")));
        }
        let m = m / s;
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= MIN_ABS_DET {
            return Err(Error::Singular(det));
        }
        Ok(Transform(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let [[a, b, c], [d, e, f], [g, h, i]] = rows;
        Self::from_matrix(Matrix3::new(a, b, c, d, e, f, g, h, i))
    }

    /// Row-major nine numbers, as serialized in result files.
    pub fn from_array(v: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }

    pub fn inverse(&self) -> Result<Transform> {
        let inv = self.0.try_inverse().ok_or(Error::Singular(self.det()))?;
        Transform::from_matrix(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Transform) -> Result<Transform> {
        Transform::from_matrix(self.0 * other.0)
    }

    /// The same mapping expressed in the coordinates of a stride-`s` cell
    /// grid.
    pub fn to_cell_grid(&self, stride: usize) -> Result<Transform> {
        let s = stride as f64;
        let c = (s - 1.0) / 2.0;
        let to_pixels = Matrix3::new(s, 0.0, c, 0.0, s, c, 0.0, 0.0, 1.0);
        let to_cells = Matrix3::new(1.0 / s, 0.0, -c / s, 0.0, 1.0 / s, -c / s, 0.0, 0.0, 1.0);
        Transform::from_matrix(to_cells * self.0 * to_pixels)
    }
}

/// Target-frame pixels covered by the warped source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("valid_mask", format!("{}x{} from {} flags", height, width, data.len())));
        }
        Ok(ValidMask { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        ValidMask { height, width, data: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn and(&self, other: &ValidMask) -> Result<ValidMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("valid_mask", "mask extents differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(ValidMask { height: self.height, width: self.width, data })
    }

    /// Row-major indices of stride-`s` cells containing at least one valid
    /// pixel.
    pub fn cells_touched(&self, stride: usize) -> Vec<usize> {
        let (gh, gw) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let mut hit = vec![false; gh * gw];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    hit[(y / stride) * gw + x / stride] = true;
                }
            }
        }
        hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
    }

    /// Expands to a `(C, H, W)` 0/1 tensor.
    pub fn to_tensor<F: crate::Real>(&self, channels: usize) -> Tensor<F> {
        let one: Vec<F> = self.data.iter().map(|&v| if v { F::one() } else { F::zero() }).collect();
        let data = (0..channels).flat_map(|_| one.iter().copied()).collect();
        Tensor::new([channels, self.height, self.width], data).expect("extents match")
    }
}

/// Inverse-mapping plan: target pixel `p` samples the source at `T^-1 p`.
pub fn warp_plan(t: &Transform, source: (usize, usize), target: (usize, usize)) -> Result<SamplePlan> {
    let inv = t.inverse()?;
    Ok(SamplePlan::from_fn(source.0, source.1, target.0, target.1, |x, y| inv.apply(x, y)))
}

fn warp_tensor(src: &Tensor<f64>, t: &Transform, target: (usize, usize)) -> Result<(Tensor<f64>, ValidMask)> {
    let (c, h, w) = src.dims3().ok_or_else(|| Error::shape("warp", format!("{:?}", src.shape())))?;
    let plan = warp_plan(t, (h, w), target)?;
    let out = Tensor::new([c, target.0, target.1], plan.apply(src.data(), c))?;
    let mask = ValidMask::new(target.0, target.1, plan.valid())?;
    Ok((out, mask))
}

/// Bilinear inverse warp of an image into a `target = (height, width)` frame.
pub fn warp_image(src: &Image, t: &Transform, target: (usize, usize)) -> Result<(Image, ValidMask)> {
    let (out, mask) = warp_tensor(src.tensor(), t, target)?;
    Ok((Image::from_tensor(&out)?, mask))
}

/// Warps a stride-`s` feature map with a pixel-space transform. The returned
/// mask is at cell resolution.
pub fn warp_features(
    src: &FeatureMap,
    t: &Transform,
    stride: usize,
    target_cells: (usize, usize),
) -> Result<(FeatureMap, ValidMask)> {
    let tc = t.to_cell_grid(stride)?;
    let (out, mask) = warp_tensor(src.tensor(), &tc, target_cells)?;
    Ok((FeatureMap::from_tensor(&out)?, mask))
}

/// Parameters of [`estimate_transform`].
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateConfig {
    pub stride: usize,
    pub ransac: RansacConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub transform: Transform,
    pub matches: usize,
    pub inliers: usize,
    /// Set when estimation failed and the identity was substituted.
    pub fallback: Option<String>,
}

/// Cost volume, mutual nearest neighbours, then RANSAC homography. Matching
/// failures degrade to the identity with a recorded reason; shape errors
/// propagate.
pub fn estimate_transform(z_src: &FeatureMap, z_tgt: &FeatureMap, cfg: &EstimateConfig) -> Result<Estimate> {
    let cv = cost_volume(z_src, z_tgt)?;
    let grid = (z_src.height(), z_src.width());
    let fallback = |reason: String, matches: usize| Estimate {
        transform: Transform::identity(),
        matches,
        inliers: 0,
        fallback: Some(reason),
    };
    let matches = match mutual_matches(&cv, grid, cfg.stride) {
        Ok(m) => m,
        Err(e) => return Ok(fallback(e.to_string(), 0)),
    };
    match fit_homography(&matches, &cfg.ransac) {
        Ok(fit) => Ok(Estimate {
            transform: fit.transform,
            matches: matches.len(),
            inliers: fit.inliers.iter().filter(|&&b| b).count(),
            fallback: None,
        }),
        Err(e @ (Error::TooFewMatches(_) | Error::Degenerate(_) | Error::Singular(_))) => {
            Ok(fallback(e.to_string(), matches.len()))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        Image::from_fn(c, h, w, |ch, y, x| (0.01 * (x + 3 * y) as f64 + 0.1 * ch as f64).fract())
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp(3, 9, 11);
        let (out, mask) = warp_image(&img, &Transform::identity(), (9, 11)).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.count(), 99);
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let img = ramp(2, 16, 16);
        let (out, mask) = warp_image(&img, &Transform::translation(3.0, 4.0), (16, 16)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let covered = x >= 3 && y >= 4;
                assert_eq!(mask.get(y, x), covered, "({x},{y})");
                for c in 0..2 {
                    let want = if covered { img.get(c, y - 4, x - 3) } else { 0.0 };
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn mask_depends_only_on_geometry() {
        let t = Transform::from_rows([[1.02, 0.1, 2.3], [-0.05, 0.97, -1.4], [1e-4, 0.0, 1.0]]).unwrap();
        let (_, m1) = warp_image(&ramp(3, 12, 12), &t, (12, 12)).unwrap();
        let (_, m2) = warp_image(&Image::zeros(3, 12, 12), &t, (12, 12)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn smooth_round_trip_interior() {
        let img = Image::from_fn(1, 32, 32, |_, y, x| 0.5 + 0.4 * ((x as f64) * 0.2).sin() * ((y as f64) * 0.15).cos());
        let t = Transform::from_rows([[0.98, 0.17, 1.5], [-0.17, 0.98, 2.0], [0.0, 0.0, 1.0]]).unwrap();
        let (fwd, _) = warp_image(&img, &t, (32, 32)).unwrap();
        let (back, mask) = warp_image(&fwd, &t.inverse().unwrap(), (32, 32)).unwrap();
        for y in 8..24 {
            for x in 8..24 {
                assert!(mask.get(y, x));
                assert!((back.get(0, y, x) - img.get(0, y, x)).abs() <= 0.02);
            }
        }
    }

    #[test]
    fn singular_transform_is_rejected() {
        let t = Transform::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(t, Err(Error::Singular(_))));
    }

    #[test]
    fn cell_grid_conjugation_maps_centers() {
        let t = Transform::translation(8.0, -4.0);
        let tc = t.to_cell_grid(4).unwrap();
        let (u, v) = tc.apply(1.0, 2.0).unwrap();
        assert!((u - 3.0).abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn touched_cells() {
        let mut data = vec![false; 8 * 8];
        data[5 * 8 + 6] = true;
        let m = ValidMask::new(8, 8, data).unwrap();
        assert_eq!(m.cells_touched(4), vec![3]);
    }
}
