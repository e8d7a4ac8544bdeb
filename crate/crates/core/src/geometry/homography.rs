use nalgebra::{DMatrix, Matrix3};
use rand::seq::index;

use super::cost::MatchSet;
use super::Transform;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { iterations: 500, inlier_threshold_px: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomographyFit {
    pub transform: Transform,
    /// One flag per input match.
    pub inliers: Vec<bool>,
    /// True when no 4-point model reached a consensus of 4 and the fit used
    /// every match.
    pub used_fallback: bool,
}

type Correspondence = ((f64, f64), (f64, f64));

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply_matrix(m: &Matrix3<f64>, (x, y): (f64, f64)) -> (f64, f64) {
    let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
    ((m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w, (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w)
}

/// Normalized direct linear transform; least squares for more than four
/// correspondences. Maps `src` onto `dst`.
pub fn dlt(pairs: &[Correspondence]) -> Result<Transform> {
    if pairs.len() < 4 {
        return Err(Error::TooFewMatches(pairs.len()));
    }
    let ns = normalizer(pairs.iter().map(|p| p.0));
    let nd = normalizer(pairs.iter().map(|p| p.1));
    // at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, &(s, d)) in pairs.iter().enumerate() {
        let (x, y) = apply_matrix(&ns, s);
        let (u, v) = apply_matrix(&nd, d);
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("svd did not converge".into()))?;
    let (smallest, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let nd_inv = nd.try_inverse().ok_or(Error::Singular(0.0))?;
    Transform::from_matrix(nd_inv * hn * ns)
}

fn twice_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs()
}

const COLLINEAR_TOL: f64 = 1e-6;

fn any_three_collinear(pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if twice_area(pts[i], pts[j], pts[k]) < COLLINEAR_TOL {
                    return true;
                }
            }
        }
    }
    false
}

/// All points on one line (or coincident).
fn all_collinear(pts: &[(f64, f64)]) -> bool {
    let Some(&a) = pts.first() else { return true };
    let Some(&b) = pts.iter().find(|p| (p.0 - a.0).hypot(p.1 - a.1) > COLLINEAR_TOL) else {
        return true;
    };
    pts.iter().all(|&c| twice_area(a, b, c) < COLLINEAR_TOL * (b.0 - a.0).hypot(b.1 - a.1))
}

fn reprojection_error(t: &Transform, (s, d): Correspondence) -> f64 {
    match t.apply(s.0, s.1) {
        Some((x, y)) => (x - d.0).hypot(y - d.1),
        None => f64::INFINITY,
    }
}

fn fit_all(pairs: &[Correspondence]) -> Result<Transform> {
    let src: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    if all_collinear(&src) || all_collinear(&dst) {
        return Err(Error::Degenerate(format!("{} collinear correspondences", pairs.len())));
    }
    dlt(pairs)
}

/// Seeded RANSAC over 4-point samples, refit on the best consensus. When no
/// sample gathers four inliers the model is fit to every match instead.
pub fn fit_homography(matches: &MatchSet, cfg: &RansacConfig) -> Result<HomographyFit> {
    let pairs: Vec<Correspondence> = matches.iter().map(|m| (m.src, m.dst)).collect();
    let n = pairs.len();
    if n < 4 {
        return Err(Error::TooFewMatches(n));
    }
    let mut rng = rng::stream(cfg.seed, "ransac");
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let sample: Vec<usize> = index::sample(&mut rng, n, 4).into_vec();
        let chosen: Vec<Correspondence> = sample.iter().map(|&i| pairs[i]).collect();
        let src: Vec<(f64, f64)> = chosen.iter().map(|p| p.0).collect();
        let dst: Vec<(f64, f64)> = chosen.iter().map(|p| p.1).collect();
        if any_three_collinear(&src) || any_three_collinear(&dst) {
            continue;
        }
        let Ok(model) = dlt(&chosen) else { continue };
        let errors: Vec<f64> = pairs.iter().map(|&p| reprojection_error(&model, p)).collect();
        let flags: Vec<bool> = errors.iter().map(|&e| e < cfg.inlier_threshold_px).collect();
        let count = flags.iter().filter(|&&f| f).count();
        let spread: f64 = errors.iter().zip(&flags).filter(|(_, &f)| f).map(|(e, _)| e).sum();
        let better = match &best {
            None => true,
            Some((c, s, _)) => count > *c || (count == *c && spread < *s),
        };
        if better {
            best = Some((count, spread, flags));
        }
    }
    match best {
        Some((count, _, flags)) if count >= 4 => {
            let consensus: Vec<Correspondence> =
                pairs.iter().zip(&flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();
            let transform = fit_all(&consensus)?;
            let inliers = pairs.iter().map(|&p| reprojection_error(&transform, p) < cfg.inlier_threshold_px).collect();
            Ok(HomographyFit { transform, inliers, used_fallback: false })
        }
        _ => {
            let transform = fit_all(&pairs)?;
            let inliers = pairs.iter().map(|&p| reprojection_error(&transform, p) < cfg.inlier_threshold_px).collect();
            Ok(HomographyFit { transform, inliers, used_fallback: true })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Match;
    use rand::Rng;

    fn truth() -> Transform {
        Transform::from_rows([[0.95, -0.2, 4.0], [0.18, 1.03, -3.0], [2e-4, -1e-4, 1.0]]).unwrap()
    }

    fn matches_from(t: &Transform, pts: &[(f64, f64)]) -> MatchSet {
        MatchSet(
            pts.iter()
                .enumerate()
                .map(|(i, &p)| Match { src: p, dst: t.apply(p.0, p.1).unwrap(), score: 1.0, src_cell: i, dst_cell: i })
                .collect(),
        )
    }

    fn corner_error(a: &Transform, b: &Transform, size: f64) -> f64 {
        [(0.0, 0.0), (size, 0.0), (0.0, size), (size, size)]
            .iter()
            .map(|&(x, y)| {
                let (p, q) = (a.apply(x, y).unwrap(), b.apply(x, y).unwrap());
                (p.0 - q.0).hypot(p.1 - q.1)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn four_exact_correspondences_recover_truth() {
        let t = truth();
        let m = matches_from(&t, &[(5.0, 6.0), (58.0, 3.0), (60.0, 61.0), (2.0, 55.0)]);
        let fit = fit_homography(&m, &RansacConfig::default()).unwrap();
        assert!(corner_error(&fit.transform, &t, 63.0) < 1e-6);
        assert!(!fit.used_fallback);
    }

    #[test]
    fn dlt_least_squares_on_exact_grid() {
        let t = truth();
        let pts: Vec<(f64, f64)> = (0..5).flat_map(|i| (0..5).map(move |j| (i as f64 * 15.0, j as f64 * 15.0))).collect();
        let pairs: Vec<Correspondence> = pts.iter().map(|&p| (p, t.apply(p.0, p.1).unwrap())).collect();
        assert!(corner_error(&dlt(&pairs).unwrap(), &t, 63.0) < 1e-8);
    }

    #[test]
    fn thirty_percent_outliers() {
        let t = truth();
        let mut rng = rng::stream(3, "outliers");
        let pts: Vec<(f64, f64)> = (0..40).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
        let mut m = matches_from(&t, &pts);
        for k in 0..12 {
            m.0[k].dst = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
        }
        let fit = fit_homography(&m, &RansacConfig { seed: 11, ..Default::default() }).unwrap();
        assert!(corner_error(&fit.transform, &t, 63.0) < 0.5);
        assert!(fit.inliers[12..].iter().all(|&f| f));
    }

    #[test]
    fn same_seed_same_fit() {
        let mut rng = rng::stream(4, "pts");
        let pts: Vec<(f64, f64)> = (0..20).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
        let mut m = matches_from(&truth(), &pts);
        m.0[0].dst = (1.0, 1.0);
        let cfg = RansacConfig { seed: 5, ..Default::default() };
        assert_eq!(fit_homography(&m, &cfg).unwrap(), fit_homography(&m, &cfg).unwrap());
    }

    #[test]
    fn too_few_matches() {
        let m = matches_from(&truth(), &[(1.0, 1.0), (9.0, 2.0), (4.0, 8.0)]);
        assert!(matches!(fit_homography(&m, &RansacConfig::default()), Err(Error::TooFewMatches(3))));
    }

    #[test]
    fn collinear_matches_are_degenerate() {
        let m = matches_from(&truth(), &[(0.0, 0.0), (4.0, 4.0), (8.0, 8.0), (12.0, 12.0), (20.0, 20.0)]);
        assert!(matches!(fit_homography(&m, &RansacConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn no_sampled_consensus_falls_back_to_all_matches() {
        // a 4-point model always explains its own sample, so only an empty
        // sampling budget leaves the consensus below four
        let t = truth();
        let m = matches_from(&t, &[(0.0, 0.0), (40.0, 3.0), (50.0, 45.0), (5.0, 60.0), (25.0, 30.0)]);
        let fit = fit_homography(&m, &RansacConfig { iterations: 0, ..Default::default() }).unwrap();
        assert!(fit.used_fallback);
        assert!(corner_error(&fit.transform, &t, 63.0) < 1e-6);
    }
}
