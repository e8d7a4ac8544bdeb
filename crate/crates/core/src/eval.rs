//! Restoration and alignment metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Transform, ValidMask};
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Acceptance thresholds on the control-point errors, in pixels.
pub const ACCEPT_MAX_ERROR: f64 = 50.0;
pub const ACCEPT_MEDIAN_ERROR: f64 = 20.0;

fn check_pair(a: &Image, b: &Image, mask: Option<&ValidMask>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape("metric", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (a.height(), a.width()) {
            return Err(Error::shape("metric", "mask extents differ from the images"));
        }
    }
    Ok(())
}

/// Mean squared error over masked pixels and all channels.
pub fn masked_mse(a: &Image, b: &Image, mask: Option<&ValidMask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (c, h, w) = a.dims();
    let (mut acc, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m.get(y, x)) {
                continue;
            }
            for ch in 0..c {
                acc += (a.get(ch, y, x) - b.get(ch, y, x)).powi(2);
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::invalid("metric over an empty mask"));
    }
    Ok(acc / n as f64)
}

/// Peak-1 PSNR in dB, capped for identical inputs.
pub fn psnr(a: &Image, b: &Image, mask: Option<&ValidMask>) -> Result<f64> {
    let mse = masked_mse(a, b, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn window_ssim(a: &Image, b: &Image, ch: usize, y0: usize, x0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            sa += a.get(ch, y, x);
            sb += b.get(ch, y, x);
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            let (da, db) = (a.get(ch, y, x) - ma, b.get(ch, y, x) - mb);
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (vaa + vbb + SSIM_C2))
}

/// Mean windowed SSIM over windows that touch the mask, averaged over
/// channels. Frames smaller than a window use one global window.
pub fn ssim(a: &Image, b: &Image, mask: Option<&ValidMask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (c, h, w) = a.dims();
    let windows: Vec<(usize, usize, usize, usize)> = if h < SSIM_WINDOW || w < SSIM_WINDOW {
        vec![(0, 0, h, w)]
    } else {
        let mut v = vec![];
        for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                v.push((y0, x0, SSIM_WINDOW, SSIM_WINDOW));
            }
        }
        v
    };
    let touches = |&(y0, x0, wh, ww): &(usize, usize, usize, usize)| match mask {
        None => true,
        Some(m) => (y0..y0 + wh).any(|y| (x0..x0 + ww).any(|x| m.get(y, x))),
    };
    let kept: Vec<_> = windows.into_iter().filter(touches).collect();
    if kept.is_empty() {
        return Err(Error::invalid("no SSIM window intersects the mask"));
    }
    let mut total = 0.0;
    for ch in 0..c {
        for &(y0, x0, wh, ww) in &kept {
            total += window_ssim(a, b, ch, y0, x0, wh, ww);
        }
    }
    Ok(total / (c * kept.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentErrors {
    /// Displacements at the control points, row-major over the grid.
    pub errors: Vec<f64>,
    pub mee: f64,
    pub mae: f64,
}

impl AlignmentErrors {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("no control points"));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mee = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Ok(AlignmentErrors { mae: sorted[n - 1], mee, errors })
    }

    pub fn acceptable(&self) -> bool {
        acceptable(self.mae, self.mee)
    }
}

pub fn acceptable(mae: f64, mee: f64) -> bool {
    mae < ACCEPT_MAX_ERROR && mee < ACCEPT_MEDIAN_ERROR
}

/// `n x n` control points spanning the frame corners, row-major.
pub fn control_points(height: usize, width: usize, n: usize) -> Vec<(f64, f64)> {
    let step = |len: usize, i: usize| (len as f64 - 1.0) * i as f64 / (n as f64 - 1.0);
    (0..n).flat_map(|j| (0..n).map(move |i| (step(width, i), step(height, j)))).collect()
}

pub fn corner_errors(est: &Transform, gt: &Transform, frame: (usize, usize), grid: usize) -> Result<AlignmentErrors> {
    if grid < 2 {
        return Err(Error::invalid(format!("control grid {grid} < 2")));
    }
    for t in [est, gt] {
        let det = t.det();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Singular(det));
        }
    }
    let errors = control_points(frame.0, frame.1, grid)
        .into_iter()
        .map(|(x, y)| match (est.apply(x, y), gt.apply(x, y)) {
            (Some(p), Some(q)) => (p.0 - q.0).hypot(p.1 - q.1),
            _ => f64::INFINITY,
        })
        .collect();
    AlignmentErrors::from_errors(errors)
}

/// `100 * mean_tau (fraction of pairs with MAE <= tau)` over
/// `tau = 1..=max_threshold` pixels.
pub fn mauc(maes: &[f64], max_threshold: usize) -> Result<f64> {
    if maes.is_empty() || max_threshold == 0 {
        return Err(Error::invalid("mAUC needs pairs and at least one threshold"));
    }
    let n = maes.len() as f64;
    let total: f64 = (1..=max_threshold)
        .map(|tau| maes.iter().filter(|&&m| m <= tau as f64).count() as f64 / n)
        .sum();
    Ok(100.0 * total / max_threshold as f64)
}

/// Metrics of one pair with and without mutual guidance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    pub psnr_baseline: f64,
    pub psnr_adapted: f64,
    pub ssim_baseline: f64,
    pub ssim_adapted: f64,
    pub mee_baseline: f64,
    pub mae_baseline: f64,
    pub mee: f64,
    pub mae: f64,
    pub acceptable_baseline: bool,
    pub acceptable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub mean_psnr_baseline: f64,
    pub mean_psnr_adapted: f64,
    pub mean_ssim_baseline: f64,
    pub mean_ssim_adapted: f64,
    pub median_delta_psnr: f64,
    pub median_delta_mae: f64,
    pub median_mae_reduction: f64,
    /// Corpus acceptance-curve reading over 1..=25 px.
    pub mauc_baseline: f64,
    pub mauc_adapted: f64,
    pub acceptable_baseline: usize,
    pub acceptable_adapted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PairRow>,
    pub summary: Summary,
    /// Pair ids that were expected but had no result.
    pub missing: Vec<String>,
}

pub const MAUC_MAX_THRESHOLD: usize = 25;

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

impl EvalReport {
    pub fn new(rows: Vec<PairRow>, missing: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("no pair results to evaluate"));
        }
        let maes_b: Vec<f64> = rows.iter().map(|r| r.mae_baseline).collect();
        let maes_a: Vec<f64> = rows.iter().map(|r| r.mae).collect();
        let d_psnr: Vec<f64> = rows.iter().map(|r| r.psnr_adapted - r.psnr_baseline).collect();
        let d_mae: Vec<f64> = rows.iter().map(|r| r.mae - r.mae_baseline).collect();
        let reduction: Vec<f64> = rows
            .iter()
            .map(|r| if r.mae_baseline > 0.0 { (r.mae_baseline - r.mae) / r.mae_baseline } else { 0.0 })
            .collect();
        let summary = Summary {
            pairs: rows.len(),
            mean_psnr_baseline: mean(rows.iter().map(|r| r.psnr_baseline)),
            mean_psnr_adapted: mean(rows.iter().map(|r| r.psnr_adapted)),
            mean_ssim_baseline: mean(rows.iter().map(|r| r.ssim_baseline)),
            mean_ssim_adapted: mean(rows.iter().map(|r| r.ssim_adapted)),
            median_delta_psnr: median(&d_psnr),
            median_delta_mae: median(&d_mae),
            median_mae_reduction: median(&reduction),
            mauc_baseline: mauc(&maes_b, MAUC_MAX_THRESHOLD)?,
            mauc_adapted: mauc(&maes_a, MAUC_MAX_THRESHOLD)?,
            acceptable_baseline: rows.iter().filter(|r| r.acceptable_baseline).count(),
            acceptable_adapted: rows.iter().filter(|r| r.acceptable).count(),
        };
        Ok(EvalReport { rows, summary, missing })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noisy(seed: u64, base: &Image, sigma: f64) -> Image {
        let n = rng::normals(&mut rng::stream(seed, "noise"), base.data().len());
        let mut out = base.clone();
        for (v, e) in out.data_mut().iter_mut().zip(n) {
            *v += sigma * e;
        }
        out.clamp01()
    }

    fn scene() -> Image {
        crate::synth::gen_scene(2, crate::synth::SceneKind::Mixed, 3, 32, 32)
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = Image::from_fn(1, 4, 4, |_, _, _| 0.5);
        let b = Image::from_fn(1, 4, 4, |_, _, _| 0.6);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_nested_loop_oracle_with_mask() {
        let a = scene();
        let b = noisy(4, &a, 0.05);
        let flags: Vec<bool> = (0..32 * 32).map(|i| (i * 7) % 5 != 0).collect();
        let m = ValidMask::new(32, 32, flags.clone()).unwrap();
        let (mut acc, mut n) = (0.0, 0.0);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if flags[y * 32 + x] {
                        acc += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                        n += 1.0;
                    }
                }
            }
        }
        let want = 10.0 * (n / acc).log10();
        assert!((psnr(&a, &b, Some(&m)).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&a, &b, Some(&ValidMask::new(32, 32, vec![false; 1024]).unwrap())).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = scene();
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let (p, q) = (0.3, 0.7);
        let ca = Image::from_fn(1, 16, 16, |_, _, _| p);
        let cb = Image::from_fn(1, 16, 16, |_, _, _| q);
        let want = (2.0 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1);
        assert!((ssim(&ca, &cb, None).unwrap() - want).abs() < 1e-12);
        let tiny = Image::from_fn(1, 5, 5, |_, y, x| (x + y) as f64 / 10.0);
        assert!((ssim(&tiny, &tiny, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = scene();
        let s1 = ssim(&a, &noisy(1, &a, 0.02), None).unwrap();
        let s2 = ssim(&a, &noisy(1, &a, 0.1), None).unwrap();
        assert!(s1 > s2);
    }

    #[test]
    fn corner_error_cases() {
        let id = Transform::identity();
        let e = corner_errors(&id, &id, (64, 64), 5).unwrap();
        assert!(e.errors.iter().all(|&v| v == 0.0));
        let e = corner_errors(&Transform::translation(3.0, 4.0), &id, (64, 64), 5).unwrap();
        assert!(e.errors.iter().all(|&v| (v - 5.0).abs() < 1e-12));
        assert_eq!(e.errors.len(), 25);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(AlignmentErrors::from_errors(vec![3.0, 1.0, 2.0]).unwrap().mee, 2.0);
        assert_eq!(AlignmentErrors::from_errors(vec![4.0, 1.0, 2.0, 3.0]).unwrap().mee, 2.5);
    }

    #[test]
    fn acceptable_boundaries() {
        assert!(acceptable(49.9, 19.9));
        assert!(!acceptable(50.0, 19.9));
        assert!(!acceptable(49.9, 20.0));
        assert!(!acceptable(50.0, 20.0));
    }

    #[test]
    fn mauc_cases() {
        assert_eq!(mauc(&[0.0, 0.0], 25).unwrap(), 100.0);
        assert_eq!(mauc(&[30.0, 26.0], 25).unwrap(), 0.0);
        assert_eq!(mauc(&[0.0, 100.0], 25).unwrap(), 50.0);
        assert!(mauc(&[], 25).is_err());
    }

    #[test]
    fn report_deltas_match_rows() {
        let row = |id: &str, pb: f64, pa: f64, mb: f64, ma: f64| PairRow {
            pair_id: id.into(),
            psnr_baseline: pb,
            psnr_adapted: pa,
            ssim_baseline: 0.5,
            ssim_adapted: 0.6,
            mee_baseline: mb / 2.0,
            mae_baseline: mb,
            mee: ma / 2.0,
            mae: ma,
            acceptable_baseline: acceptable(mb, mb / 2.0),
            acceptable: acceptable(ma, ma / 2.0),
        };
        let r = EvalReport::new(vec![row("a", 20.0, 21.0, 4.0, 2.0), row("b", 22.0, 22.5, 8.0, 8.0), row("c", 18.0, 17.0, 3.0, 6.0)], vec![])
            .unwrap();
        assert_eq!(r.summary.median_delta_psnr, 0.5);
        assert_eq!(r.summary.median_delta_mae, 0.0);
        assert!(EvalReport::new(vec![], vec![]).is_err());
        assert_eq!(r.to_csv().unwrap().lines().count(), 4);
    }
}
