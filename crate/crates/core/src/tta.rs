//! Test-time mutual adaptation.
//!
//! Each iteration estimates `T` from matcher features, warps the LQ image
//! into the HQ frame, restores it with adapter-modulated restorer features,
//! scores the result with the off-diagonal and pixel losses and takes one
//! AdamW step on the adapter. With feedback on, the restored image (warped
//! back to the LQ frame) becomes the matcher's input for the next iteration.
//! The matcher and restorer weights never change.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterState, DOWN, UP};
use crate::error::{Error, Result};
use crate::geometry::{estimate_transform, warp_features, warp_image, CostVolume, EstimateConfig, RansacConfig, Transform, ValidMask};
use crate::graph::sample::SamplePlan;
use crate::graph::{Graph, NodeId};
use crate::image::{FeatureMap, Image};
use crate::nn;
use crate::optim::{AdamWConfig, OptimState};
use crate::prior::PriorBackbone;
use crate::restorer::Restorer;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda_p: f64,
    pub eps_norm: f64,
    /// Average the off-diagonal mass over its `n (n - 1)` entries instead of
    /// summing it, so the loss scale does not follow the number of valid
    /// cells.
    pub ld_per_entry: bool,
    /// Iteration cap.
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    /// Learning rate at iteration 0; halved every `lr_halve_every` iterations.
    pub lr: f64,
    pub lr_halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub rank: usize,
    pub feedback: bool,
    /// Seeds the adapter's down projection.
    pub seed: u64,
    pub ransac: RansacConfig,
    /// Instrumentation: from this (1-based) iteration on, gradients are
    /// scaled to zero before the update.
    pub zero_grad_from: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_p: 1.0,
            eps_norm: 1e-8,
            ld_per_entry: true,
            max_iters: 100,
            plateau_window: 5,
            plateau_delta: 1e-3,
            lr: 1e-3,
            lr_halve_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            rank: 4,
            feedback: true,
            seed: 0,
            ransac: RansacConfig::default(),
            zero_grad_from: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.plateau_delta > 0.0 && self.plateau_delta < 1.0) {
            return bad("plateau_delta must lie in (0, 1)");
        }
        if self.plateau_window < 1 || self.lr_halve_every < 1 {
            return bad("plateau_window and lr_halve_every must be at least 1");
        }
        if !(self.lambda_p >= 0.0) || !(self.lr > 0.0) || !(self.eps_norm > 0.0) {
            return bad("lambda_p must be >= 0, lr and eps_norm > 0");
        }
        Ok(())
    }

    /// `lr_0 * 2^-(i / halve_every)` for 0-based iteration `i`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * 0.5f64.powi((iteration / self.lr_halve_every) as i32)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay_without_grad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based.
    pub iteration: usize,
    pub l_d: f64,
    pub l_p: f64,
    pub l_total: f64,
    pub lr: f64,
    pub matches: usize,
    pub inliers: usize,
    pub fallback: Option<String>,
    /// Names in the iteration's gradient map, sorted.
    pub gradient_params: Vec<String>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l_d(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.l_d).collect()
    }

    pub fn l_total(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.l_total).collect()
    }

    /// The trace without wall-clock times, for determinism comparisons.
    pub fn without_timing(&self) -> LossTrace {
        LossTrace { entries: self.entries.iter().map(|e| TraceEntry { wall_ms: 0.0, ..e.clone() }).collect() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "l_d", "l_p", "l_total", "lr", "matches", "inliers", "fallback", "gradient_params", "wall_ms"])?;
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                format!("{:e}", e.l_d),
                format!("{:e}", e.l_p),
                format!("{:e}", e.l_total),
                format!("{:e}", e.lr),
                e.matches.to_string(),
                e.inliers.to_string(),
                e.fallback.clone().unwrap_or_default(),
                e.gradient_params.join(";"),
                format!("{:.3}", e.wall_ms),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    Cap,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Plateau => "plateau",
            StopReason::Cap => "cap",
        }
    }
}

/// Transform and restored image of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub transform: Transform,
    pub restored: Image,
    pub mask: ValidMask,
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    /// Outputs of the last forward pass.
    pub transform: Transform,
    pub restored: Image,
    pub mask: ValidMask,
    pub adapter: AdapterState,
    pub trace: LossTrace,
    pub stop: StopReason,
    /// Outputs of the first forward pass, taken with the adapter at init.
    pub first: Snapshot,
}

impl AdaptResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// `sum |C - Diag(C)|` of a square cost volume.
pub fn off_diagonal_loss(c: &CostVolume) -> Result<f64> {
    if !c.is_square() {
        return Err(Error::shape("off_diagonal_loss", format!("{}x{} is not square", c.rows(), c.cols())));
    }
    let mut s = 0.0;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            if i != j {
                s += c.get(i, j).abs();
            }
        }
    }
    Ok(s)
}

/// Mean squared difference over masked pixels and all channels. An empty
/// mask yields 0.
pub fn pixel_loss(eq: &Image, hq: &Image, mask: &ValidMask) -> Result<f64> {
    let (c, h, w) = eq.dims();
    if hq.dims() != (c, h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape("pixel_loss", format!("{:?} vs {:?}, mask {}x{}", eq.dims(), hq.dims(), mask.height(), mask.width())));
    }
    if mask.count() == 0 {
        log::warn!("pixel loss over an empty mask is defined as 0");
        return Ok(0.0);
    }
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let d = eq.get(ch, y, x) - hq.get(ch, y, x);
                    s += d * d;
                }
            }
        }
    }
    Ok(s / (mask.count() * c) as f64)
}

pub fn total_loss(l_d: f64, l_p: f64, lambda_p: f64) -> f64 {
    l_d + lambda_p * l_p
}

/// True when the best value of the last `window` entries improves on the best
/// value before them by less than `delta * (prior_best + 1e-12)`. Needs more
/// than `window` entries.
pub fn plateau_check(values: &[f64], window: usize, delta: f64) -> bool {
    if window == 0 || values.len() <= window {
        return false;
    }
    let (prior, recent) = values.split_at(values.len() - window);
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let (prior_best, recent_best) = (best(prior), best(recent));
    prior_best - recent_best < delta * (prior_best + 1e-12)
}

/// Everything the loss graph needs from one iteration's geometry step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub warped_lq: Image,
    pub hq: Image,
    /// Source features warped to the HQ cell grid.
    pub z_src_warped: FeatureMap,
    pub z_hq: FeatureMap,
    /// HQ-frame pixels covered by the warped LQ image.
    pub mask: ValidMask,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub restored: NodeId,
    pub l_d: NodeId,
    pub l_p: NodeId,
    pub total: NodeId,
}

/// Builds `L_D + lambda_p L_P` with `psi = (down, up)` given as nodes. With
/// `ld_per_entry`, `L_D` is divided by the number of off-diagonal entries.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<F: Real>(
    g: &mut Graph<F>,
    inputs: &StepInputs,
    matcher: &PriorBackbone,
    restorer: &Restorer,
    adapter: &AdapterState,
    psi: (NodeId, NodeId),
    lambda_p: f64,
    eps_norm: f64,
    ld_per_entry: bool,
) -> Result<LossNodes> {
    let (c, h, w) = inputs.hq.dims();
    let grid = restorer.grid(h, w);
    let wlq = g.constant(inputs.warped_lq.to_tensor());
    let hq = g.constant(inputs.hq.to_tensor());
    let zs = g.constant(inputs.z_src_warped.to_tensor());
    let zh = g.constant(inputs.z_hq.to_tensor());
    let inj_lq = adapter.apply_with(g, zs, grid, psi.0, psi.1)?;
    let inj_hq = adapter.apply_with(g, zh, grid, psi.0, psi.1)?;
    let restored = restorer.restore_node(g, wlq, hq, Some(inj_lq), Some(inj_hq))?;

    // cost volume over the cells touched by the valid region
    let z_eq = matcher.features(g, restored)?;
    let cells = inputs.mask.cells_touched(matcher.stride());
    let (a, b) = (nn::cells(g, z_eq)?, nn::cells(g, zh)?);
    let (a, b) = (g.select_cols(a, &cells)?, g.select_cols(b, &cells)?);
    let (a, b) = (g.l2_normalize_cols(a)?, g.l2_normalize_cols(b)?);
    let at = g.transpose(a)?;
    let cv = g.matmul(at, b)?;
    let cv = g.minmax_norm(cv, eps_norm);
    let mut l_d = g.off_diag_abs_sum(cv)?;
    if ld_per_entry {
        let n = cells.len() as f64;
        l_d = g.scale(l_d, 1.0 / (n * (n - 1.0)).max(1.0));
    }

    let m = g.constant(inputs.mask.to_tensor(c));
    let d = g.sub(restored, hq)?;
    let d = g.mul(d, m)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    let l_p = g.scale(s, 1.0 / (inputs.mask.count().max(1) * c) as f64);
    let weighted = g.scale(l_p, lambda_p);
    let total = g.add(l_d, weighted)?;
    Ok(LossNodes { restored, l_d, l_p, total })
}

/// Bilinear resize of an image (used when LQ and HQ extents differ).
pub fn resize_image(img: &Image, height: usize, width: usize) -> Result<Image> {
    let (c, h, w) = img.dims();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let plan = SamplePlan::resize(h, w, height, width);
    Image::new(c, height, width, plan.apply(img.data(), c))
}

fn estimate(z_src: &FeatureMap, z_hq: &FeatureMap, matcher: &PriorBackbone, ransac: &RansacConfig) -> Result<crate::geometry::Estimate> {
    estimate_transform(z_src, z_hq, &EstimateConfig { stride: matcher.stride(), ransac: ransac.clone() })
}

/// Geometry step shared by the baseline and the loop.
fn prepare<F: Real>(
    matcher_input: &Image,
    lq: &Image,
    hq: &Image,
    z_hq: &FeatureMap,
    matcher: &PriorBackbone,
    ransac: &RansacConfig,
) -> Result<(crate::geometry::Estimate, StepInputs)> {
    let z_src = matcher.extract_prior_as::<F>(matcher_input)?;
    let est = estimate(&z_src, z_hq, matcher, ransac)?;
    let (_, h, w) = hq.dims();
    let (warped_lq, mask) = warp_image(lq, &est.transform, (h, w))?;
    let (z_src_warped, _) = warp_features(&z_src, &est.transform, matcher.stride(), (z_hq.height(), z_hq.width()))?;
    let inputs = StepInputs { warped_lq, hq: hq.clone(), z_src_warped, z_hq: z_hq.clone(), mask };
    Ok((est, inputs))
}

/// The adapter-free pipeline at precision `F`: features of the raw LQ image,
/// one transform estimate, one restore without injections.
pub fn baseline_as<F: Real>(
    lq: &Image,
    hq: &Image,
    matcher: &PriorBackbone,
    restorer: &Restorer,
    ransac: &RansacConfig,
) -> Result<Snapshot> {
    let (_, h, w) = hq.dims();
    let lq = resize_image(lq, h, w)?;
    let z_hq = matcher.extract_prior_as::<F>(hq)?;
    let (est, inputs) = prepare::<F>(&lq, &lq, hq, &z_hq, matcher, ransac)?;
    let mut g = Graph::<F>::new();
    let x = g.constant(inputs.warped_lq.to_tensor());
    let r = g.constant(hq.to_tensor());
    let y = restorer.restore_node(&mut g, x, r, None, None)?;
    Ok(Snapshot { transform: est.transform, restored: Image::from_tensor(g.value(y))?, mask: inputs.mask })
}

pub fn baseline(lq: &Image, hq: &Image, matcher: &PriorBackbone, restorer: &Restorer, ransac: &RansacConfig) -> Result<Snapshot> {
    baseline_as::<f32>(lq, hq, matcher, restorer, ransac)
}

/// Restored image warped back to the LQ frame where every bilinear tap lies
/// inside the restored region, original LQ elsewhere.
pub fn feedback_composite(lq: &Image, restored: &Image, mask: &ValidMask, t: &Transform) -> Result<Image> {
    let (c, h, w) = lq.dims();
    let inv = t.inverse()?;
    let (back, covered) = warp_image(restored, &inv, (h, w))?;
    let m = Image::new(1, mask.height(), mask.width(), mask.data().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
    let (m_back, _) = warp_image(&m, &inv, (h, w))?;
    Ok(Image::from_fn(c, h, w, |ch, y, x| {
        if covered.get(y, x) && m_back.get(0, y, x) == 1.0 {
            back.get(ch, y, x)
        } else {
            lq.get(ch, y, x)
        }
    }))
}

fn dump(i: usize, inputs: &StepInputs, t: &Transform, l_d: f64, l_p: f64, lr: f64, adapter: &AdapterState) -> String {
    let norm = |name: &str| adapter.params.value(name).map(|v| v.data().iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(f64::NAN);
    format!(
        "iteration {i}: L_D={l_d} L_P={l_p} lr={lr} T={:?} mask={} |down|={} |up|={}",
        t.to_array(),
        inputs.mask.count(),
        norm(DOWN),
        norm(UP)
    )
}

/// Runs the loop at precision `F`.
pub fn adapt_as<F: Real>(
    lq: &Image,
    hq: &Image,
    matcher: &PriorBackbone,
    restorer: &Restorer,
    config: &AdaptConfig,
) -> Result<AdaptResult> {
    config.validate()?;
    if lq.channels() != hq.channels() {
        return Err(Error::shape("adapt", format!("{} vs {} channels", lq.channels(), hq.channels())));
    }
    let frozen = (matcher.params().digest(), restorer.params().digest());
    let (_, h, w) = hq.dims();
    let lq = resize_image(lq, h, w)?;
    let z_hq = matcher.extract_prior_as::<F>(hq)?;
    let mut adapter = init_adapter(matcher.channels(), restorer.channels(), config.rank, config.seed)?;
    let mut opt = OptimState::new(config.adamw())?;
    let psi_names = [DOWN.to_string(), UP.to_string()];

    let mut trace = LossTrace::default();
    let mut matcher_input = lq.clone();
    let mut first = None;
    let mut last = None;
    let mut stop = StopReason::Cap;
    for i in 0..config.max_iters {
        let started = Instant::now();
        let (est, inputs) = prepare::<F>(&matcher_input, &lq, hq, &z_hq, matcher, &config.ransac)?;
        let mut g = Graph::<F>::new();
        let psi = (g.param(&adapter.params, DOWN)?, g.param(&adapter.params, UP)?);
        let nodes = loss_graph(&mut g, &inputs, matcher, restorer, &adapter, psi, config.lambda_p, config.eps_norm, config.ld_per_entry)?;
        let scalar = |id: NodeId| g.value(id).data()[0].to_f64().unwrap_or(f64::NAN);
        let (l_d, l_p, l_total) = (scalar(nodes.l_d), scalar(nodes.l_p), scalar(nodes.total));
        let lr = config.lr_at(i);
        if !(l_d.is_finite() && l_p.is_finite() && l_total.is_finite()) {
            return Err(Error::NonFinite { iteration: i + 1, dump: dump(i + 1, &inputs, &est.transform, l_d, l_p, lr, &adapter) });
        }
        let restored = Image::from_tensor(g.value(nodes.restored))?;
        let mut grads = g.backward(nodes.total)?;
        let mut names: Vec<String> = grads.param_names().iter().map(|s| s.to_string()).collect();
        names.sort();
        if names != psi_names {
            return Err(Error::invalid(format!("gradient map holds {names:?}, expected only the adapter")));
        }
        if config.zero_grad_from.is_some_and(|k| i + 1 >= k) {
            grads.scale(0.0);
        }
        opt.set_lr(lr);
        opt.step(&mut adapter.params, &grads)?;

        let snapshot = Snapshot { transform: est.transform, restored, mask: inputs.mask.clone() };
        if first.is_none() {
            first = Some(snapshot.clone());
        }
        trace.entries.push(TraceEntry {
            iteration: i + 1,
            l_d,
            l_p,
            l_total,
            lr,
            matches: est.matches,
            inliers: est.inliers,
            fallback: est.fallback.clone(),
            gradient_params: names,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        let plateau = plateau_check(&trace.l_d(), config.plateau_window, config.plateau_delta);
        if config.feedback && !plateau && i + 1 < config.max_iters {
            matcher_input = feedback_composite(&lq, &snapshot.restored, &snapshot.mask, &snapshot.transform)?;
        }
        last = Some(snapshot);
        if plateau {
            stop = StopReason::Plateau;
            break;
        }
    }
    if (matcher.params().digest(), restorer.params().digest()) != frozen {
        return Err(Error::invalid("frozen weights changed during adaptation"));
    }
    let last = last.expect("max_iters >= 1");
    Ok(AdaptResult {
        transform: last.transform,
        restored: last.restored,
        mask: last.mask,
        adapter,
        trace,
        stop,
        first: first.expect("max_iters >= 1"),
    })
}

/// Runs the loop at the runtime precision (`f32`).
pub fn adapt(lq: &Image, hq: &Image, matcher: &PriorBackbone, restorer: &Restorer, config: &AdaptConfig) -> Result<AdaptResult> {
    adapt_as::<f32>(lq, hq, matcher, restorer, config)
}

/// Scalar tensor helper for callers building their own `psi` leaves.
pub fn psi_tensors(adapter: &AdapterState) -> Result<(Tensor<f64>, Tensor<f64>)> {
    Ok((adapter.params.value(DOWN)?.clone(), adapter.params.value(UP)?.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cost_volume, minmax_norm};
    use crate::prior::{BackboneConfig, BackboneKind};
    use crate::restorer::RestorerConfig;
    use crate::synth::{gen_scene, SceneKind};

    fn cv(rows: usize, data: &[f64]) -> CostVolume {
        CostVolume::from_data(rows, data.len() / rows, data.to_vec()).unwrap()
    }

    #[test]
    fn off_diagonal_cases() {
        assert_eq!(off_diagonal_loss(&cv(3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap(), 0.0);
        let raw = cv(2, &[1.0, 0.5, 0.2, 1.0]);
        let n = minmax_norm(&raw, 1e-12);
        assert!((off_diagonal_loss(&n).unwrap() - 0.375).abs() < 1e-9);
        // the loop's eps shifts the example by its closed form
        let n = minmax_norm(&raw, 1e-8);
        assert!((off_diagonal_loss(&n).unwrap() - 0.3 / (0.8 + 1e-8)).abs() < 1e-15);
        let flat = minmax_norm(&cv(2, &[0.3; 4]), 1e-8);
        assert_eq!(off_diagonal_loss(&flat).unwrap(), 0.0);
        assert!(off_diagonal_loss(&cv(2, &[1.0; 6])).is_err());
    }

    fn ramp(h: usize, w: usize, k: f64) -> Image {
        Image::from_fn(3, h, w, |c, y, x| ((c + y * w + x) as f64 * k).fract())
    }

    #[test]
    fn pixel_loss_cases() {
        let a = ramp(4, 5, 0.037);
        let full = ValidMask::full(4, 5);
        assert_eq!(pixel_loss(&a, &a, &full).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.1);
        assert!((pixel_loss(&shifted, &a, &full).unwrap() - 0.01).abs() < 1e-12);
        let mut data = vec![true; 20];
        data[7] = false;
        let mask = ValidMask::new(4, 5, data).unwrap();
        let mut b = a.clone();
        b.set(1, 1, 2, 0.9);
        assert_eq!(pixel_loss(&b, &a, &mask).unwrap(), 0.0);
        assert_eq!(pixel_loss(&b, &a, &ValidMask::new(4, 5, vec![false; 20]).unwrap()).unwrap(), 0.0);
        assert!(pixel_loss(&a, &ramp(4, 4, 0.1), &full).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.375, 0.01, 0.0), 0.375);
        assert!((total_loss(0.375, 0.01, 0.1) - 0.376).abs() < 1e-15);
        assert_eq!(total_loss(0.2, 0.2, 1.0), 0.4);
    }

    #[test]
    fn plateau_cases() {
        let decreasing: Vec<f64> = (0..12).map(|i| 10.0 - i as f64).collect();
        assert!(!plateau_check(&decreasing, 5, 1e-3));
        assert!(plateau_check(&[2.0; 6], 5, 1e-3));
        assert!(!plateau_check(&[2.0; 5], 5, 1e-3));
        // a relative decrease of delta/2 per step stalls within W steps for W <= 2
        let delta = 1e-3;
        let trace: Vec<f64> = (0..10).map(|i| (1.0f64 - delta / 2.0).powi(i)).collect();
        for w in [1, 2] {
            assert!(plateau_check(&trace[..w + 1], w, delta));
        }
    }

    #[test]
    fn lr_halves_every_ten_iterations() {
        let c = AdaptConfig { lr: 0.008, ..Default::default() };
        assert_eq!([c.lr_at(0), c.lr_at(9), c.lr_at(10), c.lr_at(25)], [0.008, 0.008, 0.004, 0.002]);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig { plateau_delta: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig { lambda_p: -1.0, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig::default().validate().is_ok());
    }

    fn toy_nets(kind: BackboneKind) -> (PriorBackbone, Restorer) {
        let m = PriorBackbone::init(BackboneConfig { kind, ..Default::default() }, 1).unwrap().freeze();
        let mut r = Restorer::init(RestorerConfig::default(), 2).unwrap();
        // a nonzero last layer so injections reach the output
        let mut rng = crate::rng::stream(2, "dec2");
        for v in r.params_mut().trainable_mut("restorer.dec2.w").unwrap().data_mut() {
            *v = 0.05 * crate::rng::normals(&mut rng, 1)[0];
        }
        (m, r.freeze())
    }

    fn toy_pair() -> (Image, Image) {
        let clean = gen_scene(11, SceneKind::Mixed, 3, 16, 16);
        let t = Transform::translation(1.0, -1.0);
        let (hq, _) = warp_image(&clean, &t, (16, 16)).unwrap();
        let lq = crate::synth::degrade(&clean, &crate::synth::Degradation { noise_sigma: 0.1, blur_k: 1, downsample: 1 }, 3).unwrap();
        (lq, hq)
    }

    #[test]
    fn graph_loss_matches_reference_formulas() {
        let (m, r) = toy_nets(BackboneKind::PatchToken);
        let (lq, hq) = toy_pair();
        let z_hq = m.extract_prior(&hq).unwrap();
        let (_, inputs) = prepare::<f64>(&lq, &lq, &hq, &z_hq, &m, &RansacConfig::default()).unwrap();
        let a = init_adapter(16, 16, 4, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let psi = (g.param(&a.params, DOWN).unwrap(), g.param(&a.params, UP).unwrap());
        let nodes = loss_graph(&mut g, &inputs, &m, &r, &a, psi, 0.5, 1e-8, false).unwrap();
        let eq = Image::from_tensor(g.value(nodes.restored)).unwrap();

        let cells = inputs.mask.cells_touched(m.stride());
        let z_eq = m.extract_prior(&eq).unwrap();
        let pick = |z: &FeatureMap| {
            let c = z.channels();
            let n = z.height() * z.width();
            let data = (0..c).flat_map(|ch| cells.iter().map(move |&i| (ch, i))).map(|(ch, i)| z.data()[ch * n + i]).collect();
            FeatureMap::new(c, 1, cells.len(), data).unwrap()
        };
        let c = minmax_norm(&cost_volume(&pick(&z_eq), &pick(&z_hq)).unwrap(), 1e-8);
        let l_d = off_diagonal_loss(&c).unwrap();
        let l_p = pixel_loss(&eq, &hq, &inputs.mask).unwrap();
        assert!((g.value(nodes.l_d).data()[0] - l_d).abs() < 1e-9 * l_d.max(1.0));
        assert!((g.value(nodes.l_p).data()[0] - l_p).abs() < 1e-12);
        assert!((g.value(nodes.total).data()[0] - total_loss(l_d, l_p, 0.5)).abs() < 1e-9 * l_d.max(1.0));
    }

    #[test]
    fn single_iteration_is_the_adapter_free_pipeline() {
        let (m, r) = toy_nets(BackboneKind::PatchToken);
        let (lq, hq) = toy_pair();
        let cfg = AdaptConfig { max_iters: 1, ..Default::default() };
        let res = adapt(&lq, &hq, &m, &r, &cfg).unwrap();
        let base = baseline(&lq, &hq, &m, &r, &cfg.ransac).unwrap();
        assert_eq!(res.restored, base.restored);
        assert_eq!(res.transform, base.transform);
        assert_eq!(res.first, base);
        assert_eq!(res.stop, StopReason::Cap);
    }

    #[test]
    fn runs_are_deterministic_and_leave_backbones_untouched() {
        let (m, r) = toy_nets(BackboneKind::Diffusion);
        let (lq, hq) = toy_pair();
        let before = (m.params().digest(), r.params().digest());
        let cfg = AdaptConfig { max_iters: 8, lr: 1e-2, ..Default::default() };
        let a = adapt(&lq, &hq, &m, &r, &cfg).unwrap();
        let b = adapt(&lq, &hq, &m, &r, &cfg).unwrap();
        assert_eq!(a.trace.without_timing(), b.trace.without_timing());
        assert_eq!(a.restored, b.restored);
        assert_eq!(a.adapter.params.digest(), b.adapter.params.digest());
        assert_eq!(before, (m.params().digest(), r.params().digest()));
        assert!(a.adapter.params.value(UP).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeroed_gradients_plateau_within_the_window() {
        let (m, r) = toy_nets(BackboneKind::PatchToken);
        let (lq, hq) = toy_pair();
        let k = 3;
        let cfg = AdaptConfig { zero_grad_from: Some(k), feedback: false, weight_decay: 0.0, ..Default::default() };
        let res = adapt(&lq, &hq, &m, &r, &cfg).unwrap();
        assert_eq!(res.stop, StopReason::Plateau);
        assert!(res.iterations() <= k + cfg.plateau_window);
    }

    #[test]
    fn feedback_composite_keeps_lq_outside_the_restored_region() {
        let lq = ramp(12, 12, 0.013);
        let restored = Image::from_fn(3, 12, 12, |_, _, _| 0.5);
        let t = Transform::translation(3.0, 0.0);
        let (_, mask) = warp_image(&lq, &t, (12, 12)).unwrap();
        let comp = feedback_composite(&lq, &restored, &mask, &t).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                // restored pixel x' = x + 3 is valid for x' >= 3, so every LQ pixel maps inside
                let want = if x + 3 < 12 { 0.5 } else { lq.get(0, y, x) };
                assert_eq!(comp.get(0, y, x), want, "({x},{y})");
            }
        }
    }
}
