//! Desk-scale pretraining of the matcher backbones.
//!
//! The trunk (or the patch projection) is trained with a cell-level InfoNCE
//! objective between a clean crop and a re-photographed copy of it: a mild
//! random homography plus an illumination change. Positives are the cells
//! nearest to each mapped cell center. The diffusion noise predictor is then
//! fitted on the frozen trunk's features.

use rand::Rng;

use super::{BackboneConfig, BackboneKind, PriorBackbone, STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{warp_image, Transform};
use crate::graph::Graph;
use crate::image::Image;
use crate::nn;
use crate::optim::{AdamWConfig, OptimState};
use crate::rng;
use crate::synth::{illuminate, Illumination, Viewpoint};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatcherTraining {
    pub steps: usize,
    pub denoiser_steps: usize,
    pub lr: f64,
    /// Square crop side; a multiple of the stride.
    pub crop: usize,
    pub temperature: f64,
    pub max_rotation_deg: f64,
    /// Required held-out correspondence accuracy at a `gate_shift_px` shift.
    pub min_accuracy: f64,
    pub gate_shift_px: usize,
}

impl Default for MatcherTraining {
    fn default() -> Self {
        MatcherTraining {
            steps: 400,
            denoiser_steps: 150,
            lr: 2e-3,
            crop: 40,
            temperature: 0.1,
            max_rotation_deg: 15.0,
            min_accuracy: 0.5,
            gate_shift_px: 4,
        }
    }
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Image {
    Image::from_fn(img.channels(), size, size, |c, y, x| img.get(c, y0 + y, x0 + x))
}

/// A clean crop, its re-photographed counterpart and, for every cell of the
/// first, the index of the positive cell in the second.
struct View {
    a: Image,
    b: Image,
    rows: Vec<usize>,
    targets: Vec<usize>,
}

fn sample_view(scene: &Image, cfg: &MatcherTraining, rng: &mut impl Rng) -> Result<View> {
    let (_, h, w) = scene.dims();
    let size = cfg.crop;
    if size > h || size > w || !size.is_multiple_of(STRIDE) {
        return Err(Error::invalid(format!("crop {size} does not fit {h}x{w} scenes at stride {STRIDE}")));
    }
    let (y0, x0) = (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
    let vp = Viewpoint {
        rotation_deg: rng::uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg),
        scale: rng::uniform(rng, 0.9, 1.1),
        tx: rng::uniform(rng, -3.0, 3.0),
        ty: rng::uniform(rng, -3.0, 3.0),
        px: 0.0,
        py: 0.0,
    };
    // transform about the crop center, expressed in scene coordinates
    let local = vp.transform(size, size)?;
    let t = Transform::translation(x0 as f64, y0 as f64)
        .compose(&local)?
        .compose(&Transform::translation(-(x0 as f64), -(y0 as f64)))?;
    let (warped, mask) = warp_image(scene, &t, (h, w))?;
    let ill = Illumination { gain: rng::uniform(rng, 0.75, 1.25), bias: rng::uniform(rng, -0.1, 0.1) };
    let a = crop(scene, y0, x0, size);
    let b = illuminate(&crop(&warped, y0, x0, size), &ill);
    let g = size / STRIDE;
    let center = |u: usize| (STRIDE * u) as f64 + (STRIDE as f64 - 1.0) / 2.0;
    let (mut rows, mut targets) = (vec![], vec![]);
    for v in 0..g {
        for u in 0..g {
            let Some((x, y)) = local.apply(center(u), center(v)) else { continue };
            let cell = |p: f64| ((p - (STRIDE as f64 - 1.0) / 2.0) / STRIDE as f64).round();
            let (tu, tv) = (cell(x), cell(y));
            if tu < 0.0 || tv < 0.0 || tu >= g as f64 || tv >= g as f64 {
                continue;
            }
            let (px, py) = (x.round() as usize, y.round() as usize);
            if px >= size || py >= size || !mask.get(y0 + py, x0 + px) {
                continue;
            }
            rows.push(v * g + u);
            targets.push(tv as usize * g + tu as usize);
        }
    }
    Ok(View { a, b, rows, targets })
}

fn contrastive_step(
    backbone: &mut PriorBackbone,
    opt: &mut OptimState,
    view: &View,
    temperature: f64,
) -> Result<f64> {
    if view.rows.is_empty() {
        return Ok(f64::NAN);
    }
    let mut g = Graph::<f32>::new();
    let xa = g.constant(view.a.to_tensor());
    let xb = g.constant(view.b.to_tensor());
    let (fa, fb) = match backbone.config.kind {
        BackboneKind::Diffusion => (backbone.trunk(&mut g, xa)?[2], backbone.trunk(&mut g, xb)?[2]),
        _ => (backbone.features(&mut g, xa)?, backbone.features(&mut g, xb)?),
    };
    let cv = nn::cosine_volume(&mut g, fa, fb)?;
    let logits = g.scale(cv, 1.0 / temperature);
    let n = g.shape(logits)[1];
    let rows: Vec<usize> = view.rows.iter().flat_map(|&r| (0..n).map(move |j| r * n + j)).collect();
    let picked = g.gather(logits, rows, &[view.rows.len(), n])?;
    let log_p = g.row_log_softmax(picked)?;
    let positives: Vec<usize> = view.targets.iter().enumerate().map(|(i, &t)| i * n + t).collect();
    let pos = g.gather(log_p, positives, &[view.rows.len()])?;
    let mean = g.mean(pos);
    let loss = g.scale(mean, -1.0);
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    opt.step(backbone.params_mut(), &grads)?;
    Ok(value)
}

fn denoiser_step(backbone: &mut PriorBackbone, opt: &mut OptimState, image: &Image, rng: &mut impl Rng) -> Result<f64> {
    let z0 = backbone.pyramid(image)?.swap_remove(2);
    let t = backbone.config.timestep;
    let ab = backbone.schedule().alpha_bar(t)?;
    let (c, h, w) = z0.dims();
    let eps = Tensor::new([c, h, w], rng::normals(rng, c * h * w))?;
    let mut g = Graph::<f32>::new();
    let z = g.constant(z0.to_tensor());
    let e = g.constant(eps.cast());
    let signal = g.scale(z, ab.sqrt());
    let noise = g.scale(e, (1.0 - ab).sqrt());
    let z_t = g.add(signal, noise)?;
    let eps_hat = backbone.predict_noise(&mut g, z_t)?;
    let loss = nn::mse(&mut g, eps_hat, e)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    opt.step(backbone.params_mut(), &grads)?;
    Ok(value)
}

/// Trains a backbone on all but the last quarter of `scenes`, checks the
/// held-out correspondence accuracy on the rest and returns it frozen.
pub fn pretrain_matcher(
    config: BackboneConfig,
    seed: u64,
    training: &MatcherTraining,
    scenes: &[Image],
) -> Result<PriorBackbone> {
    if scenes.len() < 2 {
        return Err(Error::invalid("matcher pretraining needs at least 2 scenes"));
    }
    let held = scenes.len().div_ceil(4);
    let (scenes, heldout) = scenes.split_at(scenes.len() - held);
    let mut backbone = PriorBackbone::init(config, seed)?;
    let adam = AdamWConfig { lr: training.lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = OptimState::new(adam.clone())?;
    let mut rng = rng::stream(seed, "matcher-train");
    for _ in 0..training.steps {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let view = sample_view(scene, training, &mut rng)?;
        let loss = contrastive_step(&mut backbone, &mut opt, &view, training.temperature)?;
        if loss.is_infinite() {
            return Err(Error::NonFinite { iteration: opt.step_count() as usize, dump: "matcher pretraining".into() });
        }
    }
    if backbone.config.kind == BackboneKind::Diffusion {
        let mut opt = OptimState::new(adam)?;
        for _ in 0..training.denoiser_steps {
            let scene = &scenes[rng.random_range(0..scenes.len())];
            denoiser_step(&mut backbone, &mut opt, scene, &mut rng)?;
        }
    }
    let accuracy = correspondence_accuracy(&backbone, heldout, training.gate_shift_px)?;
    if accuracy < training.min_accuracy {
        return Err(Error::Gate {
            what: format!("matcher held-out correspondence accuracy after {} steps (train longer)", training.steps),
            measured: accuracy,
            required: training.min_accuracy,
        });
    }
    Ok(backbone.freeze())
}

/// Fraction of cells whose nearest neighbour (cosine) in a translated copy
/// of the same texture lies within one cell of the true displacement.
pub fn correspondence_accuracy(backbone: &PriorBackbone, scenes: &[Image], shift_px: usize) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for scene in scenes {
        let (_, h, w) = scene.dims();
        let size = (h.min(w) - shift_px) / STRIDE * STRIDE;
        if size < 2 * STRIDE {
            return Err(Error::invalid(format!("{h}x{w} scene too small for a {shift_px} px shift")));
        }
        let a = crop(scene, 0, 0, size);
        let b = crop(scene, shift_px, shift_px, size);
        let za = backbone.extract_prior(&a)?;
        let zb = backbone.extract_prior(&b)?;
        let cv = crate::geometry::cost_volume(&za, &zb)?;
        let g = za.width();
        let d = shift_px as f64 / STRIDE as f64;
        for i in 0..cv.rows() {
            let (u, v) = ((i % g) as f64, (i / g) as f64);
            let (eu, ev) = (u - d, v - d);
            if eu < 0.0 || ev < 0.0 {
                continue;
            }
            let j = (0..cv.cols()).fold(0, |best, j| if cv.get(i, j) > cv.get(i, best) { j } else { best });
            let (ju, jv) = ((j % g) as f64, (j / g) as f64);
            total += 1;
            if (ju - eu).abs() <= 1.0 && (jv - ev).abs() <= 1.0 {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no overlapping cells"));
    }
    Ok(hits as f64 / total as f64)
}
