//! Toy two-stream restorer.
//!
//! `E` is two 3x3 convolutions at full resolution. `D` concatenates the
//! modulated warped-LQ and HQ streams, applies two more convolutions and adds
//! the result to the warped LQ before clamping. The last decoder layer starts
//! at zero, so an untrained restorer is the identity on `[0, 1]` inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::graph::{Graph, NodeId};
use crate::image::{FeatureMap, Image};
use crate::nn::{self, Init};
use crate::optim::{AdamWConfig, OptimState};
use crate::params::{ParamRegistry, Tag};
use crate::rng;
use crate::synth::{box_blur, illuminate, Illumination};
use crate::tensor::Real;

const PREFIX: &str = "restorer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerConfig {
    pub in_channels: usize,
    /// `C_r`, the encoder output width.
    pub channels: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig { in_channels: 3, channels: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: RestorerConfig,
    pub seed: u64,
    params: ParamRegistry,
}

impl Restorer {
    pub const STRIDE: usize = 1;

    pub fn init(config: RestorerConfig, seed: u64) -> Result<Self> {
        let (cin, c) = (config.in_channels, config.channels);
        if cin == 0 || c == 0 {
            return Err(Error::invalid("restorer widths must be positive"));
        }
        let mut rng = rng::stream(seed, "restorer-init");
        let mut params = ParamRegistry::new();
        nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.enc1"), c, cin, 3, Init::He)?;
        nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.enc2"), c, c, 3, Init::He)?;
        nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.dec1"), c, 2 * c, 3, Init::He)?;
        nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.dec2"), cin, c, 3, Init::Zero)?;
        Ok(Restorer { config, seed, params })
    }

    pub fn from_params(config: RestorerConfig, seed: u64, params: ParamRegistry) -> Result<Self> {
        let reference = Restorer::init(config.clone(), seed)?;
        for (name, p) in reference.params.iter() {
            if params.get(name)?.value.shape() != p.value.shape() {
                return Err(Error::shape("restorer weights", name.to_string()));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::invalid("restorer weights have unexpected entries"));
        }
        Ok(Restorer { config, seed, params })
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    pub fn freeze(mut self) -> Self {
        self.params = self.params.into_frozen();
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.params.names(Tag::Trainable).is_empty()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Encoder output extents for an image.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height, width)
    }

    fn conv<F: Real>(&self, g: &mut Graph<F>, layer: &str, x: NodeId, relu: bool) -> Result<NodeId> {
        nn::conv(g, &self.params, &format!("{PREFIX}.{layer}"), x, relu)
    }

    pub fn encode_node<F: Real>(&self, g: &mut Graph<F>, image: NodeId) -> Result<NodeId> {
        let s = g.shape(image);
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::shape("encode", format!("{s:?}")));
        }
        let h = self.conv(g, "enc1", image, true)?;
        self.conv(g, "enc2", h, true)
    }

    /// Decodes already encoded (and possibly modulated) streams.
    pub fn decode_node<F: Real>(&self, g: &mut Graph<F>, warped_lq: NodeId, e_lq: NodeId, e_hq: NodeId) -> Result<NodeId> {
        let fused = g.concat(&[e_lq, e_hq])?;
        let h = self.conv(g, "dec1", fused, true)?;
        let r = self.conv(g, "dec2", h, false)?;
        let y = g.add(warped_lq, r)?;
        Ok(g.clamp(y, 0.0, 1.0))
    }

    /// Full restore; `None` injections leave the streams untouched.
    pub fn restore_node<F: Real>(
        &self,
        g: &mut Graph<F>,
        warped_lq: NodeId,
        hq: NodeId,
        inj_lq: Option<NodeId>,
        inj_hq: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut e_lq = self.encode_node(g, warped_lq)?;
        let mut e_hq = self.encode_node(g, hq)?;
        if let Some(i) = inj_lq {
            e_lq = g.add(e_lq, i)?;
        }
        if let Some(i) = inj_hq {
            e_hq = g.add(e_hq, i)?;
        }
        self.decode_node(g, warped_lq, e_lq, e_hq)
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(image.to_tensor());
        let e = self.encode_node(&mut g, x)?;
        FeatureMap::from_tensor(g.value(e))
    }

    pub fn restore(&self, warped_lq: &Image, hq: &Image, inj_lq: &FeatureMap, inj_hq: &FeatureMap) -> Result<Image> {
        let mut g = Graph::<f32>::new();
        let (x, r) = (g.constant(warped_lq.to_tensor()), g.constant(hq.to_tensor()));
        let (a, b) = (g.constant(inj_lq.to_tensor()), g.constant(inj_hq.to_tensor()));
        let y = self.restore_node(&mut g, x, r, Some(a), Some(b))?;
        Image::from_tensor(g.value(y))
    }

    /// The adapter-free pass.
    pub fn restore_plain(&self, warped_lq: &Image, hq: &Image) -> Result<Image> {
        let mut g = Graph::<f32>::new();
        let (x, r) = (g.constant(warped_lq.to_tensor()), g.constant(hq.to_tensor()));
        let y = self.restore_node(&mut g, x, r, None, None)?;
        Image::from_tensor(g.value(y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerTraining {
    pub steps: usize,
    pub lr: f64,
    /// Square training crop side.
    pub crop: usize,
    pub noise_sigma: f64,
    /// Largest odd box-blur width drawn for the degraded input.
    pub max_blur: usize,
    /// Largest shift (px) of the reference relative to the target.
    pub reference_shift: usize,
    /// Required held-out PSNR gain over the degraded input.
    pub min_gain_db: f64,
}

impl Default for RestorerTraining {
    fn default() -> Self {
        RestorerTraining {
            steps: 1000,
            lr: 2e-3,
            crop: 32,
            noise_sigma: 0.1,
            max_blur: 3,
            reference_shift: 2,
            min_gain_db: 2.0,
        }
    }
}

/// A degraded input, its shifted and relit reference, and the clean target.
struct Sample {
    lq: Image,
    reference: Image,
    clean: Image,
}

fn shifted_crop(img: &Image, y0: usize, x0: usize, size: usize) -> Image {
    Image::from_fn(img.channels(), size, size, |c, y, x| img.get(c, y0 + y, x0 + x))
}

fn sample(scene: &Image, cfg: &RestorerTraining, rng: &mut impl Rng) -> Result<Sample> {
    let (_, h, w) = scene.dims();
    let (size, m) = (cfg.crop, cfg.reference_shift);
    if size + 2 * m > h || size + 2 * m > w {
        return Err(Error::invalid(format!("crop {size} with shift {m} does not fit {h}x{w} scenes")));
    }
    let y0 = rng.random_range(m..=h - size - m);
    let x0 = rng.random_range(m..=w - size - m);
    let clean = shifted_crop(scene, y0, x0, size);
    let dy = rng.random_range(0..=2 * m) + y0 - m;
    let dx = rng.random_range(0..=2 * m) + x0 - m;
    let ill = Illumination { gain: rng::uniform(rng, 0.85, 1.15), bias: rng::uniform(rng, -0.05, 0.05) };
    let reference = illuminate(&shifted_crop(scene, dy, dx, size), &ill);
    let blur = 2 * rng.random_range(0..=cfg.max_blur / 2) + 1;
    let noise = rng::normals(rng, clean.data().len());
    let blurred = box_blur(&clean, blur);
    let lq = Image::from_fn(clean.channels(), size, size, |c, y, x| {
        blurred.get(c, y, x) + cfg.noise_sigma * noise[(c * size + y) * size + x]
    })
    .clamp01();
    Ok(Sample { lq, reference, clean })
}

/// Mean held-out PSNR gain (dB) of `restorer` over its degraded inputs.
pub fn heldout_gain(restorer: &Restorer, scenes: &[Image], cfg: &RestorerTraining, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, "restorer-heldout");
    let mut gain = 0.0;
    for scene in scenes {
        let s = sample(scene, cfg, &mut rng)?;
        let out = restorer.restore_plain(&s.lq, &s.reference)?;
        gain += psnr(&out, &s.clean, None)? - psnr(&s.lq, &s.clean, None)?;
    }
    Ok(gain / scenes.len() as f64)
}

/// Trains on all but the last quarter of `scenes`, checks the held-out gain
/// on the rest and returns the frozen restorer.
pub fn pretrain_toy(config: RestorerConfig, seed: u64, training: &RestorerTraining, scenes: &[Image]) -> Result<Restorer> {
    if scenes.len() < 2 {
        return Err(Error::invalid("restorer pretraining needs at least 2 scenes"));
    }
    let held = scenes.len().div_ceil(4);
    let (train, heldout) = scenes.split_at(scenes.len() - held);
    let mut restorer = Restorer::init(config, seed)?;
    let mut opt = OptimState::new(AdamWConfig { lr: training.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = rng::stream(seed, "restorer-train");
    for step in 0..training.steps {
        let s = sample(&train[rng.random_range(0..train.len())], training, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(s.lq.to_tensor());
        let r = g.constant(s.reference.to_tensor());
        let target = g.constant(s.clean.to_tensor());
        let y = restorer.restore_node(&mut g, x, r, None, None)?;
        let loss = nn::mse(&mut g, y, target)?;
        if !g.value(loss).all_finite() {
            return Err(Error::NonFinite { iteration: step, dump: "restorer pretraining".into() });
        }
        let grads = g.backward(loss)?;
        opt.step(&mut restorer.params, &grads)?;
    }
    let gain = heldout_gain(&restorer, heldout, training, seed)?;
    if gain < training.min_gain_db {
        return Err(Error::Gate {
            what: format!("restorer held-out PSNR gain in dB after {} steps (train longer)", training.steps),
            measured: gain,
            required: training.min_gain_db,
        });
    }
    Ok(restorer.freeze())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, SceneKind};

    fn img(seed: u64, h: usize, w: usize) -> Image {
        gen_scene(seed, SceneKind::Mixed, 3, h, w)
    }

    #[test]
    fn untrained_restorer_is_identity() {
        let r = Restorer::init(RestorerConfig::default(), 3).unwrap();
        let (a, b) = (img(1, 12, 10), img(2, 12, 10));
        let out = r.restore_plain(&a, &b).unwrap();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    fn perturbed(seed: u64) -> Restorer {
        let mut r = Restorer::init(RestorerConfig::default(), seed).unwrap();
        let mut rng = rng::stream(seed, "test");
        let w = r.params.trainable_mut("restorer.dec2.w").unwrap();
        for v in w.data_mut() {
            *v = 0.05 * rng::normals(&mut rng, 1)[0];
        }
        r
    }

    #[test]
    fn zero_injection_equals_plain_pass() {
        let r = perturbed(4);
        let (a, b) = (img(5, 9, 11), img(6, 9, 11));
        let zero = FeatureMap::new(16, 9, 11, vec![0.0; 16 * 99]).unwrap();
        assert_eq!(r.restore(&a, &b, &zero, &zero).unwrap(), r.restore_plain(&a, &b).unwrap());
    }

    #[test]
    fn encode_contract() {
        let r = perturbed(7);
        let e = r.encode(&img(8, 7, 5)).unwrap();
        assert_eq!(e.dims(), (16, 7, 5));
        assert_eq!(e, r.encode(&img(8, 7, 5)).unwrap());
        assert!(r.encode(&Image::zeros(3, 4, 4)).unwrap().data().iter().all(|v| v.is_finite()));
        assert!(r.encode(&Image::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn restore_output_is_clamped() {
        let r = perturbed(9);
        let mut rng = rng::stream(9, "inj");
        let inj = FeatureMap::new(16, 6, 6, rng::normals(&mut rng, 16 * 36).iter().map(|v| 50.0 * v).collect()).unwrap();
        let out = r.restore(&img(1, 6, 6), &img(2, 6, 6), &inj, &inj).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bad = FeatureMap::new(16, 5, 6, vec![0.0; 16 * 30]).unwrap();
        assert!(r.restore(&img(1, 6, 6), &img(2, 6, 6), &bad, &inj).is_err());
    }

    #[test]
    fn zero_steps_fail_the_gate() {
        let scenes: Vec<_> = (0..4).map(|i| img(i, 40, 40)).collect();
        let t = RestorerTraining { steps: 0, ..Default::default() };
        assert!(matches!(pretrain_toy(RestorerConfig::default(), 1, &t, &scenes), Err(Error::Gate { .. })));
    }

    #[test]
    fn short_training_is_seed_deterministic() {
        let scenes: Vec<_> = (0..4).map(|i| img(i, 40, 40)).collect();
        let t = RestorerTraining { steps: 3, min_gain_db: f64::NEG_INFINITY, crop: 16, ..Default::default() };
        let a = pretrain_toy(RestorerConfig::default(), 1, &t, &scenes).unwrap();
        let b = pretrain_toy(RestorerConfig::default(), 1, &t, &scenes).unwrap();
        assert_eq!(crate::io::encode_weights(a.params()).0, crate::io::encode_weights(b.params()).0);
        assert!(a.is_frozen());
    }
}
