//! Generative-prior feature extraction with small seeded stand-in backbones.
//!
//! All three families produce `C_z` channels at output stride 2, so
//! everything downstream is kind-agnostic. The diffusion and autoregressive
//! kinds share a convolutional trunk with one 2x pooling:
//!
//! - `diffusion`: trunk features are noised to a fixed timestep with a fixed
//!   draw and taken one reverse step back with a learned noise predictor;
//! - `autoregressive`: the mean of the globally pooled pyramid levels is
//!   tiled over the coarsest level;
//! - `patch_token`: a linear map of each non-overlapping 2x2 patch.
//!
//! Extraction is built on the autodiff graph so the loop can differentiate
//! through features of the restored image.

mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use train::{correspondence_accuracy, pretrain_matcher, MatcherTraining};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::{FeatureMap, Image};
use crate::nn::{self, Init};
use crate::params::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Output stride of every backbone kind.
pub const STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of noising steps `T`; valid timesteps are `0..=T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars()[t - 1]` is the cumulative product up to step `t`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal fraction at timestep `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::invalid(format!("timestep {t} outside 0..={}", self.len()))),
        }
    }

    /// `1 - beta_t` for `t >= 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(1.0 - self.betas[t - 1])
    }
}

pub fn build_schedule(betas: &[f64]) -> Result<NoiseSchedule> {
    if betas.is_empty() {
        return Err(Error::invalid("empty noise schedule"));
    }
    if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
    }
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas: betas.to_vec(), alpha_bars })
}

/// Betas evenly spaced from `start` to `end` inclusive.
pub fn linear_schedule(steps: usize, start: f64, end: f64) -> Result<NoiseSchedule> {
    let betas: Vec<f64> = match steps {
        0 => vec![],
        1 => vec![start],
        n => (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect(),
    };
    build_schedule(&betas)
}

fn same_dims(op: &'static str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(z0: &FeatureMap, schedule: &NoiseSchedule, t: usize, eps: &FeatureMap) -> Result<FeatureMap> {
    same_dims("forward_diffuse", z0, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    let (c, h, w) = z0.dims();
    FeatureMap::new(c, h, w, data)
}

/// A noise predictor for one reverse step.
pub trait Denoiser {
    fn predict(&self, z_t: &FeatureMap, t: usize) -> Result<FeatureMap>;
}

impl<T: Fn(&FeatureMap, usize) -> Result<FeatureMap>> Denoiser for T {
    fn predict(&self, z_t: &FeatureMap, t: usize) -> Result<FeatureMap> {
        self(z_t, t)
    }
}

/// `z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
/// + sigma_t * noise`. `noise` may be omitted when `sigma_t = 0`.
pub fn reverse_step(
    z_t: &FeatureMap,
    schedule: &NoiseSchedule,
    t: usize,
    denoiser: &dyn Denoiser,
    sigma_t: f64,
    noise: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    if t == 0 {
        return Err(Error::invalid("reverse step from t = 0"));
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::invalid(format!("sigma_t {sigma_t} < 0")));
    }
    let (alpha, ab) = (schedule.alpha(t)?, schedule.alpha_bar(t)?);
    let eps_hat = denoiser.predict(z_t, t)?;
    same_dims("reverse_step", z_t, &eps_hat)?;
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let mut data: Vec<f64> =
        z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| (z - coef * e) / alpha.sqrt()).collect();
    if sigma_t > 0.0 {
        let n = noise.ok_or_else(|| Error::invalid("sigma_t > 0 needs a noise draw"))?;
        same_dims("reverse_step", z_t, n)?;
        data.iter_mut().zip(n.data()).for_each(|(v, e)| *v += sigma_t * e);
    }
    let (c, h, w) = z_t.dims();
    FeatureMap::new(c, h, w, data)
}

/// Mean over levels of the per-channel spatial means.
pub fn extract_ar_prior(pyramid: &[FeatureMap]) -> Result<Vec<f64>> {
    let first = pyramid.first().ok_or_else(|| Error::invalid("empty pyramid"))?;
    let c = first.channels();
    let mut desc = vec![0.0; c];
    for level in pyramid {
        if level.channels() != c {
            return Err(Error::shape("ar_prior", format!("{} vs {c} channels", level.channels())));
        }
        let hw = level.height() * level.width();
        for (ch, d) in desc.iter_mut().enumerate() {
            *d += level.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
    }
    let l = pyramid.len() as f64;
    Ok(desc.into_iter().map(|d| d / l).collect())
}

/// Flat indices arranging an image's `p x p` patches as the columns of a
/// `(C p p, N)` matrix; rows run over channel, then patch row, then column.
fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let mut index = vec![0; c * p * p * n];
    for ch in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let row = (ch * p + dy) * p + dx;
                for py in 0..gh {
                    for px in 0..gw {
                        index[row * n + py * gw + px] = (ch * h + py * p + dy) * w + px * p + dx;
                    }
                }
            }
        }
    }
    index
}

fn patch_tokens_node<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    p: usize,
    weight: NodeId,
    bias: Option<NodeId>,
) -> Result<NodeId> {
    let (c, h, w) = g
        .value(x)
        .dims3()
        .ok_or_else(|| Error::shape("patch_tokens", format!("{:?}", g.shape(x))))?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patch_tokens", format!("{h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let patches = g.gather(x, patch_index(c, h, w, p), &[c * p * p, gh * gw])?;
    let tokens = g.matmul(weight, patches)?;
    let cz = g.shape(tokens)[0];
    let map = g.reshape(tokens, &[cz, gh, gw])?;
    match bias {
        Some(b) => g.add_channel_vec(map, b),
        None => Ok(map),
    }
}

/// Linear tokens of non-overlapping `p x p` patches as a stride-`p` map.
/// `weight` is `(C_z, C p p)`.
pub fn extract_patch_tokens(image: &Image, p: usize, weight: &Tensor<f64>) -> Result<FeatureMap> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(image.to_tensor());
    let w = g.constant(weight.clone());
    let out = patch_tokens_node(&mut g, x, p, w, None)?;
    FeatureMap::from_tensor(g.value(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Diffusion,
    Autoregressive,
    PatchToken,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(BackboneKind::Diffusion),
            "autoregressive" => Ok(BackboneKind::Autoregressive),
            "patch_token" => Ok(BackboneKind::PatchToken),
            other => Err(Error::invalid(format!("unknown backbone kind {other:?}"))),
        }
    }
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Diffusion => "diffusion",
            BackboneKind::Autoregressive => "autoregressive",
            BackboneKind::PatchToken => "patch_token",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub in_channels: usize,
    /// Width of every trunk level and of the output.
    pub channels: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Extraction timestep in `1..=diffusion_steps`.
    pub timestep: usize,
    pub sigma: f64,
    /// Seed of the fixed noise draws used during extraction.
    pub noise_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::PatchToken,
            in_channels: 3,
            channels: 16,
            diffusion_steps: 10,
            beta_start: 1e-4,
            beta_end: 2e-3,
            timestep: 5,
            sigma: 0.0,
            noise_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        if self.timestep == 0 || self.timestep > s.len() {
            return Err(Error::invalid(format!("timestep {} outside 1..={}", self.timestep, s.len())));
        }
        Ok(s)
    }
}

/// A frozen (after pretraining) matcher network.
#[derive(Clone, Debug)]
pub struct PriorBackbone {
    pub config: BackboneConfig,
    pub seed: u64,
    params: ParamRegistry,
    schedule: NoiseSchedule,
}

const PREFIX: &str = "matcher";

impl PriorBackbone {
    /// Seeded, trainable weights.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let schedule = config.schedule()?;
        let mut rng = rng::stream(seed, "matcher-init");
        let mut params = ParamRegistry::new();
        let (cin, c) = (config.in_channels, config.channels);
        match config.kind {
            BackboneKind::PatchToken => {
                let fan_in = cin * STRIDE * STRIDE;
                let w = rng::normals(&mut rng, c * fan_in).into_iter().map(|v| v / (fan_in as f64).sqrt()).collect();
                params.insert(format!("{PREFIX}.patch.w"), Tensor::new([c, fan_in], w)?, Tag::Trainable)?;
                params.insert(format!("{PREFIX}.patch.b"), Tensor::zeros([c]), Tag::Trainable)?;
            }
            _ => {
                nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.enc1"), c, cin, 3, Init::He)?;
                nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.enc2"), c, c, 3, Init::He)?;
                nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.enc3"), c, c, 3, Init::He)?;
                if config.kind == BackboneKind::Diffusion {
                    nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.den1"), c, c, 3, Init::He)?;
                    nn::add_conv(&mut params, &mut rng, &format!("{PREFIX}.den2"), c, c, 3, Init::Zero)?;
                }
            }
        }
        Ok(PriorBackbone { config, seed, params, schedule })
    }

    /// Rebuilds a backbone from stored weights.
    pub fn from_params(config: BackboneConfig, seed: u64, params: ParamRegistry) -> Result<Self> {
        let reference = PriorBackbone::init(config.clone(), seed)?;
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::shape("matcher weights", format!("{name}: {:?}", got.value.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::invalid("matcher weights have unexpected entries"));
        }
        Ok(PriorBackbone { schedule: reference.schedule, config, seed, params })
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

    pub fn stride(&self) -> usize {
        STRIDE
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Feature-grid extents for an image.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(STRIDE), width.div_ceil(STRIDE))
    }

    fn conv<F: Real>(&self, g: &mut Graph<F>, layer: &str, x: NodeId, relu: bool) -> Result<NodeId> {
        nn::conv(g, &self.params, &format!("{PREFIX}.{layer}"), x, relu)
    }

    /// Trunk levels at strides 1, 2 and 2.
    pub(crate) fn trunk<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> Result<[NodeId; 3]> {
        let f1 = self.conv(g, "enc1", x, true)?;
        let p1 = g.avg_pool(f1, 2)?;
        let f2 = self.conv(g, "enc2", p1, true)?;
        let f3 = self.conv(g, "enc3", f2, false)?;
        Ok([f1, f2, f3])
    }

    /// Noise predictor of the diffusion kind.
    pub(crate) fn predict_noise<F: Real>(&self, g: &mut Graph<F>, z_t: NodeId) -> Result<NodeId> {
        let h = self.conv(g, "den1", z_t, true)?;
        self.conv(g, "den2", h, false)
    }

    /// The fixed forward-noise draw for a feature grid.
    pub fn extraction_noise(&self, grid: (usize, usize)) -> Tensor<f64> {
        let n = self.config.channels * grid.0 * grid.1;
        let v = rng::normals(&mut rng::stream(self.config.noise_seed, "diffusion-eps"), n);
        Tensor::new([self.config.channels, grid.0, grid.1], v).expect("extents match")
    }

    fn reverse_noise(&self, grid: (usize, usize)) -> Tensor<f64> {
        let n = self.config.channels * grid.0 * grid.1;
        let v = rng::normals(&mut rng::stream(self.config.noise_seed, "diffusion-sigma"), n);
        Tensor::new([self.config.channels, grid.0, grid.1], v).expect("extents match")
    }

    /// Prior features of an image node `(C, H, W)` as a `(C_z, H/2, W/2)`
    /// node, differentiable with respect to the image.
    pub fn features<F: Real>(&self, g: &mut Graph<F>, image: NodeId) -> Result<NodeId> {
        match self.config.kind {
            BackboneKind::PatchToken => {
                let w = g.param(&self.params, &format!("{PREFIX}.patch.w"))?;
                let b = g.param(&self.params, &format!("{PREFIX}.patch.b"))?;
                patch_tokens_node(g, image, STRIDE, w, Some(b))
            }
            BackboneKind::Autoregressive => {
                let levels = self.trunk(g, image)?;
                let mut desc = g.global_avg_pool(levels[0])?;
                for &l in &levels[1..] {
                    let d = g.global_avg_pool(l)?;
                    desc = g.add(desc, d)?;
                }
                let desc = g.scale(desc, 1.0 / levels.len() as f64);
                g.add_channel_vec(levels[2], desc)
            }
            BackboneKind::Diffusion => {
                let [_, _, z0] = self.trunk(g, image)?;
                self.diffuse_and_step(g, z0)
            }
        }
    }

    /// Noises `z0` to the configured timestep and takes one reverse step.
    pub(crate) fn diffuse_and_step<F: Real>(&self, g: &mut Graph<F>, z0: NodeId) -> Result<NodeId> {
        let t = self.config.timestep;
        let (ab, alpha) = (self.schedule.alpha_bar(t)?, self.schedule.alpha(t)?);
        let s = g.shape(z0).to_vec();
        let grid = (s[1], s[2]);
        let eps = g.constant(self.extraction_noise(grid).cast());
        let signal = g.scale(z0, ab.sqrt());
        let noise = g.scale(eps, (1.0 - ab).sqrt());
        let z_t = g.add(signal, noise)?;
        let eps_hat = self.predict_noise(g, z_t)?;
        let correction = g.scale(eps_hat, (1.0 - alpha) / (1.0 - ab).sqrt());
        let diff = g.sub(z_t, correction)?;
        let mut z = g.scale(diff, 1.0 / alpha.sqrt());
        if self.config.sigma > 0.0 {
            let extra = g.constant(self.reverse_noise(grid).cast());
            let extra = g.scale(extra, self.config.sigma);
            z = g.add(z, extra)?;
        }
        Ok(z)
    }

    /// Kind-dispatched extraction at precision `F`.
    pub fn extract_prior_as<F: Real>(&self, image: &Image) -> Result<FeatureMap> {
        let mut g = Graph::<F>::new();
        let x = g.constant(image.to_tensor());
        let z = self.features(&mut g, x)?;
        FeatureMap::from_tensor(g.value(z))
    }

    pub fn extract_prior(&self, image: &Image) -> Result<FeatureMap> {
        self.extract_prior_as::<f64>(image)
    }

    /// Pyramid levels of the trunk, for inspection.
    pub fn pyramid(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        if self.config.kind == BackboneKind::PatchToken {
            return Err(Error::invalid("patch-token backbones have no trunk"));
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(image.to_tensor());
        self.trunk(&mut g, x)?.iter().map(|&id| FeatureMap::from_tensor(g.value(id))).collect()
    }
}

/// Dispatch entry point: features of `image` under `backbone`.
pub fn extract_prior(backbone: &PriorBackbone, image: &Image) -> Result<FeatureMap> {
    backbone.extract_prior(image)
}
