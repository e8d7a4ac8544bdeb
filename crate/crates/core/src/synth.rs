//! Seeded synthetic pairs: a clean scene, a degraded copy (the low-quality
//! input) and a re-photographed copy under a known homography and
//! illumination change (the high-quality reference).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_image, Transform, ValidMask};
use crate::image::Image;
use crate::rng;

/// Fraction of the reference frame the warped scene must cover.
pub const MIN_COVERAGE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Checker,
    Gradient,
    Blobs,
    /// Overlapping discs and rectangles on a smooth background.
    Mixed,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(SceneKind::Checker),
            "gradient" => Ok(SceneKind::Gradient),
            "blobs" => Ok(SceneKind::Blobs),
            "mixed" => Ok(SceneKind::Mixed),
            other => Err(Error::invalid(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub noise_sigma: f64,
    /// Odd box-blur width; 1 disables blurring.
    pub blur_k: usize,
    /// Area-mean downsampling factor in {1, 2, 4}, re-upsampled bilinearly.
    pub downsample: usize,
}

impl Degradation {
    pub const NONE: Degradation = Degradation { noise_sigma: 0.0, blur_k: 1, downsample: 1 };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma {} < 0", self.noise_sigma)));
        }
        if self.blur_k.is_multiple_of(2) {
            return Err(Error::invalid(format!("blur width {} is not odd", self.blur_k)));
        }
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::invalid(format!("downsample factor {} not in {{1, 2, 4}}", self.downsample)));
        }
        Ok(())
    }
}

/// Viewpoint change about the frame center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    /// Projective terms of the bottom row, per pixel.
    pub px: f64,
    pub py: f64,
}

impl Viewpoint {
    pub const IDENTITY: Viewpoint = Viewpoint { rotation_deg: 0.0, scale: 1.0, tx: 0.0, ty: 0.0, px: 0.0, py: 0.0 };

    pub fn transform(&self, height: usize, width: usize) -> Result<Transform> {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        let about_center = Transform::from_rows([
            [k * c, -k * s, cx - k * c * cx + k * s * cy + self.tx],
            [k * s, k * c, cy - k * s * cx - k * c * cy + self.ty],
            [0.0, 0.0, 1.0],
        ])?;
        let persp = Transform::from_rows([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [self.px, self.py, 1.0],
        ])?;
        // perspective pinned at the center so it does not add translation there
        Transform::translation(cx, cy)
            .compose(&persp.compose(&Transform::translation(-cx, -cy))?)?
            .compose(&about_center)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    pub gain: f64,
    pub bias: f64,
}

impl Illumination {
    pub const NONE: Illumination = Illumination { gain: 1.0, bias: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub seed: u64,
    pub scene: SceneKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub degradation: Degradation,
    pub viewpoint: Viewpoint,
    pub illumination: Illumination,
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        self.degradation.validate()?;
        if !(self.illumination.gain > 0.0) {
            return Err(Error::invalid(format!("gain {} <= 0", self.illumination.gain)));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("empty frame"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub clean: Image,
    pub transform: Transform,
    pub degradation: Degradation,
    /// Reference-frame pixels covered by the warped scene.
    pub mask: ValidMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub spec: PairSpec,
    pub lq: Image,
    pub hq: Image,
    pub truth: GroundTruth,
}

fn random_color(rng: &mut impl Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.05..0.95)).collect()
}

fn checker(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    let cell = rng.random_range(5..=10) as f64;
    let a = random_color(rng, c);
    let mut b = random_color(rng, c);
    while a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() < 0.3 * c as f64 {
        b = random_color(rng, c);
    }
    let angle: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
    let (s, co) = angle.sin_cos();
    let (ox, oy): (f64, f64) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
    Image::from_fn(c, h, w, |ch, y, x| {
        let (x, y) = (x as f64, y as f64);
        let u = ((co * x + s * y + ox) / cell).floor() as i64;
        let v = ((-s * x + co * y + oy) / cell).floor() as i64;
        if (u + v).rem_euclid(2) == 0 {
            a[ch]
        } else {
            b[ch]
        }
    })
}

fn gradient(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    let base = random_color(rng, c);
    let gx: Vec<f64> = (0..c).map(|_| rng.random_range(-0.6..0.6)).collect();
    let gy: Vec<f64> = (0..c).map(|_| rng.random_range(-0.6..0.6)).collect();
    let freq: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.3))).collect();
    Image::from_fn(c, h, w, |ch, y, x| {
        let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        let ripple: f64 = freq
            .iter()
            .enumerate()
            .map(|(k, (fx, fy, ph))| 0.08 * ((fx * x as f64 + fy * y as f64 + ph + k as f64 * ch as f64).sin()))
            .sum();
        base[ch] + gx[ch] * u + gy[ch] * v + ripple
    })
    .clamp01()
}

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    color: Vec<f64>,
}

fn blobs(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    let background = random_color(rng, c);
    let list: Vec<Blob> = (0..rng.random_range(10..16))
        .map(|_| Blob {
            cx: rng.random_range(-4.0..w as f64 + 4.0),
            cy: rng.random_range(-4.0..h as f64 + 4.0),
            sx: rng.random_range(2.0..7.0),
            sy: rng.random_range(2.0..7.0),
            color: (0..c).map(|_| rng.random_range(-0.7..0.7)).collect(),
        })
        .collect();
    Image::from_fn(c, h, w, |ch, y, x| {
        let bump: f64 = list
            .iter()
            .map(|b| {
                let (dx, dy) = ((x as f64 - b.cx) / b.sx, (y as f64 - b.cy) / b.sy);
                b.color[ch] * (-0.5 * (dx * dx + dy * dy)).exp()
            })
            .sum();
        background[ch] + bump
    })
    .clamp01()
}

enum Leaf {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

fn mixed(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    let mut img = gradient(rng, c, h, w);
    let count = (h * w / 90).max(12);
    for _ in 0..count {
        let leaf = if rng.random_bool(0.5) {
            Leaf::Disc {
                cx: rng.random_range(0.0..w as f64),
                cy: rng.random_range(0.0..h as f64),
                r: rng.random_range(2.0..(w.min(h) as f64 / 6.0).max(3.0)),
            }
        } else {
            let (x0, y0) = (rng.random_range(-4.0..w as f64), rng.random_range(-4.0..h as f64));
            Leaf::Rect { x0, y0, x1: x0 + rng.random_range(3.0..14.0), y1: y0 + rng.random_range(3.0..14.0) }
        };
        let color = random_color(rng, c);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                let inside = match leaf {
                    Leaf::Disc { cx, cy, r } => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
                    Leaf::Rect { x0, y0, x1, y1 } => fx >= x0 && fx < x1 && fy >= y0 && fy < y1,
                };
                if inside {
                    for (ch, v) in color.iter().enumerate() {
                        img.set(ch, y, x, *v);
                    }
                }
            }
        }
    }
    img
}

/// A clean scene in `[0, 1]`.
pub fn gen_scene(seed: u64, kind: SceneKind, channels: usize, height: usize, width: usize) -> Image {
    let mut rng = rng::stream(seed, "scene");
    match kind {
        SceneKind::Checker => checker(&mut rng, channels, height, width),
        SceneKind::Gradient => gradient(&mut rng, channels, height, width),
        SceneKind::Blobs => blobs(&mut rng, channels, height, width),
        SceneKind::Mixed => mixed(&mut rng, channels, height, width),
    }
}

/// Separable box blur with edge replication.
pub fn box_blur(img: &Image, k: usize) -> Image {
    if k <= 1 {
        return img.clone();
    }
    let r = (k / 2) as i64;
    let (c, h, w) = img.dims();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let horiz = Image::from_fn(c, h, w, |ch, y, x| {
        (-r..=r).map(|d| img.get(ch, y, clampi(x as i64 + d, w))).sum::<f64>() / k as f64
    });
    Image::from_fn(c, h, w, |ch, y, x| {
        (-r..=r).map(|d| horiz.get(ch, clampi(y as i64 + d, h), x)).sum::<f64>() / k as f64
    })
}

/// Mean over each `s x s` block. Extents must be divisible by `s`.
pub fn area_downsample(img: &Image, s: usize) -> Result<Image> {
    let (c, h, w) = img.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("{h}x{w} frame not divisible by {s}")));
    }
    Ok(Image::from_fn(c, h / s, w / s, |ch, y, x| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += img.get(ch, y * s + dy, x * s + dx);
            }
        }
        acc / (s * s) as f64
    }))
}

/// Area-mean downsampling by `s` followed by bilinear upsampling back to the
/// original size.
pub fn down_up(img: &Image, s: usize) -> Result<Image> {
    if s == 1 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.dims();
    let small = area_downsample(img, s)?;
    let plan = crate::graph::SamplePlan::resize(h / s, w / s, h, w);
    Image::new(c, h, w, plan.apply(small.data(), c))
}

/// Blur, then down/up-sample, then additive Gaussian noise, clamped.
pub fn degrade(img: &Image, d: &Degradation, noise_seed: u64) -> Result<Image> {
    d.validate()?;
    let mut out = down_up(&box_blur(img, d.blur_k), d.downsample)?;
    if d.noise_sigma > 0.0 {
        let noise = rng::normals(&mut rng::stream(noise_seed, "degrade-noise"), out.data().len());
        for (v, n) in out.data_mut().iter_mut().zip(noise) {
            *v += d.noise_sigma * n;
        }
    }
    Ok(out.clamp01())
}

pub fn illuminate(img: &Image, ill: &Illumination) -> Image {
    img.map(|v| ill.gain * v + ill.bias).clamp01()
}

/// Builds `(LQ, HQ, ground truth)`: degradation on the low-quality side,
/// viewpoint and illumination on the reference side.
pub fn make_pair(spec: &PairSpec) -> Result<Pair> {
    spec.validate()?;
    let clean = gen_scene(spec.seed, spec.scene, spec.channels, spec.height, spec.width);
    let t = spec.viewpoint.transform(spec.height, spec.width)?;
    let (warped, mask) = warp_image(&clean, &t, (spec.height, spec.width))?;
    if mask.coverage() < MIN_COVERAGE {
        return Err(Error::invalid(format!(
            "homography covers {:.0}% of the frame (< {:.0}%); use milder viewpoint parameters",
            100.0 * mask.coverage(),
            100.0 * MIN_COVERAGE
        )));
    }
    let hq = illuminate(&warped, &spec.illumination);
    let lq = degrade(&clean, &spec.degradation, spec.seed)?;
    Ok(Pair {
        id: format!("pair_{:016x}", spec.seed),
        spec: spec.clone(),
        lq,
        hq,
        truth: GroundTruth { clean, transform: t, degradation: spec.degradation, mask },
    })
}

/// Ranges the default corpus draws its pair specs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub pairs: usize,
    pub size: usize,
    pub channels: usize,
    pub scene: SceneKind,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_px: f64,
    pub perspective: f64,
    pub noise_sigma: f64,
    pub blur_k: usize,
    pub downsample: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    pub bias: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            pairs: 20,
            size: 64,
            channels: 3,
            scene: SceneKind::Mixed,
            rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            translation_px: 5.0,
            perspective: 5e-4,
            noise_sigma: 0.1,
            blur_k: 1,
            downsample: 1,
            gain_min: 0.85,
            gain_max: 1.15,
            bias: 0.05,
        }
    }
}

/// Pair specs for a corpus; a spec whose homography leaves too little
/// coverage is redrawn from the next sub-stream.
pub fn corpus_specs(cfg: &CorpusConfig) -> Result<Vec<PairSpec>> {
    if cfg.pairs == 0 {
        return Err(Error::invalid("corpus needs at least one pair"));
    }
    let mut out = Vec::with_capacity(cfg.pairs);
    let mut rng = rng::stream(cfg.seed, "corpus");
    while out.len() < cfg.pairs {
        let spec = PairSpec {
            seed: rng.random(),
            scene: cfg.scene,
            height: cfg.size,
            width: cfg.size,
            channels: cfg.channels,
            degradation: Degradation {
                noise_sigma: cfg.noise_sigma,
                blur_k: cfg.blur_k,
                downsample: cfg.downsample,
            },
            viewpoint: Viewpoint {
                rotation_deg: rng::uniform(&mut rng, -cfg.rotation_deg, cfg.rotation_deg),
                scale: rng::uniform(&mut rng, cfg.scale_min, cfg.scale_max),
                tx: rng::uniform(&mut rng, -cfg.translation_px, cfg.translation_px),
                ty: rng::uniform(&mut rng, -cfg.translation_px, cfg.translation_px),
                px: rng::uniform(&mut rng, -cfg.perspective, cfg.perspective),
                py: rng::uniform(&mut rng, -cfg.perspective, cfg.perspective),
            },
            illumination: Illumination {
                gain: rng::uniform(&mut rng, cfg.gain_min, cfg.gain_max),
                bias: rng::uniform(&mut rng, -cfg.bias, cfg.bias),
            },
        };
        spec.validate()?;
        let t = spec.viewpoint.transform(spec.height, spec.width)?;
        let (_, mask) = warp_image(&Image::zeros(1, spec.height, spec.width), &t, (spec.height, spec.width))?;
        if mask.coverage() >= MIN_COVERAGE {
            out.push(spec);
        }
    }
    Ok(out)
}

pub fn make_corpus(cfg: &CorpusConfig) -> Result<Vec<Pair>> {
    corpus_specs(cfg)?.iter().map(make_pair).collect()
}
