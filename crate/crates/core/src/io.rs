//! Weight files and PNG interchange.
//!
//! Weights are one flat little-endian `f64` binary plus a JSON manifest that
//! lists every parameter's name, shape, tag and offset in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: Tag,
    /// Offset in `f64` elements from the start of the binary.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub kind: String,
    pub seed: u64,
    /// Component-specific settings needed to rebuild the module.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// SHA-256 of the binary file.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_weights(registry: &ParamRegistry) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, p) in registry.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: p.value.shape().to_vec(), tag: p.tag, offset });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.len();
    }
    (bytes, entries)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_weights(
    stem: &Path,
    registry: &ParamRegistry,
    kind: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<WeightManifest> {
    let (bytes, params) = encode_weights(registry);
    let manifest = WeightManifest {
        kind: kind.to_string(),
        seed,
        config,
        params,
        sha256: sha256_hex(&bytes),
    };
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(stem.with_extension("bin"), &bytes)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_weights(stem: &Path) -> Result<(ParamRegistry, WeightManifest)> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let fail = |reason: String| Error::WeightFormat { path: bin.clone(), reason };
    let manifest: WeightManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    let bytes = fs::read(&bin)?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(fail("checksum does not match manifest".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(fail(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    let mut registry = ParamRegistry::new();
    let mut expected = 0;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(fail(format!("parameter {} out of range", e.name)));
        }
        registry.insert(&e.name, Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?, e.tag)?;
        expected += n;
    }
    if expected != values.len() {
        return Err(fail(format!("{} trailing values", values.len() - expected)));
    }
    Ok((registry, manifest))
}

/// Quantizes to 8 bits per channel. One-channel images are written as gray.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dims();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([q(img.get(0, y as usize, x as usize))]))
            .save(path)?,
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([q(img.get(0, y, x)), q(img.get(1, y, x)), q(img.get(2, y, x))])
        })
        .save(path)?,
        _ => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
}
