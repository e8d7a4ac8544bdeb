//! Corpus directories: a manifest of pair specs plus PNG renderings.
//!
//! Pairs are regenerated bit-exactly from their specs; the PNGs are 8-bit
//! renderings for inspection and never feed a run.

use std::path::{Path, PathBuf};

use matres_core::io::{save_png, sha256_hex};
use matres_core::synth::{corpus_specs, make_pair, CorpusConfig, Pair, PairSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub id: String,
    pub spec: PairSpec,
    pub transform_gt: [f64; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub pairs: Vec<ManifestPair>,
}

impl Manifest {
    pub fn generate(config: &CorpusConfig) -> CliResult<(Manifest, Vec<Pair>)> {
        let pairs: Vec<Pair> = corpus_specs(config)?.iter().map(make_pair).collect::<Result<_, _>>()?;
        let entries = pairs
            .iter()
            .map(|p| ManifestPair { id: p.id.clone(), spec: p.spec.clone(), transform_gt: p.truth.transform.to_array() })
            .collect();
        Ok((Manifest { config: config.clone(), pairs: entries }, pairs))
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn pair_dir(corpus: &Path, id: &str) -> PathBuf {
        corpus.join("pairs").join(id)
    }
}

/// Writes the manifest and every pair's `lq`, `hq` and `clean` PNGs.
pub fn write(dir: &Path, manifest: &Manifest, pairs: &[Pair]) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    for p in pairs {
        let d = Manifest::pair_dir(dir, &p.id);
        save_png(&d.join("lq.png"), &p.lq)?;
        save_png(&d.join("hq.png"), &p.hq)?;
        save_png(&d.join("clean.png"), &p.truth.clean)?;
    }
    std::fs::write(dir.join(MANIFEST), manifest.to_json()?)?;
    Ok(())
}

/// A corpus loaded back from disk, with the manifest hash runs record.
pub struct Corpus {
    pub manifest: Manifest,
    pub sha256: String,
}

impl Corpus {
    pub fn open(dir: &Path) -> CliResult<Corpus> {
        let path = dir.join(MANIFEST);
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::usage(format!("corpus manifest {} not readable: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("corpus manifest {} is malformed: {e}", path.display())))?;
        if manifest.pairs.is_empty() {
            return Err(CliError::usage(format!("corpus manifest {} lists no pairs", path.display())));
        }
        Ok(Corpus { manifest, sha256: sha256_hex(&bytes) })
    }

    /// Frame size and channel count shared by every pair.
    pub fn frame(&self) -> CliResult<(usize, usize)> {
        let first = &self.manifest.pairs[0].spec;
        if first.height != first.width {
            return Err(CliError::usage("pretraining needs square frames"));
        }
        for p in &self.manifest.pairs {
            if (p.spec.height, p.spec.width, p.spec.channels) != (first.height, first.width, first.channels) {
                return Err(CliError::usage(format!("pair {} has a different frame than {}", p.id, self.manifest.pairs[0].id)));
            }
        }
        Ok((first.height, first.channels))
    }

    /// Regenerates the first `n` pairs and checks them against the manifest.
    pub fn pairs(&self, n: usize) -> CliResult<Vec<Pair>> {
        self.manifest.pairs[..n]
            .iter()
            .map(|entry| {
                let pair = make_pair(&entry.spec)?;
                if pair.id != entry.id || pair.truth.transform.to_array() != entry.transform_gt {
                    return Err(CliError::usage(format!("manifest entry {} does not match its spec", entry.id)));
                }
                Ok(pair)
            })
            .collect()
    }
}
