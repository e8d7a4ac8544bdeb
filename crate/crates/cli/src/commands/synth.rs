//! `synth`: writes a seeded corpus directory.

use std::path::Path;

use matres_core::synth::CorpusConfig;

use crate::commands::claim_output;
use crate::corpus::{self, Manifest, MANIFEST};
use crate::error::CliResult;

pub const CONFIG_FILE: &str = "synth.cfg";

pub fn run(config: &CorpusConfig, out: &Path, force: bool) -> CliResult<Manifest> {
    let (manifest, pairs) = Manifest::generate(config)?;
    claim_output(out, &[MANIFEST, CONFIG_FILE], force)?;
    corpus::write(out, &manifest, &pairs)?;
    std::fs::write(out.join(CONFIG_FILE), crate::config::render(config, "matres synth, resolved")?)?;
    log::info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(manifest)
}
