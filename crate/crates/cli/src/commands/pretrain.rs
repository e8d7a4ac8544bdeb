//! `pretrain`: trains the frozen matcher and restorer and records their
//! gate measurements.

use std::path::Path;

use matres_core::experiment::{Models, MATCHER_STEM, RESTORER_STEM};
use matres_core::prior::correspondence_accuracy;
use matres_core::restorer::heldout_gain;
use serde::{Deserialize, Serialize};

use crate::commands::claim_output;
use crate::config::{render, PretrainSettings};
use crate::corpus::Corpus;
use crate::error::CliResult;

pub const CONFIG_FILE: &str = "pretrain.cfg";
pub const GATES_FILE: &str = "gates.json";

/// Held-out gate measurements of a successful pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub matcher_accuracy: f64,
    pub matcher_required: f64,
    pub restorer_gain_db: f64,
    pub restorer_required_db: f64,
    pub matcher_sha256: String,
    pub restorer_sha256: String,
}

pub fn run(settings: &PretrainSettings, corpus: &Path, out: &Path, force: bool) -> CliResult<Gates> {
    let (size, channels) = Corpus::open(corpus)?.frame()?;
    let bin = |s: &str| format!("{s}.bin");
    let (m_bin, r_bin) = (bin(MATCHER_STEM), bin(RESTORER_STEM));
    claim_output(out, &[&m_bin, &r_bin, CONFIG_FILE, GATES_FILE], force)?;
    let cfg = settings.to_pretraining(size, channels);
    log::info!("pretraining on {} scenes of {size}x{size}", cfg.scenes);
    let models = Models::pretrain(&cfg)?;
    // Recomputed on the same held-out quarter the gates used.
    let scenes = cfg.training_scenes();
    let heldout = &scenes[scenes.len() - scenes.len().div_ceil(4)..];
    let (matcher_sha256, restorer_sha256) = models.hashes();
    let gates = Gates {
        matcher_accuracy: correspondence_accuracy(&models.matcher, heldout, cfg.matcher.gate_shift_px)?,
        matcher_required: cfg.matcher.min_accuracy,
        restorer_gain_db: heldout_gain(&models.restorer, heldout, &cfg.restorer, cfg.seed)?,
        restorer_required_db: cfg.restorer.min_gain_db,
        matcher_sha256,
        restorer_sha256,
    };
    models.save(out)?;
    std::fs::write(out.join(CONFIG_FILE), render(settings, "matres pretrain, resolved")?)?;
    std::fs::write(out.join(GATES_FILE), serde_json::to_string_pretty(&gates)? + "\n")?;
    log::info!(
        "gates passed: matcher accuracy {:.3} (>= {:.3}), restorer gain {:.2} dB (>= {:.2})",
        gates.matcher_accuracy,
        gates.matcher_required,
        gates.restorer_gain_db,
        gates.restorer_required_db
    );
    Ok(gates)
}
