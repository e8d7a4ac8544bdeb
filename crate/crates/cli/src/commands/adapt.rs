//! `adapt`: one self-describing run directory per pair.
//!
//! A run directory holds the resolved config, the seeds and the weight and
//! corpus hashes, which together reproduce its result bit-for-bit.

use std::path::{Path, PathBuf};

use matres_core::experiment::{run_corpus, Models, PairOutcome};
use matres_core::io::{save_png, save_weights};
use matres_core::synth::{Pair, PairSpec};
use serde::{Deserialize, Serialize};

use crate::commands::claim_output;
use crate::config::{render, AdaptSettings};
use crate::corpus::Corpus;
use crate::draw::overlay;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "adapt.cfg";
pub const RUN_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const ERROR_FILE: &str = "error.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub pair_id: String,
    pub error: String,
}

/// Run-level record written to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub weights: PathBuf,
    pub matcher_sha256: String,
    pub restorer_sha256: String,
    pub with_baseline: bool,
    pub pairs: Vec<String>,
    pub failures: Vec<Failure>,
}

/// Per-pair provenance: everything besides the resolved config needed to
/// rerun the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pair_id: String,
    pub spec: PairSpec,
    pub run_seed: u64,
    pub adapter_seed: u64,
    pub corpus_sha256: String,
    pub matcher_sha256: String,
    pub restorer_sha256: String,
}

pub struct Request<'a> {
    pub settings: &'a AdaptSettings,
    pub corpus: &'a Path,
    pub weights: &'a Path,
    pub out: &'a Path,
    pub pairs: Option<usize>,
    pub jobs: usize,
    pub with_baseline: bool,
    pub force: bool,
}

pub fn run(req: &Request) -> CliResult<RunRecord> {
    let corpus = Corpus::open(req.corpus)?;
    let available = corpus.manifest.pairs.len();
    let n = match req.pairs {
        Some(0) => return Err(CliError::usage("--pairs must be at least 1")),
        Some(n) if n > available => {
            return Err(CliError::usage(format!("--pairs {n} exceeds the {available} pairs in the corpus")))
        }
        Some(n) => n,
        None => available,
    };
    if req.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let config = req.settings.to_config();
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let ids: Vec<String> = corpus.manifest.pairs[..n].iter().map(|p| p.id.clone()).collect();
    let results: Vec<String> = ids.iter().map(|id| format!("{id}/{RESULT_FILE}")).collect();
    let mut claimed: Vec<&str> = results.iter().map(String::as_str).collect();
    claimed.extend([CONFIG_FILE, RUN_FILE]);
    claim_output(req.out, &claimed, req.force)?;

    let models = Models::load(req.weights)
        .map_err(|e| CliError::usage(format!("weights in {} not loadable: {e}", req.weights.display())))?;
    let (matcher_sha256, restorer_sha256) = models.hashes();
    let pairs = corpus.pairs(n)?;
    std::fs::write(req.out.join(CONFIG_FILE), render(req.settings, "matres adapt, resolved")?)?;

    log::info!("adapting {n} pairs on {} threads", req.jobs);
    let outcomes = run_corpus(&pairs, &models, &config, req.with_baseline, req.jobs);
    let mut failures = Vec::new();
    for (pair, outcome) in pairs.iter().zip(outcomes) {
        let dir = req.out.join(&pair.id);
        std::fs::create_dir_all(&dir)?;
        let written = outcome.map_err(CliError::from).and_then(|o| {
            let prov = Provenance {
                pair_id: pair.id.clone(),
                spec: pair.spec.clone(),
                run_seed: config.seed,
                adapter_seed: o.result.adapter_seed,
                corpus_sha256: corpus.sha256.clone(),
                matcher_sha256: matcher_sha256.clone(),
                restorer_sha256: restorer_sha256.clone(),
            };
            write_pair(&dir, pair, &o, &prov, req.settings)
        });
        match written {
            Ok(()) => {
                remove_if_present(&dir.join(ERROR_FILE))?;
            }
            Err(e) => {
                log::warn!("{}: {e}", pair.id);
                remove_if_present(&dir.join(RESULT_FILE))?;
                std::fs::write(dir.join(ERROR_FILE), format!("{e}\n"))?;
                failures.push(Failure { pair_id: pair.id.clone(), error: e.to_string() });
            }
        }
    }
    let record = RunRecord {
        corpus: req.corpus.to_path_buf(),
        corpus_sha256: corpus.sha256.clone(),
        weights: req.weights.to_path_buf(),
        matcher_sha256,
        restorer_sha256,
        with_baseline: req.with_baseline,
        pairs: ids,
        failures,
    };
    std::fs::write(req.out.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

fn remove_if_present(path: &Path) -> CliResult<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_pair(dir: &Path, pair: &Pair, o: &PairOutcome, prov: &Provenance, settings: &AdaptSettings) -> CliResult<()> {
    let frame = (pair.lq.height(), pair.lq.width());
    let a = &o.adapted;
    std::fs::write(dir.join(TRACE_FILE), a.trace.to_csv()?)?;
    save_png(&dir.join("restored.png"), &a.restored)?;
    overlay(&pair.hq, frame, &pair.truth.transform, &a.transform).save(dir.join("overlay.png"))?;
    let adapter_config = serde_json::to_value(&a.adapter.config)?;
    save_weights(&dir.join("adapter"), &a.adapter.params, "adapter", a.adapter.config.seed, adapter_config)?;
    if let Some(b) = &o.baseline {
        save_png(&dir.join("baseline_restored.png"), &b.restored)?;
        overlay(&pair.hq, frame, &pair.truth.transform, &b.transform).save(dir.join("baseline_overlay.png"))?;
    }
    std::fs::write(dir.join("config.cfg"), render(settings, "matres adapt, resolved")?)?;
    std::fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(prov)? + "\n")?;
    // Written last: its presence marks a complete run directory.
    std::fs::write(dir.join(RESULT_FILE), o.result.to_json()?)?;
    Ok(())
}
