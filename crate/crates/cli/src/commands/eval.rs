//! `eval`: corpus report with paired without/with columns, loss curves and
//! overlays. Pairs without a result are listed as gaps.

use std::path::Path;

use matres_core::eval::EvalReport;
use matres_core::experiment::PairResult;
use matres_core::geometry::Transform;
use serde::Deserialize;

use crate::commands::adapt::{RunRecord, RESULT_FILE, RUN_FILE, TRACE_FILE};
use crate::commands::claim_output;
use crate::corpus::Corpus;
use crate::draw::{line_plot, overlay};
use crate::error::{CliError, CliResult};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TABLE_CSV: &str = "table.csv";
pub const CURVES_PNG: &str = "loss_curves.png";
pub const CURVES_CSV: &str = "loss_curves.csv";
pub const OVERLAY_DIR: &str = "overlays";

#[derive(Deserialize)]
struct TraceRow {
    iteration: usize,
    l_total: f64,
}

/// Pair ids the run set should contain: the corpus manifest when given,
/// else the run record, else whatever subdirectories exist.
fn expected_ids(runs: &Path, corpus: Option<&Corpus>) -> CliResult<Vec<String>> {
    if let Some(c) = corpus {
        return Ok(c.manifest.pairs.iter().map(|p| p.id.clone()).collect());
    }
    let record = runs.join(RUN_FILE);
    if record.exists() {
        let r: RunRecord = serde_json::from_slice(&std::fs::read(&record)?)?;
        return Ok(r.pairs);
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(runs)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn read_trace(path: &Path) -> CliResult<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<TraceRow>().enumerate() {
        let row = row?;
        if row.iteration != i + 1 {
            return Err(CliError::usage(format!("{}: iteration {} out of order", path.display(), row.iteration)));
        }
        out.push(row.l_total);
    }
    Ok(out)
}

/// Rows of the without/with table: mean PSNR, mean SSIM, mAUC and the
/// count of acceptable pairs.
pub fn table_csv(report: &EvalReport) -> CliResult<String> {
    let s = &report.summary;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "without", "with"])?;
    let rows = [
        ("psnr_mean", s.mean_psnr_baseline, s.mean_psnr_adapted),
        ("ssim_mean", s.mean_ssim_baseline, s.mean_ssim_adapted),
        ("mauc", s.mauc_baseline, s.mauc_adapted),
        ("acceptable", s.acceptable_baseline as f64, s.acceptable_adapted as f64),
    ];
    for (name, without, with) in rows {
        w.write_record([name.to_string(), without.to_string(), with.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn run(runs: &Path, corpus: Option<&Path>, out: &Path, force: bool) -> CliResult<EvalReport> {
    if !runs.is_dir() {
        return Err(CliError::usage(format!("run directory {} does not exist", runs.display())));
    }
    let corpus = corpus.map(Corpus::open).transpose()?;
    let expected = expected_ids(runs, corpus.as_ref())?;
    let mut results = Vec::new();
    let mut missing = Vec::new();
    for id in &expected {
        let path = runs.join(id).join(RESULT_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let r: PairResult = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::usage(format!("{} is malformed: {e}", path.display())))?;
                results.push(r);
            }
            Err(_) => missing.push(id.clone()),
        }
    }
    if results.is_empty() {
        return Err(CliError::usage(format!("no pair results under {}", runs.display())));
    }
    for id in &missing {
        log::warn!("no result for {id}; listed as a gap");
    }
    claim_output(out, &[REPORT_JSON, REPORT_CSV, TABLE_CSV, CURVES_PNG, CURVES_CSV], force)?;
    let report = EvalReport::new(results.iter().map(PairResult::row).collect(), missing)?;
    std::fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join(REPORT_CSV), report.to_csv()?)?;
    std::fs::write(out.join(TABLE_CSV), table_csv(&report)?)?;

    // Loss curves, each relative to its first iteration.
    let mut curves = Vec::new();
    let mut w = csv::Writer::from_path(out.join(CURVES_CSV))?;
    w.write_record(["pair_id", "iteration", "l_total", "l_total_relative"])?;
    for r in &results {
        let trace = read_trace(&runs.join(&r.pair_id).join(TRACE_FILE))?;
        let first = trace.first().copied().unwrap_or(f64::NAN);
        let rel: Vec<f64> = trace.iter().map(|v| v / first).collect();
        for (i, (v, q)) in trace.iter().zip(&rel).enumerate() {
            w.write_record([r.pair_id.clone(), (i + 1).to_string(), v.to_string(), q.to_string()])?;
        }
        curves.push(rel);
    }
    w.flush()?;
    line_plot(&curves, 640, 400).save(out.join(CURVES_PNG))?;

    let overlays = out.join(OVERLAY_DIR);
    std::fs::create_dir_all(&overlays)?;
    for r in &results {
        let target = overlays.join(format!("{}.png", r.pair_id));
        let entry = corpus.as_ref().and_then(|c| c.manifest.pairs.iter().find(|p| p.id == r.pair_id));
        match entry {
            Some(entry) => {
                let pair = matres_core::synth::make_pair(&entry.spec)?;
                let frame = (pair.lq.height(), pair.lq.width());
                let est = Transform::from_array(r.transform_est)?;
                overlay(&pair.hq, frame, &pair.truth.transform, &est).save(&target)?;
            }
            None => {
                let source = runs.join(&r.pair_id).join("overlay.png");
                if source.exists() {
                    std::fs::copy(&source, &target)?;
                }
            }
        }
    }
    Ok(report)
}
