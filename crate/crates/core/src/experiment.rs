//! Pretraining of the frozen pair, per-pair runs and corpus runs.
//!
//! A pair run adapts once and scores both the first forward pass (the
//! adapter-free pipeline) and the last one against the pair's ground truth.
//! Image metrics are taken on the ground-truth valid mask so that baseline
//! and adapted numbers share one support.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{corner_errors, psnr, ssim, PairRow};
use crate::geometry::Transform;
use crate::image::Image;
use crate::io;
use crate::prior::{pretrain_matcher, BackboneConfig, MatcherTraining, PriorBackbone};
use crate::restorer::{pretrain_toy, Restorer, RestorerConfig, RestorerTraining};
use crate::rng;
use crate::synth::{gen_scene, Pair, SceneKind};
use crate::tta::{adapt, baseline, AdaptConfig, AdaptResult, Snapshot};

/// Side of the control-point grid used for alignment errors.
pub const CONTROL_GRID: usize = 5;

pub const MATCHER_STEM: &str = "matcher";
pub const RESTORER_STEM: &str = "restorer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pretraining {
    pub seed: u64,
    /// Training scenes are generated from `scene_seed + i`; keep this range
    /// away from corpus seeds.
    pub scene_seed: u64,
    pub scenes: usize,
    pub scene_kind: SceneKind,
    pub size: usize,
    pub backbone: BackboneConfig,
    pub matcher: MatcherTraining,
    pub restorer_config: RestorerConfig,
    pub restorer: RestorerTraining,
}

impl Default for Pretraining {
    fn default() -> Self {
        Pretraining {
            seed: 1,
            scene_seed: 1000,
            scenes: 24,
            scene_kind: SceneKind::Mixed,
            size: 64,
            backbone: BackboneConfig::default(),
            matcher: MatcherTraining::default(),
            restorer_config: RestorerConfig::default(),
            restorer: RestorerTraining::default(),
        }
    }
}

impl Pretraining {
    pub fn training_scenes(&self) -> Vec<Image> {
        let c = self.backbone.in_channels;
        (0..self.scenes as u64).map(|i| gen_scene(self.scene_seed + i, self.scene_kind, c, self.size, self.size)).collect()
    }
}

/// The frozen matcher and restorer every adaptation run shares.
#[derive(Clone, Debug)]
pub struct Models {
    pub matcher: PriorBackbone,
    pub restorer: Restorer,
}

impl Models {
    pub fn pretrain(cfg: &Pretraining) -> Result<Models> {
        if cfg.backbone.in_channels != cfg.restorer_config.in_channels {
            return Err(Error::invalid("matcher and restorer disagree on the channel count"));
        }
        let scenes = cfg.training_scenes();
        let matcher = pretrain_matcher(cfg.backbone.clone(), cfg.seed, &cfg.matcher, &scenes)?;
        let restorer = pretrain_toy(cfg.restorer_config.clone(), cfg.seed, &cfg.restorer, &scenes)?;
        Ok(Models { matcher, restorer })
    }

    /// SHA-256 of the matcher and restorer weight binaries.
    pub fn hashes(&self) -> (String, String) {
        let h = |r| io::sha256_hex(&io::encode_weights(r).0);
        (h(self.matcher.params()), h(self.restorer.params()))
    }

    /// Writes `matcher.{bin,json}` and `restorer.{bin,json}` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = &self.matcher;
        io::save_weights(&dir.join(MATCHER_STEM), m.params(), "matcher", m.seed, serde_json::to_value(&m.config)?)?;
        let r = &self.restorer;
        io::save_weights(&dir.join(RESTORER_STEM), r.params(), "restorer", r.seed, serde_json::to_value(&r.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Models> {
        let stem = dir.join(MATCHER_STEM);
        let (params, manifest) = io::load_weights(&stem)?;
        let config = serde_json::from_value(manifest.config)?;
        let matcher = PriorBackbone::from_params(config, manifest.seed, params)?.freeze();
        let (params, manifest) = io::load_weights(&dir.join(RESTORER_STEM))?;
        let config = serde_json::from_value(manifest.config)?;
        let restorer = Restorer::from_params(config, manifest.seed, params)?.freeze();
        Ok(Models { matcher, restorer })
    }
}

/// Per-pair result record; serialized as the run directory's result JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub transform_est: [f64; 9],
    pub transform_gt: [f64; 9],
    pub transform_baseline: [f64; 9],
    pub psnr_baseline: f64,
    pub psnr_adapted: f64,
    pub ssim_baseline: f64,
    pub ssim_adapted: f64,
    pub mee_baseline: f64,
    pub mae_baseline: f64,
    pub mee: f64,
    pub mae: f64,
    pub acceptable_baseline: bool,
    pub acceptable: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub l_total_first: f64,
    pub l_total_last: f64,
    pub adapter_seed: u64,
}

impl PairResult {
    pub fn row(&self) -> PairRow {
        PairRow {
            pair_id: self.pair_id.clone(),
            psnr_baseline: self.psnr_baseline,
            psnr_adapted: self.psnr_adapted,
            ssim_baseline: self.ssim_baseline,
            ssim_adapted: self.ssim_adapted,
            mee_baseline: self.mee_baseline,
            mae_baseline: self.mae_baseline,
            mee: self.mee,
            mae: self.mae,
            acceptable_baseline: self.acceptable_baseline,
            acceptable: self.acceptable,
        }
    }

    /// Pretty JSON with a trailing newline; the byte form compared across
    /// reruns.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Everything a pair run produces.
#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub result: PairResult,
    pub adapted: AdaptResult,
    /// The separately computed adapter-free pipeline, when requested.
    pub baseline: Option<Snapshot>,
}

/// Adapter seed of one pair: a stream keyed by the run seed and the pair id.
pub fn adapter_seed(run_seed: u64, pair_id: &str) -> u64 {
    rng::stream(run_seed, pair_id).random()
}

struct Scores {
    psnr: f64,
    ssim: f64,
    mee: f64,
    mae: f64,
    acceptable: bool,
}

fn score(pair: &Pair, restored: &Image, t: &Transform) -> Result<Scores> {
    let mask = &pair.truth.mask;
    let errors = corner_errors(t, &pair.truth.transform, (pair.lq.height(), pair.lq.width()), CONTROL_GRID)?;
    Ok(Scores {
        psnr: psnr(restored, &pair.hq, Some(mask))?,
        ssim: ssim(restored, &pair.hq, Some(mask))?,
        mee: errors.mee,
        mae: errors.mae,
        acceptable: errors.acceptable(),
    })
}

/// Adapts one pair. With `with_baseline` the adapter-free pipeline is also
/// run on its own and must agree exactly with the first forward pass.
pub fn run_pair(pair: &Pair, models: &Models, config: &AdaptConfig, with_baseline: bool) -> Result<PairOutcome> {
    let seed = adapter_seed(config.seed, &pair.id);
    let cfg = AdaptConfig { seed, ..config.clone() };
    let adapted = adapt(&pair.lq, &pair.hq, &models.matcher, &models.restorer, &cfg)?;
    let baseline = if with_baseline {
        let b = baseline(&pair.lq, &pair.hq, &models.matcher, &models.restorer, &cfg.ransac)?;
        if b != adapted.first {
            return Err(Error::Gate {
                what: format!("{}: first adapted pass differs from the adapter-free pipeline", pair.id),
                measured: 1.0,
                required: 0.0,
            });
        }
        Some(b)
    } else {
        None
    };
    let before = score(pair, &adapted.first.restored, &adapted.first.transform)?;
    let after = score(pair, &adapted.restored, &adapted.transform)?;
    let l_total = adapted.trace.l_total();
    let result = PairResult {
        pair_id: pair.id.clone(),
        transform_est: adapted.transform.to_array(),
        transform_gt: pair.truth.transform.to_array(),
        transform_baseline: adapted.first.transform.to_array(),
        psnr_baseline: before.psnr,
        psnr_adapted: after.psnr,
        ssim_baseline: before.ssim,
        ssim_adapted: after.ssim,
        mee_baseline: before.mee,
        mae_baseline: before.mae,
        mee: after.mee,
        mae: after.mae,
        acceptable_baseline: before.acceptable,
        acceptable: after.acceptable,
        stop_reason: adapted.stop.as_str().to_string(),
        iterations: adapted.iterations(),
        l_total_first: l_total[0],
        l_total_last: l_total[l_total.len() - 1],
        adapter_seed: seed,
    };
    Ok(PairOutcome { result, adapted, baseline })
}

/// Runs every pair on up to `jobs` threads. Pairs are fully independent, so
/// the outcome of each is the same for any `jobs`; results keep input order.
pub fn run_corpus(
    pairs: &[Pair],
    models: &Models,
    config: &AdaptConfig,
    with_baseline: bool,
    jobs: usize,
) -> Vec<Result<PairOutcome>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<PairOutcome>>>> = pairs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, pairs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(pair) = pairs.get(i) else { break };
                let outcome = run_pair(pair, models, config, with_baseline);
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every pair ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_corpus, CorpusConfig};

    fn quick_models() -> Models {
        let cfg = Pretraining {
            scenes: 4,
            size: 48,
            matcher: MatcherTraining { steps: 20, min_accuracy: 0.0, ..Default::default() },
            restorer: RestorerTraining { steps: 30, min_gain_db: f64::NEG_INFINITY, ..Default::default() },
            ..Default::default()
        };
        Models::pretrain(&cfg).unwrap()
    }

    fn corpus(n: usize) -> Vec<Pair> {
        make_corpus(&CorpusConfig { pairs: n, size: 32, ..Default::default() }).unwrap()
    }

    #[test]
    fn models_round_trip_through_weight_files() {
        let m = quick_models();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Models::load(dir.path()).unwrap();
        assert_eq!(back.hashes(), m.hashes());
        assert!(back.matcher.is_frozen() && back.restorer.is_frozen());
        assert_eq!(back.matcher.config, m.matcher.config);
    }

    #[test]
    fn pair_result_reports_both_passes() {
        let m = quick_models();
        let pairs = corpus(1);
        let cfg = AdaptConfig { max_iters: 3, ..Default::default() };
        let out = run_pair(&pairs[0], &m, &cfg, true).unwrap();
        let r = &out.result;
        assert_eq!(r.pair_id, pairs[0].id);
        assert_eq!(r.iterations, out.adapted.trace.len());
        assert_eq!(r.transform_baseline, out.baseline.unwrap().transform.to_array());
        assert_eq!(r.acceptable, r.mae < 50.0 && r.mee < 20.0);
        assert!(r.mae >= r.mee && r.mae_baseline >= r.mee_baseline);
        let json = r.to_json().unwrap();
        let back: PairResult = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, r);
    }

    #[test]
    fn corpus_results_do_not_depend_on_job_count() {
        let m = quick_models();
        let pairs = corpus(3);
        let cfg = AdaptConfig { max_iters: 2, ..Default::default() };
        let json = |jobs| -> Vec<String> {
            run_corpus(&pairs, &m, &cfg, false, jobs).into_iter().map(|o| o.unwrap().result.to_json().unwrap()).collect()
        };
        assert_eq!(json(1), json(3));
    }

    #[test]
    fn adapter_seeds_differ_per_pair() {
        assert_ne!(adapter_seed(0, "a"), adapter_seed(0, "b"));
        assert_eq!(adapter_seed(3, "a"), adapter_seed(3, "a"));
    }
}
