//! Flat `key = value` run configuration.
//!
//! Resolution order: struct defaults, then the config file, then
//! `MATRES_SEED` (for the `seed` key), then `--set` overrides. Unknown keys
//! are rejected by the settings structs themselves.

use std::collections::BTreeMap;
use std::path::Path;

use matres_core::experiment::Pretraining;
use matres_core::geometry::RansacConfig;
use matres_core::prior::{BackboneConfig, BackboneKind, MatcherTraining};
use matres_core::restorer::{RestorerConfig, RestorerTraining};
use matres_core::synth::SceneKind;
use matres_core::tta::AdaptConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MATRES_SEED";

/// Parses a flat config text. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_text(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = parse_assignment(line).map_err(|m| CliError::usage(format!("line {}: {m}", n + 1)))?;
        if out.insert(k.clone(), v).is_some() {
            return Err(CliError::usage(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected `key = value`, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(format!("bad key {k:?}"));
    }
    let v = v.trim();
    let v = v.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(v);
    Ok((k.to_string(), v.to_string()))
}

/// Types a raw value: booleans and numbers become JSON scalars, anything
/// else stays a string.
fn typed(v: &str) -> Value {
    match v {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(u) = v.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    match v.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::String(v.to_string()),
    }
}

/// Resolves settings from a config file, the seed variable and overrides.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, sets: &[String], env_seed: Option<&str>) -> CliResult<T> {
    let mut map = BTreeMap::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        map = parse_text(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = env_seed {
        seed.trim()
            .parse::<u64>()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        map.insert("seed".to_string(), seed.trim().to_string());
    }
    for s in sets {
        let (k, v) = parse_assignment(s).map_err(|m| CliError::usage(format!("--set {s:?}: {m}")))?;
        map.insert(k, v);
    }
    let obj: Map<String, Value> = map.iter().map(|(k, v)| (k.clone(), typed(v))).collect();
    serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::usage(format!("config: {e}")))
}

/// The fully resolved settings as `key = value` lines.
pub fn render<T: Serialize>(settings: &T, title: &str) -> CliResult<String> {
    let Value::Object(obj) = serde_json::to_value(settings)? else {
        return Err(CliError::usage("settings must serialize to a flat map"));
    };
    let mut out = format!("# {title}\n");
    for (k, v) in obj {
        let v = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {v}\n"));
    }
    Ok(out)
}

/// Pretraining settings. Frame size and channel count come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub seed: u64,
    pub scene_seed: u64,
    pub scenes: usize,
    pub scene_kind: SceneKind,
    pub backbone: BackboneKind,
    pub feature_channels: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub timestep: usize,
    pub sigma: f64,
    pub noise_seed: u64,
    pub matcher_steps: usize,
    pub denoiser_steps: usize,
    pub matcher_lr: f64,
    pub matcher_crop: usize,
    pub temperature: f64,
    pub max_rotation_deg: f64,
    pub min_accuracy: f64,
    pub gate_shift_px: usize,
    pub restorer_channels: usize,
    pub restorer_steps: usize,
    pub restorer_lr: f64,
    pub restorer_crop: usize,
    pub restorer_noise_sigma: f64,
    pub max_blur: usize,
    pub reference_shift: usize,
    pub min_gain_db: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let p = Pretraining::default();
        let (b, m, r) = (&p.backbone, &p.matcher, &p.restorer);
        PretrainSettings {
            seed: p.seed,
            scene_seed: p.scene_seed,
            scenes: p.scenes,
            scene_kind: p.scene_kind,
            backbone: b.kind,
            feature_channels: b.channels,
            diffusion_steps: b.diffusion_steps,
            beta_start: b.beta_start,
            beta_end: b.beta_end,
            timestep: b.timestep,
            sigma: b.sigma,
            noise_seed: b.noise_seed,
            matcher_steps: m.steps,
            denoiser_steps: m.denoiser_steps,
            matcher_lr: m.lr,
            matcher_crop: m.crop,
            temperature: m.temperature,
            max_rotation_deg: m.max_rotation_deg,
            min_accuracy: m.min_accuracy,
            gate_shift_px: m.gate_shift_px,
            restorer_channels: p.restorer_config.channels,
            restorer_steps: r.steps,
            restorer_lr: r.lr,
            restorer_crop: r.crop,
            restorer_noise_sigma: r.noise_sigma,
            max_blur: r.max_blur,
            reference_shift: r.reference_shift,
            min_gain_db: r.min_gain_db,
        }
    }
}

impl PretrainSettings {
    pub fn to_pretraining(&self, size: usize, channels: usize) -> Pretraining {
        Pretraining {
            seed: self.seed,
            scene_seed: self.scene_seed,
            scenes: self.scenes,
            scene_kind: self.scene_kind,
            size,
            backbone: BackboneConfig {
                kind: self.backbone,
                in_channels: channels,
                channels: self.feature_channels,
                diffusion_steps: self.diffusion_steps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                timestep: self.timestep,
                sigma: self.sigma,
                noise_seed: self.noise_seed,
            },
            matcher: MatcherTraining {
                steps: self.matcher_steps,
                denoiser_steps: self.denoiser_steps,
                lr: self.matcher_lr,
                crop: self.matcher_crop,
                temperature: self.temperature,
                max_rotation_deg: self.max_rotation_deg,
                min_accuracy: self.min_accuracy,
                gate_shift_px: self.gate_shift_px,
            },
            restorer_config: RestorerConfig { in_channels: channels, channels: self.restorer_channels },
            restorer: RestorerTraining {
                steps: self.restorer_steps,
                lr: self.restorer_lr,
                crop: self.restorer_crop,
                noise_sigma: self.restorer_noise_sigma,
                max_blur: self.max_blur,
                reference_shift: self.reference_shift,
                min_gain_db: self.min_gain_db,
            },
        }
    }
}

/// Adaptation settings; `seed` is the run seed each pair's adapter seed is
/// derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub seed: u64,
    pub lambda_p: f64,
    pub eps_norm: f64,
    pub ld_per_entry: bool,
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub rank: usize,
    pub feedback: bool,
    pub ransac_iterations: usize,
    pub ransac_threshold_px: f64,
    pub ransac_seed: u64,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        let a = AdaptConfig::default();
        AdaptSettings {
            seed: a.seed,
            lambda_p: a.lambda_p,
            eps_norm: a.eps_norm,
            ld_per_entry: a.ld_per_entry,
            max_iters: a.max_iters,
            plateau_window: a.plateau_window,
            plateau_delta: a.plateau_delta,
            lr: a.lr,
            lr_halve_every: a.lr_halve_every,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.adam_eps,
            weight_decay: a.weight_decay,
            rank: a.rank,
            feedback: a.feedback,
            ransac_iterations: a.ransac.iterations,
            ransac_threshold_px: a.ransac.inlier_threshold_px,
            ransac_seed: a.ransac.seed,
        }
    }
}

impl AdaptSettings {
    pub fn to_config(&self) -> AdaptConfig {
        AdaptConfig {
            lambda_p: self.lambda_p,
            eps_norm: self.eps_norm,
            ld_per_entry: self.ld_per_entry,
            max_iters: self.max_iters,
            plateau_window: self.plateau_window,
            plateau_delta: self.plateau_delta,
            lr: self.lr,
            lr_halve_every: self.lr_halve_every,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            rank: self.rank,
            feedback: self.feedback,
            seed: self.seed,
            ransac: RansacConfig {
                iterations: self.ransac_iterations,
                inlier_threshold_px: self.ransac_threshold_px,
                seed: self.ransac_seed,
            },
            zero_grad_from: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use matres_core::synth::CorpusConfig;

    #[test]
    fn defaults_match_the_library() {
        assert_eq!(AdaptSettings::default().to_config(), AdaptConfig::default());
        assert_eq!(PretrainSettings::default().to_pretraining(64, 3), Pretraining::default());
    }

    #[test]
    fn precedence_and_typing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "# comment\n\nseed = 3\nlr = 0.01\nfeedback = false\nmax_iters = 7\n").unwrap();
        let s: AdaptSettings = resolve(Some(&path), &[], None).unwrap();
        assert_eq!((s.seed, s.lr, s.feedback, s.max_iters), (3, 0.01, false, 7));
        let s: AdaptSettings = resolve(Some(&path), &[], Some("11")).unwrap();
        assert_eq!(s.seed, 11);
        let s: AdaptSettings = resolve(Some(&path), &["seed=12".into(), "lr = 1".into()], Some("11")).unwrap();
        assert_eq!((s.seed, s.lr), (12, 1.0));
        let c: CorpusConfig = resolve(None, &["scene=checker".into(), "pairs=3".into()], None).unwrap();
        assert_eq!((c.scene, c.pairs), (SceneKind::Checker, 3));
    }

    #[test]
    fn unknown_and_malformed_keys_are_usage_errors() {
        for sets in [vec!["bogus=1".to_string()], vec!["lr".to_string()], vec!["lr=fast".to_string()]] {
            let e = resolve::<AdaptSettings>(None, &sets, None).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{e}");
        }
        assert!(resolve::<AdaptSettings>(None, &["bogus=1".into()], None).unwrap_err().to_string().contains("bogus"));
        assert!(resolve::<AdaptSettings>(None, &[], Some("-3")).is_err());
        assert!(parse_text("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn rendered_config_resolves_to_itself() {
        let s = PretrainSettings { backbone: BackboneKind::Diffusion, beta_end: 0.1 + 0.2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.cfg");
        std::fs::write(&path, render(&s, "pretrain").unwrap()).unwrap();
        assert_eq!(resolve::<PretrainSettings>(Some(&path), &[], None).unwrap(), s);
        let c = CorpusConfig::default();
        std::fs::write(&path, render(&c, "synth").unwrap()).unwrap();
        assert_eq!(resolve::<CorpusConfig>(Some(&path), &[], None).unwrap(), c);
    }
}
