//! Layered run configuration: defaults, then a TOML file, then environment
//! variables, then CLI flags.
//!
//! Every key can be overridden with `PARADIFF_<PATH>` where `<PATH>` is the
//! config path upper-cased with separators replaced by `_`, e.g.
//! `train.steps` becomes `PARADIFF_TRAIN_STEPS` and
//! `rl.decode.image_steps` becomes `PARADIFF_RL_DECODE_IMAGE_STEPS`.
//! Values parse as TOML/JSON scalars (numbers, booleans, quoted or bare
//! strings).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::real::Precision;
use crate::sampler::{DecodeSettings, GuidanceConfig};
use crate::schedule::{DecodeMode, DecodePlan, RevealSchedule, ScheduleKind};
use crate::sft::TrainConfig;
use crate::task::{KindMix, TaskConfig};

pub const ENV_PREFIX: &str = "PARADIFF_";

/// Flat decode section; assembles [`DecodeSettings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub image_steps: usize,
    pub image_schedule: ScheduleKind,
    pub text_steps: usize,
    pub text_schedule: ScheduleKind,
    pub text_block: usize,
    pub semi_ar_text: bool,
    pub guidance_image: f64,
    pub guidance_text: f64,
    pub image_temperature: f64,
    pub text_temperature: f64,
    pub reveal_lowest_confidence: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Parallel,
            image_steps: 30,
            image_schedule: ScheduleKind::Cosine,
            text_steps: 8,
            text_schedule: ScheduleKind::Linear,
            text_block: 8,
            semi_ar_text: true,
            guidance_image: 3.5,
            guidance_text: 0.0,
            image_temperature: 1.0,
            text_temperature: 0.0,
            reveal_lowest_confidence: false,
        }
    }
}

impl DecodeConfig {
    pub fn plan(&self) -> DecodePlan {
        let mut plan = DecodePlan::new(
            self.mode,
            RevealSchedule {
                kind: self.image_schedule,
                steps: self.image_steps,
            },
            RevealSchedule {
                kind: self.text_schedule,
                steps: self.text_steps,
            },
            self.text_block,
        );
        plan.semi_ar_text = self.semi_ar_text;
        plan
    }

    pub fn settings(&self) -> DecodeSettings {
        DecodeSettings {
            plan: self.plan(),
            guidance: GuidanceConfig {
                image_scale: self.guidance_image,
                text_scale: self.guidance_text,
            },
            image_temperature: self.image_temperature,
            text_temperature: self.text_temperature,
            reveal_lowest_confidence: self.reveal_lowest_confidence,
        }
    }

    /// Rollout defaults for RL: guidance off, unit image temperature.
    pub fn rl_default() -> Self {
        DecodeConfig {
            image_steps: 8,
            text_steps: 8,
            guidance_image: 0.0,
            guidance_text: 0.0,
            ..DecodeConfig::default()
        }
    }
}

/// Dataset sizes and seeds for generation and held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Base seed for training instances; held-out instances use a disjoint
    /// stream derived from the run seed.
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_size: 4096,
            eval_size: 64,
            base_seed: 1_000,
        }
    }
}

/// RL section: flat hyperparameters plus a nested rollout decode section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    pub algo: crate::rl::RlAlgo,
    pub steps: usize,
    pub group_size: usize,
    pub sample_steps: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub inner_epochs: usize,
    pub reference: crate::rl::ReferencePolicy,
    pub stats_fraction: f64,
    /// Queries in the RL split.
    pub dataset_size: usize,
    /// Difficulty of the RL split (harder than SFT by default).
    pub difficulty: f64,
    pub decode: DecodeConfig,
}

impl Default for RlSection {
    fn default() -> Self {
        RlSection {
            algo: crate::rl::RlAlgo::Trajectory,
            steps: 2000,
            group_size: 8,
            sample_steps: 3,
            clip_epsilon: 0.2,
            kl_beta: 1e-4,
            lr: 1e-4,
            inner_epochs: 1,
            reference: crate::rl::ReferencePolicy::Behavior,
            stats_fraction: 0.125,
            dataset_size: 256,
            difficulty: 1.0,
            decode: DecodeConfig::rl_default(),
        }
    }
}

impl RlSection {
    pub fn rl_config(&self, seed: u64) -> crate::rl::RlConfig {
        crate::rl::RlConfig {
            algo: self.algo,
            steps: self.steps,
            group_size: self.group_size,
            sample_steps: self.sample_steps,
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            lr: self.lr,
            inner_epochs: self.inner_epochs,
            reference: self.reference,
            stats_fraction: self.stats_fraction,
            seed,
            decode: self.decode.settings(),
        }
    }
}

/// Experiment selection for `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// One of `rq1`, `rq2`, `reweighting`.
    pub experiment: String,
    pub seeds: Vec<u64>,
    /// Sampled-step counts swept by the rq2 s-ablation.
    pub rl_s_values: Vec<usize>,
    /// Evaluate rq1 on this difficulty (the indirect split).
    pub eval_difficulty: f64,
    /// Also retrain with single-modality noising in rq1.
    pub sequential_train: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            experiment: "rq1".into(),
            seeds: vec![0, 1, 2, 3, 4],
            rl_s_values: vec![2, 3, 4],
            eval_difficulty: 1.0,
            sequential_train: false,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub out: String,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub rl: RlSection,
    pub report: ReportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            precision: Precision::F32,
            out: "runs/out".into(),
            task: TaskConfig {
                grid_n: 8,
                difficulty: 0.5,
                kinds: KindMix::Both,
            },
            data: DataConfig::default(),
            model: ModelConfig {
                d_model: 128,
                n_layers: 4,
                n_heads: 4,
                d_ff: 256,
                max_seq_len: 176,
                vocab_size: crate::task::task_vocab().size() as usize,
                seed: 0,
            },
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            rl: RlSection::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn toml_to_json(v: toml::Value) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn deep_merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_env_overrides(
    value: &mut serde_json::Value,
    path: &mut Vec<String>,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<()> {
    if let serde_json::Value::Object(map) = value {
        let keys: Vec<String> = map.keys().cloned().collect();
        for k in keys {
            path.push(k.clone());
            apply_env_overrides(map.get_mut(&k).unwrap(), path, lookup)?;
            path.pop();
        }
        return Ok(());
    }
    let name = format!(
        "{ENV_PREFIX}{}",
        path.iter()
            .map(|s| s.to_uppercase())
            .collect::<Vec<_>>()
            .join("_")
    );
    if let Some(raw) = lookup(&name) {
        let parsed: serde_json::Value = match serde_json::from_str(&raw) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(raw),
        };
        *value = parsed;
    }
    Ok(())
}

/// Load layered configuration. `file` is optional TOML; `lookup` resolves
/// environment variables (inject a map in tests).
pub fn load_config(
    file: Option<&std::path::Path>,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<Config> {
    let mut merged = serde_json::to_value(Config::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let parsed: toml::Table = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid TOML in {}: {e}", path.display())))?;
        deep_merge(&mut merged, toml_to_json(toml::Value::Table(parsed)));
    }
    apply_env_overrides(&mut merged, &mut Vec::new(), lookup)?;
    let config: Config = serde_json::from_value(merged)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// All config key paths with their default values, for documentation and
/// environment-variable listings.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(v: &serde_json::Value, path: String, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    walk(child, p, out);
                }
            }
            other => out.push((path, other.to_string())),
        }
    }
    let mut out = Vec::new();
    let v = serde_json::to_value(Config::default()).unwrap();
    walk(&v, String::new(), &mut out);
    out.sort();
    out
}
