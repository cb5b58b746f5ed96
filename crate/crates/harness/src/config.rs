//! Experiment configuration, bundled presets, and config hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use made_core::defense::{DefenseParams, PairingMode};
use made_core::pipeline::{AutoencoderArch, DetectorArch, DetectorHyper, TrainHyper};
use made_core::rng::derive_seed;
use made_core::scene::SceneConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub autoencoder: AutoencoderConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<AdaptiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_ablation: Option<PhiAblationConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub feature_channels: usize,
    pub hidden_channels: usize,
    pub train_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "one")]
    pub lr_decay_factor: f64,
    pub keep_prob: f64,
    pub fg_weight: f64,
    pub box_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
    /// Benign frames collected for the bank; each contributes one map per agent.
    pub bank_frames: usize,
    /// Share of bank frames used for autoencoder training; the rest calibrate.
    pub train_fraction: f64,
    #[serde(default)]
    pub pairing: PairingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Budgets to evaluate; 0 means no attack.
    pub epsilons: Vec<f64>,
    pub steps: usize,
    /// PGD step size as a fraction of `ε`.
    pub step_fraction: f64,
    pub mode: String,
    pub attackers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub alpha: f64,
    pub phi: f64,
    pub conf_threshold: f64,
    pub scenarios: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub scenes: usize,
    /// `ϱ` threshold for detections and for the attacker's target selection.
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub nms_iou: f64,
}

/// Several attackers per instance, for each coordination mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub attackers: usize,
    pub modes: Vec<String>,
    pub epsilon: f64,
    pub scenarios: Vec<String>,
}

/// MADE re-run with each `φ` against the attack at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiAblationConfig {
    pub phis: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Where reports are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Where trained artifacts live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<PathBuf>,
    /// Train artifacts that are missing instead of failing.
    #[serde(default)]
    pub train_missing: bool,
}

fn one() -> f64 {
    1.0
}

pub const PRESETS: &[(&str, &str)] = &[
    ("full", include_str!("../../../configs/full.toml")),
    ("end-to-end", include_str!("../../../configs/end-to-end.toml")),
    ("adaptive", include_str!("../../../configs/adaptive.toml")),
    ("phi-ablation", include_str!("../../../configs/phi-ablation.toml")),
    ("unsupervised", include_str!("../../../configs/unsupervised.toml")),
    ("smoke", include_str!("../../../configs/smoke.toml")),
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| HarnessError::Config(format!("no preset named `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file, or a bundled preset when `path` names one.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(name) = path.to_str().filter(|s| PRESETS.iter().any(|(n, _)| n == s)) {
                return Self::preset(name);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.scene.validate()?;
        self.defense_params(self.defense.phi).validate()?;
        if self.scene.num_agents < 3 && self.defense.scenarios.iter().any(|s| s == "mad-unsupervised") {
            return bad("mad-unsupervised needs at least 3 agents".into());
        }
        if self.attack.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad("epsilons must be finite and nonnegative".into());
        }
        if self.attack.attackers == 0 || self.attack.attackers >= self.scene.num_agents {
            return bad(format!("{} attackers do not fit {} agents", self.attack.attackers, self.scene.num_agents));
        }
        if let Some(a) = &self.adaptive {
            if a.attackers == 0 || a.attackers >= self.scene.num_agents {
                return bad("adaptive attacker count out of range".into());
            }
        }
        if self.evaluation.scenes == 0 || self.detector.train_scenes == 0 {
            return bad("scene counts must be positive".into());
        }
        if !(self.autoencoder.train_fraction > 0.0 && self.autoencoder.train_fraction < 1.0) {
            return bad("autoencoder train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn detector_arch(&self) -> DetectorArch {
        DetectorArch::for_scene(&self.scene, self.detector.feature_channels, self.detector.hidden_channels)
    }

    pub fn detector_hyper(&self) -> DetectorHyper {
        let d = &self.detector;
        DetectorHyper {
            train: TrainHyper {
                epochs: d.epochs,
                batch_size: d.batch_size,
                learning_rate: d.learning_rate,
                lr_decay_every: d.lr_decay_every,
                lr_decay_factor: d.lr_decay_factor,
                seed: derive_seed(self.seed, "detector-train", 0),
            },
            keep_prob: d.keep_prob,
            fg_weight: d.fg_weight,
            box_weight: d.box_weight,
        }
    }

    pub fn autoencoder_arch(&self) -> AutoencoderArch {
        AutoencoderArch {
            height: self.scene.grid_size,
            width: self.scene.grid_size,
            channels: self.detector.feature_channels,
            hidden_channels: self.autoencoder.hidden_channels,
            bottleneck_channels: self.autoencoder.bottleneck_channels,
        }
    }

    pub fn autoencoder_hyper(&self) -> TrainHyper {
        let a = &self.autoencoder;
        TrainHyper {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
            seed: derive_seed(self.seed, "autoencoder-train", 0),
        }
    }

    pub fn defense_params(&self, phi: f64) -> DefenseParams {
        DefenseParams {
            alpha: self.defense.alpha,
            phi,
            conf_threshold: self.defense.conf_threshold,
        }
    }

    /// Hash of everything that determines the report (output locations excluded).
    pub fn hash(&self) -> String {
        sha256_json(&self.without_output())
    }

    /// Hash of the sections that determine the trained artifacts.
    pub fn artifact_hash(&self) -> String {
        sha256_json(&(self.seed, &self.scene, &self.detector, &self.autoencoder))
    }

    pub fn without_output(&self) -> Self {
        Self {
            output: OutputConfig::default(),
            ..self.clone()
        }
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
