//! Trained artifacts: detector, benign bank, autoencoder, calibration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use made_core::defense::{
    build_residual_training_set, BenignBank, CalibrationOptions, CalibrationSet, MadeArtifacts,
};
use made_core::pipeline::{train_autoencoder, train_detector, Autoencoder, Detector, FeatureMap, TrainReport, TrainingSample};
use made_core::rng::derive_seed;
use made_core::scene::{generate_scene, render_observation, Scene};
use made_tensor::Checkpoint;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneSplit {
    Train,
    Bank,
    Eval,
}

impl SceneSplit {
    fn label(self) -> &'static str {
        match self {
            Self::Train => "train-scene",
            Self::Bank => "bank-scene",
            Self::Eval => "eval-scene",
        }
    }
}

/// Seed of the `index`-th scene of a split.
pub fn scene_seed(cfg: &ExperimentConfig, split: SceneSplit, index: usize) -> u64 {
    derive_seed(cfg.seed, split.label(), index as u64)
}

pub fn scenes(cfg: &ExperimentConfig, split: SceneSplit, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| Ok(generate_scene(scene_seed(cfg, split, i), &cfg.scene)?))
        .collect()
}

pub fn training_samples(cfg: &ExperimentConfig) -> Result<Vec<TrainingSample>> {
    scenes(cfg, SceneSplit::Train, cfg.detector.train_scenes)?
        .into_iter()
        .map(|s| Ok(TrainingSample::new(s, &cfg.scene)?))
        .collect()
}

/// Every agent's encoded map for one scene, in agent order.
pub fn encode_scene(detector: &Detector, scene: &Scene, cfg: &ExperimentConfig) -> Result<Vec<FeatureMap>> {
    (0..scene.agent_poses.len())
        .map(|a| Ok(detector.encode(&render_observation(scene, a, &cfg.scene)?)?))
        .collect()
}

pub fn train_detector_artifact(cfg: &ExperimentConfig) -> Result<(Detector, TrainReport)> {
    let data = training_samples(cfg)?;
    let mut det = Detector::init(cfg.detector_arch(), derive_seed(cfg.seed, "detector-init", 0))?;
    let report = train_detector(&mut det, &data, &cfg.detector_hyper())?;
    Ok((det, report))
}

/// The benign bank split into autoencoder-training and calibration frames.
pub fn benign_banks(detector: &Detector, cfg: &ExperimentConfig) -> Result<(BenignBank, BenignBank)> {
    let frames = scenes(cfg, SceneSplit::Bank, cfg.autoencoder.bank_frames)?
        .iter()
        .map(|s| encode_scene(detector, s, cfg))
        .collect::<Result<_>>()?;
    let bank = BenignBank { frames };
    Ok(bank.split(cfg.autoencoder.train_fraction, derive_seed(cfg.seed, "bank-split", 0)))
}

pub fn train_autoencoder_artifact(detector: &Detector, cfg: &ExperimentConfig) -> Result<(Autoencoder, TrainReport)> {
    let (train_bank, _) = benign_banks(detector, cfg)?;
    let residuals: Vec<_> = build_residual_training_set(
        &train_bank,
        detector,
        cfg.autoencoder.pairing,
        cfg.autoencoder.max_pairs,
        derive_seed(cfg.seed, "residual-pairs", 0),
    )?
    .into_iter()
    .map(|r| r.tensor)
    .collect();
    let mut ae = Autoencoder::init(cfg.autoencoder_arch(), derive_seed(cfg.seed, "autoencoder-init", 0))?;
    let report = train_autoencoder(&mut ae, &residuals, &cfg.autoencoder_hyper())?;
    Ok((ae, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    artifact_hash: String,
}

/// Trained detector and autoencoder plus the calibration frames.
pub struct Lab {
    pub detector: Detector,
    pub autoencoder: Autoencoder,
    pub calibration_bank: BenignBank,
    /// Training curves, present only when this lab trained the models.
    pub detector_report: Option<TrainReport>,
    pub autoencoder_report: Option<TrainReport>,
}

impl Lab {
    /// Trains everything in memory.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (detector, dr) = train_detector_artifact(cfg)?;
        let (autoencoder, ar) = train_autoencoder_artifact(&detector, cfg)?;
        let (_, calibration_bank) = benign_banks(&detector, cfg)?;
        Ok(Self {
            detector,
            autoencoder,
            calibration_bank,
            detector_report: Some(dr),
            autoencoder_report: Some(ar),
        })
    }

    /// Loads artifacts from `dir`, training and saving the missing ones when `train_missing`.
    pub fn open(cfg: &ExperimentConfig, dir: &Path, train_missing: bool) -> Result<Self> {
        check_manifest(cfg, dir, train_missing)?;
        let det_path = dir.join(DETECTOR_FILE);
        let (detector, detector_report) = match load(&det_path)? {
            Some(c) => (Detector::from_checkpoint(&c)?, None),
            None if train_missing => {
                let (d, r) = train_detector_artifact(cfg)?;
                save(&d.to_checkpoint(), &det_path)?;
                (d, Some(r))
            }
            None => return Err(HarnessError::MissingArtifact(det_path)),
        };
        let ae_path = dir.join(AUTOENCODER_FILE);
        let (autoencoder, autoencoder_report) = match load(&ae_path)? {
            Some(c) => (Autoencoder::from_checkpoint(&c)?, None),
            None if train_missing => {
                let (a, r) = train_autoencoder_artifact(&detector, cfg)?;
                save(&a.to_checkpoint(), &ae_path)?;
                (a, Some(r))
            }
            None => return Err(HarnessError::MissingArtifact(ae_path)),
        };
        let (_, calibration_bank) = benign_banks(&detector, cfg)?;
        Ok(Self {
            detector,
            autoencoder,
            calibration_bank,
            detector_report,
            autoencoder_report,
        })
    }

    /// Conformal calibration for one `φ`, from the held-out bank frames.
    pub fn calibration(&self, cfg: &ExperimentConfig, phi: f64) -> Result<CalibrationSet> {
        let opts = CalibrationOptions {
            phi,
            conf_threshold: cfg.defense.conf_threshold,
            pairing: cfg.autoencoder.pairing,
            max_pairs: cfg.autoencoder.max_pairs,
            seed: derive_seed(cfg.seed, "calibration-pairs", 0),
        };
        Ok(CalibrationSet::build(&self.detector, &self.autoencoder, &self.calibration_bank, &opts)?)
    }

    pub fn made_artifacts(&self, cfg: &ExperimentConfig, phi: f64) -> Result<MadeArtifacts> {
        Ok(MadeArtifacts {
            autoencoder: self.autoencoder.clone(),
            calibration: self.calibration(cfg, phi)?,
        })
    }
}

/// Default on-disk location for a config's artifacts under `root`.
pub fn artifact_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("lab-{}", &cfg.artifact_hash()[..16]))
}

fn check_manifest(cfg: &ExperimentConfig, dir: &Path, create: bool) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let expected = cfg.artifact_hash();
    match std::fs::read(&path) {
        Ok(bytes) => {
            let m: Manifest = serde_json::from_slice(&bytes)?;
            if m.artifact_hash != expected {
                return Err(HarnessError::HashMismatch {
                    dir: dir.to_path_buf(),
                    expected,
                    found: m.artifact_hash,
                });
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if !create {
                return Err(HarnessError::MissingArtifact(path));
            }
            let m = Manifest { artifact_hash: expected };
            write_atomic(&path, &serde_json::to_vec_pretty(&m)?)
        }
        Err(e) => Err(HarnessError::io(&path, e)),
    }
}

/// Writes the manifest for `cfg` into `dir` unless one exists; fails on a mismatch.
pub fn init_artifact_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    check_manifest(cfg, dir, true)
}

fn load(path: &Path) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(Checkpoint::load(path)?))
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

/// Writes through a sibling temp file and a rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}
