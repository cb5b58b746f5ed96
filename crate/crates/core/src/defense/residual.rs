//! Residual feature maps, the benign bank, and conformal calibration sets.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use made_tensor::{Eager, Ops, Tensor};

use crate::error::{CoreError, Result};
use crate::pipeline::{Autoencoder, Detector, FeatureMap, FusedFeature, ProposalSet};
use crate::rng::rng_for;

use super::matching::match_loss;

/// `R_{ego+i} = Z_{ego+i} − Z_ego`.
#[derive(Clone, Debug)]
pub struct ResidualMap {
    pub tensor: Tensor,
}

/// Fused features and outputs for the ego alone and with one collaborator.
#[derive(Clone, Debug)]
pub struct PairView {
    pub z_ego: FusedFeature,
    pub z_pair: FusedFeature,
    pub y_ego: ProposalSet,
    pub y_pair: ProposalSet,
}

impl PairView {
    pub fn residual(&self) -> Result<ResidualMap> {
        Ok(ResidualMap {
            tensor: Eager.sub(&self.z_pair.tensor, &self.z_ego.tensor)?,
        })
    }
}

/// `Z_ego = f_G(F_ego; {0, …})` and its decoded proposals.
pub fn ego_view(detector: &Detector, ego: &FeatureMap) -> Result<(FusedFeature, ProposalSet)> {
    let none = detector.slots(&[])?;
    let z = detector.fuse(ego, &none)?;
    let y = detector.decode(&z)?;
    Ok((z, y))
}

pub fn pair_view(detector: &Detector, ego: &FeatureMap, other: &FeatureMap) -> Result<PairView> {
    let (z_ego, y_ego) = ego_view(detector, ego)?;
    let z_pair = detector.fuse(ego, &detector.slots(&[other])?)?;
    let y_pair = detector.decode(&z_pair)?;
    Ok(PairView {
        z_ego,
        z_pair,
        y_ego,
        y_pair,
    })
}

pub fn residual_map(detector: &Detector, ego: &FeatureMap, other: &FeatureMap) -> Result<ResidualMap> {
    let none = detector.slots(&[])?;
    let z_ego = detector.fuse(ego, &none)?;
    let z_pair = detector.fuse(ego, &detector.slots(&[other])?)?;
    Ok(ResidualMap {
        tensor: Eager.sub(&z_pair.tensor, &z_ego.tensor)?,
    })
}

/// Benign feature maps collected offline, grouped by the frame (scene) they came from.
#[derive(Clone, Debug, Default)]
pub struct BenignBank {
    pub frames: Vec<Vec<FeatureMap>>,
}

/// Which ordered pairs `(F, F')` of bank maps are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Pairs of distinct maps from the same frame, as in a live collaboration.
    #[default]
    WithinFrame,
    /// Every pair of distinct maps in the bank.
    AcrossBank,
}

/// Position of a map in the bank: `(frame, index within frame)`.
pub type BankIndex = (usize, usize);

impl BenignBank {
    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, at: BankIndex) -> &FeatureMap {
        &self.frames[at.0][at.1]
    }

    /// All ordered pairs under `mode`, in a fixed order.
    pub fn pairs(&self, mode: PairingMode) -> Vec<(BankIndex, BankIndex)> {
        let mut out = Vec::new();
        match mode {
            PairingMode::WithinFrame => {
                for (f, maps) in self.frames.iter().enumerate() {
                    for a in 0..maps.len() {
                        for b in (0..maps.len()).filter(|&b| b != a) {
                            out.push(((f, a), (f, b)));
                        }
                    }
                }
            }
            PairingMode::AcrossBank => {
                let all: Vec<BankIndex> = self
                    .frames
                    .iter()
                    .enumerate()
                    .flat_map(|(f, m)| (0..m.len()).map(move |i| (f, i)))
                    .collect();
                for &a in &all {
                    for &b in all.iter().filter(|&&b| b != a) {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }

    /// Pairs under `mode`, subsampled without replacement to at most `cap` (order kept).
    pub fn sampled_pairs(&self, mode: PairingMode, cap: Option<usize>, seed: u64) -> Result<Vec<(BankIndex, BankIndex)>> {
        let pairs = self.pairs(mode);
        if pairs.is_empty() {
            return Err(CoreError::BankTooSmall(format!(
                "{} maps in {} frames yield no ordered pairs",
                self.len(),
                self.frames.len()
            )));
        }
        Ok(match cap {
            Some(c) if c < pairs.len() => {
                let mut rng = rng_for(seed, "pair-subsample", 0);
                let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), c).into_vec();
                keep.sort_unstable();
                keep.into_iter().map(|i| pairs[i]).collect()
            }
            _ => pairs,
        })
    }

    /// Splits frames into two banks; the first receives `round(fraction · frames)`.
    pub fn split(&self, fraction: f64, seed: u64) -> (BenignBank, BenignBank) {
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        order.shuffle(&mut rng_for(seed, "bank-split", 0));
        let cut = (fraction * self.frames.len() as f64).round() as usize;
        let (a, b) = order.split_at(cut.min(order.len()));
        let take = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            BenignBank {
                frames: idx.into_iter().map(|i| self.frames[i].clone()).collect(),
            }
        };
        (take(a), take(b))
    }
}

/// The residual training set `ℛ`.
pub fn build_residual_training_set(
    bank: &BenignBank,
    detector: &Detector,
    mode: PairingMode,
    cap: Option<usize>,
    seed: u64,
) -> Result<Vec<ResidualMap>> {
    if bank.len() < 2 {
        return Err(CoreError::BankTooSmall(format!("need at least 2 maps, have {}", bank.len())));
    }
    bank.sampled_pairs(mode, cap, seed)?
        .into_par_iter()
        .map(|(a, b)| residual_map(detector, bank.get(a), bank.get(b)))
        .collect()
}

/// Sorted benign statistics `𝒥_1` (match loss) and `𝒥_2` (reconstruction loss).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub match_losses: Vec<f64>,
    pub recon_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub phi: f64,
    pub conf_threshold: f64,
    pub pairing: PairingMode,
    pub max_pairs: Option<usize>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(mut match_losses: Vec<f64>, mut recon_losses: Vec<f64>) -> Result<Self> {
        if match_losses.is_empty() || recon_losses.is_empty() {
            return Err(CoreError::EmptyCalibration);
        }
        if match_losses.iter().chain(&recon_losses).any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("calibration values must be finite".into()));
        }
        match_losses.sort_by(f64::total_cmp);
        recon_losses.sort_by(f64::total_cmp);
        Ok(Self {
            match_losses,
            recon_losses,
        })
    }

    /// Computes both statistics on every sampled benign pair of `bank`.
    pub fn build(detector: &Detector, ae: &Autoencoder, bank: &BenignBank, opts: &CalibrationOptions) -> Result<Self> {
        let pairs = bank.sampled_pairs(opts.pairing, opts.max_pairs, opts.seed)?;
        let stats: Vec<(f64, f64)> = pairs
            .into_par_iter()
            .map(|(a, b)| {
                let v = pair_view(detector, bank.get(a), bank.get(b))?;
                let lm = match_loss(&v.y_ego, &v.y_pair, opts.phi, opts.conf_threshold);
                let lr = ae.recon_loss(&v.residual()?.tensor)?;
                Ok((lm, lr))
            })
            .collect::<Result<_>>()?;
        let (m, r) = stats.into_iter().unzip();
        Self::new(m, r)
    }
}
