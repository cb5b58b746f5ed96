use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::{Autoencoder, Detector, FeatureMap, ProposalSet};

use super::conformal::{bh_decide, conformal_p, Decision, Rule};
use super::matching::match_loss;
use super::residual::{pair_view, CalibrationSet};

/// Trained autoencoder plus the calibration set built with it.
#[derive(Clone, Debug)]
pub struct MadeArtifacts {
    pub autoencoder: Autoencoder,
    pub calibration: CalibrationSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseParams {
    pub alpha: f64,
    pub phi: f64,
    pub conf_threshold: f64,
}

impl DefenseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CoreError::Invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.phi >= 0.0) || !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(CoreError::Invalid("phi must be nonnegative and the threshold in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub agent: usize,
    pub match_loss: f64,
    pub recon_loss: f64,
    pub p_match: f64,
    pub p_recon: f64,
    pub decision: Decision,
    pub rule_fired: Rule,
}

impl Verdict {
    pub fn is_malicious(&self) -> bool {
        self.decision == Decision::Malicious
    }

    /// Whether the stored decision is what `bh_decide` gives for the stored p-values.
    pub fn consistent(&self, alpha: f64) -> bool {
        let in_range = |p: f64| p > 0.0 && p <= 1.0;
        in_range(self.p_match) && in_range(self.p_recon) && bh_decide(self.p_match, self.p_recon, alpha) == (self.decision, self.rule_fired)
    }
}

/// Tests one collaborator against the ego with both statistics.
pub fn inspect_agent(
    detector: &Detector,
    ego: &FeatureMap,
    agent: &FeatureMap,
    artifacts: &MadeArtifacts,
    params: &DefenseParams,
) -> Result<Verdict> {
    if agent.agent == ego.agent {
        return Err(CoreError::Invalid("cannot inspect the ego itself".into()));
    }
    let view = pair_view(detector, ego, agent)?;
    let lm = match_loss(&view.y_ego, &view.y_pair, params.phi, params.conf_threshold);
    let lr = artifacts.autoencoder.recon_loss(&view.residual()?.tensor)?;
    let p_match = conformal_p(lm, &artifacts.calibration.match_losses)?;
    let p_recon = conformal_p(lr, &artifacts.calibration.recon_losses)?;
    let (decision, rule_fired) = bh_decide(p_match, p_recon, params.alpha);
    Ok(Verdict {
        agent: agent.agent,
        match_loss: lm,
        recon_loss: lr,
        p_match,
        p_recon,
        decision,
        rule_fired,
    })
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub verdicts: Vec<Verdict>,
    /// Ego detection fused with the kept maps only.
    pub proposals: ProposalSet,
}

/// Inspects every received map, drops those judged malicious, and detects with the rest.
///
/// `ego` is the ego's encoded observation `f_E(obs)`.
pub fn made_filter(
    detector: &Detector,
    ego: &FeatureMap,
    received: &[FeatureMap],
    artifacts: &MadeArtifacts,
    params: &DefenseParams,
) -> Result<FilterOutcome> {
    let verdicts = received
        .iter()
        .map(|f| inspect_agent(detector, ego, f, artifacts, params))
        .collect::<Result<Vec<_>>>()?;
    let kept_maps: Vec<&FeatureMap> = received
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| !v.is_malicious())
        .map(|(f, _)| f)
        .collect();
    let proposals = detector.detect_features(ego, &detector.slots(&kept_maps)?)?;
    Ok(FilterOutcome {
        kept: kept_maps.iter().map(|f| f.agent).collect(),
        verdicts,
        proposals,
    })
}
