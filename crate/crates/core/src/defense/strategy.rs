//! Defense scenarios behind a common trait, selectable by name.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::{Detector, FeatureMap, ProposalSet};

use super::conformal::{single_decide, Decision};
use super::inspect::{inspect_agent, DefenseParams, MadeArtifacts, Verdict};
use super::mad::{mad_unsupervised, pairwise_match_losses, MadVerdict};

/// What a defense sees when screening the ego's collaborators.
#[derive(Clone, Copy)]
pub struct ScreeningContext<'a> {
    pub detector: &'a Detector,
    pub ego: usize,
    /// Maps as received by the ego, one per agent in agent order (the ego's own included).
    pub maps: &'a [FeatureMap],
    /// Maps as received by the other agents. The attacker perturbs only what it sends
    /// to its victim, so these are the transmitted clean maps.
    pub peer_maps: &'a [FeatureMap],
    pub artifacts: Option<&'a MadeArtifacts>,
    pub params: DefenseParams,
    /// Ground truth, used only by the oracle.
    pub known_malicious: &'a [usize],
}

impl<'a> ScreeningContext<'a> {
    fn artifacts(&self, who: &str) -> Result<&'a MadeArtifacts> {
        self.artifacts
            .ok_or_else(|| CoreError::Invalid(format!("defense `{who}` needs trained autoencoder and calibration artifacts")))
    }

    fn collaborators(&self) -> impl Iterator<Item = &'a FeatureMap> + '_ {
        let ego = self.ego;
        self.maps.iter().filter(move |f| f.agent != ego)
    }

    fn verdicts(&self, who: &str) -> Result<Vec<Verdict>> {
        let art = self.artifacts(who)?;
        let ego = &self.maps[self.ego];
        self.collaborators()
            .map(|f| inspect_agent(self.detector, ego, f, art, &self.params))
            .collect()
    }

    /// Ego detection fused with the agents the screening kept.
    pub fn defended_output(&self, screening: &Screening) -> Result<ProposalSet> {
        let kept: Vec<&FeatureMap> = self
            .collaborators()
            .filter(|f| screening.agents.iter().any(|a| a.agent == f.agent && !a.flagged))
            .collect();
        self.detector.detect_features(&self.maps[self.ego], &self.detector.slots(&kept)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScreen {
    pub agent: usize,
    pub flagged: bool,
    pub verdict: Option<Verdict>,
    pub mad: Option<MadVerdict>,
}

/// Per-collaborator outcome of one screening.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub agents: Vec<AgentScreen>,
}

impl Screening {
    pub fn kept(&self) -> Vec<usize> {
        self.agents.iter().filter(|a| !a.flagged).map(|a| a.agent).collect()
    }

    pub fn flagged(&self) -> Vec<usize> {
        self.agents.iter().filter(|a| a.flagged).map(|a| a.agent).collect()
    }
}

pub trait DefenseStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening>;
}

fn plain(ctx: &ScreeningContext<'_>, flag: impl Fn(usize) -> bool) -> Screening {
    Screening {
        agents: ctx
            .collaborators()
            .map(|f| AgentScreen {
                agent: f.agent,
                flagged: flag(f.agent),
                verdict: None,
                mad: None,
            })
            .collect(),
    }
}

fn supervised(ctx: &ScreeningContext<'_>, who: &str, flag: impl Fn(&Verdict) -> bool) -> Result<Screening> {
    Ok(Screening {
        agents: ctx
            .verdicts(who)?
            .into_iter()
            .map(|v| AgentScreen {
                agent: v.agent,
                flagged: flag(&v),
                verdict: Some(v),
                mad: None,
            })
            .collect(),
    })
}

/// Keeps every collaborator.
pub struct NoDefense;

/// Removes exactly the true malicious agents.
pub struct Oracle;

/// Conformal test on the match loss alone, at level `α`.
pub struct MatchLossOnly;

/// Conformal test on the reconstruction loss alone, at level `α`.
pub struct ReconLossOnly;

/// Both statistics combined by the Benjamini-Hochberg rule.
pub struct Made;

/// Median-absolute-deviation rule on pairwise match losses; needs no calibration.
pub struct MadUnsupervised;

impl DefenseStrategy for NoDefense {
    fn name(&self) -> &'static str {
        "no-defense"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        Ok(plain(ctx, |_| false))
    }
}

impl DefenseStrategy for Oracle {
    fn name(&self) -> &'static str {
        "oracle"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        Ok(plain(ctx, |a| ctx.known_malicious.contains(&a)))
    }
}

impl DefenseStrategy for MatchLossOnly {
    fn name(&self) -> &'static str {
        "ml-only"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        supervised(ctx, self.name(), |v| single_decide(v.p_match, ctx.params.alpha) == Decision::Malicious)
    }
}

impl DefenseStrategy for ReconLossOnly {
    fn name(&self) -> &'static str {
        "crl-only"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        supervised(ctx, self.name(), |v| single_decide(v.p_recon, ctx.params.alpha) == Decision::Malicious)
    }
}

impl DefenseStrategy for Made {
    fn name(&self) -> &'static str {
        "made"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        supervised(ctx, self.name(), Verdict::is_malicious)
    }
}

impl DefenseStrategy for MadUnsupervised {
    fn name(&self) -> &'static str {
        "mad-unsupervised"
    }
    fn screen(&self, ctx: &ScreeningContext<'_>) -> Result<Screening> {
        let views: Vec<&[FeatureMap]> = (0..ctx.maps.len())
            .map(|a| if a == ctx.ego { ctx.maps } else { ctx.peer_maps })
            .collect();
        let losses = pairwise_match_losses(ctx.detector, &views, ctx.params.phi, ctx.params.conf_threshold)?;
        let out = mad_unsupervised(&losses, ctx.ego)?;
        Ok(Screening {
            agents: out
                .verdicts
                .into_iter()
                .map(|v| AgentScreen {
                    agent: v.agent,
                    flagged: v.flagged,
                    verdict: None,
                    mad: Some(v),
                })
                .collect(),
        })
    }
}

/// Defense strategies by name.
pub struct DefenseRegistry {
    strategies: Vec<Box<dyn DefenseStrategy>>,
}

impl Default for DefenseRegistry {
    fn default() -> Self {
        let mut r = Self { strategies: Vec::new() };
        r.register(Box::new(NoDefense));
        r.register(Box::new(Oracle));
        r.register(Box::new(MatchLossOnly));
        r.register(Box::new(ReconLossOnly));
        r.register(Box::new(Made));
        r.register(Box::new(MadUnsupervised));
        r
    }
}

impl DefenseRegistry {
    /// Adds a strategy, replacing any strategy with the same name.
    pub fn register(&mut self, s: Box<dyn DefenseStrategy>) {
        self.strategies.retain(|x| x.name() != s.name());
        self.strategies.push(s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DefenseStrategy> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| CoreError::Unknown {
                kind: "defense scenario",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }
}
