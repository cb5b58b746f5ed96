//! Unsupervised screening with a median-absolute-deviation outlier rule.
//!
//! Every agent `a` plays ego in turn: `L[a][b] = L_m(Y_a, Y_{a+b})` with
//! `Y_a = f_D(f_G(F_a; 0))` and `Y_{a+b} = f_D(f_G(F_a; {F_b}))`, each
//! computed from the maps as agent `a` received them. An attack targets
//! one victim, so only the victim's row sees perturbed maps. The median and
//! MAD are taken over all ordered pairs; each loss in the ego's row is
//! scored against them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::{Detector, FeatureMap};

use super::matching::match_loss;
use super::residual::ego_view;

pub const MAD_SCALE: f64 = 1.4826;
pub const MAD_THRESHOLD: f64 = 2.0;
pub const MAD_FLOOR: f64 = 1e-9;

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadScores {
    pub median: f64,
    /// Median absolute deviation of the reference, before flooring.
    pub mad: f64,
    /// `S = (L − median) / (1.4826 · max(mad, 1e-9))` per candidate.
    pub scores: Vec<f64>,
}

pub fn mad_scores(reference: &[f64], candidates: &[f64]) -> Result<MadScores> {
    if reference.is_empty() {
        return Err(CoreError::Invalid("MAD reference set is empty".into()));
    }
    let med = median(reference);
    let dev: Vec<f64> = reference.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&dev);
    let scale = MAD_SCALE * mad.max(MAD_FLOOR);
    Ok(MadScores {
        median: med,
        mad,
        scores: candidates.iter().map(|l| (l - med) / scale).collect(),
    })
}

/// `L[a][b]` for all ordered pairs; the diagonal is 0 and unused.
///
/// `views[a]` holds one map per agent, in agent order, as received by agent `a`.
pub fn pairwise_match_losses(detector: &Detector, views: &[&[FeatureMap]], phi: f64, conf_threshold: f64) -> Result<Vec<Vec<f64>>> {
    let n = views.len();
    if views.iter().any(|v| v.len() != n) {
        return Err(CoreError::Invalid("every view needs one map per agent".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|a| {
            let maps = views[a];
            let (_, y_a) = ego_view(detector, &maps[a])?;
            (0..n)
                .map(|b| {
                    if a == b {
                        return Ok(0.0);
                    }
                    let y_ab = detector.detect_features(&maps[a], &detector.slots(&[&maps[b]])?)?;
                    Ok(match_loss(&y_a, &y_ab, phi, conf_threshold))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadVerdict {
    pub agent: usize,
    pub match_loss: f64,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadOutcome {
    pub median: f64,
    pub mad: f64,
    pub verdicts: Vec<MadVerdict>,
}

/// Flags non-ego agents whose ego-pair loss scores above 2.
pub fn mad_unsupervised(losses: &[Vec<f64>], ego: usize) -> Result<MadOutcome> {
    let n = losses.len();
    if n < 3 {
        return Err(CoreError::Invalid(format!("MAD screening needs at least 3 agents, got {n}")));
    }
    if ego >= n || losses.iter().any(|r| r.len() != n) {
        return Err(CoreError::Invalid("loss matrix must be square and contain the ego".into()));
    }
    let reference: Vec<f64> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| losses[a][b]))
        .collect();
    let agents: Vec<usize> = (0..n).filter(|&b| b != ego).collect();
    let ego_losses: Vec<f64> = agents.iter().map(|&b| losses[ego][b]).collect();
    let s = mad_scores(&reference, &ego_losses)?;
    let verdicts = agents
        .iter()
        .zip(&ego_losses)
        .zip(&s.scores)
        .map(|((&agent, &l), &score)| MadVerdict {
            agent,
            match_loss: l,
            score,
            flagged: score > MAD_THRESHOLD,
        })
        .collect();
    Ok(MadOutcome {
        median: s.median,
        mad: s.mad,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let s = mad_scores(&[1.0, 2.0, 3.0, 4.0], &[100.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mad, 1.0);
        assert!((s.scores[0] - 97.5 / 1.4826).abs() < 1e-12);
        assert!((s.scores[0] - 65.76).abs() < 0.01);
    }

    #[test]
    fn equal_losses_flag_nobody() {
        let l = vec![vec![0.3; 4]; 4];
        let out = mad_unsupervised(&l, 3).unwrap();
        assert_eq!(out.mad, 0.0);
        assert!(out.verdicts.iter().all(|v| v.score.is_finite() && !v.flagged));
        assert_eq!(out.verdicts.len(), 3);
    }

    #[test]
    fn below_median_never_flagged() {
        let mut l = vec![vec![1.0, 2.0, 3.0, 4.0]; 4];
        l[0] = vec![0.0, 0.5, 0.1, 0.2];
        let out = mad_unsupervised(&l, 0).unwrap();
        assert!(out.verdicts.iter().all(|v| v.score < 0.0 && !v.flagged));
    }

    #[test]
    fn needs_three_agents() {
        assert!(mad_unsupervised(&[vec![0.0, 1.0], vec![1.0, 0.0]], 0).is_err());
    }
}
