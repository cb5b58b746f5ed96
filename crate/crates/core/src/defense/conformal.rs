use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// `(1 + #{v ≥ stat}) / (1 + n)` over a calibration list sorted ascending.
pub fn conformal_p(stat: f64, calibration: &[f64]) -> Result<f64> {
    if calibration.is_empty() {
        return Err(CoreError::EmptyCalibration);
    }
    let below = calibration.partition_point(|&v| v < stat);
    let at_least = calibration.len() - below;
    Ok((1 + at_least) as f64 / (1 + calibration.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Benign,
    Malicious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    MinRule,
    MaxRule,
    None,
}

/// Benjamini-Hochberg over two p-values: malicious iff
/// `min(p1, p2) ≤ α/2` or `max(p1, p2) ≤ α`. When both clauses hold the
/// min-rule is reported.
pub fn bh_decide(p1: f64, p2: f64, alpha: f64) -> (Decision, Rule) {
    if p1.min(p2) <= alpha / 2.0 {
        (Decision::Malicious, Rule::MinRule)
    } else if p1.max(p2) <= alpha {
        (Decision::Malicious, Rule::MaxRule)
    } else {
        (Decision::Benign, Rule::None)
    }
}

/// Single-statistic conformal test at level `alpha`.
pub fn single_decide(p: f64, alpha: f64) -> Decision {
    if p <= alpha {
        Decision::Malicious
    } else {
        Decision::Benign
    }
}
