//! The MADE detector and its baselines.
//!
//! Each collaborator is tested against the ego with two statistics: the
//! match loss between the ego's proposals with and without it, and the
//! autoencoder reconstruction loss of the residual it induces in the fused
//! features. Conformal p-values against benign calibration sets are
//! combined with a Benjamini-Hochberg rule.

pub mod conformal;
pub mod hungarian;
pub mod inspect;
pub mod mad;
pub mod matching;
pub mod residual;
pub mod strategy;

pub use conformal::{bh_decide, conformal_p, single_decide, Decision, Rule};
pub use hungarian::{assignment_cost, hungarian, min_cost_assignment};
pub use inspect::{inspect_agent, made_filter, DefenseParams, FilterOutcome, MadeArtifacts, Verdict};
pub use mad::{mad_scores, mad_unsupervised, median, pairwise_match_losses, MadOutcome, MadScores, MadVerdict};
pub use matching::{box_pair_loss, class_match_loss, class_members, match_loss};
pub use residual::{
    build_residual_training_set, ego_view, pair_view, residual_map, BankIndex, BenignBank, CalibrationOptions,
    CalibrationSet, PairView, PairingMode, ResidualMap,
};
pub use strategy::{
    AgentScreen, DefenseRegistry, DefenseStrategy, Made, MadUnsupervised, MatchLossOnly, NoDefense, Oracle,
    ReconLossOnly, Screening, ScreeningContext,
};
