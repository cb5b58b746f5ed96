//! White-box PGD attack on transmitted feature maps.
//!
//! The attacker perturbs the maps of its malicious agents by `δ_m` with
//! `‖δ_m‖_∞ ≤ ε` and minimizes
//! `J(δ) = Σ_l ϱ(y_l) · (−log(1 − p'_u)) · IoU(z_l, z'_l)` over the victim's
//! proposals, where `y_l` is the frozen clean output and `u` its top
//! foreground class. Driving `J` down suppresses the victim's detections.

mod modes;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use made_tensor::{Checkpoint, Eager, Ops, Tape, Tensor, TensorError, LOG1M_CLAMP};

use crate::error::{CoreError, Result};
use crate::geometry::iou;
use crate::pipeline::{Detector, FeatureMap, Proposal, ProposalSet};

pub use modes::{AttackMode, AttackRegistry, Collaborative, Independent};

/// `ϱ(y)`: 1 iff the argmax class is foreground and its posterior reaches `conf_threshold`.
pub fn categorize(y: &Proposal<'_>, conf_threshold: f64) -> bool {
    let top = y.argmax();
    top != y.background() && y.probs[top] >= conf_threshold
}

/// Per-box adversarial loss `−log(1 − p'_u) · IoU(y, y')`, zero when `rho` is false.
pub fn adv_box_loss(clean: &Proposal<'_>, perturbed: &Proposal<'_>, rho: bool) -> f64 {
    if !rho {
        return 0.0;
    }
    let (u, _) = clean.top_foreground();
    let p = perturbed.probs[u].min(LOG1M_CLAMP);
    -(1.0 - p).ln() * iou(Some(&clean.bbox), Some(&perturbed.bbox))
}

/// Elementwise clamp to `[-epsilon, epsilon]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    let data = delta.data().iter().map(|v| v.clamp(-epsilon, epsilon)).collect();
    Tensor::new(delta.shape().to_vec(), data).expect("clamped values are finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub victim: usize,
    pub malicious: Vec<usize>,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Registered attack mode name.
    pub mode: String,
}

impl AttackSpec {
    /// The default schedule: 10 steps of `ε / 5`.
    pub fn standard(victim: usize, malicious: Vec<usize>, epsilon: f64, mode: &str) -> Self {
        Self {
            victim,
            malicious,
            epsilon,
            steps: 10,
            step_size: epsilon / 5.0,
            mode: mode.to_string(),
        }
    }

    pub fn validate(&self, num_agents: usize) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.victim >= num_agents {
            return bad(format!("victim {} out of range", self.victim));
        }
        if self.malicious.is_empty() {
            return bad("attack needs at least one malicious agent".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &m in &self.malicious {
            if m >= num_agents || m == self.victim || !seen.insert(m) {
                return bad(format!("invalid malicious agent {m}"));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) || !(self.step_size >= 0.0) {
            return bad("epsilon and step size must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// `δ_m` per malicious agent.
#[derive(Clone, Debug, Default)]
pub struct PerturbationSet {
    pub deltas: BTreeMap<usize, Tensor>,
}

impl PerturbationSet {
    pub fn max_norm(&self) -> f64 {
        self.deltas.values().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// Returns the maps as received by the victim: `F_m + δ_m` for attackers.
    pub fn apply(&self, maps: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        maps.iter()
            .map(|f| match self.deltas.get(&f.agent) {
                Some(d) => Ok(FeatureMap {
                    agent: f.agent,
                    tensor: Eager.add(&f.tensor, d)?,
                }),
                None => Ok(f.clone()),
            })
            .collect()
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let tensors = self.deltas.iter().map(|(m, d)| (format!("delta/{m}"), d.clone())).collect();
        Checkpoint::new("made-perturbation", metadata, tensors)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            let m = name
                .strip_prefix("delta/")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CoreError::Invalid(format!("unexpected tensor {name} in perturbation checkpoint")))?;
            deltas.insert(m, t.clone());
        }
        Ok(Self { deltas })
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub perturbations: PerturbationSet,
    /// Objective value `J` at every iterate, one trace per optimization run.
    pub objective_traces: Vec<Vec<f64>>,
}

/// Everything the white-box attacker sees.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub detector: &'a Detector,
    /// Clean feature maps of all agents, indexed by agent.
    pub maps: &'a [FeatureMap],
    pub conf_threshold: f64,
}

impl<'a> AttackContext<'a> {
    /// Victim output with every benign map and `δ = 0`.
    pub fn clean_output(&self, victim: usize) -> Result<ProposalSet> {
        let others: Vec<Option<&FeatureMap>> = self.maps.iter().filter(|f| f.agent != victim).map(Some).collect();
        self.detector.detect_features(&self.maps[victim], &others)
    }

    /// Victim output when the received maps carry `perturbations`.
    pub fn attacked_output(&self, victim: usize, perturbations: &PerturbationSet) -> Result<ProposalSet> {
        let received = perturbations.apply(self.maps)?;
        let others: Vec<Option<&FeatureMap>> = received.iter().filter(|f| f.agent != victim).map(Some).collect();
        self.detector.detect_features(&self.maps[victim], &others)
    }
}

/// Frozen per-anchor target: `ϱ`-masked one-hot of `u` and the clean boxes.
struct Target {
    select: Tensor,
    boxes: Tensor,
}

impl Target {
    fn new(clean: &ProposalSet, conf: f64) -> Result<Self> {
        let (l, k) = (clean.len(), clean.num_classes);
        let mut select = vec![0.0; l * k];
        let mut boxes = Vec::with_capacity(l * 4);
        for (i, y) in clean.iter().enumerate() {
            if categorize(&y, conf) {
                select[i * k + y.top_foreground().0] = 1.0;
            }
            boxes.extend_from_slice(&y.bbox.as_array());
        }
        Ok(Self {
            select: Tensor::new(vec![l, k], select)?,
            boxes: Tensor::new(vec![l, 4], boxes)?,
        })
    }
}

/// `J(δ)` on any backend.
fn objective<O: Ops>(
    ops: &mut O,
    ctx: &AttackContext<'_>,
    victim: usize,
    target: &Target,
    received: &[Tensor],
) -> Result<Tensor> {
    let det = ctx.detector;
    let slots: Vec<Option<&Tensor>> = ctx
        .maps
        .iter()
        .zip(received)
        .filter(|(f, _)| f.agent != victim)
        .map(|(_, t)| Some(t))
        .collect();
    let z = det.fuse_with(ops, &det.params, &ctx.maps[victim].tensor, &slots)?;
    let out = det.decode_with(ops, &det.params, &z)?;
    let q = ops.mul(&out.probs, &target.select)?;
    let q = ops.sum_channels(&q)?;
    let nll = ops.log1m(&q)?;
    let overlap = ops.box_iou(&target.boxes, &out.boxes)?;
    let per_box = ops.mul(&nll, &overlap)?;
    let total = ops.sum(&per_box)?;
    Ok(ops.scale(&total, -1.0)?)
}

/// Sign-gradient PGD over the maps of `optimized`, holding every other map clean.
///
/// Starts from `δ = 0`; each iterate takes `δ ← Π_ε(δ − step · sign(∇J))`.
/// Returns the final `δ` per optimized agent and `J` at every iterate.
pub fn pgd(
    ctx: &AttackContext<'_>,
    spec: &AttackSpec,
    optimized: &[usize],
    clean: &ProposalSet,
) -> Result<(PerturbationSet, Vec<f64>)> {
    let target = Target::new(clean, ctx.conf_threshold)?;
    let shape = ctx.detector.arch.feature_shape();
    let mut deltas: BTreeMap<usize, Tensor> = optimized.iter().map(|&m| (m, Tensor::zeros(&shape))).collect();
    let mut trace = Vec::with_capacity(spec.steps + 1);
    for iterate in 0..=spec.steps {
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let mut received = Vec::with_capacity(ctx.maps.len());
        for f in ctx.maps {
            match deltas.get(&f.agent) {
                Some(d) => {
                    let leaf = tape.leaf(d, true);
                    received.push(tape.add(&f.tensor, &leaf)?);
                    leaves.insert(f.agent, leaf);
                }
                None => received.push(f.tensor.clone()),
            }
        }
        let j = objective(&mut tape, ctx, spec.victim, &target, &received)?;
        trace.push(j.data()[0]);
        if iterate == spec.steps {
            break;
        }
        let grads = tape.backward(&j).map_err(|e| match e {
            TensorError::NonFinite { .. } => CoreError::NonFiniteGradient { iterate },
            other => other.into(),
        })?;
        for (m, leaf) in &leaves {
            let g = grads.get_or_zeros(leaf);
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteGradient { iterate });
            }
            let d = &deltas[m];
            let stepped: Vec<f64> = d
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| x - spec.step_size * sign(gv))
                .collect();
            let stepped = Tensor::new(d.shape().to_vec(), stepped)?;
            deltas.insert(*m, project_linf(&stepped, spec.epsilon));
        }
    }
    Ok((PerturbationSet { deltas }, trace))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates `J` eagerly for a given perturbation set.
pub fn attack_objective(
    ctx: &AttackContext<'_>,
    victim: usize,
    clean: &ProposalSet,
    perturbations: &PerturbationSet,
) -> Result<f64> {
    let target = Target::new(clean, ctx.conf_threshold)?;
    let received: Vec<Tensor> = perturbations.apply(ctx.maps)?.into_iter().map(|f| f.tensor).collect();
    Ok(objective(&mut Eager, ctx, victim, &target, &received)?.data()[0])
}

/// Sum of [`adv_box_loss`] over proposal pairs.
pub fn total_adv_loss(clean: &ProposalSet, perturbed: &ProposalSet, conf_threshold: f64) -> f64 {
    clean
        .iter()
        .zip(perturbed.iter())
        .map(|(y, y2)| adv_box_loss(&y, &y2, categorize(&y, conf_threshold)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn set(probs: &[f64], boxes: &[BBox]) -> ProposalSet {
        ProposalSet {
            num_classes: probs.len() / boxes.len(),
            probs: probs.to_vec(),
            boxes: boxes.to_vec(),
        }
    }

    #[test]
    fn categorize_rule_table() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        let y = set(&[0.1, 0.1, 0.8], &[b]);
        assert!(!categorize(&y.get(0), 0.5));
        let y = set(&[0.9, 0.05, 0.05], &[b]);
        assert!(categorize(&y.get(0), 0.5));
        let y = set(&[0.4, 0.1, 0.5], &[b]);
        assert!(!categorize(&y.get(0), 0.3));
    }

    #[test]
    fn adv_box_loss_cases() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let clean = set(&[0.9, 0.05, 0.05], &[b]);
        let pert = set(&[0.5, 0.2, 0.3], &[b]);
        assert_eq!(adv_box_loss(&clean.get(0), &pert.get(0), false), 0.0);
        let v = adv_box_loss(&clean.get(0), &pert.get(0), true);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let far = set(&[0.99, 0.005, 0.005], &[BBox::new(10.0, 0.0, 2.0, 2.0)]);
        assert_eq!(adv_box_loss(&clean.get(0), &far.get(0), true), 0.0);
        let sure = set(&[1.0, 0.0, 0.0], &[b]);
        assert!(adv_box_loss(&clean.get(0), &sure.get(0), true).is_finite());
    }

    #[test]
    fn projection() {
        let d = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
        assert!(project_linf(&d, 0.3).bit_eq(&d));
        let big = Tensor::full(&[4], 0.6);
        assert!(project_linf(&big, 0.3).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::standard(0, vec![1], 0.1, "independent").validate(4).is_ok());
        assert!(AttackSpec::standard(0, vec![0], 0.1, "independent").validate(4).is_err());
        assert!(AttackSpec::standard(0, vec![], 0.1, "independent").validate(4).is_err());
        assert!(AttackSpec::standard(0, vec![4], 0.1, "independent").validate(4).is_err());
        assert!(AttackSpec::standard(0, vec![1, 1], 0.1, "independent").validate(4).is_err());
    }
}
