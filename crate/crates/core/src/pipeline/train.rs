//! Supervised detector training and residual autoencoder training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use made_tensor::{Ops, Tape, Tensor, TensorError};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::rng::rng_for;
use crate::scene::{ground_truth_proposals, render_observation, visible_cell_counts, GridBox, ObservationGrid, Scene, SceneConfig};

use super::autoencoder::Autoencoder;
use super::detector::{bind_params, Detector};
use super::optim::{Adam, GradAccumulator, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "one")]
    pub lr_decay_factor: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl TrainHyper {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            learning_rate: self.learning_rate,
            decay_every: self.lr_decay_every,
            decay_factor: self.lr_decay_factor,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(CoreError::Invalid("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyper {
    #[serde(flatten)]
    pub train: TrainHyper,
    /// Probability that each collaborator is present in a training step.
    pub keep_prob: f64,
    /// Cross-entropy weight of foreground anchors (background anchors weigh 1).
    pub fg_weight: f64,
    pub box_weight: f64,
}

/// One training scene with every agent's observation and per-object visibility.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub scene: Scene,
    pub observations: Vec<ObservationGrid>,
    /// `visibility[agent][object]` = visible cell count.
    pub visibility: Vec<Vec<usize>>,
    pub ground_truth: Vec<GridBox>,
}

impl TrainingSample {
    pub fn new(scene: Scene, config: &SceneConfig) -> Result<Self> {
        let n = scene.agent_poses.len();
        let observations = (0..n)
            .map(|a| render_observation(&scene, a, config))
            .collect::<Result<Vec<_>>>()?;
        let visibility = (0..n)
            .map(|a| visible_cell_counts(&scene, a, config))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = ground_truth_proposals(&scene, &config.geometry());
        Ok(Self {
            scene,
            observations,
            visibility,
            ground_truth,
        })
    }

    /// Ground truth seen by at least one agent in `agents`.
    pub fn visible_ground_truth(&self, agents: &[usize]) -> Vec<GridBox> {
        self.ground_truth
            .iter()
            .enumerate()
            .filter(|(k, _)| agents.iter().any(|&a| self.visibility[a][*k] > 0))
            .map(|(_, g)| *g)
            .collect()
    }
}

/// Per-anchor training targets.
#[derive(Clone, Debug)]
pub struct AnchorTargets {
    /// Zero-based class per anchor; background is `k - 1`.
    pub classes: Vec<usize>,
    pub offsets: Vec<[f64; 2]>,
    pub log_sizes: Vec<[f64; 2]>,
}

impl AnchorTargets {
    pub fn foreground(&self, num_classes: usize) -> usize {
        self.classes.iter().filter(|&&c| c != num_classes - 1).count()
    }
}

/// An anchor is foreground iff its cell center lies in a box; ties go to the smallest box.
pub fn assign_anchors(detector: &Detector, boxes: &[GridBox]) -> AnchorTargets {
    let a = &detector.arch;
    let bg = a.num_classes - 1;
    let lo = a.min_size.ln() + 1e-3;
    let hi = a.max_size.ln() - 1e-3;
    let lim = 0.95 * a.max_offset;
    let mut t = AnchorTargets {
        classes: vec![bg; a.anchors()],
        offsets: vec![[0.0; 2]; a.anchors()],
        log_sizes: vec![[0.0; 2]; a.anchors()],
    };
    for r in 0..a.height {
        for c in 0..a.width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let best = boxes
                .iter()
                .filter(|g| g.bbox.contains(x, y))
                .min_by(|p, q| p.bbox.area().total_cmp(&q.bbox.area()));
            if let Some(g) = best {
                let i = r * a.width + c;
                let b: &BBox = &g.bbox;
                t.classes[i] = g.class_id - 1;
                t.offsets[i] = [(b.cx - x).clamp(-lim, lim), (b.cy - y).clamp(-lim, lim)];
                t.log_sizes[i] = [b.w.ln().clamp(lo, hi), b.h.ln().clamp(lo, hi)];
            }
        }
    }
    t
}

/// Weighted cross-entropy plus masked smooth-L1 box regression.
pub fn detection_loss<O: Ops>(
    ops: &mut O,
    detector: &Detector,
    logits: &Tensor,
    offsets: &Tensor,
    log_sizes: &Tensor,
    targets: &AnchorTargets,
    hyper: &DetectorHyper,
) -> Result<Tensor> {
    let k = detector.arch.num_classes;
    let l = detector.arch.anchors();
    let bg = k - 1;
    let mut weights = vec![0.0; l * k];
    let mut mask = vec![0.0; l * 2];
    let mut total_w = 0.0;
    let mut off_t = vec![0.0; l * 2];
    let mut size_t = vec![0.0; l * 2];
    for (i, &cls) in targets.classes.iter().enumerate() {
        let w = if cls == bg { 1.0 } else { hyper.fg_weight };
        weights[i * k + cls] = w;
        total_w += w;
        if cls != bg {
            mask[i * 2] = 1.0;
            mask[i * 2 + 1] = 1.0;
            off_t[i * 2..i * 2 + 2].copy_from_slice(&targets.offsets[i]);
            size_t[i * 2..i * 2 + 2].copy_from_slice(&targets.log_sizes[i]);
        }
    }
    let logp = ops.log_softmax_channel(logits)?;
    let weights = Tensor::new(vec![l, k], weights)?;
    let ce = ops.mul(&logp, &weights)?;
    let ce = ops.sum(&ce)?;
    let ce = ops.scale(&ce, -1.0 / total_w)?;

    let nfg = targets.foreground(k);
    if nfg == 0 {
        return Ok(ce);
    }
    let mask = Tensor::new(vec![l, 2], mask)?;
    let po = ops.mul(offsets, &mask)?;
    let ps = ops.mul(log_sizes, &mask)?;
    let lo = ops.smooth_l1(&po, &Tensor::new(vec![l, 2], off_t)?)?;
    let ls = ops.smooth_l1(&ps, &Tensor::new(vec![l, 2], size_t)?)?;
    let reg = ops.add(&lo, &ls)?;
    let reg = ops.scale(&reg, hyper.box_weight / nfg as f64)?;
    Ok(ops.add(&ce, &reg)?)
}

fn diverged(epoch: usize, step: usize) -> impl Fn(CoreError) -> CoreError {
    move |e| match e {
        CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Loss history of a training run, one mean loss per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains `detector` in place.
///
/// Each step draws a random ego and keeps every other agent with
/// probability `keep_prob`; dropped agents are absent (zero maps). Targets
/// are the objects visible to at least one present agent.
pub fn train_detector(detector: &mut Detector, data: &[TrainingSample], hyper: &DetectorHyper) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(CoreError::Invalid("training dataset is empty".into()));
    }
    hyper.train.validate()?;
    let n = detector.arch.num_agents;
    if data.iter().any(|s| s.observations.len() != n) {
        return Err(CoreError::Invalid(format!("every training scene must have {n} agents")));
    }
    let schedule = hyper.train.schedule();
    let mut adam = Adam::default();
    let mut acc = GradAccumulator::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(hyper.train.epochs);
    let mut step = 0;
    for epoch in 0..hyper.train.epochs {
        let mut rng = rng_for(hyper.train.seed, "detector-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let lr = schedule.at(epoch);
        let mut sum = 0.0;
        for (pos, &idx) in order.iter().enumerate() {
            let sample = &data[idx];
            let ego = rng.random_range(0..n);
            let present: Vec<usize> = (0..n).filter(|&a| a != ego && rng.random_bool(hyper.keep_prob)).collect();
            let loss = detector_step(detector, sample, ego, &present, hyper, &mut acc).map_err(diverged(epoch, step))?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { epoch, step, loss });
            }
            sum += loss;
            if acc.count == hyper.train.batch_size || pos + 1 == order.len() {
                let grads = acc.take_mean();
                adam.step(&mut detector.params, &grads, lr).map_err(diverged(epoch, step))?;
                step += 1;
            }
        }
        losses.push(sum / data.len() as f64);
    }
    Ok(TrainReport { epoch_losses: losses })
}

fn detector_step(
    detector: &Detector,
    sample: &TrainingSample,
    ego: usize,
    present: &[usize],
    hyper: &DetectorHyper,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    let mut agents = vec![ego];
    agents.extend_from_slice(present);
    let targets = assign_anchors(detector, &sample.visible_ground_truth(&agents));
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, &detector.params);
    let f_ego = detector.encode_with(&mut tape, &p, &sample.observations[ego].to_tensor())?;
    let mut others = Vec::with_capacity(present.len());
    for &a in present {
        others.push(detector.encode_with(&mut tape, &p, &sample.observations[a].to_tensor())?);
    }
    let mut slots: Vec<Option<&Tensor>> = others.iter().map(Some).collect();
    slots.resize(detector.arch.num_agents - 1, None);
    let z = detector.fuse_with(&mut tape, &p, &f_ego, &slots)?;
    let out = detector.decode_with(&mut tape, &p, &z)?;
    let loss = detection_loss(&mut tape, detector, &out.logits, &out.offsets, &out.log_sizes, &targets, hyper)?;
    let grads = tape.backward(&loss)?;
    acc.add(&p, &grads);
    Ok(loss.data()[0])
}

/// Mean detection loss with every agent present, without updating parameters.
pub fn evaluate_detection_loss(detector: &Detector, data: &[TrainingSample], hyper: &DetectorHyper) -> Result<f64> {
    let mut eager = made_tensor::Eager;
    let mut sum = 0.0;
    let n = detector.arch.num_agents;
    for s in data {
        let maps = s
            .observations
            .iter()
            .map(|o| detector.encode(o))
            .collect::<Result<Vec<_>>>()?;
        for ego in 0..n {
            let others: Vec<Option<&Tensor>> = (0..n).filter(|&a| a != ego).map(|a| Some(&maps[a].tensor)).collect();
            let all: Vec<usize> = (0..n).collect();
            let targets = assign_anchors(detector, &s.visible_ground_truth(&all));
            let z = detector.fuse_with(&mut eager, &detector.params, &maps[ego].tensor, &others)?;
            let out = detector.decode_with(&mut eager, &detector.params, &z)?;
            let loss = detection_loss(&mut eager, detector, &out.logits, &out.offsets, &out.log_sizes, &targets, hyper)?;
            sum += loss.data()[0];
        }
    }
    Ok(sum / (data.len() * n).max(1) as f64)
}

/// Trains `ae` in place to minimize the mean reconstruction loss over `residuals`.
pub fn train_autoencoder(ae: &mut Autoencoder, residuals: &[Tensor], hyper: &TrainHyper) -> Result<TrainReport> {
    if residuals.is_empty() {
        return Err(CoreError::Invalid("residual training set is empty".into()));
    }
    hyper.validate()?;
    let schedule = hyper.schedule();
    let mut adam = Adam::default();
    let mut acc = GradAccumulator::default();
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    let mut losses = Vec::with_capacity(hyper.epochs);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(hyper.seed, "autoencoder-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let lr = schedule.at(epoch);
        let mut sum = 0.0;
        for (pos, &idx) in order.iter().enumerate() {
            let r = &residuals[idx];
            let mut tape = Tape::new();
            let p = bind_params(&mut tape, &ae.params);
            let loss = ae
                .forward_with(&mut tape, &p, r)
                .and_then(|out| Ok(tape.mean_sq(r, &out)?))
                .map_err(diverged(epoch, step))?;
            let grads = tape.backward(&loss).map_err(|e| diverged(epoch, step)(e.into()))?;
            acc.add(&p, &grads);
            sum += loss.data()[0];
            if acc.count == hyper.batch_size || pos + 1 == order.len() {
                let grads = acc.take_mean();
                adam.step(&mut ae.params, &grads, lr).map_err(diverged(epoch, step))?;
                step += 1;
            }
        }
        losses.push(sum / residuals.len() as f64);
    }
    Ok(TrainReport { epoch_losses: losses })
}

/// Mean reconstruction loss over `residuals`.
pub fn mean_recon_loss(ae: &Autoencoder, residuals: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    for r in residuals {
        sum += ae.recon_loss(r)?;
    }
    Ok(sum / residuals.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::detector::DetectorArch;

    #[test]
    fn detector_hyper_parses_flat_and_rejects_unknown() {
        let ok = r#"{"epochs":1,"batch_size":2,"learning_rate":0.01,"seed":3,"keep_prob":0.5,"fg_weight":2.0,"box_weight":1.0}"#;
        let h: DetectorHyper = serde_json::from_str(ok).unwrap();
        assert_eq!(h.train.batch_size, 2);
        let bad = ok.replace("\"seed\"", "\"sed\"");
        assert!(serde_json::from_str::<DetectorHyper>(&bad).is_err());
    }

    #[test]
    fn anchor_assignment_prefers_smaller_box() {
        let arch = DetectorArch {
            height: 8,
            width: 8,
            in_channels: 3,
            feature_channels: 2,
            hidden_channels: 2,
            num_classes: 3,
            num_agents: 2,
            max_offset: 2.0,
            min_size: 0.5,
            max_size: 8.0,
        };
        let det = Detector::init(arch, 0).unwrap();
        let big = GridBox {
            class_id: 1,
            bbox: BBox::new(4.0, 4.0, 6.0, 6.0),
        };
        let small = GridBox {
            class_id: 2,
            bbox: BBox::new(4.0, 4.0, 2.0, 2.0),
        };
        let t = assign_anchors(&det, &[big, small]);
        // cell (3, 3) has center (3.5, 3.5), inside both boxes
        assert_eq!(t.classes[3 * 8 + 3], 1);
        // cell (1, 1) only in the big box
        assert_eq!(t.classes[8 + 1], 0);
        assert_eq!(t.classes[0], 2);
        assert_eq!(t.foreground(3), 36);
        let o = t.offsets[8 + 1];
        assert!((o[0] - 2.0_f64.min(1.9)).abs() < 1e-12 && (o[1] - 1.9).abs() < 1e-12);
    }
}
