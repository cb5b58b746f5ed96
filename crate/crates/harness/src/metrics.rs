//! AP@0.5 and detection-rate metrics.

use serde::{Deserialize, Serialize};

use made_core::attack::categorize;
use made_core::geometry::{iou, BBox};
use made_core::pipeline::ProposalSet;
use made_core::scene::GridBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Zero-based foreground class.
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Keeps proposals with `ϱ = 1`, then applies greedy per-class NMS.
///
/// Confidence is the argmax posterior. A suppression threshold of 1 or
/// more disables NMS.
pub fn detections(proposals: &ProposalSet, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let mut cands: Vec<Detection> = proposals
        .iter()
        .filter(|y| categorize(y, conf_threshold))
        .map(|y| {
            let c = y.argmax();
            Detection {
                class: c,
                confidence: y.probs[c],
                bbox: y.bbox,
            }
        })
        .collect();
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    if nms_iou >= 1.0 {
        return cands;
    }
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(Some(&k.bbox), Some(&d.bbox)) <= nms_iou)
        {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Mean over classes that have ground truth, in `[0, 1]`.
    pub ap: f64,
    pub per_class: Vec<Option<f64>>,
    /// Set when no class had any ground truth (`ap` is then 0).
    pub no_ground_truth: bool,
}

/// All-point interpolated AP at `iou_threshold`, averaged over classes with ground truth.
///
/// `images` pairs each image's detections with its ground truth. Within a
/// class, detections are ranked by confidence (stable in image order) and
/// each is greedily matched to the unmatched ground-truth box of highest IoU.
pub fn average_precision(images: &[(Vec<Detection>, Vec<GridBox>)], num_fg_classes: usize, iou_threshold: f64) -> ApResult {
    let mut per_class = Vec::with_capacity(num_fg_classes);
    for c in 0..num_fg_classes {
        let gt: Vec<Vec<BBox>> = images
            .iter()
            .map(|(_, g)| g.iter().filter(|b| b.class_id == c + 1).map(|b| b.bbox).collect())
            .collect();
        let total: usize = gt.iter().map(Vec::len).sum();
        if total == 0 {
            per_class.push(None);
            continue;
        }
        let mut preds: Vec<(usize, &Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, (d, _))| d.iter().filter(|d| d.class == c).map(move |d| (i, d)))
            .collect();
        preds.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(preds.len());
        for (img, d) in preds {
            let best = gt[img]
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[img][*j])
                .map(|(j, g)| (j, iou(Some(g), Some(&d.bbox))))
                .filter(|&(_, v)| v >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    hits.push(true);
                }
                None => hits.push(false),
            }
        }
        per_class.push(Some(all_point_ap(&hits, total)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return ApResult {
            ap: 0.0,
            per_class,
            no_ground_truth: true,
        };
    }
    ApResult {
        ap: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        no_ground_truth: false,
    }
}

/// Area under the monotone precision envelope for a ranked hit list.
pub fn all_point_ap(hits: &[bool], total_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0_f64;
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        let r_prev = if i == 0 { 0.0 } else { points[i - 1].0 };
        ap += (points[i].0 - r_prev) * envelope;
    }
    ap
}

/// `(TPR, FPR)` from `(flagged, truly_malicious)` pairs; `None` when the denominator is 0.
pub fn tpr_fpr(outcomes: &[(bool, bool)]) -> (Option<f64>, Option<f64>) {
    let rate = |malicious: bool| {
        let group: Vec<bool> = outcomes.iter().filter(|o| o.1 == malicious).map(|o| o.0).collect();
        if group.is_empty() {
            None
        } else {
            Some(group.iter().filter(|&&f| f).count() as f64 / group.len() as f64)
        }
    };
    (rate(true), rate(false))
}
