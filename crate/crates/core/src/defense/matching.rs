//! Match loss `L_m` between two proposal sets.

use crate::geometry::iou;
use crate::pipeline::{Proposal, ProposalSet};

use super::hungarian::{assignment_cost, min_cost_assignment};

/// `L_box(y, y'; c) = max(p_c − p'_c, 0) + φ(1 − IoU(z, z'))`; `None` is the empty box ∅.
pub fn box_pair_loss(y: &Proposal<'_>, y2: Option<&Proposal<'_>>, class: usize, phi: f64) -> f64 {
    let pc = y.probs[class];
    match y2 {
        None => pc + phi,
        Some(y2) => (pc - y2.probs[class]).max(0.0) + phi * (1.0 - iou(Some(&y.bbox), Some(&y2.bbox))),
    }
}

/// Indices `ℐ_c`: argmax class is foreground `c` with posterior at least `conf_threshold`.
pub fn class_members(y: &ProposalSet, class: usize, conf_threshold: f64) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, p)| {
            let top = p.argmax();
            top == class && top != p.background() && p.probs[top] >= conf_threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// One class's contribution `(1/|ℐ_c|) · min_σ Σ L_box`, 0 when `ℐ_c` is empty.
pub fn class_match_loss(y: &ProposalSet, y2: &ProposalSet, class: usize, phi: f64, conf_threshold: f64) -> f64 {
    let rows = class_members(y, class, conf_threshold);
    if rows.is_empty() {
        return 0.0;
    }
    let cols = class_members(y2, class, conf_threshold);
    let width = cols.len().max(rows.len());
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&l| {
            let p = y.get(l);
            (0..width)
                .map(|j| box_pair_loss(&p, cols.get(j).map(|&l2| y2.get(l2)).as_ref(), class, phi))
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost).expect("rows never exceed padded columns");
    assignment_cost(&cost, &assignment) / rows.len() as f64
}

/// `L_m(Y, Y')`, summed over foreground classes. Asymmetric in its arguments.
pub fn match_loss(y: &ProposalSet, y2: &ProposalSet, phi: f64, conf_threshold: f64) -> f64 {
    (0..y.num_classes - 1)
        .map(|c| class_match_loss(y, y2, c, phi, conf_threshold))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn one(probs: [f64; 3], b: BBox) -> ProposalSet {
        ProposalSet {
            num_classes: 3,
            probs: probs.to_vec(),
            boxes: vec![b],
        }
    }

    #[test]
    fn box_pair_examples() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let y = one([0.9, 0.05, 0.05], b);
        assert_eq!(box_pair_loss(&y.get(0), Some(&y.get(0)), 0, 1.0), 0.0);
        // shifted by a third of the width: IoU = (4/3 * 2) / (8 - 8/3) = 0.5
        let y2 = one([0.3, 0.1, 0.6], BBox::new(2.0 / 3.0, 0.0, 2.0, 2.0));
        let v = box_pair_loss(&y.get(0), Some(&y2.get(0)), 0, 1.0);
        assert!((v - 1.1).abs() < 1e-12, "{v}");
        let y = one([0.7, 0.2, 0.1], b);
        assert!((box_pair_loss(&y.get(0), None, 0, 1.0) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn unmatched_single_box() {
        let y = one([0.8, 0.1, 0.1], BBox::new(1.0, 1.0, 1.0, 1.0));
        let empty = one([0.1, 0.1, 0.8], BBox::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(match_loss(&y, &empty, 0.5, 0.5), 0.8 + 0.5);
        assert_eq!(match_loss(&empty, &y, 0.5, 0.5), 0.0);
        assert_eq!(match_loss(&y, &y, 0.5, 0.5), 0.0);
    }
}
