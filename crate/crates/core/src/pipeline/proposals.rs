use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Ordered proposals, one per anchor cell in row-major order.
///
/// Proposal `i` belongs to cell `(i / W, i % W)`. Each proposal holds `k`
/// class posteriors (background last) and a grid-space box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub num_classes: usize,
    /// `L x k` posteriors, row-major.
    pub probs: Vec<f64>,
    pub boxes: Vec<BBox>,
}

/// Borrowed view of one proposal `y = [p_1..p_k, z_1..z_4]`.
#[derive(Clone, Copy, Debug)]
pub struct Proposal<'a> {
    pub probs: &'a [f64],
    pub bbox: BBox,
}

impl<'a> Proposal<'a> {
    /// Zero-based index of the background class.
    pub fn background(&self) -> usize {
        self.probs.len() - 1
    }

    /// Argmax over all classes, first index on ties.
    pub fn argmax(&self) -> usize {
        argmax(self.probs)
    }

    /// Most confident foreground class (zero-based) and its posterior.
    pub fn top_foreground(&self) -> (usize, f64) {
        let fg = &self.probs[..self.background()];
        let c = argmax(fg);
        (c, fg[c])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, i: usize) -> Proposal<'_> {
        let k = self.num_classes;
        Proposal {
            probs: &self.probs[i * k..(i + 1) * k],
            bbox: self.boxes[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Proposal<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Simplex and positive-size invariants.
    pub fn check(&self) -> Result<(), String> {
        if self.probs.len() != self.len() * self.num_classes {
            return Err("posterior table size does not match proposal count".into());
        }
        for (i, p) in self.iter().enumerate() {
            let s: f64 = p.probs.iter().sum();
            if (s - 1.0).abs() > 1e-9 || p.probs.iter().any(|&v| v < 0.0) {
                return Err(format!("proposal {i} posteriors are not a distribution (sum {s})"));
            }
            if !(p.bbox.w > 0.0 && p.bbox.h > 0.0) {
                return Err(format!("proposal {i} has non-positive box size"));
            }
        }
        Ok(())
    }
}
