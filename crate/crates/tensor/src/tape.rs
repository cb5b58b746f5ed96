use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::ops::Ops;
use crate::tensor::{NodeId, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

struct Node {
    /// `None` for leaves.
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Opened with [`Tape::new`], fed through the [`Ops`] trait, and consumed
/// by [`Tape::backward`]. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Tensor {
        let node = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        let out = value.with_node(node);
        self.nodes.push(Node {
            op,
            inputs,
            value: value.detach(),
            requires_grad,
        });
        out
    }

    fn index_of(&mut self, t: &Tensor) -> Result<usize> {
        match t.node_id() {
            Some(id) if id.tape == self.id => Ok(id.index),
            Some(_) => Err(TensorError::NotOnTape),
            None => Ok(self.push(None, vec![], t.detach(), false).node_id().unwrap().index),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse recording order. Gradients
    /// flow only through nodes that depend on a `requires_grad` leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let id = loss.node_id().ok_or(TensorError::NotOnTape)?;
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; id.index + 1];
        grads[id.index] = Some(vec![1.0]);
        for i in (0..=id.index).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &g);
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gj),
                }
            }
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let shape = self.nodes[i].value.shape().to_vec();
            out.push(match g {
                Some(g) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Some(Tensor::from_parts(shape, g))
                }
                None => None,
            });
        }
        Ok(Gradients { tape: self.id, grads: out })
    }
}

impl Ops for Tape {
    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let value = op.forward(inputs)?;
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            ids.push(self.index_of(t)?);
        }
        let requires_grad = ids.iter().any(|&j| self.nodes[j].requires_grad);
        Ok(self.push(Some(op), ids, value, requires_grad))
    }

    fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Tensor {
        self.push(None, vec![], value.detach(), requires_grad)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` lies on the differentiated path.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node_id()?;
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index)?.as_ref()
    }

    /// Like [`get`](Self::get) but returns zeros for tensors the loss does not depend on.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, loss: &Tensor) -> Result<Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap(), true);
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(&loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn grad_of_mean_sq_against_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0), true);
        let loss = tape.mean_sq(&x, &Tensor::zeros(&[1])).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0), true);
        let loss = tape.sigmoid(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap(), true);
        let y = tape.relu(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(&x), Err(TensorError::NotScalar(_))));
        let other = Tape::new();
        let s = tape.sum(&x).unwrap();
        assert!(matches!(other.backward(&s), Err(TensorError::NotOnTape)));
        assert!(matches!(tape.backward(&Tensor::scalar(1.0)), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let c = Tensor::scalar(2.0);
        let y = tape.mul(&x, &c).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0]);
        assert!(g.get(&c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[6.0]);
    }
}
