use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use made_tensor::{ParamSet, Tensor};

use crate::error::{CoreError, Result};

/// Step-decayed learning rate: `lr * factor^(epoch / every)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub learning_rate: f64,
    #[serde(default)]
    pub decay_every: usize,
    #[serde(default = "one")]
    pub decay_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
        }
    }
}

/// Adam over a named parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update in place. `grads` must cover every parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| CoreError::Invalid(format!("no gradient for {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Running sum of per-parameter gradients.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    pub sums: BTreeMap<String, Vec<f64>>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, bound: &ParamSet, grads: &made_tensor::Gradients) {
        for (name, t) in bound {
            let acc = self.sums.entry(name.clone()).or_insert_with(|| vec![0.0; t.numel()]);
            if let Some(g) = grads.get(t) {
                for (a, x) in acc.iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradient, resetting the accumulator.
    pub fn take_mean(&mut self) -> BTreeMap<String, Vec<f64>> {
        let n = self.count.max(1) as f64;
        let mut out = std::mem::take(&mut self.sums);
        for g in out.values_mut() {
            for x in g.iter_mut() {
                *x /= n;
            }
        }
        self.count = 0;
        out
    }
}
