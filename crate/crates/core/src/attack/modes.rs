use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

use super::{pgd, AttackContext, AttackOutcome, AttackSpec, PerturbationSet};

/// How multiple malicious agents coordinate.
pub trait AttackMode: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &AttackContext<'_>, spec: &AttackSpec) -> Result<AttackOutcome>;
}

/// One PGD run per attacker; the other attackers' `δ` stay 0 during each run.
pub struct Independent;

/// All attackers' `δ_m` optimized jointly against one shared objective.
pub struct Collaborative;

fn check(ctx: &AttackContext<'_>, spec: &AttackSpec) -> Result<()> {
    spec.validate(ctx.maps.len())?;
    if ctx.maps.len() != ctx.detector.arch.num_agents || ctx.maps.iter().enumerate().any(|(i, f)| f.agent != i) {
        return Err(CoreError::Invalid("attack needs one map per agent, in agent order".into()));
    }
    Ok(())
}

impl AttackMode for Independent {
    fn name(&self) -> &'static str {
        "independent"
    }

    fn run(&self, ctx: &AttackContext<'_>, spec: &AttackSpec) -> Result<AttackOutcome> {
        check(ctx, spec)?;
        let clean = ctx.clean_output(spec.victim)?;
        let mut deltas = BTreeMap::new();
        let mut traces = Vec::with_capacity(spec.malicious.len());
        for &m in &spec.malicious {
            let (p, trace) = pgd(ctx, spec, &[m], &clean)?;
            deltas.extend(p.deltas);
            traces.push(trace);
        }
        Ok(AttackOutcome {
            perturbations: PerturbationSet { deltas },
            objective_traces: traces,
        })
    }
}

impl AttackMode for Collaborative {
    fn name(&self) -> &'static str {
        "collaborative"
    }

    fn run(&self, ctx: &AttackContext<'_>, spec: &AttackSpec) -> Result<AttackOutcome> {
        check(ctx, spec)?;
        let clean = ctx.clean_output(spec.victim)?;
        let (perturbations, trace) = pgd(ctx, spec, &spec.malicious, &clean)?;
        Ok(AttackOutcome {
            perturbations,
            objective_traces: vec![trace],
        })
    }
}

/// Attack modes by name.
pub struct AttackRegistry {
    modes: Vec<Box<dyn AttackMode>>,
}

impl Default for AttackRegistry {
    fn default() -> Self {
        let mut r = Self { modes: Vec::new() };
        r.register(Box::new(Independent));
        r.register(Box::new(Collaborative));
        r
    }
}

impl AttackRegistry {
    /// Adds a mode, replacing any mode with the same name.
    pub fn register(&mut self, mode: Box<dyn AttackMode>) {
        self.modes.retain(|m| m.name() != mode.name());
        self.modes.push(mode);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AttackMode> {
        self.modes
            .iter()
            .find(|m| m.name() == name)
            .map(|m| m.as_ref())
            .ok_or_else(|| CoreError::Unknown {
                kind: "attack mode",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.modes.iter().map(|m| m.name()).collect()
    }

    /// Runs the mode named in `spec`.
    pub fn run(&self, ctx: &AttackContext<'_>, spec: &AttackSpec) -> Result<AttackOutcome> {
        self.get(&spec.mode)?.run(ctx, spec)
    }
}
