//! Scenario × budget evaluation over rotating egos.
//!
//! Each evaluation scene yields one instance per agent acting as ego. The
//! malicious agents of an instance are a seeded draw from the others; an
//! attack with `k` attackers uses the first `k` of that draw.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use made_core::attack::{AttackContext, AttackRegistry, AttackSpec};
use made_core::defense::{DefenseRegistry, MadeArtifacts, Rule, Screening, ScreeningContext};
use made_core::pipeline::{FeatureMap, ProposalSet, TrainingSample};
use made_core::rng::rng_for;
use made_core::scene::GridBox;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::lab::{encode_scene, scenes, Lab, SceneSplit};
use crate::metrics::{average_precision, detections, tpr_fpr, Detection};

pub const BASELINE: &str = "baseline";
pub const MAIN: &str = "main";
pub const ADAPTIVE: &str = "adaptive";
pub const PHI_ABLATION: &str = "phi-ablation";
pub const EGO_ONLY: &str = "ego-only";
const NEEDS_ARTIFACTS: [&str; 3] = ["ml-only", "crl-only", "made"];

/// One aggregated cell: a scenario under one attack setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub scenario: String,
    pub mode: String,
    pub attackers: usize,
    pub epsilon: f64,
    pub phi: f64,
    pub instances: usize,
    /// AP@IoU in percent.
    pub ap: f64,
    pub no_ground_truth: bool,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub flagged_malicious: usize,
    pub malicious: usize,
    pub flagged_benign: usize,
    pub benign: usize,
}

/// One screened collaborator, for scenarios that compute statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    /// Index into [`Report::rows`].
    pub row: usize,
    pub scene: usize,
    pub ego: usize,
    pub agent: usize,
    pub malicious: bool,
    pub flagged: bool,
    pub match_loss: Option<f64>,
    pub recon_loss: Option<f64>,
    pub p_match: Option<f64>,
    pub p_recon: Option<f64>,
    pub rule: Option<Rule>,
    pub mad_score: Option<f64>,
}

/// PGD objective values at every iterate of one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub scene: usize,
    pub ego: usize,
    pub mode: String,
    pub attackers: usize,
    pub epsilon: f64,
    pub malicious: Vec<usize>,
    /// One trace per optimization run.
    pub traces: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub verdicts: Vec<VerdictRecord>,
    pub traces: Vec<TraceRecord>,
    pub audits: Vec<Audit>,
}

impl Report {
    pub fn find(&self, experiment: &str, scenario: &str, epsilon: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.experiment == experiment && r.scenario == scenario && r.epsilon == epsilon)
    }

    pub fn passed(&self) -> bool {
        self.audits.iter().all(|a| a.passed)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RowSpec {
    experiment: &'static str,
    scenario: String,
    mode: String,
    attackers: usize,
    epsilon: f64,
    phi: f64,
}

fn row_specs(cfg: &ExperimentConfig) -> Vec<RowSpec> {
    let a = &cfg.attack;
    let mut specs = vec![RowSpec {
        experiment: BASELINE,
        scenario: EGO_ONLY.into(),
        mode: "none".into(),
        attackers: 0,
        epsilon: 0.0,
        phi: cfg.defense.phi,
    }];
    for &epsilon in &a.epsilons {
        for s in &cfg.defense.scenarios {
            specs.push(RowSpec {
                experiment: MAIN,
                scenario: s.clone(),
                mode: a.mode.clone(),
                attackers: a.attackers,
                epsilon,
                phi: cfg.defense.phi,
            });
        }
    }
    if let Some(ad) = &cfg.adaptive {
        for mode in &ad.modes {
            for s in &ad.scenarios {
                specs.push(RowSpec {
                    experiment: ADAPTIVE,
                    scenario: s.clone(),
                    mode: mode.clone(),
                    attackers: ad.attackers,
                    epsilon: ad.epsilon,
                    phi: cfg.defense.phi,
                });
            }
        }
    }
    if let Some(ab) = &cfg.phi_ablation {
        for &phi in &ab.phis {
            specs.push(RowSpec {
                experiment: PHI_ABLATION,
                scenario: "made".into(),
                mode: a.mode.clone(),
                attackers: a.attackers,
                epsilon: ab.epsilon,
                phi,
            });
        }
    }
    specs
}

struct EvalScene {
    maps: Vec<FeatureMap>,
    ground_truth: Vec<GridBox>,
}

struct Attacked {
    malicious: Vec<usize>,
    received: Vec<FeatureMap>,
}

struct Cell {
    detections: Vec<Detection>,
    screening: Option<Screening>,
    malicious: Vec<usize>,
}

#[derive(Default)]
struct Checks {
    counts: BTreeMap<&'static str, (usize, usize)>,
}

impl Checks {
    fn record(&mut self, name: &'static str, ok: bool) {
        let e = self.counts.entry(name).or_default();
        e.0 += 1;
        e.1 += (!ok) as usize;
    }

    fn merge(&mut self, other: Checks) {
        for (k, (c, v)) in other.counts {
            let e = self.counts.entry(k).or_default();
            e.0 += c;
            e.1 += v;
        }
    }
}

struct InstanceOutput {
    cells: Vec<Cell>,
    traces: Vec<TraceRecord>,
    checks: Checks,
}

/// Seeded order of the ego's collaborators; attackers are taken from its front.
pub fn malicious_draw(cfg: &ExperimentConfig, scene: usize, ego: usize) -> Vec<usize> {
    let n = cfg.scene.num_agents;
    let mut others: Vec<usize> = (0..n).filter(|&a| a != ego).collect();
    others.shuffle(&mut rng_for(cfg.seed, "malicious", (scene * n + ego) as u64));
    others
}

/// Runs every configured experiment and aggregates a report.
pub fn run_experiment(cfg: &ExperimentConfig, lab: &Lab) -> Result<Report> {
    cfg.validate()?;
    let n = cfg.scene.num_agents;
    if lab.detector.arch != cfg.detector_arch() {
        return Err(HarnessError::Config("lab detector does not match the config architecture".into()));
    }
    let specs = row_specs(cfg);
    let defenses = DefenseRegistry::default();
    let attacks = AttackRegistry::default();
    for s in &specs {
        if s.experiment != BASELINE {
            defenses.get(&s.scenario)?;
            attacks.get(&s.mode)?;
        }
    }

    let mut phis: Vec<f64> = specs
        .iter()
        .filter(|s| NEEDS_ARTIFACTS.contains(&s.scenario.as_str()))
        .map(|s| s.phi)
        .collect();
    phis.sort_by(f64::total_cmp);
    phis.dedup();
    let artifacts: Vec<(f64, MadeArtifacts)> = phis
        .iter()
        .map(|&phi| Ok((phi, lab.made_artifacts(cfg, phi)?)))
        .collect::<Result<_>>()?;

    let eval: Vec<EvalScene> = scenes(cfg, SceneSplit::Eval, cfg.evaluation.scenes)?
        .into_par_iter()
        .map(|scene| {
            let maps = encode_scene(&lab.detector, &scene, cfg)?;
            let sample = TrainingSample::new(scene, &cfg.scene)?;
            let everyone: Vec<usize> = (0..n).collect();
            Ok(EvalScene {
                maps,
                ground_truth: sample.visible_ground_truth(&everyone),
            })
        })
        .collect::<Result<_>>()?;

    let instances: Vec<(usize, usize)> = (0..eval.len()).flat_map(|s| (0..n).map(move |e| (s, e))).collect();
    let outputs: Vec<InstanceOutput> = instances
        .par_iter()
        .map(|&(s, ego)| {
            run_instance(cfg, lab, &specs, &artifacts, &defenses, &attacks, &eval[s], s, ego)
        })
        .collect::<Result<_>>()?;

    let k_fg = cfg.scene.num_classes - 1;
    let mut rows = Vec::with_capacity(specs.len());
    let mut verdicts = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        let images: Vec<(Vec<Detection>, Vec<GridBox>)> = instances
            .iter()
            .zip(&outputs)
            .map(|(&(s, _), out)| (out.cells[j].detections.clone(), eval[s].ground_truth.clone()))
            .collect();
        let ap = average_precision(&images, k_fg, cfg.evaluation.iou_threshold);
        let mut outcomes = Vec::new();
        for (&(s, ego), out) in instances.iter().zip(&outputs) {
            let cell = &out.cells[j];
            let Some(screening) = &cell.screening else { continue };
            for a in &screening.agents {
                let malicious = cell.malicious.contains(&a.agent);
                outcomes.push((a.flagged, malicious));
                if a.verdict.is_none() && a.mad.is_none() {
                    continue;
                }
                let v = a.verdict.as_ref();
                verdicts.push(VerdictRecord {
                    row: j,
                    scene: s,
                    ego,
                    agent: a.agent,
                    malicious,
                    flagged: a.flagged,
                    match_loss: v.map(|v| v.match_loss).or(a.mad.as_ref().map(|m| m.match_loss)),
                    recon_loss: v.map(|v| v.recon_loss),
                    p_match: v.map(|v| v.p_match),
                    p_recon: v.map(|v| v.p_recon),
                    rule: v.map(|v| v.rule_fired),
                    mad_score: a.mad.as_ref().map(|m| m.score),
                });
            }
        }
        let (tpr, fpr) = tpr_fpr(&outcomes);
        let count = |flag: bool, mal: bool| outcomes.iter().filter(|&&(f, m)| f == flag && m == mal).count();
        rows.push(ResultRow {
            experiment: spec.experiment.to_string(),
            scenario: spec.scenario.clone(),
            mode: spec.mode.clone(),
            attackers: spec.attackers,
            epsilon: spec.epsilon,
            phi: spec.phi,
            instances: instances.len(),
            ap: 100.0 * ap.ap,
            no_ground_truth: ap.no_ground_truth,
            tpr,
            fpr,
            flagged_malicious: count(true, true),
            malicious: count(true, true) + count(false, true),
            flagged_benign: count(true, false),
            benign: count(true, false) + count(false, false),
        });
    }

    let mut checks = Checks::default();
    let mut traces = Vec::new();
    for out in outputs {
        checks.merge(out.checks);
        traces.extend(out.traces);
    }
    for &epsilon in cfg.attack.epsilons.iter().filter(|e| **e == 0.0) {
        let find = |s: &str| rows.iter().find(|r| r.experiment == MAIN && r.scenario == s && r.epsilon == epsilon);
        if let (Some(o), Some(d)) = (find("oracle"), find("no-defense")) {
            checks.record("clean-oracle-identity", o.ap == d.ap);
        }
    }
    let audits = checks
        .counts
        .into_iter()
        .map(|(name, (checked, violations))| Audit {
            name: name.to_string(),
            passed: violations == 0,
            checked,
            violations,
        })
        .collect();

    let config = cfg.without_output();
    Ok(Report {
        config_hash: config.hash(),
        config,
        rows,
        verdicts,
        traces,
        audits,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_instance(
    cfg: &ExperimentConfig,
    lab: &Lab,
    specs: &[RowSpec],
    artifacts: &[(f64, MadeArtifacts)],
    defenses: &DefenseRegistry,
    attacks: &AttackRegistry,
    scene: &EvalScene,
    s: usize,
    ego: usize,
) -> Result<InstanceOutput> {
    let det = &lab.detector;
    let ev = &cfg.evaluation;
    let maps = &scene.maps;
    let draw = malicious_draw(cfg, s, ego);
    let mut checks = Checks::default();
    let mut traces = Vec::new();
    let mut cache: Vec<((String, usize, u64), Attacked)> = Vec::new();
    let mut cells = Vec::with_capacity(specs.len());

    for spec in specs {
        if spec.experiment == BASELINE {
            let y = det.detect_features(&maps[ego], &det.slots(&[])?)?;
            cells.push(Cell {
                detections: detections(&y, ev.conf_threshold, ev.nms_iou),
                screening: None,
                malicious: Vec::new(),
            });
            continue;
        }
        let key = (spec.mode.clone(), spec.attackers, spec.epsilon.to_bits());
        let idx = match cache.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let attacked = if spec.epsilon == 0.0 {
                    Attacked {
                        malicious: Vec::new(),
                        received: maps.clone(),
                    }
                } else {
                    let malicious: Vec<usize> = draw[..spec.attackers].to_vec();
                    let mut a = AttackSpec::standard(ego, malicious.clone(), spec.epsilon, &spec.mode);
                    a.steps = cfg.attack.steps;
                    a.step_size = cfg.attack.step_fraction * spec.epsilon;
                    let ctx = AttackContext {
                        detector: det,
                        maps,
                        conf_threshold: ev.conf_threshold,
                    };
                    let out = attacks.run(&ctx, &a)?;
                    checks.record("perturbation-budget", out.perturbations.max_norm() <= spec.epsilon);
                    for t in &out.objective_traces {
                        checks.record("trace-length", t.len() == a.steps + 1 && t.iter().all(|v| v.is_finite()));
                    }
                    traces.push(TraceRecord {
                        scene: s,
                        ego,
                        mode: spec.mode.clone(),
                        attackers: spec.attackers,
                        epsilon: spec.epsilon,
                        malicious: malicious.clone(),
                        traces: out.objective_traces,
                    });
                    Attacked {
                        received: out.perturbations.apply(maps)?,
                        malicious,
                    }
                };
                cache.push((key, attacked));
                cache.len() - 1
            }
        };
        let attacked = &cache[idx].1;
        let art = artifacts.iter().find(|(p, _)| *p == spec.phi).map(|(_, a)| a);
        let ctx = ScreeningContext {
            detector: det,
            ego,
            maps: &attacked.received,
            peer_maps: maps,
            artifacts: art,
            params: cfg.defense_params(spec.phi),
            known_malicious: &attacked.malicious,
        };
        let screening = defenses.get(&spec.scenario)?.screen(&ctx)?;
        checks.record("verdict-count", screening.agents.len() == cfg.scene.num_agents - 1);
        for a in &screening.agents {
            if let Some(v) = &a.verdict {
                checks.record("verdict-consistency", v.consistent(cfg.defense.alpha));
            }
        }
        let y: ProposalSet = ctx.defended_output(&screening)?;
        checks.record("proposal-validity", y.check().is_ok());
        cells.push(Cell {
            detections: detections(&y, ev.conf_threshold, ev.nms_iou),
            screening: Some(screening),
            malicious: attacked.malicious.clone(),
        });
    }
    Ok(InstanceOutput { cells, traces, checks })
}
