use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use made_harness::config::ExperimentConfig;
use made_harness::error::HarnessError;
use made_harness::experiment::{run_experiment, Report};
use made_harness::lab::{
    artifact_dir, init_artifact_dir, save, scenes, train_autoencoder_artifact, train_detector_artifact, Lab, SceneSplit,
    AUTOENCODER_FILE, DETECTOR_FILE,
};
use made_harness::report::{emit_report, read_report, render_markdown, Format, Timing, CONFIG_TOML};
use made_core::pipeline::Detector;
use made_tensor::Checkpoint;

#[derive(Parser)]
#[command(name = "made", about = "Feature-map attacks and malicious agent detection at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training, bank and evaluation scenes as JSON.
    GenData(Common),
    /// Train the detector and store it with the artifacts.
    TrainDetector(Common),
    /// Train the residual autoencoder (needs the detector).
    TrainAe(Common),
    /// Write the conformal calibration sets.
    Calibrate(Common),
    /// Attack every instance with no defense and report AP and objective traces.
    Attack(Common),
    /// Run the configured defense scenarios against the single-attacker grid.
    Defend(Common),
    /// Run every configured experiment and write the full report.
    Eval(Common),
    /// Print a written report as markdown tables.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Config file or bundled preset name.
    #[arg(long, default_value = "full")]
    config: PathBuf,
    /// Report directory (default: output.dir, else runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Artifact root (default: output.artifacts, else artifacts).
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    /// Train missing artifacts instead of failing.
    #[arg(long)]
    train_missing: bool,
    /// Overwrite a report directory written from a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding report.json.
    dir: PathBuf,
    /// Also re-emit the CSV files next to the report.
    #[arg(long)]
    csv: bool,
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
    artifacts: PathBuf,
    force: bool,
}

impl Common {
    fn setup(&self) -> anyhow::Result<Setup> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.scenes {
            cfg.evaluation.scenes = v;
        }
        if let Some(v) = &self.epsilons {
            cfg.attack.epsilons = v.clone();
        }
        if let Some(v) = &self.scenarios {
            cfg.defense.scenarios = v.clone();
        }
        if let Some(v) = self.alpha {
            cfg.defense.alpha = v;
        }
        if let Some(v) = self.phi {
            cfg.defense.phi = v;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = Some(v.clone());
        }
        if let Some(v) = &self.artifacts {
            cfg.output.artifacts = Some(v.clone());
        }
        cfg.output.train_missing |= self.train_missing;
        cfg.validate()?;
        let out = cfg.output.dir.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name));
        let root = cfg.output.artifacts.clone().unwrap_or_else(|| PathBuf::from("artifacts"));
        let artifacts = artifact_dir(&root, &cfg);
        Ok(Setup {
            cfg,
            out,
            artifacts,
            force: self.force,
        })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    made_harness::lab::write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Refuses to mix reports from different configs in one directory.
fn check_out_dir(s: &Setup) -> anyhow::Result<()> {
    let path = s.out.join(CONFIG_TOML);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(());
    };
    let previous = ExperimentConfig::from_toml(&text).with_context(|| format!("reading {}", path.display()))?;
    let expected = s.cfg.hash();
    if previous.hash() != expected && !s.force {
        return Err(HarnessError::HashMismatch {
            dir: s.out.clone(),
            expected,
            found: previous.hash(),
        }
        .into());
    }
    Ok(())
}

fn load_detector(s: &Setup) -> anyhow::Result<Detector> {
    let path = s.artifacts.join(DETECTOR_FILE);
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path).into());
    }
    Ok(Detector::from_checkpoint(&Checkpoint::load(&path)?)?)
}

fn run_and_emit(s: &Setup, cfg: &ExperimentConfig) -> anyhow::Result<Report> {
    check_out_dir(s)?;
    let mut timing = Timing::default();
    let lab = timing.time("artifacts", || Lab::open(cfg, &s.artifacts, cfg.output.train_missing))?;
    let report = timing.time("experiment", || run_experiment(cfg, &lab))?;
    for path in emit_report(&report, &s.out, &[Format::Json, Format::Csv])? {
        println!("wrote {}", path.display());
    }
    timing.write(&s.out)?;
    print!("{}", render_markdown(&report));
    Ok(report)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(c) => {
            let s = c.setup()?;
            let cfg = &s.cfg;
            let dir = s.out.join("data");
            write_json(&dir.join("train_scenes.json"), &scenes(cfg, SceneSplit::Train, cfg.detector.train_scenes)?)?;
            write_json(&dir.join("bank_scenes.json"), &scenes(cfg, SceneSplit::Bank, cfg.autoencoder.bank_frames)?)?;
            write_json(&dir.join("eval_scenes.json"), &scenes(cfg, SceneSplit::Eval, cfg.evaluation.scenes)?)?;
        }
        Command::TrainDetector(c) => {
            let s = c.setup()?;
            init_artifact_dir(&s.cfg, &s.artifacts)?;
            let (det, report) = train_detector_artifact(&s.cfg)?;
            save(&det.to_checkpoint(), &s.artifacts.join(DETECTOR_FILE))?;
            println!("epoch losses: {:?}", report.epoch_losses);
            println!("wrote {}", s.artifacts.join(DETECTOR_FILE).display());
        }
        Command::TrainAe(c) => {
            let s = c.setup()?;
            init_artifact_dir(&s.cfg, &s.artifacts)?;
            let det = load_detector(&s)?;
            let (ae, report) = train_autoencoder_artifact(&det, &s.cfg)?;
            save(&ae.to_checkpoint(), &s.artifacts.join(AUTOENCODER_FILE))?;
            println!("epoch losses: {:?}", report.epoch_losses);
            println!("wrote {}", s.artifacts.join(AUTOENCODER_FILE).display());
        }
        Command::Calibrate(c) => {
            let s = c.setup()?;
            let lab = Lab::open(&s.cfg, &s.artifacts, s.cfg.output.train_missing)?;
            let cal = lab.calibration(&s.cfg, s.cfg.defense.phi)?;
            println!("{} benign pairs calibrated", cal.match_losses.len());
            write_json(&s.out.join("calibration.json"), &cal)?;
        }
        Command::Attack(c) => {
            let s = c.setup()?;
            let mut cfg = s.cfg.clone();
            cfg.defense.scenarios = vec!["no-defense".into()];
            cfg.adaptive = None;
            cfg.phi_ablation = None;
            return Ok(run_and_emit(&s, &cfg)?.passed());
        }
        Command::Defend(c) => {
            let s = c.setup()?;
            let mut cfg = s.cfg.clone();
            cfg.adaptive = None;
            cfg.phi_ablation = None;
            return Ok(run_and_emit(&s, &cfg)?.passed());
        }
        Command::Eval(c) => {
            let s = c.setup()?;
            return Ok(run_and_emit(&s, &s.cfg)?.passed());
        }
        Command::Report(r) => {
            let report = read_report(&r.dir)?;
            if r.csv {
                emit_report(&report, &r.dir, &[Format::Csv])?;
            }
            print!("{}", render_markdown(&report));
            if !report.passed() {
                bail!("report contains failed audits");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant audit failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
