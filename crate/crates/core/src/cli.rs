//! `springtwin` command-line interface.
//!
//! Configuration precedence is command-line flag, then the TOML file given by
//! `--config`, then the built-in default. The effective configuration is
//! stamped into every output file as JSON.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{
    fit_first_order, fit_zero_order, refine_controller, FitResult, ObservationSequence, OptimConfig, SearchConfig,
    DEFAULT_LAMBDA_TR,
};
use crate::io::{self, Artifact};
use crate::metrics::{analyze, evaluate, object_frames, EvalReport, ModelContext, DEFAULT_TAU_DYN};
use crate::model::{build_topology, PhysicsConfig};
use crate::scenegen::{generate, preset, ControllerKind, Scene, SceneSpec};
use crate::sim::{rollout, ControllerTrajectory, Rollout, SimState};

#[derive(Parser, Debug)]
#[command(name = "springtwin", version, about = "Spring-mass system identification from point-cloud trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene: writes <out>/<name>.scene, .obs and .ctl
    Gen(GenArgs),
    /// Roll out the ground-truth or a fitted model
    Simulate(SimulateArgs),
    /// Fit a model to observations
    Fit(FitArgs),
    /// Refine a controller trajectory against a fitted model
    Refine(RefineArgs),
    /// Compare a rollout or fitted model with observations
    Eval(EvalArgs),
    /// Report radius deviation and contact accuracy of a fitted model
    Analyze(AnalyzeArgs),
}

/// Flags shared by all commands.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long = "lambda-tr")]
    pub lambda_tr: Option<f64>,
    #[arg(long = "tau-dyn")]
    pub tau_dyn: Option<f64>,
    /// Iteration count of every stage the command runs
    #[arg(long)]
    pub iters: Option<usize>,
    /// Learning rate of every gradient stage the command runs
    #[arg(long)]
    pub lr: Option<f64>,
    /// dense or sparse:<k>
    #[arg(long)]
    pub controller: Option<ControllerKind>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene spec (TOML)
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Bundled scene name
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    pub scene: PathBuf,
    /// Fitted model; the ground truth is used when absent
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    ZeroOrder,
    FirstOrder,
    All,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    pub scene: PathBuf,
    pub observations: PathBuf,
    #[arg(long, value_enum)]
    pub stage: Option<Stage>,
    /// Existing fit to start the first-order stage from
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    pub fit: PathBuf,
    /// Controller trajectory to refine (.ctl)
    pub trajectory: PathBuf,
    pub observations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Rollout (.roll) or fit result (.fit)
    pub input: PathBuf,
    pub observations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Run configuration as read from a TOML file; absent keys fall back to the
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub substeps: Option<usize>,
    pub lambda_tr: Option<f64>,
    pub tau_dyn: Option<f64>,
    pub controller: Option<ControllerKind>,
    pub stage: Option<Stage>,
    pub zero_order_iters: Option<usize>,
    pub population: Option<usize>,
    pub first_order_iters: Option<usize>,
    pub lr: Option<f64>,
    pub refine_iters: Option<usize>,
    pub refine_lr: Option<f64>,
    pub refine_decay: Option<f64>,
    pub initial_connection_radius: Option<f64>,
    pub initial_max_degree: Option<usize>,
    pub initial_stiffness: Option<f64>,
    pub initial_friction: Option<f64>,
}

/// Effective run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub substeps: usize,
    pub lambda_tr: f64,
    pub tau_dyn: f64,
    pub controller: ControllerKind,
    pub stage: Stage,
    pub zero_order_iters: usize,
    pub population: usize,
    pub first_order_iters: usize,
    pub lr: f64,
    pub refine_iters: usize,
    pub refine_lr: f64,
    pub refine_decay: f64,
    pub initial_connection_radius: f64,
    pub initial_max_degree: usize,
    pub initial_stiffness: f64,
    pub initial_friction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let first = OptimConfig::first_order();
        let refine = OptimConfig::refinement();
        let physics = PhysicsConfig::default();
        Self {
            seed: search.seed,
            substeps: physics.substeps,
            lambda_tr: DEFAULT_LAMBDA_TR,
            tau_dyn: DEFAULT_TAU_DYN,
            controller: ControllerKind::Dense,
            stage: Stage::All,
            zero_order_iters: search.iterations,
            population: search.population,
            first_order_iters: first.iterations,
            lr: first.lr,
            refine_iters: refine.iterations,
            refine_lr: refine.lr,
            refine_decay: refine.decay,
            initial_connection_radius: physics.connection_radius,
            initial_max_degree: physics.max_degree,
            initial_stiffness: physics.global_stiffness,
            initial_friction: physics.collision.friction_retention,
        }
    }
}

/// Which iteration/learning-rate keys `--iters` and `--lr` override.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Fit,
    Refine,
    Other,
}

impl RunConfig {
    /// Layers the file and the flags over the defaults.
    pub fn resolve(file: &RunConfigFile, flags: &Common, stage: Option<Stage>, scope: Scope) -> Self {
        let d = Self::default();
        let mut c = Self {
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            substeps: flags.substeps.or(file.substeps).unwrap_or(d.substeps),
            lambda_tr: flags.lambda_tr.or(file.lambda_tr).unwrap_or(d.lambda_tr),
            tau_dyn: flags.tau_dyn.or(file.tau_dyn).unwrap_or(d.tau_dyn),
            controller: flags.controller.or(file.controller).unwrap_or(d.controller),
            stage: stage.or(file.stage).unwrap_or(d.stage),
            zero_order_iters: file.zero_order_iters.unwrap_or(d.zero_order_iters),
            population: file.population.unwrap_or(d.population),
            first_order_iters: file.first_order_iters.unwrap_or(d.first_order_iters),
            lr: file.lr.unwrap_or(d.lr),
            refine_iters: file.refine_iters.unwrap_or(d.refine_iters),
            refine_lr: file.refine_lr.unwrap_or(d.refine_lr),
            refine_decay: file.refine_decay.unwrap_or(d.refine_decay),
            initial_connection_radius: file.initial_connection_radius.unwrap_or(d.initial_connection_radius),
            initial_max_degree: file.initial_max_degree.unwrap_or(d.initial_max_degree),
            initial_stiffness: file.initial_stiffness.unwrap_or(d.initial_stiffness),
            initial_friction: file.initial_friction.unwrap_or(d.initial_friction),
        };
        match scope {
            Scope::Fit => {
                if let Some(n) = flags.iters {
                    c.zero_order_iters = n;
                    c.first_order_iters = n;
                }
                if let Some(lr) = flags.lr {
                    c.lr = lr;
                }
            }
            Scope::Refine => {
                if let Some(n) = flags.iters {
                    c.refine_iters = n;
                }
                if let Some(lr) = flags.lr {
                    c.refine_lr = lr;
                }
            }
            Scope::Other => {}
        }
        c
    }

    pub fn load(flags: &Common, stage: Option<Stage>, scope: Scope) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfigFile::default(),
        };
        Ok(Self::resolve(&file, flags, stage, scope))
    }

    pub fn stamp(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    /// Zero-order starting point: the scene's known constants with the
    /// configured initial guesses.
    pub fn initial_physics(&self, known: &PhysicsConfig) -> PhysicsConfig {
        let mut c = known.clone();
        c.connection_radius = self.initial_connection_radius;
        c.max_degree = self.initial_max_degree;
        c.global_stiffness = self.initial_stiffness;
        c.collision.friction_retention = self.initial_friction;
        c.substeps = self.substeps;
        c
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.zero_order_iters,
            population: self.population,
            seed: self.seed,
            lambda_tr: self.lambda_tr,
            ..SearchConfig::default()
        }
    }

    pub fn first_order(&self) -> OptimConfig {
        OptimConfig {
            iterations: self.first_order_iters,
            lr: self.lr,
            decay: 1.0,
            lambda_tr: self.lambda_tr,
        }
    }

    pub fn refinement(&self) -> OptimConfig {
        OptimConfig {
            iterations: self.refine_iters,
            lr: self.refine_lr,
            decay: self.refine_decay,
            lambda_tr: self.lambda_tr,
        }
    }
}

/// Machine-readable failure record printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub stage: String,
    pub message: String,
}

struct StageError {
    stage: &'static str,
    error: Error,
}

trait InStage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type CmdResult = std::result::Result<(), StageError>;

fn load<T: Artifact>(path: &Path) -> Result<T> {
    io::load::<T>(path).map(|s| s.value).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, None, Scope::Other).stage("config")?;
    let mut spec: SceneSpec = match (&a.spec, &a.preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(Error::from).stage("input")?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
                .stage("input")?
        }
        (None, Some(name)) => preset(name).stage("input")?,
        (None, None) => unreachable!("clap requires a spec or a preset"),
    };
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.common.substeps {
        spec.substeps = n;
    }
    if let Some(k) = a.common.controller {
        spec.controller = k;
    }
    let scene = generate(&spec).stage("gen")?;
    let stamp = cfg.stamp();
    std::fs::create_dir_all(&a.out).map_err(Error::from).stage("output")?;
    let base = a.out.join(&spec.name);
    io::save(&base.with_extension("scene"), &scene, &stamp).stage("output")?;
    io::save(&base.with_extension("obs"), &scene.observations, &stamp).stage("output")?;
    io::save(&base.with_extension("ctl"), &scene.perturbed_controller, &stamp).stage("output")
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, None, Scope::Other).stage("config")?;
    let scene: Scene = load(&a.scene).stage("input")?;
    let (topology, config, controller) = match &a.fit {
        Some(p) => {
            let fit: FitResult = load(p).stage("input")?;
            let ctl = fit.refined_controller.clone().unwrap_or(fit.controller.clone());
            (fit.topology, fit.config, ctl)
        }
        None => {
            let mut config = scene.truth_config.clone();
            config.substeps = cfg.substeps;
            (scene.truth_topology.clone(), config, scene.dense_controller.clone())
        }
    };
    let roll = rollout(&topology, &config, &controller, &SimState::at_rest(&topology)).stage("simulate")?;
    io::save(&a.out, &roll, &cfg.stamp()).stage("output")
}

/// Runs the configured fitting stages on `scene`.
pub fn run_fit(
    scene: &Scene,
    observations: &ObservationSequence,
    cfg: &RunConfig,
    init: Option<&FitResult>,
) -> std::result::Result<FitResult, (&'static str, Error)> {
    let controller = scene.controller(cfg.controller).map_err(|e| ("input", e))?;
    let base = cfg.initial_physics(&scene.truth_config);
    let zero = match (cfg.stage, init) {
        (Stage::FirstOrder, Some(f)) => f.clone(),
        (Stage::FirstOrder, None) => {
            let topology = build_topology(&scene.rest, &controller.frame_cloud(0), &base).map_err(|e| ("first-order", e))?;
            FitResult {
                config: base,
                topology,
                controller: controller.clone(),
                final_loss: f64::NAN,
                zero_order_curve: vec![],
                first_order_curve: vec![],
                refine_curve: vec![],
                refined_controller: None,
                seed: cfg.seed,
                reverted: false,
            }
        }
        _ => fit_zero_order(&scene.rest, &controller, observations, &base, &cfg.search()).map_err(|e| ("zero-order", e))?,
    };
    if cfg.stage == Stage::ZeroOrder {
        return Ok(zero);
    }
    let first = fit_first_order(&zero.topology, &zero.config, &zero.controller, observations, &cfg.first_order())
        .map_err(|e| ("first-order", e))?;
    Ok(FitResult {
        zero_order_curve: zero.zero_order_curve,
        seed: cfg.seed,
        ..first
    })
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, a.stage, Scope::Fit).stage("config")?;
    let scene: Scene = load(&a.scene).stage("input")?;
    let obs: ObservationSequence = load(&a.observations).stage("input")?;
    let init: Option<FitResult> = a.init.as_deref().map(load).transpose().stage("input")?;
    let fit = run_fit(&scene, &obs, &cfg, init.as_ref()).map_err(|(stage, error)| StageError { stage, error })?;
    io::save(&a.out, &fit, &cfg.stamp()).stage("output")
}

fn cmd_refine(a: &RefineArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, None, Scope::Refine).stage("config")?;
    let fit: FitResult = load(&a.fit).stage("input")?;
    let ctl: ControllerTrajectory = load(&a.trajectory).stage("input")?;
    let obs: ObservationSequence = load(&a.observations).stage("input")?;
    let refined = refine_controller(&fit.topology, &fit.config, &ctl, &obs, &cfg.refinement()).stage("refine")?;
    let out = refined.refined_controller.expect("refinement sets the controller");
    io::save(&a.out, &out, &cfg.stamp()).stage("output")
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, None, Scope::Other).stage("config")?;
    let obs: ObservationSequence = load(&a.observations).stage("input")?;
    let text = std::fs::read_to_string(&a.input).map_err(Error::from).stage("input")?;
    let report: EvalReport = if text.starts_with("springtwin-fit ") {
        let fit = io::from_text::<FitResult>(&text).stage("input")?.value;
        let ctl = fit.refined_controller.as_ref().unwrap_or(&fit.controller);
        let roll = rollout(&fit.topology, &fit.config, ctl, &SimState::at_rest(&fit.topology)).stage("simulate")?;
        let frame0 = fit.controller.frame_cloud(0);
        let ctx = ModelContext {
            topology: &fit.topology,
            connection_radius: fit.config.connection_radius,
            controller_frame0: &frame0,
        };
        let sim = object_frames(&roll, fit.topology.num_object_nodes());
        evaluate(&sim, &obs, cfg.tau_dyn, Some(&ctx)).stage("eval")?
    } else {
        let roll = io::from_text::<Rollout>(&text).stage("input")?.value;
        let n = obs.clouds[0].len().min(roll.frames[0].positions.len());
        evaluate(&object_frames(&roll, n), &obs, cfg.tau_dyn, None).stage("eval")?
    };
    io::save(&a.out, &report, &cfg.stamp()).stage("output")
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.common, None, Scope::Other).stage("config")?;
    let fit: FitResult = load(&a.fit).stage("input")?;
    let frame0 = fit.controller.frame_cloud(0);
    let ctx = ModelContext {
        topology: &fit.topology,
        connection_radius: fit.config.connection_radius,
        controller_frame0: &frame0,
    };
    let analysis = analyze(&ctx).stage("analyze")?;
    io::save(&a.out, &analysis, &cfg.stamp()).stage("output")
}

/// Runs a parsed command. On failure returns the error record.
pub fn execute(cli: &Cli) -> std::result::Result<(), ErrorRecord> {
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    result.map_err(|e| ErrorRecord {
        error: e.error.kind(),
        stage: e.stage.to_string(),
        message: e.error.to_string(),
    })
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(rec) => {
            eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let file: RunConfigFile = toml::from_str("seed = 5\nlr = 0.5\nsubsteps = 4\n").unwrap();
        let flags = Common {
            seed: Some(9),
            ..Common::default()
        };
        let c = RunConfig::resolve(&file, &flags, None, Scope::Fit);
        assert_eq!(c.seed, 9);
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.substeps, 4);
        assert_eq!(c.lambda_tr, DEFAULT_LAMBDA_TR);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<RunConfigFile>("sed = 5\n").is_err());
    }

    #[test]
    fn iters_flag_targets_the_command_scope() {
        let flags = Common {
            iters: Some(3),
            ..Common::default()
        };
        let f = RunConfig::resolve(&RunConfigFile::default(), &flags, None, Scope::Fit);
        assert_eq!((f.zero_order_iters, f.first_order_iters), (3, 3));
        assert_eq!(f.refine_iters, OptimConfig::refinement().iterations);
        let r = RunConfig::resolve(&RunConfigFile::default(), &flags, None, Scope::Refine);
        assert_eq!(r.refine_iters, 3);
    }

    #[test]
    fn stamp_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.stamp()).unwrap();
        assert_eq!(back, c);
    }
}
