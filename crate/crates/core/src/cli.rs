//! Command-line front end.
//!
//! Every command reads an optional TOML file, applies `--set key=value`
//! overrides, validates the result and writes it back to the output directory
//! as `config.resolved.toml` before doing any work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{
    buckets_csv, derive_seed, experiment_noise_cross, experiment_pi_vs_rnn, experiment_shock_grid,
    gen_production_like_dataset, gen_simulated_dataset, init_gru, pi_setup, report_csv, Dataset, ProductionConfig,
    SimulatedConfig, Split, SplitCounts,
};
use crate::controllers::AnyController;
use crate::dp::{solve_bellman, solve_pde, stretched_grid, uniform_grid, BellmanProblem, GaussianKernel, PdeProblem};
use crate::error::{Error, Result};
use crate::landscape::{BidLandscape, BidNoise, GaussianResponse, PriceGrid, Response, SmoothedLandscape};
use crate::market::{run_on_path, FeedbackMode};
use crate::training::{log_to_csv, train, tune_pi, BiddingProblem, TrainConfig};

/// Overrides the output directory of every command.
pub const OUTPUT_ROOT_ENV: &str = "BIDLAB_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bidlab", version, about = "Bid pacing experiments for second-price auctions")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr0=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (takes precedence over the environment and the config).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Caps the worker threads used for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated or production-like dataset.
    GenData,
    /// Train a GRU controller on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tune PI gains on a dataset.
    TunePi {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Solve the optimal bidding problem on a grid.
    Solve {
        #[arg(value_enum)]
        solver: Solver,
    },
    /// Play one episode with a saved model and write its trajectory.
    RunEpisode {
        #[arg(long)]
        model: PathBuf,
        /// Dataset to draw the problem from; a simulated path is used otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one of the benchmark experiments.
    Experiment {
        #[arg(value_enum)]
        which: ExperimentKind,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Collect report CSVs under a directory into one summary table.
    Report {
        /// Directory searched recursively for `report.csv` files.
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Dp,
    Pde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    ShockGrid,
    NoiseCross,
    PiVsRnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Simulated,
    ProductionLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Volume noise of the simulated generator.
    pub sigma: f64,
    /// Problem counts of the simulated generator.
    pub counts: SplitCounts,
    /// Dataset directory read by `train`, `tune-pi`, `run-episode` and `pi-vs-rnn`.
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Simulated,
            sigma: 0.0,
            counts: SplitCounts {
                train: 20_000,
                validation: 200,
                evaluation: 2_000,
            },
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiSection {
    /// Initial gains in units of `K / mean per-period goal`.
    pub kp: f64,
    pub ki: f64,
}

impl Default for PiSection {
    fn default() -> Self {
        Self { kp: 0.5, ki: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    /// Smallest cell of a grid refined around 0; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_step: Option<f64>,
}

impl GridSpec {
    fn build(&self) -> Result<Vec<f64>> {
        if self.points < 2 || !(self.max > self.min) {
            return Err(Error::Config(format!(
                "grid needs points >= 2 and max > min, got {:?}",
                self
            )));
        }
        match self.min_step {
            Some(s) => stretched_grid(self.min, self.max, self.points, s),
            None => Ok(uniform_grid(self.min, self.max, self.points)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ResponseSpec {
    /// Win probability `Φ((a − mean)/sd)`, spend of the matching truncated normal.
    Gaussian { mean: f64, sd: f64 },
    /// Log-normal landscape smoothed by bid noise.
    Lognormal { median: f64, log_sd: f64, noise: BidNoise },
}

impl ResponseSpec {
    fn build(&self) -> Result<Arc<dyn Response>> {
        Ok(match *self {
            ResponseSpec::Gaussian { mean, sd } => Arc::new(GaussianResponse::new(mean, sd)?),
            ResponseSpec::Lognormal { median, log_sd, noise } => {
                let l = BidLandscape::lognormal(Arc::new(PriceGrid::standard()), median, log_sd)?;
                Arc::new(SmoothedLandscape::new(Arc::new(l), noise)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub response: ResponseSpec,
    pub penalty: f64,
    pub horizon: usize,
    /// Length of the day in intensity time units, split evenly over `horizon` periods.
    pub duration: f64,
    pub sigma: f64,
    /// Intensity drift of the DP transition.
    pub drift: f64,
    pub g: GridSpec,
    pub h: GridSpec,
    /// Candidate bids of the DP minimization, spread uniformly over `[0, K]`.
    pub bid_points: usize,
    /// Explicit PDE sub-steps per period; derived from the stability bound when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    /// Keep every n-th node of each axis in the written field.
    pub decimation: usize,
    /// `(G, H)` at which the summary reports the time-0 bid and cost.
    pub probe: [f64; 2],
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            response: ResponseSpec::Gaussian { mean: 1.0, sd: 0.5 },
            penalty: 2.0,
            horizon: 100,
            duration: 1.0,
            sigma: 0.0,
            drift: 0.0,
            g: GridSpec {
                min: -0.3,
                max: 7.0,
                points: 200,
                min_step: None,
            },
            h: GridSpec {
                min: 0.0,
                max: 20.0,
                points: 200,
                min_step: None,
            },
            bid_points: 301,
            substeps: None,
            decimation: 1,
            probe: [6.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    /// Problem id inside the dataset; the first evaluation problem when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<u64>,
    /// Simulated volume noise when no dataset is given.
    pub sigma: f64,
    /// Simulated permanent shock factor when no dataset is given.
    pub shock: f64,
    pub feedback: FeedbackMode,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            problem: None,
            sigma: 0.0,
            shock: 1.0,
            feedback: FeedbackMode::Expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    /// Training noise level of the model.
    pub sigma: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub models: Vec<ModelRef>,
    pub factors: Vec<f64>,
    pub eval_sigmas: Vec<f64>,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rnn_model: Option<PathBuf>,
    pub buckets: Vec<f64>,
    pub resamples: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            factors: vec![1.0, 1.5, 2.0, 3.0, 5.0, 10.0],
            eval_sigmas: vec![0.1, 10.0],
            n_eval: 2_000,
            pi_model: None,
            rnn_model: None,
            buckets: vec![100.0, 500.0, 1000.0, 1500.0],
            resamples: 2_000,
        }
    }
}

/// Fully-resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub simulated: SimulatedConfig,
    pub production: ProductionConfig,
    pub train: TrainConfig,
    pub pi: PiSection,
    pub solve: SolveSection,
    pub episode: EpisodeSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            simulated: SimulatedConfig::default(),
            production: ProductionConfig::default(),
            train: TrainConfig::default(),
            pi: PiSection::default(),
            solve: SolveSection::default(),
            episode: EpisodeSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.simulated.validate().map_err(cfg)?;
        self.production.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if !(self.data.sigma >= 0.0) {
            return Err(Error::Config("data.sigma must be >= 0".into()));
        }
        if self.solve.bid_points < 2
            || self.solve.horizon == 0
            || !(self.solve.penalty > 0.0)
            || !(self.solve.duration > 0.0)
        {
            return Err(Error::Config(
                "solve needs bid_points >= 2, horizon >= 1, penalty > 0 and duration > 0".into(),
            ));
        }
        if !(self.episode.shock >= 1.0) {
            return Err(Error::Config("episode.shock must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses TOML text, applying `key=value` overrides on dotted paths.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            let parsed = parse_override_value(raw.trim());
            let mut table = &mut value;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), parsed);
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::Missing(_)
        | Error::Cfl { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let text = match &cli.common.config {
        Some(p) if !p.exists() => return Err(Error::Missing(p.clone())),
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml(&text, &cli.common.overrides)?;
    if let Some(o) = cli.common.out.clone() {
        cfg.output_dir = o;
    } else if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        cfg.output_dir = PathBuf::from(root);
    }
    if let Command::Report { input } = &cli.command {
        return cmd_report(input, &cfg.output_dir);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.resolved.toml"), cfg.to_toml())?;
    let data_dir = |flag: &Option<PathBuf>| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| cfg.data.dir.clone())
            .ok_or_else(|| Error::Config("no dataset: pass --data or set data.dir".into()))
    };
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { data } => cmd_train(&cfg, &data_dir(data)?),
        Command::TunePi { data } => cmd_tune_pi(&cfg, &data_dir(data)?),
        Command::Solve { solver } => cmd_solve(&cfg, *solver),
        Command::RunEpisode { model, data } => {
            let d = data.clone().or_else(|| cfg.data.dir.clone());
            cmd_run_episode(&cfg, model, d.as_deref())
        }
        Command::Experiment { which, data } => match which {
            ExperimentKind::ShockGrid => cmd_shock_grid(&cfg),
            ExperimentKind::NoiseCross => cmd_noise_cross(&cfg),
            ExperimentKind::PiVsRnn => cmd_pi_vs_rnn(&cfg, &data_dir(data)?),
        },
        Command::Report { .. } => unreachable!(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `manifest.json` listing the seed and a checksum of each file.
pub fn write_manifest(dir: &Path, command: &str, seed: u64, files: &[String]) -> Result<()> {
    let entries = files
        .iter()
        .map(|f| {
            let bytes = fs::read(dir.join(f))?;
            Ok(serde_json::json!({ "file": f, "sha256": sha256_hex(&bytes), "bytes": bytes.len() }))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "files": entries,
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("json") + "\n",
    )?;
    Ok(())
}

fn put(dir: &Path, files: &mut Vec<String>, name: &str, text: &str) -> Result<()> {
    if let Some(parent) = Path::new(name).parent() {
        fs::create_dir_all(dir.join(parent))?;
    }
    fs::write(dir.join(name), text)?;
    files.push(name.to_string());
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let ds = match cfg.data.kind {
        DataKind::Simulated => gen_simulated_dataset(&cfg.simulated, cfg.data.sigma, cfg.data.counts, cfg.seed)?,
        DataKind::ProductionLike => gen_production_like_dataset(&cfg.production, cfg.seed)?,
    };
    let files = ds.write_dir(&cfg.output_dir)?;
    write_manifest(&cfg.output_dir, "gen-data", cfg.seed, &files)?;
    println!(
        "wrote {} problems ({} train, {} validation, {} evaluation) to {}",
        ds.problems.len(),
        ds.count(Split::Train),
        ds.count(Split::Validation),
        ds.count(Split::Evaluation),
        cfg.output_dir.display()
    );
    Ok(())
}

fn load_problems(dir: &Path) -> Result<(Dataset, crate::bench::SplitProblems)> {
    let ds = Dataset::read_dir(dir)?;
    let sp = ds.split_problems()?;
    if sp.train.is_empty() || sp.validation.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} needs training and validation problems",
            dir.display()
        )));
    }
    Ok((ds, sp))
}

fn cmd_train(cfg: &RunConfig, data: &Path) -> Result<()> {
    let (ds, sp) = load_problems(data)?;
    let out = &cfg.output_dir;
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    let init = init_gru(&sp.train, ds.meta.penalty, derive_seed(cfg.seed, 1))?;
    info!("training {} steps on {} problems", cfg.train.steps(), sp.train.len());
    let outcome = train(
        &init,
        &sp.train,
        &sp.validation,
        &cfg.train,
        derive_seed(cfg.seed, 2),
        |step, val, m| {
            info!("step {step}: validation {val:.6}");
            AnyController::Gru(m.clone()).save(&ckpt.join(format!("step_{step:06}.model")))
        },
    )?;
    let mut files = Vec::new();
    put(out, &mut files, "train_log.csv", &log_to_csv(&outcome.log))?;
    let outcome = outcome.into_result()?;
    put(out, &mut files, "model.txt", &AnyController::Gru(outcome.best.clone()).to_model_text())?;
    write_manifest(out, "train", cfg.seed, &files)?;
    println!(
        "best validation {:.6} at step {} (initial {:.6})",
        outcome.best_val, outcome.best_step, outcome.initial_val
    );
    Ok(())
}

fn cmd_tune_pi(cfg: &RunConfig, data: &Path) -> Result<()> {
    let (ds, sp) = load_problems(data)?;
    let (pi, scaling) = pi_setup(&sp.train, ds.meta.penalty, [cfg.pi.kp, cfg.pi.ki])?;
    let outcome = tune_pi(&pi, scaling, &sp.train, &sp.validation, &cfg.train, derive_seed(cfg.seed, 3))?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "train_log.csv", &log_to_csv(&outcome.log))?;
    let outcome = outcome.into_result()?;
    put(out, &mut files, "model.txt", &AnyController::Pi(outcome.best).to_model_text())?;
    write_manifest(out, "tune-pi", cfg.seed, &files)?;
    println!(
        "kp {:.6} ki {:.6}; best validation {:.6} at step {}",
        outcome.best.params.kp, outcome.best.params.ki, outcome.best_val, outcome.best_step
    );
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, solver: Solver) -> Result<()> {
    let s = &cfg.solve;
    let response = s.response.build()?;
    let g_grid = s.g.build()?;
    let h_grid = s.h.build()?;
    let period_length = s.duration / s.horizon as f64;
    let field = match solver {
        Solver::Dp => {
            let kernel = GaussianKernel {
                drift: s.drift,
                sigma: s.sigma,
                period_length,
            };
            solve_bellman(&BellmanProblem {
                periods: s.horizon,
                g_grid,
                h_grid,
                response: response.as_ref(),
                kernel: &kernel,
                max_bid: s.penalty,
                bid_grid: uniform_grid(0.0, s.penalty, s.bid_points),
                period_length,
            })?
        }
        Solver::Pde => {
            if s.drift != 0.0 {
                return Err(Error::Config("the PDE solver has no drift term; set solve.drift = 0".into()));
            }
            solve_pde(&PdeProblem {
                sigma: s.sigma,
                horizon: s.duration,
                steps: s.horizon,
                g_grid,
                h_grid,
                response,
                max_bid: s.penalty,
                substeps: s.substeps,
            })?
        }
    };
    let [g0, h0] = s.probe;
    let (bid, out_b) = field.bid_at(0, g0, h0);
    let (cost, out_c) = field.cost_at(0, g0, h0);
    let summary = serde_json::json!({
        "solver": field.solver,
        "slices": field.n_slices(),
        "g_points": field.g_grid.len(),
        "h_points": field.h_grid.len(),
        "probe": { "G": g0, "H": h0, "bid": bid, "cost": cost, "outside_grid": out_b || out_c },
    });
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "policy.csv", &field.to_text(s.decimation))?;
    put(out, &mut files, "summary.json", &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    write_manifest(out, "solve", cfg.seed, &files)?;
    println!("{} field with {} slices; a(0, {g0}, {h0}) = {bid:.6}, cost {cost:.6}", field.solver, field.n_slices());
    Ok(())
}

fn cmd_run_episode(cfg: &RunConfig, model: &Path, data: Option<&Path>) -> Result<()> {
    let m = AnyController::load(model)?;
    let e = &cfg.episode;
    let problem = match data {
        Some(dir) => {
            let sp = Dataset::read_dir(dir)?.split_problems()?;
            let all = sp.train.into_iter().chain(sp.validation).chain(sp.evaluation);
            let mut all: Vec<BiddingProblem> = all.collect();
            match e.problem {
                Some(id) => all
                    .into_iter()
                    .find(|p| p.id == id)
                    .ok_or_else(|| Error::Config(format!("no problem with id {id}")))?,
                None => {
                    let first = all
                        .iter()
                        .position(|p| crate::bench::split_of(p.id) == Some(Split::Evaluation))
                        .ok_or_else(|| Error::Config("dataset has no evaluation problems".into()))?;
                    all.swap_remove(first)
                }
            }
        }
        None => {
            let sim = &cfg.simulated;
            let resp = sim.response()?;
            let mut p = sim.shock_problem(&resp, e.shock, e.problem.unwrap_or(0))?;
            if e.sigma > 0.0 {
                let scenario = sim.scenario(e.sigma).with_shock(sim.shock_start, e.shock);
                p.intensities = scenario.sample_path(derive_seed(cfg.seed, p.id))?;
            }
            p
        }
    };
    let trace = run_on_path(
        &m,
        &problem.intensities,
        &problem.landscapes,
        problem.goal,
        problem.penalty,
        e.feedback,
        derive_seed(cfg.seed, problem.id),
    )?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "trajectory.csv", &trace.to_csv())?;
    write_manifest(out, "run-episode", cfg.seed, &files)?;
    println!(
        "problem {}: cost {:.4} (spend {:.4}, penalty {:.4}), volume {:.3} of {}",
        problem.id,
        trace.final_cost,
        trace.total_spend(),
        trace.penalty_paid(),
        trace.total_volume(),
        trace.goal
    );
    Ok(())
}

fn load_models(refs: &[ModelRef]) -> Result<Vec<(f64, AnyController)>> {
    if refs.is_empty() {
        return Err(Error::Config("experiment.models is empty".into()));
    }
    refs.iter().map(|r| Ok((r.sigma, AnyController::load(&r.path)?))).collect()
}

fn print_table(rows: &[crate::bench::ReportRow]) {
    println!(
        "{:<28} {:>12} {:>12} {:>10} {:>12} {:>12} {:>6}",
        "cell", "mean_cost", "std_cost", "shortfall", "mean_spend", "mean_penalty", "n"
    );
    for r in rows {
        println!(
            "{:<28} {:>12.4} {:>12.4} {:>10.4} {:>12.4} {:>12.4} {:>6}",
            r.cell, r.mean_cost, r.std_cost, r.shortfall_prob, r.mean_spend, r.mean_penalty, r.n
        );
    }
}

fn cmd_shock_grid(cfg: &RunConfig) -> Result<()> {
    let models = load_models(&cfg.experiment.models)?;
    let refs: Vec<(f64, &AnyController)> = models.iter().map(|(s, m)| (*s, m)).collect();
    let rep = experiment_shock_grid(&refs, &cfg.simulated, &cfg.experiment.factors)?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "report.csv", &report_csv(&rep.rows))?;
    for c in &rep.cells {
        let name = format!("trajectories/sigma_{}_shock_{}.csv", c.sigma, c.factor);
        put(out, &mut files, &name, &c.trace.to_csv())?;
    }
    write_manifest(out, "experiment shock-grid", cfg.seed, &files)?;
    print_table(&rep.rows);
    Ok(())
}

fn cmd_noise_cross(cfg: &RunConfig) -> Result<()> {
    let models = load_models(&cfg.experiment.models)?;
    let refs: Vec<(f64, &AnyController)> = models.iter().map(|(s, m)| (*s, m)).collect();
    let e = &cfg.experiment;
    let rep = experiment_noise_cross(&refs, &e.eval_sigmas, &cfg.simulated, e.n_eval, derive_seed(cfg.seed, 4))?;
    let mut costs = String::from("train_sigma,eval_sigma,episode,cost,shortfall\n");
    for c in &rep.cells {
        for (i, (cost, short)) in c.costs.iter().zip(&c.shortfall).enumerate() {
            writeln!(costs, "{},{},{i},{cost},{}", c.train_sigma, c.eval_sigma, *short as u8).unwrap();
        }
    }
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "report.csv", &report_csv(&rep.rows))?;
    put(out, &mut files, "costs.csv", &costs)?;
    write_manifest(out, "experiment noise-cross", cfg.seed, &files)?;
    print_table(&rep.rows);
    Ok(())
}

fn cmd_pi_vs_rnn(cfg: &RunConfig, data: &Path) -> Result<()> {
    let e = &cfg.experiment;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("experiment.{key} is not set")))
    };
    let pi = AnyController::load(&need(&e.pi_model, "pi_model")?)?;
    let rnn = AnyController::load(&need(&e.rnn_model, "rnn_model")?)?;
    let sp = Dataset::read_dir(data)?.split_problems()?;
    let rep = experiment_pi_vs_rnn(&pi, &rnn, &sp.evaluation, &e.buckets, e.resamples, derive_seed(cfg.seed, 5))?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();
    put(out, &mut files, "report.csv", &report_csv(&rep.rows))?;
    put(out, &mut files, "buckets.csv", &buckets_csv(&rep.buckets))?;
    write_manifest(out, "experiment pi-vs-rnn", cfg.seed, &files)?;
    print_table(&rep.rows);
    println!();
    println!("{:>8} {:>10} {:>10} {:>8} {:>18}", "goal", "pi_cpm", "rnn_cpm", "ratio", "95% CI");
    for b in &rep.buckets {
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>8.4} [{:.4}, {:.4}]",
            b.goal, b.pi_cpm, b.rnn_cpm, b.ratio, b.ci_low, b.ci_high
        );
    }
    Ok(())
}

fn find_reports(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_reports(&p, acc)?;
        } else if p.file_name().is_some_and(|n| n == "report.csv") {
            acc.push(p);
        }
    }
    Ok(())
}

const REPORT_HEADER: &str = "experiment,cell,mean_cost,std_cost,shortfall_prob,mean_spend,mean_penalty,n";

fn cmd_report(input: &Path, out: &Path) -> Result<()> {
    if !input.is_dir() {
        return Err(Error::Missing(input.to_path_buf()));
    }
    let mut paths = Vec::new();
    find_reports(input, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no report.csv under {}", input.display())));
    }
    let mut summary = format!("{REPORT_HEADER}\n");
    for p in &paths {
        let text = fs::read_to_string(p)?;
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(crate::error::parse_err(p.display().to_string(), "unexpected report header"));
        }
        for l in lines.filter(|l| !l.is_empty()) {
            summary.push_str(l);
            summary.push('\n');
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.csv"), &summary)?;
    let rows: Vec<Vec<&str>> = summary.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r.get(i).map_or(0, |c| c.len())).max().unwrap_or(0))
        .collect();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
    Ok(())
}
