//! Command-line front end: scenario synthesis, ingestion, role assignment,
//! training, evaluation, rollouts, counterfactuals and figures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use trajimit::training::TrainConfig;

mod commands;
mod output;
mod plot;

pub const OUT_ENV: &str = "TRAJIMIT_OUT";

#[derive(Parser, Debug)]
#[command(name = "trajimit", version, about = "Imitation of multi-agent defensive trajectories")]
struct Cli {
    /// Output root; defaults to $TRAJIMIT_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into this directory instead of a new run-stamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate synthetic scenarios with a planted observation mask.
    Synth(SynthArgs),
    /// Validate a tracking file and cut it into windows.
    Ingest(IngestArgs),
    /// Fit the role model on defenders and reindex every sequence.
    AssignRoles(AssignArgs),
    /// Train role policies.
    Train(TrainArgs),
    /// Score role policies or the velocity baseline on held-out windows.
    Evaluate(EvaluateArgs),
    /// Sample team rollouts and log trajectories, gates and macro-goals.
    Rollout(RolloutArgs),
    /// Roll out with forced observation gates.
    Counterfactual(CounterfactualArgs),
    /// Draw figures from a rollout or counterfactual run directory.
    Plot(PlotArgs),
    /// Re-run a command from the `config.toml` echoed into a run directory.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth(_) => "synth",
            Self::Ingest(_) => "ingest",
            Self::AssignRoles(_) => "assign-roles",
            Self::Train(_) => "train",
            Self::Evaluate(_) => "evaluate",
            Self::Rollout(_) => "rollout",
            Self::Counterfactual(_) => "counterfactual",
            Self::Plot(_) => "plot",
            Self::Replay(_) => "replay",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    #[arg(long, default_value_t = 5)]
    pub defenders: usize,
    #[arg(long, default_value_t = 5)]
    pub attackers: usize,
    /// Frames per scenario.
    #[arg(long, default_value_t = 80)]
    pub frames: usize,
    /// Position noise standard deviation in meters.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Designated attacker per defender, comma separated; identity by default.
    #[arg(long, value_delimiter = ',')]
    pub tracking: Option<Vec<usize>>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct IngestArgs {
    /// JSON-Lines tracking file.
    #[arg(long)]
    pub input: PathBuf,
    /// Fail on sequences with gaps instead of dropping them.
    #[arg(long)]
    pub strict: bool,
    /// Mirror sequences so that the offense attacks towards −x.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 20)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 60)]
    pub horizon: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AssignArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `per-sequence` or `per-timestep`.
    #[arg(long, default_value = "per-sequence")]
    pub mode: String,
    /// Add ball-relative position to the emission features.
    #[arg(long)]
    pub ball_relative: bool,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Windowed tracking file with train and val splits.
    #[arg(long)]
    pub data: PathBuf,
    /// Defender role to train; all roles when omitted.
    #[arg(long)]
    pub role: Option<usize>,
    /// Train roles on parallel threads.
    #[arg(long)]
    pub parallel_roles: bool,
    /// TOML training configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Constraint preset: vrnn, c-pos, c-pos-acc, c-pos-acc-jrk or mech.
    #[arg(long)]
    pub preset: Option<String>,
    /// Policy kind: vrnn or rnn-gauss.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(skip)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<TrainConfig>,
}

/// Role checkpoints, or `velocity` for the constant-velocity baseline.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Checkpoint files or directories of `role-*.json`; `velocity` selects
    /// the baseline.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct WindowArgs {
    /// Windowed tracking file.
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 20)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 60)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub windows: WindowArgs,
    /// Samples per window.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    /// Row label in the report table.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RolloutArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub windows: WindowArgs,
    /// Samples per window.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Window indices within the split; the first window by default.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<usize>>,
    /// Use distribution means instead of samples.
    #[arg(long)]
    pub mean: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub rollout: RolloutArgs,
    /// `one-hot` keeps only the most probable agent; `custom` uses --gate.
    #[arg(long)]
    pub mode: String,
    /// Gate vector for `custom`, one entry per agent.
    #[arg(long, value_delimiter = ',')]
    pub gate: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PlotArgs {
    /// Rollout or counterfactual run directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Window index within the rollout file.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Role whose gates are charted.
    #[arg(long, default_value_t = 0)]
    pub role: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Echoed `config.toml`.
    #[arg(long)]
    pub config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let target = output::Target { root: cli.out, run_dir: cli.run_dir };
    match commands::run(cli.command, &target) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
