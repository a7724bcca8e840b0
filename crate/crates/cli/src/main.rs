//! `fieldsel`: generate data, train CTR models, score and select feature
//! fields, and run the bias demonstrations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fieldsel_core::baselines::{BaselineKind, DecisionBoundary};
use fieldsel_core::importance::ScoreMode;
use fieldsel_core::model::Arch;

use config::{DataSource, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(fieldsel_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(e) if e.is_data() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<fieldsel_core::Error> for CliError {
    fn from(e: fieldsel_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fieldsel", version, about = "Feature-field importance and selection for CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted synthetic dataset.
    Gen(GenArgs),
    /// Train a model and report test metrics.
    Train(RunArgs),
    /// Score every field on the validation split.
    Importance(ImportanceArgs),
    /// Select the top-K fields, retrain and compare with the full set.
    Select(SelectArgs),
    /// Sweep K and report the smallest K within delta of the full set.
    Curve(CurveArgs),
    /// Evaluate a saved model on one split.
    Eval(EvalArgs),
    /// Bias demonstrations.
    Demo(DemoArgs),
}

/// Flags shared by every run; each overrides the config file.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run config supplying defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file, or a `.fsds` snapshot written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label column of a CSV file.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Hidden widths, comma separated; empty for none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Importance regularizer weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    baseline: Option<BaselineKind>,
    /// Anchor steps for the training regularizer.
    #[arg(long)]
    steps_train: Option<usize>,
    /// Anchor steps for validation scoring.
    #[arg(long)]
    steps_val: Option<usize>,
    #[arg(long)]
    score_mode: Option<ScoreMode>,
    /// Decision-boundary logit for the projection baseline, or `empirical`.
    #[arg(long)]
    boundary: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.data = Some(DataSource::from_path(path.clone(), self.label.clone()));
        } else if let (Some(label), Some(DataSource::Csv { label: l, .. })) = (&self.label, &mut cfg.data) {
            *l = label.clone();
        }
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = &$flag {
                    $field = v.clone();
                }
            };
        }
        set!(self.seed, cfg.seed);
        set!(self.out, cfg.out);
        set!(self.arch, cfg.model.arch);
        set!(self.embed_dim, cfg.model.embed_dim);
        set!(self.hidden, cfg.model.hidden_dims);
        set!(self.epochs, cfg.train.max_epochs);
        set!(self.batch_size, cfg.train.batch_size);
        set!(self.lr, cfg.train.learning_rate);
        set!(self.patience, cfg.train.patience);
        set!(self.lambda, cfg.importance.lambda);
        set!(self.baseline, cfg.importance.baseline);
        set!(self.steps_train, cfg.importance.steps_train);
        set!(self.steps_val, cfg.importance.steps_val);
        set!(self.score_mode, cfg.importance.score_mode);
        if let Some(b) = &self.boundary {
            cfg.importance.projection.boundary = if b == "empirical" {
                DecisionBoundary::EmpiricalPrior
            } else {
                DecisionBoundary::Fixed(
                    b.parse()
                        .map_err(|_| CliError::Usage(format!("--boundary `{b}` is not a number or `empirical`")))?,
                )
            };
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 50_000)]
    rows: usize,
    #[arg(long, default_value_t = 20)]
    fields: usize,
    /// Planted field indices, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [0usize, 1, 2, 3, 4, 5])]
    planted: Vec<usize>,
    /// Categories per field.
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 0.3)]
    rate: f64,
    /// Interaction pairs of planted fields, e.g. `0:1,2:3`.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
    format: DataFormat,
    #[arg(long, default_value = "fieldsel-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataFormat {
    Csv,
    Fsds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Aggregated,
    Exact,
    Snip,
    Shark,
    Sfs,
    Pfi,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = Method::Aggregated)]
    method: Method,
    /// Score this saved model instead of training a surrogate.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of fields to keep.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// K values, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    /// Largest tolerated AUC drop against the full set.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DemoKind {
    Approx,
    Baseline,
    Layer,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(value_enum)]
    kind: DemoKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fieldsel-out")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Importance(a) => commands::importance(&a.run.resolve()?, a.method, a.model.as_deref()),
        Command::Select(a) => {
            let mut cfg = a.run.resolve()?;
            if a.k.is_some() {
                cfg.k = a.k;
            }
            commands::select(&cfg)
        }
        Command::Curve(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(ks) = a.k_list {
                cfg.k_list = ks;
            }
            if let Some(d) = a.delta {
                cfg.delta = d;
            }
            cfg.validate()?;
            commands::curve(&cfg)
        }
        Command::Eval(a) => commands::eval(&a.run.resolve()?, &a.model, a.split),
        Command::Demo(a) => commands::demo(a.kind, a.seed, &a.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
