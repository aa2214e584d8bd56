//! Command-line front end: argument parsing, effective configuration and
//! the per-command drivers.

mod commands;
mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hydravit::evaluation::TieMode;
use hydravit::experiment::ExperimentConfig;

pub use commands::run;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "HYDRAVIT_OUTPUT_ROOT";

/// Subdirectories created under every output directory.
pub const OUTPUT_LAYOUT: [&str; 5] = ["checkpoints", "metrics", "reports", "saliency", "plots"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hydravit::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(hydravit::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "hydravit",
    version,
    about = "Multi-label image classifier: training, evaluation and ablations"
)]
struct Cli {
    /// Output directory; defaults to <output root>/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root used when --out is absent.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    /// Overrides `train.seed`, or the generator seed for `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: CommandArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (JSON); the built-in synthetic config when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable. Keys are dotted paths or unique field names.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TieArg {
    Literal,
    Conventional,
}

impl From<TieArg> for TieMode {
    fn from(t: TieArg) -> Self {
        match t {
            TieArg::Literal => TieMode::Literal,
            TieArg::Conventional => TieMode::Conventional,
        }
    }
}

#[derive(Subcommand, Debug)]
enum CommandArgs {
    /// Train a model and evaluate it on the held-out split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class and macro AUC from score and label CSVs, or from a checkpoint.
    Eval {
        /// Wide CSV: sample_id then one score column per class.
        #[arg(long, requires = "labels", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Wide CSV: sample_id then one 0/1 column per class.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Checkpoint scored on the test split of the configured data.
        #[arg(long, required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "literal")]
        tie_mode: TieArg,
    },
    /// Score images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files; PNG or JPEG.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also export a saliency map for each image's top-ranked class.
        #[arg(long)]
        saliency: bool,
    },
    /// Generate and export a synthetic labelled image set.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0.3)]
        prevalence: f64,
        #[arg(long, default_value_t = 16)]
        extent: usize,
        /// Co-occurrence boost `A,B,FACTOR` between classes A and B.
        #[arg(long, value_name = "A,B,FACTOR")]
        boost: Option<String>,
    },
    /// Train and evaluate a grid of model variants on one split.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variant names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no_mbo,no_ce,no_aggregate,no_init"
        )]
        variants: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Train {
        resume: Option<PathBuf>,
    },
    Eval {
        pred: Option<PathBuf>,
        labels: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        tie_mode: TieMode,
    },
    Predict {
        checkpoint: PathBuf,
        images: Vec<PathBuf>,
        top_k: usize,
        threshold: f64,
        saliency: bool,
    },
    Synth {
        classes: usize,
        samples: usize,
        prevalence: f64,
        extent: usize,
        boost: Option<(usize, usize, f64)>,
    },
    Ablate {
        variants: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Synth { .. } => "synth",
            Command::Ablate { .. } => "ablate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub verbosity: u8,
}

fn parse_boost(text: &str) -> CliResult<(usize, usize, f64)> {
    let bad = || CliError::Usage(format!("--boost expects A,B,FACTOR, got `{text}`"));
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

/// Parses a full argument vector, program name first. Help and version
/// requests come back as `clap::Error`s of the matching kind.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let (command, cfg) = match cli.command {
        CommandArgs::Train { config, resume } => (Command::Train { resume }, config),
        CommandArgs::Eval {
            pred,
            labels,
            checkpoint,
            config,
            tie_mode,
        } => (
            Command::Eval {
                pred,
                labels,
                checkpoint,
                tie_mode: tie_mode.into(),
            },
            config,
        ),
        CommandArgs::Predict {
            checkpoint,
            images,
            top_k,
            threshold,
            saliency,
        } => (
            Command::Predict {
                checkpoint,
                images,
                top_k,
                threshold,
                saliency,
            },
            ConfigArgs::default(),
        ),
        CommandArgs::Synth {
            classes,
            samples,
            prevalence,
            extent,
            boost,
        } => {
            let boost = match boost {
                Some(b) => Some(
                    parse_boost(&b)
                        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n")))?,
                ),
                None => None,
            };
            (
                Command::Synth {
                    classes,
                    samples,
                    prevalence,
                    extent,
                    boost,
                },
                ConfigArgs::default(),
            )
        }
        CommandArgs::Ablate { config, variants } => (Command::Ablate { variants }, config),
    };
    let output_dir = cli.out.unwrap_or_else(|| cli.output_root.join(command.name()));
    Ok(RunConfig {
        command,
        config_path: cfg.config,
        output_dir,
        seed: cli.seed,
        overrides: cfg.overrides,
        verbosity: cli.verbose,
    })
}

impl RunConfig {
    /// The file (or built-in) configuration with `--seed` and `--set`
    /// applied, validated.
    pub fn effective_config(&self) -> CliResult<ExperimentConfig> {
        let seed = self.seed.unwrap_or(0);
        let base = match &self.config_path {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::synthetic_default(seed),
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.insert(0, format!("train.seed={s}"));
        }
        let config = base.with_overrides(&overrides)?;
        config.validate()?;
        Ok(config)
    }

    /// Creates the output directory and its standard subdirectories.
    pub fn prepare_output(&self) -> CliResult<&Path> {
        for sub in OUTPUT_LAYOUT {
            std::fs::create_dir_all(self.output_dir.join(sub))?;
        }
        Ok(&self.output_dir)
    }
}
