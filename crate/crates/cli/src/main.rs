mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unisod::{Error, Modality, TrainMode};

#[derive(Parser)]
#[command(name = "unisod", version, about = "Salient object detection with switchable prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering shared by the commands that build a model.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Defaults to start from; a `profile` key in the config file wins
    #[arg(long, env = "UNISOD_PROFILE", default_value = "toy", value_parser = ["toy", "paper"])]
    pub profile: String,

    /// Flat `key=value` file applied over the profile defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one key after the config file; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Rgb,
    Rgbd,
    Rgbt,
}

impl From<TaskArg> for Modality {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Rgb => Modality::Rgb,
            TaskArg::Rgbd => Modality::Rgbd,
            TaskArg::Rgbt => Modality::Rgbt,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdaptMode {
    PromptTune,
    PromptConcat,
    FullFinetune,
    NoSpg,
}

impl From<AdaptMode> for TrainMode {
    fn from(m: AdaptMode) -> Self {
        match m {
            AdaptMode::PromptTune => TrainMode::PromptTune,
            AdaptMode::PromptConcat => TrainMode::PromptConcat,
            AdaptMode::FullFinetune => TrainMode::FullFinetune,
            AdaptMode::NoSpg => TrainMode::NoSpg,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnyMode {
    Pretrain,
    PromptTune,
    PromptConcat,
    FullFinetune,
    NoSpg,
}

impl From<AnyMode> for TrainMode {
    fn from(m: AnyMode) -> Self {
        match m {
            AnyMode::Pretrain => TrainMode::Pretrain,
            AnyMode::PromptTune => TrainMode::PromptTune,
            AnyMode::PromptConcat => TrainMode::PromptConcat,
            AnyMode::FullFinetune => TrainMode::FullFinetune,
            AnyMode::NoSpg => TrainMode::NoSpg,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model on an RGB dataset, updating every parameter
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root holding the RGB and GT directories (sets `data.root`)
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Random seed (sets `train.seed`)
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<output.dir>/pretrain`
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Learn task prompts on top of a frozen pre-trained checkpoint
    PromptTune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Task, named after the modality it consumes
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Pre-trained checkpoint written by `pretrain`
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
        /// What to train on top of the checkpoint
        #[arg(long, value_enum, default_value = "prompt-tune")]
        mode: AdaptMode,
        /// Dataset root (sets `data.root`)
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Random seed (sets `train.seed`)
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<output.dir>/prompt-tune-<task>`
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write one saliency PNG per input image
    Predict {
        /// Full checkpoint holding the pre-trained model
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Prompt checkpoint from `prompt-tune`; without it the plain pre-trained model runs
        #[arg(long, value_name = "FILE")]
        prompts: Option<PathBuf>,
        /// Directory of RGB images
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Directory of depth or thermal maps with the same stems, for multimodal prompts
        #[arg(long, value_name = "DIR")]
        aux: Option<PathBuf>,
        /// Output directory for the PNG maps
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score predictions against ground-truth masks
    Evaluate {
        /// Directory of predicted maps
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of ground-truth masks
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Per-image CSV to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// JSON summary; defaults to the CSV path with a `.json` extension
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
        /// Dataset name written into every row
        #[arg(long, default_value = "dataset")]
        dataset: String,
    },
    /// Report trainable and frozen parameter counts for a configuration
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training mode whose partition is reported
        #[arg(long, value_enum, default_value = "prompt-tune")]
        mode: AnyMode,
        /// Report directory; defaults to `<output.dir>/params`
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// 2 for usage or configuration problems, 3 for unreadable or inconsistent
/// data, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Data(_) | Error::Checkpoint(_) => 3,
        Error::Contract(_) | Error::Accounting(_) | Error::NonFiniteLoss { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Pretrain { cfg, data, seed, out } => commands::pretrain(&args, &cfg, data, seed, out),
        Command::PromptTune {
            cfg,
            task,
            init,
            mode,
            data,
            seed,
            out,
        } => commands::prompt_tune(&args, &cfg, task.into(), &init, mode.into(), data, seed, out),
        Command::Predict {
            checkpoint,
            prompts,
            input,
            aux,
            out,
        } => commands::predict(&args, &checkpoint, prompts.as_deref(), &input, aux.as_deref(), &out),
        Command::Evaluate {
            pred,
            gt,
            out,
            json,
            dataset,
        } => commands::evaluate(&args, &pred, &gt, &out, json, &dataset),
        Command::Params { cfg, mode, out } => commands::params(&args, &cfg, mode.into(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
