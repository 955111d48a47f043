use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drivegen::config::{SampleMode, Variant};
use drivegen::eval::MetricMode;
use drivegen_cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_plot, cmd_sample, cmd_train, Common, ConfigError, Planner, Split,
};

/// Generative trajectory planning on synthetic driving scenes.
#[derive(Parser)]
#[command(name = "drivegen", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (for gen-data: seed of the first training scene).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Start from the full-size preset instead of the desk-scale defaults.
    #[arg(long, global = true)]
    paper_parity: bool,
    /// Model variant for training and ablations.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Latent inference mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    Full,
    NoEgoToAgent,
    NoTpm,
    NoLftg,
    Neither,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoEgoToAgent => Variant::NoEgoToAgent,
            VariantArg::NoTpm => Variant::NoTpm,
            VariantArg::NoLftg => Variant::NoLftg,
            VariantArg::Neither => Variant::Neither,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mean,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MetricModeArg {
    AtTimestep,
    FrameAveraged,
}

impl From<MetricModeArg> for MetricMode {
    fn from(m: MetricModeArg) -> Self {
        match m {
            MetricModeArg::AtTimestep => MetricMode::AtTimestep,
            MetricModeArg::FrameAveraged => MetricMode::FrameAveraged,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PlannerArg {
    Model,
    GroundTruth,
    ConstantVelocity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON Lines scene dataset.
    GenData {
        /// Which split of the configured data layout to generate.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Number of scenes (defaults to the configured split size).
        #[arg(long)]
        count: Option<usize>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints and the epoch log.
    Train {
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print one line per epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Score plans on a dataset and write a metrics report.
    Eval {
        /// Trained checkpoint (required for the model planner).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// What produces the plans.
        #[arg(long, value_enum, default_value = "model")]
        planner: PlannerArg,
        /// Horizon reduction.
        #[arg(long, value_enum, default_value = "at_timestep")]
        metric_mode: MetricModeArg,
        /// Metrics JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw several futures for every instance of one scene.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene id within the dataset.
        #[arg(long)]
        scene_id: u64,
        /// Number of futures.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one scene, optionally with a plan and predictions, as SVG.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene_id: u64,
        /// Overlay the plan and predictions of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score several variants under several seeds.
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// Variants to compare (comma separated).
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full,neither")]
        variants: Vec<VariantArg>,
        /// Seeds per variant (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "at_timestep")]
        metric_mode: MetricModeArg,
        /// Output directory for `ablation.json` and `ablation.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let common = Common {
        config: g.config,
        seed: g.seed,
        paper_parity: g.paper_parity,
        variant: g.variant.map(Into::into),
        mode: g.mode.map(|m| match m {
            ModeArg::Mean => SampleMode::Mean,
            ModeArg::Sample => SampleMode::Sample,
        }),
    };
    match cli.command {
        Command::GenData { split, count, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let n = cmd_gen_data(&common, split, count, &out)?;
            eprintln!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            data,
            out,
            resume,
            verbose,
        } => {
            let state = cmd_train(&common, &data, &out, resume.as_deref(), verbose)?;
            eprintln!(
                "trained {} epochs ({} steps); checkpoint in {}",
                state.epoch,
                state.step,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            planner,
            metric_mode,
            out,
        } => {
            let planner = match planner {
                PlannerArg::Model => Planner::Model,
                PlannerArg::GroundTruth => Planner::GroundTruth,
                PlannerArg::ConstantVelocity => Planner::ConstantVelocity,
            };
            cmd_eval(
                &common,
                planner,
                checkpoint.as_deref(),
                &data,
                metric_mode.into(),
                out.as_deref(),
            )?;
        }
        Command::Sample {
            checkpoint,
            data,
            scene_id,
            n,
            out,
        } => {
            cmd_sample(&common, &checkpoint, &data, scene_id, n, out.as_deref())?;
        }
        Command::Plot {
            data,
            scene_id,
            checkpoint,
            out,
        } => cmd_plot(&common, &data, scene_id, checkpoint.as_deref(), &out)?,
        Command::Ablate {
            train_data,
            test_data,
            variants,
            seeds,
            metric_mode,
            out,
        } => {
            let variants: Vec<Variant> = variants.into_iter().map(Into::into).collect();
            cmd_ablate(
                &common,
                &train_data,
                &test_data,
                &variants,
                &seeds,
                metric_mode.into(),
                &out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
