use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mindcanvas::pipeline::{self, RunConfig};

/// EEG-conditioned image reconstruction experiments: dataset preparation,
/// decoder and ControlNet training, guided generation, boosting, metric
/// evaluation, electrode ablation, and preference-study statistics.
#[derive(Parser)]
#[command(name = "mindcanvas", version, about)]
struct Cli {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Montage name (repeatable); overrides the config list.
    #[arg(long = "montage", global = true)]
    montages: Vec<String>,

    /// Guidance scale (repeatable); overrides the config list.
    #[arg(long = "gamma", global = true)]
    gammas: Vec<f64>,

    /// Boosting noise strength in (0, 1].
    #[arg(long, global = true)]
    boost_strength: Option<f64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Dataset directory override.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate the dataset.
    Prepare,
    /// Train one EEG class decoder per montage.
    TrainDecoder,
    /// Pretrain the shared diffusion base, then one adapter per montage.
    TrainControlnet,
    /// Reconstruct images for every test trial across the gamma grid.
    Generate,
    /// Refine generated images through the describer + img2img stage.
    Boost,
    /// Emit metric, accuracy, and gain reports.
    Evaluate,
    /// Electrode knockout and region-removal studies with topomaps.
    Ablate,
    /// Aggregate 2AFC preference CSV into a JSON summary.
    StudyStats {
        /// Preference CSV (columns: trial_id,channels,chose_boosted,confidence).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output JSON path (relative paths land in the output directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, pipeline::PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if !cli.montages.is_empty() {
        cfg.montages = cli.montages.clone();
    }
    if !cli.gammas.is_empty() {
        cfg.gammas = cli.gammas.clone();
    }
    if let Some(s) = cli.boost_strength {
        cfg.boost.strength = s;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(ds) = &cli.dataset {
        cfg.dataset = ds.clone();
    }
    if let Command::StudyStats { input, output } = &cli.command {
        if let Some(i) = input {
            cfg.study.input_csv = i.clone();
        }
        if let Some(o) = output {
            cfg.study.output_json = o.clone();
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Prepare => pipeline::cmd_prepare(&cfg),
        Command::TrainDecoder => pipeline::cmd_train_decoder(&cfg),
        Command::TrainControlnet => pipeline::cmd_train_controlnet(&cfg),
        Command::Generate => pipeline::cmd_generate(&cfg),
        Command::Boost => pipeline::cmd_boost(&cfg),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg),
        Command::Ablate => pipeline::cmd_ablate(&cfg),
        Command::StudyStats { .. } => pipeline::cmd_study_stats(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
