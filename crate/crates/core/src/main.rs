use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlit_curate::pipeline::study::DEFAULT_SWEEP_FRACTIONS;
use vlit_curate::pipeline::{
    run_pipeline_with, run_stage, sweep_selection_fraction, PipelineConfig, PipelineOptions, Stage,
};

const EXIT_USAGE: u8 = 1;
const EXIT_STAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "vlit-curate", version, about = "Image-relevance curation of vision-language instruction data")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Selection fraction override; repeat for `sweep`.
    #[arg(long, global = true)]
    fraction: Vec<f64>,
    /// Disable the cross-entropy phase.
    #[arg(long, global = true)]
    no_crm: bool,
    /// Disable the contrastive phase.
    #[arg(long, global = true)]
    no_clm: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Toy world, warm-started generator and the initial samples.
    GenerateInitial,
    /// Length bounds and duplicate removal.
    Filter,
    /// Image-relevance score of every kept sample.
    Score,
    /// Per-image positive and negative pseudo-labels.
    Partition,
    /// Cross-entropy retraining on the top-scoring fraction.
    TrainCrm,
    /// Contrastive retraining on the pseudo-labels.
    TrainClm,
    /// Regenerate and score the final data.
    GenerateFinal,
    /// Every stage in order, then the report.
    Pipeline {
        /// Also train and evaluate the baseline / CRM-only / CLM-only /
        /// CRM+CLM grid.
        #[arg(long)]
        ablation_grid: bool,
    },
    /// CRM-only retraining at each `--fraction` (default 0.05 0.10 0.20 0.40).
    Sweep,
    /// Summary, metrics, loss curves and histogram.
    Report,
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let mut cfg = match &cli.config {
        Some(p) => match PipelineConfig::load(p) {
            Ok(c) => c,
            Err(e) => return usage(e),
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.no_crm {
        cfg.enable_crm = false;
    }
    if cli.no_clm {
        cfg.enable_clm = false;
    }
    let is_sweep = matches!(cli.command, Command::Sweep);
    match (is_sweep, cli.fraction.as_slice()) {
        (false, [f]) => cfg.selection_fraction = *f,
        (false, [_, _, ..]) => return usage("--fraction may be repeated only for sweep"),
        _ => {}
    }
    if let Err(e) = cfg.validate() {
        return usage(e);
    }

    let result = match cli.command {
        Command::Pipeline { ablation_grid } => {
            let options = PipelineOptions {
                ablation_grid,
                sweep_fractions: None,
            };
            run_pipeline_with(&cfg, &cli.workdir, &options).map(|r| {
                println!(
                    "pre-training mean i2c {:.6}, post-training mean i2c {:.6}",
                    r.pre_training.mean, r.post_training.mean
                );
            })
        }
        Command::Sweep => {
            let fractions = if cli.fraction.is_empty() {
                DEFAULT_SWEEP_FRACTIONS.to_vec()
            } else {
                cli.fraction.clone()
            };
            if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return usage(format!("fraction {bad} not in (0, 1]"));
            }
            sweep_selection_fraction(&cfg, &cli.workdir, &fractions).map(|(rows, _)| {
                println!("fraction,selected,post_mean_i2c");
                for r in rows {
                    println!("{},{},{:.6}", r.fraction, r.selected, r.post_mean_i2c);
                }
            })
        }
        other => {
            let stage = match other {
                Command::GenerateInitial => Stage::GenerateInitial,
                Command::Filter => Stage::Filter,
                Command::Score => Stage::Score,
                Command::Partition => Stage::Partition,
                Command::TrainCrm => Stage::TrainCrm,
                Command::TrainClm => Stage::TrainClm,
                Command::GenerateFinal => Stage::GenerateFinal,
                Command::Report => Stage::Report,
                Command::Pipeline { .. } | Command::Sweep => unreachable!("handled above"),
            };
            run_stage(stage, &cfg, &cli.workdir).map(|e| println!("{}: {}", e.stage, e.status))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
