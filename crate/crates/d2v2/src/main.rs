//! `d2v2` command line: pretrain, probe, ablate, report.
//!
//! Exit codes: 0 success, 2 config error, 3 data/IO error, 4 numeric fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use d2v2::config::{Precision, RunConfig};
use d2v2::error::{D2v2Error, Result};
use d2v2::harness::{
    cmd_ablate, cmd_pretrain, cmd_probe, cmd_report, format_ablation_table, precision_of_checkpoint,
    write_ablation_csv, CliOpts, Recipe,
};

#[derive(Parser)]
#[command(name = "d2v2", about = "Self-supervised pretraining with contextualized targets", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Serialized, bit-reproducible execution.
    #[arg(long)]
    strict: bool,
    /// Use only this fraction of the pretraining set.
    #[arg(long)]
    subsample_ratio: Option<f64>,
    /// Output directory (overrides config and $D2V2_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run self-supervised pretraining; writes a checkpoint and metrics CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates (checkpoint and exit; resume later).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Linear-probe a checkpoint on the labeled dataset from the config.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation recipe grid (multimask, masking, losses, alibi).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recipe: String,
    },
    /// Summarize a metrics CSV and render the loss curve.
    Report {
        /// Metrics CSV produced by pretrain.
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn opts_of(common: &Common) -> CliOpts {
    CliOpts {
        seed: common.seed,
        strict: common.strict,
        subsample_ratio: common.subsample_ratio,
        out: common.out.clone(),
        stop_after: None,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    opts_of(common).apply(&mut cfg);
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common, resume, stop_after } => {
            let cfg = load_config(&common)?;
            let mut opts = opts_of(&common);
            opts.stop_after = stop_after;
            let out = match cfg.precision {
                Precision::F32 => cmd_pretrain::<f32>(&cfg, &opts, resume.as_deref())?,
                Precision::F64 => cmd_pretrain::<f64>(&cfg, &opts, resume.as_deref())?,
            };
            println!("steps run: {}", out.steps_run);
            println!("final holdout loss: {}", out.final_eval_loss);
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics: {}", out.csv.display());
        }
        Command::Probe { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let result = match precision_of_checkpoint(&checkpoint)? {
                Precision::F32 => cmd_probe::<f32>(&checkpoint, &cfg, seed)?,
                Precision::F64 => cmd_probe::<f64>(&checkpoint, &cfg, seed)?,
            };
            println!(
                "probe accuracy: {:.4} ({} classes, {} probe params, seed {})",
                result.accuracy, result.classes, result.probe_params, result.seed
            );
        }
        Command::Ablate { common, recipe } => {
            let cfg = load_config(&common)?;
            let recipe = Recipe::parse(&recipe)?;
            let opts = opts_of(&common);
            let rows = match cfg.precision {
                Precision::F32 => cmd_ablate::<f32>(recipe, &cfg, &opts)?,
                Precision::F64 => cmd_ablate::<f64>(recipe, &cfg, &opts)?,
            };
            let out_dir = cfg.out_dir();
            std::fs::create_dir_all(&out_dir).map_err(D2v2Error::from)?;
            let csv = out_dir.join(format!("ablate_{}.csv", recipe_name(recipe)));
            write_ablation_csv(&csv, recipe, &rows)?;
            print!("{}", format_ablation_table(recipe, &rows));
            println!("table: {}", csv.display());
        }
        Command::Report { csv, out } => {
            let out_dir = out.unwrap_or_else(|| {
                csv.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            let summary = cmd_report(&csv, &out_dir)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn recipe_name(r: Recipe) -> &'static str {
    match r {
        Recipe::Multimask => "multimask",
        Recipe::Masking => "masking",
        Recipe::Losses => "losses",
        Recipe::Alibi => "alibi",
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
