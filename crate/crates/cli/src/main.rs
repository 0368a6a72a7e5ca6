use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimic_cli::commands;
use mimic_cli::config::{self, Ablation};
use mimic_cli::CliError;
use mimic_core::bridge::BRIDGE_ADDR_ENV;

/// Video-imitation laboratory. Any configuration field can also be set with
/// `--dotted.name value`, e.g. `--trainer.total_steps 1000`.
#[derive(Parser)]
#[command(name = "mimic", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Drop the mask IoU term.
    #[arg(long, global = true)]
    no_iou: bool,
    /// Drop the video similarity term.
    #[arg(long, global = true)]
    no_video: bool,
    /// Drop the regularization term.
    #[arg(long, global = true)]
    no_reg: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the scripted expert to a video directory.
    GenExpert {
        /// Defaults to <output>/expert.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy into the output directory.
    Train {
        /// Continue the run saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        /// Defaults to <output>/policy.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the configured eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Defaults to <output>/rollout.
        #[arg(long)]
        video_out: Option<PathBuf>,
    },
    /// Score a stored rollout video against a reference video.
    Score {
        rollout: PathBuf,
        reference: PathBuf,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted reward-term magnitudes near reset under random commands.
    Calibrate {
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// Frames scored per episode.
        #[arg(long, default_value_t = 25)]
        frames: usize,
    },
    /// Finite-difference checks of the learner's gradients.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn run() -> Result<(), CliError> {
    let (overrides, rest) = config::extract_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(CliError::Config(e.to_string())),
        Err(e) => {
            print!("{e}");
            return Ok(());
        }
    };
    let ablation = Ablation { no_iou: cli.no_iou, no_video: cli.no_video, no_reg: cli.no_reg };
    let cfg = config::resolve(cli.config.as_deref(), &overrides, std::env::var(BRIDGE_ADDR_ENV).ok(), ablation)?;
    match cli.command {
        Command::GenExpert { out } => {
            let out = out.unwrap_or_else(|| cfg.output.join("expert"));
            let report = commands::gen_expert(&cfg, &out)?;
            println!("{}", report.prompt);
            log::info!("{} frames, displacement {:.3} m, written to {}", report.frames, report.displacement, out.display());
        }
        Command::Train { resume } => {
            let report = commands::train(&cfg, resume)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Eval { checkpoint, episodes, video_out } => {
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.output.join(commands::POLICY_FILE));
            let video_out = video_out.unwrap_or_else(|| cfg.output.join("rollout"));
            let summary =
                commands::eval(&cfg, &checkpoint, episodes.unwrap_or(cfg.eval_episodes), Some(&video_out))?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("report serializes"));
        }
        Command::Score { rollout, reference, out } => {
            let csv = commands::score(&cfg, &rollout, &reference)?;
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?,
                None => print!("{csv}"),
            }
        }
        Command::Calibrate { episodes, frames } => {
            let report = commands::calibrate(&cfg, episodes, frames)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::GradCheck { seeds, eps, tol } => {
            let mut failed = 0;
            for (seed, reports) in commands::grad_check(seeds, eps, tol) {
                for (name, r) in ["actor", "critic", "temperature"].iter().zip(&reports) {
                    println!(
                        "seed {seed:>3} {name:<11} max rel {:.3e}  max abs {:.3e}  {}",
                        r.max_rel_error,
                        r.max_abs_error,
                        if r.passed { "ok" } else { "FAIL" }
                    );
                    failed += usize::from(!r.passed);
                }
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
