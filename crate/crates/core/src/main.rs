use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itilt::checkpoint::{load_checkpoint, save_checkpoint};
use itilt::config::RunConfig;
use itilt::diffusion::ddim_sample;
use itilt::experiment::{
    check_compatible, evaluate_against, evaluate_base, format_summary, oracle_at, run_dir, run_experiment, run_tilting,
    train_base_model,
};
use itilt::metrics::{write_metrics, write_samples};
use itilt::model::Denoiser;
use itilt::schedules::EtaSchedule;
use itilt::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "itilt",
    version,
    about = "Reward fine-tuning of diffusion models by iterative tilting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on samples of the base mixture.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Run iterative tilting from a base checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_tilts: Option<usize>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Score a checkpoint against the exact law after `tilt` of `n_tilts` tilts (base by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        tilt: usize,
        #[arg(long, default_value_t = 1)]
        n_tilts: usize,
    },
    /// Base training plus tilting for every configured N.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Reuse a trained base model instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run a single N instead of the configured list.
        #[arg(long)]
        n_tilts: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn load_model(path: &Path, config: &RunConfig) -> Result<itilt::model::ScoreModel> {
    let model = load_checkpoint(path).map_err(|e| e.in_phase(format!("reading {}", path.display())))?;
    check_compatible(&model, config)?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBase { common } => {
            let config = load_config(&common)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let (model, report) = train_base_model(&config).map_err(|e| e.in_phase("train-base"))?;
            let path = config.out_dir.join("base.ckpt");
            save_checkpoint(&model, &path)?;
            let metrics = evaluate_base(&model, &config).map_err(|e| e.in_phase("eval-base"))?;
            write_metrics(&config.out_dir.join("base_metrics.csv"), std::slice::from_ref(&metrics))?;
            println!(
                "trained {} epochs (best {}, validation loss {:.5}); nll {:.4}, mean_mse {:.3e}, rmse {:.4}; wrote {}",
                report.epochs_run(),
                report.best_epoch + 1,
                report.best_validation_loss(),
                metrics.nll,
                metrics.mean_mse,
                metrics.rmse,
                path.display()
            );
        }
        Command::Finetune {
            common,
            checkpoint,
            n_tilts,
        } => {
            let mut config = load_config(&common)?;
            if let Some(n) = n_tilts {
                config.experiment.n_tilts = vec![n];
                config.validate()?;
            }
            let base = load_model(&checkpoint, &config).map_err(|e| e.in_phase("load-base"))?;
            let n = config.experiment.n_tilts[0];
            let dir = run_dir(&config.out_dir, n);
            let run = run_tilting(&base, &config, &config.reward, n, Some(&dir))
                .map_err(|e| e.in_phase(format!("tilting N={n}")))?;
            print!("{}", format_summary(&[run.summary]));
        }
        Command::Sample {
            common,
            checkpoint,
            count,
        } => {
            let config = load_config(&common)?;
            let model = load_model(&checkpoint, &config)?;
            let grid = config.schedule.grid()?;
            let etas = EtaSchedule::new(model.schedule(), &grid, config.schedule.eta_hat)?;
            let samples = ddim_sample(&model, &grid, &etas, count, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
            std::fs::create_dir_all(&config.out_dir)?;
            let path = config.out_dir.join("samples.csv");
            write_samples(&path, samples.view())?;
            println!("wrote {count} samples to {}", path.display());
        }
        Command::Eval {
            common,
            checkpoint,
            tilt,
            n_tilts,
        } => {
            let config = load_config(&common)?;
            if n_tilts == 0 || tilt > n_tilts {
                return Err(Error::Config(format!(
                    "need 0 <= tilt <= n_tilts and n_tilts >= 1, got {tilt}/{n_tilts}"
                )));
            }
            let model = load_model(&checkpoint, &config)?;
            let oracle = oracle_at(&config, tilt, n_tilts)?;
            let r = evaluate_against(&model, &config, &oracle, tilt)?;
            println!("tilt_index,rmse,nll,mean_mse");
            println!("{},{},{},{}", r.tilt_index, r.rmse, r.nll, r.mean_mse);
        }
        Command::Experiment {
            common,
            checkpoint,
            n_tilts,
        } => {
            let mut config = load_config(&common)?;
            if let Some(n) = n_tilts {
                config.experiment.n_tilts = vec![n];
            }
            let out = run_experiment(&config, checkpoint.as_deref())?;
            println!(
                "base: nll {:.4}, mean_mse {:.3e}, rmse {:.4}",
                out.base_metrics.nll, out.base_metrics.mean_mse, out.base_metrics.rmse
            );
            print!("{}", format_summary(&out.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string();
            let lines: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error: {}", lines.join(" "));
            ExitCode::FAILURE
        }
    }
}
