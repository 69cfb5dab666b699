use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ismaf::training::{
    composite_grad_check, evaluate_with, generate_synthetic, load_model, parse_range, save_model,
    sweep_lambda, sweep_table, train, DatasetBundle, LossTerm, Split, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "ismaf",
    version,
    about = "Multimodal rumor detection: training, evaluation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as posts/comments/users jsonl files.
    Synth {
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 5.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.5)]
        graph_noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and save the model with the best validation accuracy.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the validation report (with loss history) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a saved model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Replace the social representation by zeros.
        #[arg(long)]
        zero_social: bool,
    },
    /// Finite-difference check of every loss term on a small synthetic batch.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train once per value of one loss weight and report test metrics.
    Sweep {
        #[arg(long)]
        lambda_index: usize,
        #[arg(long)]
        range: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Epoch budget per value; overrides the configuration.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_data(dir: &Path) -> anyhow::Result<DatasetBundle> {
    DatasetBundle::load(dir).with_context(|| format!("reading corpus from {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            n,
            d,
            separation,
            graph_noise,
            seed,
            out,
        } => {
            let data = generate_synthetic(n, d, separation, graph_noise, seed)?;
            data.save(&out)
                .with_context(|| format!("writing corpus to {}", out.display()))?;
            println!(
                "wrote {} posts, {} comments, {} users to {}",
                data.posts.len(),
                data.comments.len(),
                data.users.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            report,
        } => {
            let config = load_config(config.as_deref())?;
            let data = load_data(&data)?;
            let outcome = train(&config, &data)?;
            save_model(&outcome.model, &out)
                .with_context(|| format!("writing model {}", out.display()))?;
            let text = outcome.report.to_text();
            if let Some(path) = report {
                std::fs::write(&path, &text)
                    .with_context(|| format!("writing report {}", path.display()))?;
            }
            print!("{text}");
            if let Some(div) = outcome.divergence {
                bail!(
                    "training diverged (non-finite loss) at epoch {} step {}; last finite checkpoint saved to {}",
                    div.epoch,
                    div.step,
                    out.display()
                );
            }
        }
        Command::Eval {
            model,
            data,
            split,
            report,
            zero_social,
        } => {
            let model =
                load_model(&model).with_context(|| format!("reading model {}", model.display()))?;
            let data = load_data(&data)?;
            let metrics = evaluate_with(&model, &data, split, zero_social)?;
            let text = metrics.to_text();
            if let Some(path) = report {
                std::fs::write(&path, &text)
                    .with_context(|| format!("writing report {}", path.display()))?;
            }
            print!("{text}");
        }
        Command::Gradcheck { seed, tolerance } => {
            let start = Instant::now();
            let mut worst = 0.0f64;
            for term in LossTerm::ALL {
                let c = composite_grad_check(seed, term)?;
                let r = &c.report;
                println!(
                    "{term}\tmax_rel_err={:.3e}\tentries={}\tworst={}[{}]\trejected_draws={}\tkink_margin={:.2e}",
                    r.max_relative_error, r.entries_checked, r.worst_param, r.worst_index, c.rejected_draws, c.kink_margin
                );
                worst = worst.max(r.max_relative_error);
            }
            println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
            if worst >= tolerance {
                bail!("gradient check failed: max relative error {worst:.3e} >= {tolerance:e}");
            }
        }
        Command::Sweep {
            lambda_index,
            range,
            config,
            data,
            epochs,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            let data = load_data(&data)?;
            let values = parse_range(&range)?;
            let rows = sweep_lambda(&config, &data, lambda_index, &values)?;
            print!("{}", sweep_table(lambda_index, &rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
