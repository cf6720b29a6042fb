//! `dae` — train, sweep, evaluate, and plot the diffusion-encoder
//! autoencoder and its VAE baseline.
//!
//! Every subcommand reads one TOML config (see the repository README for the
//! key reference). Exit codes: 0 on success, 1 when a run halts with the
//! diverged flag, 2 on usage or configuration errors.

use clap::{Parser, Subcommand};
use dae_core::harness::{
    csvio, rd_sweep, svg, Checkpoint, DatasetKind, ModelKind, RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the 1-D toy generative process (model kind from the config).
    TrainToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the diffusion autoencoder on the configured dataset.
    TrainDae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the Gaussian-encoder VAE baseline on the configured dataset.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rate-distortion sweep over the configured temperature grid.
    RdSweep {
        #[arg(long)]
        config: PathBuf,
        /// Sweep only one model kind instead of both.
        #[arg(long, value_parser = ["dae", "vae", "both"], default_value = "both")]
        model: String,
    },
    /// Re-evaluate a saved checkpoint and verify the recorded losses.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export E-step equilibrium latents with labels to CSV.
    ExportLatents {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the rate-distortion CSV as an SVG figure.
    Plot {
        #[arg(long)]
        config: PathBuf,
    },
}

enum CmdError {
    Usage(String),
    Run(String),
    Diverged,
}

impl<E: std::error::Error> From<E> for CmdError {
    fn from(e: E) -> Self {
        CmdError::Run(e.to_string())
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, CmdError> {
    RunConfig::load(path).map_err(|e| CmdError::Usage(e.to_string()))
}

fn train(path: &PathBuf, force_kind: Option<ModelKind>, force_toy: bool) -> Result<(), CmdError> {
    let mut cfg = load_config(path)?;
    if let Some(kind) = force_kind {
        cfg.model.kind = kind;
    }
    if force_toy && cfg.dataset.kind != DatasetKind::Toy {
        return Err(CmdError::Usage(
            "train-toy requires dataset.kind = \"toy\" in the config".into(),
        ));
    }
    let outcome = dae_core::harness::run_training(&cfg)?;
    std::fs::create_dir_all(&cfg.run.out_dir).map_err(CmdError::from)?;
    csvio::write_text(&cfg.metrics_path(), &csvio::metrics_csv(outcome.state.loss_history()))
        .map_err(CmdError::from)?;
    outcome.checkpoint.save(&cfg.checkpoint_path())?;
    match outcome.final_eval {
        Some(fe) => {
            println!(
                "trained {} cycles: encoder loss {:.6}, distortion {:.6}, rate {:.6}",
                outcome.state.loss_history().len(),
                fe.encoder_loss,
                fe.distortion,
                fe.rate
            );
            println!("wrote {} and {}", cfg.metrics_path().display(), cfg.checkpoint_path().display());
            Ok(())
        }
        None => {
            eprintln!(
                "run diverged at cycle {}; last good checkpoint written to {}",
                outcome.state.loss_history().len(),
                cfg.checkpoint_path().display()
            );
            Err(CmdError::Diverged)
        }
    }
}

fn cmd_rd_sweep(path: &PathBuf, model: &str) -> Result<(), CmdError> {
    let cfg = load_config(path)?;
    let gammas = cfg.run.rd_gammas.clone();
    let mut points = Vec::new();
    if model == "dae" || model == "both" {
        points.extend(rd_sweep(&cfg, &gammas, ModelKind::Dae)?);
    }
    if model == "vae" || model == "both" {
        points.extend(rd_sweep(&cfg, &gammas, ModelKind::Vae)?);
    }
    std::fs::create_dir_all(&cfg.run.out_dir).map_err(CmdError::from)?;
    csvio::write_text(&cfg.rd_path(), &csvio::rd_csv(&points)).map_err(CmdError::from)?;
    for p in &points {
        println!(
            "{} gamma={} rate={:.6} distortion={:.6}{}",
            p.model_tag,
            p.gamma,
            p.rate,
            p.distortion,
            if p.diverged { " [diverged]" } else { "" }
        );
    }
    println!("wrote {}", cfg.rd_path().display());
    if points.iter().any(|p| p.diverged) {
        Err(CmdError::Diverged)
    } else {
        Ok(())
    }
}

fn cmd_eval(path: &PathBuf) -> Result<(), CmdError> {
    let cfg = load_config(path)?;
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let data = dae_core::harness::prepare_data(&ck.config)?;
    let state = dae_core::harness::restore(&ck, &data)?;
    let fe = dae_core::harness::evaluate(&state, &ck.config, &data)?;
    println!(
        "eval: encoder loss {:.9}, distortion {:.9}, rate {:.9}",
        fe.encoder_loss, fe.distortion, fe.rate
    );
    match ck.final_eval {
        Some(rec) => {
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
            if close(fe.encoder_loss, rec.encoder_loss)
                && close(fe.distortion, rec.distortion)
                && close(fe.rate, rec.rate)
            {
                println!("matches the losses recorded at save time");
                Ok(())
            } else {
                Err(CmdError::Run(format!(
                    "recorded losses differ: stored ({:.9}, {:.9}, {:.9})",
                    rec.encoder_loss, rec.distortion, rec.rate
                )))
            }
        }
        None => {
            println!("checkpoint carries no final evaluation (diverged run)");
            Ok(())
        }
    }
}

fn cmd_export_latents(path: &PathBuf) -> Result<(), CmdError> {
    let cfg = load_config(path)?;
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let data = dae_core::harness::prepare_data(&ck.config)?;
    let state = dae_core::harness::restore(&ck, &data)?;
    let labels = data
        .eval_labels
        .clone()
        .ok_or_else(|| CmdError::Usage("latent export needs a labeled dataset".into()))?;
    let rows = dae_core::harness::export_latents(
        &state,
        &data.eval,
        &labels,
        cfg.run.export_per_class,
        cfg.run.heun_steps_export,
        cfg.seed,
    )?;
    let dim = rows.first().map(|(z, _)| z.len()).unwrap_or(0);
    std::fs::create_dir_all(&cfg.run.out_dir).map_err(CmdError::from)?;
    csvio::write_text(&cfg.latents_path(), &csvio::latents_csv(&rows, dim))
        .map_err(CmdError::from)?;
    println!("wrote {} rows to {}", rows.len(), cfg.latents_path().display());
    Ok(())
}

fn cmd_plot(path: &PathBuf) -> Result<(), CmdError> {
    let cfg = load_config(path)?;
    let text = std::fs::read_to_string(cfg.rd_path())
        .map_err(|e| CmdError::Usage(format!("cannot read {}: {e}", cfg.rd_path().display())))?;
    let points = csvio::parse_rd_csv(&text);
    let svg_text = svg::rd_plot_svg(&points);
    let out = cfg.run.out_dir.join("rd.svg");
    csvio::write_text(&out, &svg_text).map_err(CmdError::from)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainToy { config } => train(config, None, true),
        Command::TrainDae { config } => train(config, Some(ModelKind::Dae), false),
        Command::TrainVae { config } => train(config, Some(ModelKind::Vae), false),
        Command::RdSweep { config, model } => cmd_rd_sweep(config, model),
        Command::Eval { config } => cmd_eval(config),
        Command::ExportLatents { config } => cmd_export_latents(config),
        Command::Plot { config } => cmd_plot(config),
    };
    match result {
        Ok(()) => ExitCode::from(0),
        Err(CmdError::Diverged) => ExitCode::from(1),
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
