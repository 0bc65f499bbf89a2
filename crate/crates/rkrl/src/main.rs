use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rkrl::agents::{run_training, AgentKind};
use rkrl::config::{load_config_file, RunConfig};
use rkrl::env::CartPoleParams;
use rkrl::error::{Error, Result};
use rkrl::eval::{append_result, run_test_episodes, sweep, write_report};
use rkrl::nn::{load_weights, save_weights, Topology};
use rkrl::rng::point_rng;
use rkrl::selftest;

#[derive(Parser)]
#[command(
    name = "rkrl",
    version,
    about = "Robust deep Q-learning on a parameterized cart-pole"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (flat key = value); experiment defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory prepended to every relative output path
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the checkpoint path from the config
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the report path from the config
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes the checkpoint and the training-log CSV
    Train(CommonArgs),
    /// Run test episodes at one parameter setting; prints the result and
    /// appends it to the report CSV
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Pole (half-)length in meters; nominal when omitted
        #[arg(long)]
        pole_length: Option<f64>,
        /// Cart mass in kg; nominal when omitted
        #[arg(long)]
        cart_mass: Option<f64>,
        /// Number of test episodes; config value when omitted
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate the pole-length x cart-mass grid and write the report CSV
    Sweep(CommonArgs),
    /// Run the embedded numerical invariant suite
    Selftest,
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::default_for(AgentKind::DeepRok),
    };
    if let Some(dir) = &common.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.rebase_paths(dir);
    }
    if let Some(ckpt) = &common.checkpoint {
        cfg.paths.checkpoint = ckpt.clone();
    }
    if let Some(report) = &common.report {
        cfg.paths.report = report.clone();
    }
    cfg.validate()?;
    // Echo the fully-resolved configuration so logs are self-describing.
    println!("# resolved configuration\n{}", cfg.to_text());
    Ok(cfg)
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let outcome = run_training(cfg.agent, &cfg.train, &cfg.env, &cfg.ekf, cfg.seed)?;

    let topology = Topology::cartpole_default();
    save_weights(&cfg.paths.checkpoint, &topology, &outcome.weights)?;
    if let Some(filter) = &outcome.ekf {
        filter.save(&cfg.paths.ekf_checkpoint)?;
    }
    std::fs::write(&cfg.paths.train_log, outcome.log.to_csv(cfg.log_timing))
        .map_err(|e| Error::io(&cfg.paths.train_log, e))?;

    let episodes = outcome.log.records.len();
    let tail = outcome.log.records.iter().rev().take(50).collect::<Vec<_>>();
    let tail_mean = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.cumulative_reward).sum::<f64>() / tail.len() as f64
    };
    println!(
        "trained {} for {episodes} episodes; mean reward over last {} episodes: {:.1}",
        cfg.agent,
        tail.len(),
        tail_mean
    );
    println!("checkpoint: {}", cfg.paths.checkpoint.display());
    if outcome.ekf.is_some() {
        println!("ekf state: {}", cfg.paths.ekf_checkpoint.display());
    }
    println!("training log: {}", cfg.paths.train_log.display());
    Ok(())
}

fn cmd_evaluate(
    common: &CommonArgs,
    pole_length: Option<f64>,
    cart_mass: Option<f64>,
    episodes: Option<usize>,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (topology, weights) = load_weights(&cfg.paths.checkpoint)?;
    let params = CartPoleParams::with_psi(
        cart_mass.unwrap_or(cfg.env.nominal.cart_mass),
        pole_length.unwrap_or(cfg.env.nominal.pole_length),
    )?;
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let mut rng = point_rng(cfg.seed, params.pole_length, params.cart_mass);
    let result = run_test_episodes(
        &topology,
        &weights,
        &params,
        episodes,
        cfg.eval.epsilon,
        &mut rng,
    )?;
    println!(
        "pole_length={} cart_mass={} episodes={}: mean_reward={:.3} std_reward={:.3} success_rate={:.3}",
        params.pole_length,
        params.cart_mass,
        result.episodes,
        result.mean_reward,
        result.std_reward,
        result.success_rate
    );
    append_result(&result, &cfg.paths.report)?;
    println!("appended to {}", cfg.paths.report.display());
    Ok(())
}

fn cmd_sweep(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (topology, weights) = load_weights(&cfg.paths.checkpoint)?;
    let report = sweep(
        &topology,
        &weights,
        &cfg.eval.pole_lengths,
        &cfg.eval.cart_masses,
        cfg.eval.episodes,
        cfg.eval.epsilon,
        cfg.seed,
        cfg.agent,
    )?;
    write_report(&report, &cfg.paths.report)?;
    let mean_success =
        report.grid.iter().map(|r| r.success_rate).sum::<f64>() / report.grid.len() as f64;
    println!(
        "swept {} grid points ({} episodes each); mean success rate {:.3}",
        report.grid.len(),
        cfg.eval.episodes,
        mean_success
    );
    println!("report: {}", cfg.paths.report.display());
    Ok(())
}

fn cmd_selftest() -> ExitCode {
    let mut failed = 0;
    for check in selftest::run_all() {
        let status = if check.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<42} {}", check.name, check.detail);
        if !check.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        ExitCode::FAILURE
    } else {
        println!("all checks passed");
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(common) => cmd_train(common),
        Command::Evaluate {
            common,
            pole_length,
            cart_mass,
            episodes,
        } => cmd_evaluate(common, *pole_length, *cart_mass, *episodes),
        Command::Sweep(common) => cmd_sweep(common),
        Command::Selftest => return cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
