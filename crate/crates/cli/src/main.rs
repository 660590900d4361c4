//! `budaseg` command-line runner.
//!
//! Exit codes: 0 success, 1 failed computation (e.g. divergence), 2 I/O or
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use budaseg::commands;
use budaseg::config::RunConfig;
use budaseg::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "budaseg", version, about = "Uncertainty-guided self-training for domain-adaptive segmentation")]
struct Cli {
    /// JSON run configuration; missing keys take defaults, unknown keys are fatal.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain benchmark as PNGs plus a manifest.
    GenData,
    /// Supervised pretraining on the labelled source split.
    Pretrain,
    /// Iterative self-training on the unlabelled target split.
    Adapt,
    /// Evaluate a checkpoint on the held-out target split.
    Eval {
        /// Defaults to the final adapted checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time optimisation steps of buda against mc-dropout.
    Bench,
    /// Compare buda and plain self-training over several seeds.
    Ablate,
}

fn resolve_config(cli: &Cli) -> budaseg::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn run(cli: &Cli) -> budaseg::Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::GenData => {
            let m = commands::gen_data(&cfg)?;
            println!("wrote {} patches to {}", m.entries.len(), cfg.paths.data().display());
        }
        Command::Pretrain => {
            let r = commands::pretrain(&cfg)?;
            println!("epoch losses: {:?}", r.epoch_losses);
            println!("final source dice loss {:.4} (ready: {})", r.final_dice_loss, r.ready);
            if !r.ready {
                eprintln!("warning: source dice loss above train.pretrain.ready_dice_loss");
            }
        }
        Command::Adapt => {
            let out = commands::adapt_cmd(&cfg)?;
            println!(
                "zero-shot: dice loss {:.2}%, mean IoU {:.4}",
                out.zero_shot.dice_loss_pct, out.zero_shot.iou.mean
            );
            for m in &out.metrics {
                println!("iteration {}: dice loss {:.2}%, mean IoU {:.4}", m.iteration, m.eval_dice_loss, m.mean_iou);
            }
        }
        Command::Eval { checkpoint } => {
            let r = commands::eval_cmd(&cfg, checkpoint.as_deref())?;
            println!("dice loss {:.4}%, mean IoU {:.4}", r.dice_loss_pct, r.iou.mean);
        }
        Command::Bench => println!("{}", to_json(&commands::bench_cmd(&cfg)?)),
        Command::Ablate => {
            let s = commands::ablate_cmd(&cfg, &mut |msg| eprintln!("{msg}"))?;
            println!("{}", to_json(&s));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_config() { 2 } else { 1 })
        }
    }
}
