use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tosc_bench::config::{preset_names, preset_source, ExperimentConfig};
use tosc_bench::report::emit_report;
use tosc_bench::runner;
use tosc_core::data::synth::{write_corpus, SynthKind, SynthSpec};

#[derive(Parser)]
#[command(name = "tosc", about = "Privacy-preserving semantic communication benchmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed instead of every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured scheme.
    Train(RunArgs),
    /// Evaluate a trained run at every test SNR.
    Eval(RunArgs),
    /// Attack an evaluated run and fill the leakage columns.
    Attack(RunArgs),
    /// Train, eval and attack.
    Run(RunArgs),
    /// Regenerate plots and tables from a results directory.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for symmetry with the other subcommands; unused.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a shipped preset.
    Preset { name: Option<String> },
    /// Write a procedural corpus.
    Synth {
        #[arg(long, value_parser = ["objects", "faces"])]
        kind: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, Vec<u64>)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    let seeds = args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    eprintln!("config {} hash {} seeds {:?}", args.config.display(), cfg.hash(), seeds);
    for d in cfg.deviations() {
        eprintln!("deviation {d}");
    }
    Ok((cfg, seeds))
}

fn each_seed(args: &RunArgs, what: &str, f: impl Fn(&ExperimentConfig, u64) -> tosc_bench::Result<()>) -> Result<()> {
    let (cfg, seeds) = resolve(args)?;
    let mut failed = 0;
    for seed in seeds {
        match f(&cfg, seed) {
            Ok(()) => eprintln!("{what} {} seed {seed}: ok ({})", cfg.label, cfg.run_dir(seed).display()),
            Err(e) => {
                eprintln!("{what} {} seed {seed}: {e}", cfg.label);
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} {what} job(s) failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => each_seed(&a, "train", |c, s| {
            let t = runner::run_train(c, s)?;
            eprintln!("final loss {:.4} after {} epochs", t.final_loss, t.epochs);
            Ok(())
        }),
        Command::Eval(a) => each_seed(&a, "eval", |c, s| {
            for r in runner::run_eval(c, s)? {
                println!("{}\tseed {}\t{} dB\taccuracy {:.4}", r.scheme, r.seed, r.snr_db, r.accuracy);
            }
            Ok(())
        }),
        Command::Attack(a) => each_seed(&a, "attack", |c, s| {
            for r in runner::run_attack(c, s)?.iter().filter(|r| r.attacker_mse.is_some()) {
                println!(
                    "{}\tseed {}\t{} dB\tattacker mse {:.5}\tmi {:.4}",
                    r.scheme,
                    r.seed,
                    r.snr_db,
                    r.attacker_mse.unwrap_or(f64::NAN),
                    r.mi_leakage.unwrap_or(f64::NAN)
                );
            }
            Ok(())
        }),
        Command::Run(a) => each_seed(&a, "run", |c, s| runner::run_all(c, s).map(|_| ())),
        Command::Report { config, out, .. } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output,
                (None, None) => bail!("report needs --out or --config"),
            };
            for p in emit_report(&dir).with_context(|| format!("report for {}", dir.display()))? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Preset { name } => {
            match name {
                None => preset_names().into_iter().for_each(|n| println!("{n}")),
                Some(n) => match preset_source(&n) {
                    Some(src) => print!("{src}"),
                    None => bail!("unknown preset {n:?}; valid: {}", preset_names().join(", ")),
                },
            }
            Ok(())
        }
        Command::Synth { kind, name, out, train, test, seed } => {
            let kind = if kind == "faces" { SynthKind::Faces } else { SynthKind::Objects };
            write_corpus(&out, &SynthSpec { kind, name, train, test, seed })?;
            Ok(())
        }
    }
}
