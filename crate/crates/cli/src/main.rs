use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unload_cli::commands::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_plot, cmd_train, cmd_tune, resolve_layers, Baseline,
    EvalArgs, TuneArgs,
};
use unload_cli::config::Overrides;
use unload_cli::plot::PlotKind;
use unload_cli::{run_dir, CliError};

#[derive(Parser)]
#[command(
    name = "unload",
    version,
    about = "Container unloading with a masked permutation-equivariant DQN"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate one container and write its item table and observation.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run directory (default: $UNLOAD_OUT/gen-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep learning rate and batch size on the tuning environment.
    Tune {
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.01, 0.001])]
        lr: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 1024, 2048])]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 3000)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable histogram equalization of the features.
        #[arg(long)]
        no_fe: bool,
        /// Worker threads; 0 uses all cores, 1 is bit-exact.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the unloading environment.
    Train(TrainCli),
    /// Evaluate a checkpoint or a baseline policy.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable action masking for the greedy policy.
        #[arg(long)]
        unmasked: bool,
        /// Steps per episode (default: the full episode).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a CSV as an SVG figure.
    Plot {
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainCli {
    /// `key = value` config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Additional `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    total_steps: Option<String>,
    #[arg(long)]
    epsilon_init: Option<String>,
    #[arg(long)]
    epsilon_final: Option<String>,
    #[arg(long)]
    epsilon_decay_steps: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    loss_kind: Option<String>,
    #[arg(long)]
    buffer_capacity: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    target_sync_period: Option<String>,
    #[arg(long)]
    mask_during_training: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainCli {
    fn overrides(&self) -> Result<Overrides, CliError> {
        let mut o = Overrides::new();
        let flags = [
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("total_steps", &self.total_steps),
            ("epsilon_init", &self.epsilon_init),
            ("epsilon_final", &self.epsilon_final),
            ("epsilon_decay_steps", &self.epsilon_decay_steps),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("loss_kind", &self.loss_kind),
            ("buffer_capacity", &self.buffer_capacity),
            ("optimizer", &self.optimizer),
            ("seed", &self.seed),
            ("target_sync_period", &self.target_sync_period),
            ("mask_during_training", &self.mask_during_training),
            ("workers", &self.workers),
            ("checkpoint_every", &self.checkpoint_every),
        ];
        for pair in &self.set {
            o.set_pair(pair)?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                o.set(key, v)?;
            }
        }
        Ok(o)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Random,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Loss,
    Msr,
    Reward,
    Scatter,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { seed, out } => {
            let dir = run_dir(out.as_deref(), &format!("gen-{seed}"));
            let s = cmd_gen(seed, &dir)?;
            println!(
                "items {} pickable {} pickable_fraction {:.4} -> {}",
                s.items,
                s.pickable,
                s.pickable_fraction,
                dir.display()
            );
        }
        Command::Tune {
            lr,
            batch,
            steps,
            repeats,
            seed,
            no_fe,
            workers,
            out,
        } => {
            let args = TuneArgs {
                learning_rates: lr,
                batch_sizes: batch,
                steps,
                repeats,
                seed,
                equalize: !no_fe,
                workers,
            };
            let dir = run_dir(out.as_deref(), &format!("tune-{seed}"));
            let results = cmd_tune(&args, &dir)?;
            println!(
                "{:>10} {:>6} {:>6} {:>10}",
                "lr", "batch", "repeat", "final_msr"
            );
            for r in results {
                println!(
                    "{:>10e} {:>6} {:>6} {:>10.4}",
                    r.learning_rate, r.batch_size, r.repeat, r.final_msr
                );
            }
            println!("-> {}", dir.display());
        }
        Command::Train(t) => {
            let run = resolve_layers(t.config.as_deref(), &t.overrides()?)?;
            let dir = run_dir(t.out.as_deref(), &format!("train-{}", run.train.seed));
            let s = cmd_train(&run, &dir)?;
            println!("final windowed MSR {:.4} -> {}", s.final_msr, dir.display());
        }
        Command::Eval {
            checkpoint,
            baseline,
            episodes,
            seed,
            unmasked,
            steps,
            out,
        } => {
            let baseline = baseline.map(|b| match b {
                BaselineArg::Random => Baseline::Random,
                BaselineArg::Oracle => Baseline::Oracle,
            });
            let args = EvalArgs {
                checkpoint,
                baseline,
                episodes,
                seed,
                masked: !unmasked,
                steps,
            };
            let dir = run_dir(out.as_deref(), &format!("eval-{seed}"));
            let report = cmd_eval(&args, &dir)?;
            println!(
                "MSR {:.4} over {} episodes (worst attempts with a pickable item observed: {}) -> {}",
                report.msr,
                report.episodes.len(),
                report.max_attempts_with_pickable,
                dir.display()
            );
        }
        Command::Plot { input, kind, out } => {
            let kind = match kind {
                KindArg::Loss => PlotKind::Loss,
                KindArg::Msr => PlotKind::Msr,
                KindArg::Reward => PlotKind::Reward,
                KindArg::Scatter => PlotKind::Scatter,
            };
            let out = out.unwrap_or_else(|| input.with_extension("svg"));
            cmd_plot(&input, kind, &out)?;
            println!("-> {}", out.display());
        }
        Command::Gradcheck { cases, seed } => {
            let s = cmd_gradcheck(cases, seed)?;
            for (i, r) in s.cases.iter().enumerate() {
                println!(
                    "case {i:>3}: max relative error {:.3e} at parameter {}",
                    r.max_rel_error, r.worst_index
                );
            }
            println!("skipped {} cases near kinks or ties", s.skipped);
            println!(
                "corrupted control: relative error {:.3e} (detected)",
                s.control.max_rel_error
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
