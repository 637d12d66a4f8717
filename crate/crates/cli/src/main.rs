use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use relush::commands::{self, ClusterArgs, SimulateArgs, TrainArgs};
use relush::config::InitMode;
use relush::data::Split;
use relush::Error;

#[derive(Parser)]
#[command(name = "relush", version, about = "Shared-ReLU networks and secure-inference cost tools")]
struct Cli {
    /// JSON network config, or a shipped preset name (cifar10, svhn, fashion, desk).
    #[arg(long, global = true, default_value = "desk")]
    config: String,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use only the first N examples of each split.
    #[arg(long, global = true)]
    limit: Option<usize>,

    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Warm,
    Scratch,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant and write a checkpoint and per-epoch metrics.
    Train {
        #[arg(long, default_value = "original")]
        variant: String,
        /// Warm-start source checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory holding clustered grouping files.
        #[arg(long)]
        groups_dir: Option<PathBuf>,
    },
    /// Cluster training activation profiles into grouping specs.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cluster every clustered layer of this variant as configured.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Rounds and communication of secure inference.
    Cost {
        #[arg(long, default_value = "original")]
        variant: String,
        /// Baseline variant for savings percentages.
        #[arg(long)]
        compare: Option<String>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// DReLU and Mul counts per activation layer.
    Count {
        #[arg(long, default_value = "original")]
        variant: String,
    },
    /// Run the three-party simulator and check it against the cost model.
    Simulate {
        #[arg(long, default_value = "original")]
        variant: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n_images: usize,
        /// Random inputs instead of test images.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        groups_dir: Option<PathBuf>,
    },
    /// Per-layer total variation of activation maps.
    Tv {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the configured synthetic dataset as CSV.
    Synth,
    /// Print the JSON Schema of config files.
    Schema,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Reconciliation(_) => 2,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> relush::Result<u8> {
    let out = cli.out;
    match cli.command {
        Command::Train {
            variant,
            checkpoint,
            init,
            epochs,
            groups_dir,
        } => {
            let args = TrainArgs {
                config: cli.config,
                variant,
                seed: cli.seed,
                limit: cli.limit,
                epochs,
                init: init.map(|i| match i {
                    InitArg::Warm => InitMode::Warm,
                    InitArg::Scratch => InitMode::Scratch,
                }),
                checkpoint,
                groups_dir,
                out,
            };
            let res = commands::cmd_train(&args, |m| {
                log::info!(
                    "epoch {}: loss {:.4}, train {:.3}, test {:.3}",
                    m.epoch,
                    m.train_loss,
                    m.train_accuracy,
                    m.test_accuracy
                )
            })?;
            println!("{}", commands::describe_metrics(&res.metrics));
            println!("checkpoint: {}", res.checkpoint.display());
            println!("metrics: {}", res.metrics_path.display());
        }
        Command::Cluster {
            checkpoint,
            variant,
            layer,
            window,
            k,
            split,
            max_samples,
        } => {
            let args = ClusterArgs {
                config: cli.config,
                checkpoint,
                variant,
                layer,
                window,
                k,
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                limit: cli.limit,
                max_samples,
                out,
            };
            for c in commands::cmd_cluster(&args)? {
                let total: usize = c.groups_per_channel.iter().sum();
                println!(
                    "{}: {} groups over {} channels -> {}",
                    c.layer,
                    total,
                    c.groups_per_channel.len(),
                    c.spec_path.display()
                );
            }
        }
        Command::Cost { variant, compare, json } => {
            let res = commands::cmd_cost(&cli.config, &variant, compare.as_deref(), Some(&out))?;
            if json {
                println!("{}", res.report.to_json()?);
            } else {
                print!("{}", res.text);
            }
        }
        Command::Count { variant } => {
            let res = commands::cmd_count(&cli.config, &variant)?;
            print!("{}", res.text);
            relush::io_util::write_atomic(&out.join(format!("{variant}_counts.csv")), res.csv.as_bytes())?;
        }
        Command::Simulate {
            variant,
            checkpoint,
            n_images,
            random,
            groups_dir,
        } => {
            let args = SimulateArgs {
                config: cli.config,
                variant,
                checkpoint,
                n_images,
                seed: cli.seed,
                random_inputs: random,
                groups_dir,
                out: Some(out),
            };
            let res = commands::cmd_simulate(&args)?;
            print!("{}", res.text);
            if !(res.equivalence_passed() && res.reconciliation_passed()) {
                return Ok(2);
            }
        }
        Command::Tv { checkpoint } => {
            let res = commands::cmd_tv(&cli.config, &checkpoint, cli.limit, Some(&out))?;
            print!("{}", res.csv);
        }
        Command::Schema => print!("{}", relush::config::NetworkConfig::json_schema()),
        Command::Synth => {
            let (train, test) = commands::cmd_synth(&cli.config, &out)?;
            println!("{}\n{}", train.display(), test.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
