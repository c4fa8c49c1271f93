use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use groupnet_bench::{KernelKind, MIN_REPEATS};
use groupnet_cli::config::RunConfig;
use groupnet_cli::{
    addition_split_csv, bench, bpac_demo, eval, eval_csv, export, inspect_checkpoint, inspect_spec, parse_cases,
    read_config, train, CliError, CliResult,
};

#[derive(Parser)]
#[command(name = "groupnet", version, about = "Binary group-decomposed networks: train, evaluate, export, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints, metrics and the resolved config.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a training or exported checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write the report as CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold BN and scales into an inference-only artifact.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the group spec, complexity report and memory model.
    Inspect {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        /// Inspect the model a run config would build (32x32x3 input for CIFAR).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Single-layer kernel timings.
    Bench {
        /// 1-11, a comma list, or `all`.
        #[arg(long, default_value = "all")]
        case: String,
        /// binary, group:K, fixed:P or float; repeat or comma-separate for several.
        #[arg(long, value_delimiter = ',', default_value = "binary")]
        kernel: Vec<String>,
        #[arg(long, default_value_t = MIN_REPEATS)]
        repeats: usize,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Also time bConv vs hAdd per case and write this CSV.
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Train the toy segmentation pair (diverse vs uniform dilation rates).
    Bpac {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        train_images: usize,
        #[arg(long, default_value_t = 64)]
        test_images: usize,
        /// Epochs per stage (default 8).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "bpac.csv")]
        out: PathBuf,
    },
}

fn write(path: &PathBuf, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::new(1, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = read_config(&config)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            // a second interrupt falls through to the default handler
            let _ = ctrlc::set_handler(move || {
                if flag.swap(true, Ordering::SeqCst) {
                    std::process::exit(130);
                }
            });
            train(&cfg, &out, Some(&stop), &mut io::stderr())?;
        }
        Command::Eval { checkpoint, config, out } => {
            let cfg = read_config(&config)?;
            let r = eval(&checkpoint, &cfg)?;
            let csv = eval_csv(&r);
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::Export { checkpoint, out } => {
            let s = export(&checkpoint, &out)?;
            println!(
                "wrote {}: {} weight bytes ({:.1}x smaller than {} float bytes)",
                out.display(),
                s.weight_bytes,
                s.float_bytes as f64 / s.weight_bytes as f64,
                s.float_bytes
            );
        }
        Command::Inspect { checkpoint, config } => {
            let text = match (checkpoint, config) {
                (Some(c), _) => inspect_checkpoint(&c)?,
                (None, Some(p)) => {
                    let cfg: RunConfig = read_config(&p)?;
                    let (shape, classes) = match cfg.dataset_kind {
                        groupnet_cli::config::DatasetKind::Cifar10 => ([3, 32, 32], 10),
                        groupnet_cli::config::DatasetKind::Shapes => ([1, cfg.image_size, cfg.image_size], cfg.num_classes),
                    };
                    let spec = cfg
                        .model_spec(shape, classes)
                        .map_err(|e| CliError::new(groupnet_cli::EXIT_CONFIG, format!("config error: {e}")))?;
                    inspect_spec(&spec)?
                }
                (None, None) => unreachable!("clap requires one of the two"),
            };
            print!("{text}");
        }
        Command::Bench {
            case,
            kernel,
            repeats,
            out,
            split_out,
        } => {
            let cases = parse_cases(&case)?;
            let kernels = kernel
                .iter()
                .map(|k| k.parse::<KernelKind>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::new(groupnet_cli::EXIT_CONFIG, e.to_string()))?;
            let report = bench(&cases, &kernels, repeats, &mut io::stderr())?;
            write(&out, &report.to_csv())?;
            for f in report.flags() {
                eprintln!("note: {f}");
            }
            if let Some(p) = split_out {
                write(&p, &addition_split_csv(&cases, repeats)?)?;
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Bpac {
            seed,
            train_images,
            test_images,
            epochs,
            out,
        } => {
            eprintln!("training diverse-rate and uniform-rate models (seed {seed})");
            let csv = bpac_demo(seed, train_images, test_images, epochs)?;
            print!("{csv}");
            write(&out, &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
