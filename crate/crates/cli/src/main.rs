//! `styleshift`: train, apply, and evaluate retrieval-augmented style
//! transfer models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use styleshift::config::TrainConfig;
use styleshift::pipeline::{self, EvalOptions, Session};
use styleshift::run::check_output_file;
use styleshift::synthetic::write_toy_dataset;

#[derive(Parser)]
#[command(name = "styleshift", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by the training commands. Precedence:
/// `--seed` and `--set` over `--config` over defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus prefix; files are `<data>.<split>.<style>`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    styles: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the forward LSTM language model used for initialization.
    PretrainLm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a transfer model into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Pretraining run directory (or archive) to initialize from.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Transfer each line of a file to a target style.
    Transfer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Target style index.
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the retrieved samples of every input here (TSV).
        #[arg(long)]
        provenance: Option<PathBuf>,
        /// Checkpoint tag; defaults to the latest.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Show the top-K retrieved sentences of a style for a query.
    Retrieve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        style: usize,
        /// Defaults to the run's K.
        #[arg(long)]
        k: Option<usize>,
        /// Write the TSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a run on its test split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 2)]
        classifier_epochs: usize,
    },
    /// Train and evaluate one run per K and tabulate GM against K.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Comma-separated values of K.
        #[arg(long = "k", value_delimiter = ',', default_value = "1,3,5,10")]
        k_values: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        classifier_epochs: usize,
    },
    /// Write the synthetic two-style corpus to `<out>/toy.*`.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        per_style: usize,
        #[arg(long, default_value_t = 500)]
        test_per_style: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let Some((key, value)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        c.set(key.trim(), value)?;
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PretrainLm {
            cfg,
            data,
            out,
            force,
        } => {
            let config = build_config(&cfg)?;
            let report = pipeline::pretrain_run(&config, &data.data, data.styles, &out, force)?;
            log::info!(
                "held-out NLL {:.4} -> {:.4}",
                report.initial,
                report.epochs.last().copied().unwrap_or(report.initial)
            );
        }
        Command::Train {
            cfg,
            data,
            out,
            force,
            lm,
        } => {
            let config = build_config(&cfg)?;
            let outcome = pipeline::train_run(&config, &data.data, data.styles, &out, force, lm.as_deref())?;
            if let Some(r) = &outcome.lm_load {
                log::info!("initialized {} tensors from the language model", r.loaded.len());
            }
            if let Some(last) = outcome.history.last() {
                log::info!("final losses: {}", last.tsv_row());
            }
        }
        Command::Transfer {
            run,
            input,
            target,
            out,
            provenance,
            checkpoint,
            force,
        } => {
            let n = pipeline::transfer_file(
                &run,
                checkpoint.as_deref(),
                &input,
                target,
                &out,
                provenance.as_deref(),
                force,
            )?;
            log::info!("transferred {n} lines");
        }
        Command::Retrieve {
            run,
            query,
            style,
            k,
            out,
            force,
        } => {
            if let Some(p) = &out {
                check_output_file(p, force)?;
            }
            let mut session = Session::open(&run, None)?;
            let k = k.unwrap_or(session.config.k);
            let result = session.retrieve_line(&query, style, k)?;
            let mut text = String::from("rank\tscore\tsentence\n");
            for (rank, (&id, score)) in result.ids.iter().zip(&result.scores).enumerate() {
                let _ = writeln!(text, "{}\t{}\t{}", rank + 1, score, session.sentence(style, id));
            }
            match out {
                Some(p) => write_out(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate {
            run,
            out,
            force,
            classifier_epochs,
        } => {
            let options = EvalOptions {
                classifier_epochs,
                ..EvalOptions::default()
            };
            let outcome = pipeline::evaluate_run(&run, &out, force, options)?;
            log::info!("classifier test accuracy {:.2}%", outcome.classifier_accuracy);
            print!("{}", styleshift::eval::report_tsv(&outcome.report));
        }
        Command::SweepK {
            cfg,
            data,
            out,
            force,
            k_values,
            classifier_epochs,
        } => {
            let config = build_config(&cfg)?;
            let options = EvalOptions {
                classifier_epochs,
                ..EvalOptions::default()
            };
            pipeline::sweep_k(&config, &data.data, data.styles, &out, force, &k_values, options)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join(pipeline::SWEEP_REPORT))?
            );
        }
        Command::MakeToy {
            out,
            per_style,
            test_per_style,
            seed,
            force,
        } => {
            styleshift::run::prepare_output_dir(&out, force)?;
            let ds = write_toy_dataset(&out.join("toy"), per_style, test_per_style, seed)?;
            log::info!("wrote {} files with prefix {}", ds.files.len(), ds.prefix.display());
        }
    }
    Ok(())
}
