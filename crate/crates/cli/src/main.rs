use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use ahnet_cli::commands::{self, PredictInput};
use ahnet_cli::server::{self, AppState};
use ahnet_cli::Config;
use ahnet_core::data::LesionKind;
use ahnet_core::metrics::MetricsReport;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ahnet", version, about = "Lesion segmentation pipeline and inference server")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Disk,
    Ellipse,
    Blob,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lesion bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = Kind::Blob)]
        kind: Kind,
    },
    /// Convert paired NIfTI volumes into a slice bundle.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on `paths.bundle`.
    Train {
        /// Continue from a per-epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a model on the evaluation bundle.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Score the labels against themselves instead of a model.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Segment one PNG or one bundle slice.
    Predict {
        #[arg(long, conflicts_with = "bundle")]
        image: Option<PathBuf>,
        #[arg(long, requires = "index")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Time training epochs of each configured variant.
    Bench,
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn print_table(report: &MetricsReport) {
    println!("{}", MetricsReport::TABLE_HEADER);
    println!("{}", report.table_row());
}

fn model_id(path: &Path) -> String {
    path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Synth { out, count, size, kind } => {
            let kind = match kind {
                Kind::Disk => LesionKind::Disk,
                Kind::Ellipse => LesionKind::Ellipse,
                Kind::Blob => LesionKind::Blob,
            };
            print_json(&commands::synth(&out, cfg.train.seed, count, size, kind)?)
        }
        Command::Preprocess { input, output } => {
            let summary = commands::preprocess(&cfg, &input, &output)?;
            print_json(&summary)?;
            if summary.slices == 0 {
                bail!("no slices produced from {}", input.display());
            }
            if !summary.errors.is_empty() {
                bail!("{} volume pair(s) failed: {}", summary.errors.len(), summary.errors.join("; "));
            }
            Ok(())
        }
        Command::Train { resume } => {
            let report = commands::train_cmd(&cfg, resume.as_deref())?;
            print_json(&report)
        }
        Command::Eval { model, oracle } => {
            let report = commands::eval_cmd(&cfg, model.as_deref(), oracle)?;
            print_table(&report);
            Ok(())
        }
        Command::Predict {
            image,
            bundle,
            index,
            out,
            model,
        } => {
            let input = match (&image, &bundle, index) {
                (Some(p), None, _) => PredictInput::Png(p),
                (None, Some(b), Some(i)) => PredictInput::BundleSlice(b, i),
                _ => bail!("give --image or --bundle with --index"),
            };
            print_json(&commands::predict_cmd(&cfg, model.as_deref(), input, &out)?)
        }
        Command::Bench => {
            let report = commands::bench_cmd(&cfg)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Serve { model, port } => {
            let path = model.unwrap_or_else(|| cfg.paths.model.clone());
            let net = ahnet_core::segnet::Network::load(&path)
                .with_context(|| format!("loading model {}", path.display()))?;
            if let Some(port) = port {
                cfg.serve.port = port;
            }
            let state = Arc::new(AppState::new(net, model_id(&path), cfg.serve.max_side));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let (addr, server) = server::bind(state, &cfg.serve).await?;
                eprintln!("listening on http://{addr}");
                tokio::select! {
                    r = server => r?,
                    _ = tokio::signal::ctrl_c() => {}
                }
                Ok(())
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}
