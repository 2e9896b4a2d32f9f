//! `mcfuse` command-line runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod failure;
mod features;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mcfuse::evalkit::{Split, SplitRatios};
use mcfuse::Class;
use mcfuse_psycho::http::AppState;
use mcfuse_psycho::{Study, StudyConfig, ADMIN_TOKEN_ENV};

use commands::{CamArgs, EvalArgs};
use failure::{io_failure, CmdResult, Failure};

#[derive(Parser)]
#[command(name = "mcfuse", version, about = "Multi-colorspace fused image forensics")]
struct Cli {
    /// Worker threads; defaults to all cores for `extract` and 1 otherwise.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign train/val/test splits, stratified by label and category.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Percentages as TRAIN:VAL:TEST.
        #[arg(long, default_value = "60:20:20", value_parser = parse_ratios)]
        ratios: SplitRatios,
    },
    /// Extract backbone features for every branch; resumes from existing caches.
    Extract {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the fusion head on cached train features.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained head on a split or an external manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// External manifest; features are extracted on the fly.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Report directory name under the output directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Accuracy on the test split after JPEG recompression.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Quality factors; defaults to 100 down to 10 in steps of 10.
        #[arg(long, value_delimiter = ',')]
        qualities: Option<Vec<u8>>,
    },
    /// Two-dimensional t-SNE embedding of fused features.
    Tsne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Class activation heatmaps, optionally scored against human markings.
    Cam {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Images to explain; defaults to the first --limit of --split.
        #[arg(long = "image-id")]
        image_ids: Vec<u64>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Class to explain; defaults to the predicted class.
        #[arg(long, value_parser = parse_class)]
        class: Option<Class>,
        /// Exported annotation records with region boxes.
        #[arg(long)]
        markings: Option<PathBuf>,
    },
    /// Stuart-Maxwell test between two prediction files.
    Significance {
        a: PathBuf,
        b: PathBuf,
        /// Also write the result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation study over HTTP.
    PsychoServe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "study")]
        study_id: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = mcfuse_psycho::study::DEFAULT_PER_SESSION)]
        per_session: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export annotations, the manual confusion matrix and paired predictions.
    PsychoExport {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "study")]
        study_id: String,
        #[arg(long, default_value_t = mcfuse_psycho::study::DEFAULT_PER_SESSION)]
        per_session: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Model predictions over the study pool, for pairing.
        #[arg(long)]
        model_predictions: Option<PathBuf>,
    },
    /// Write the small deterministic reference backbone graph.
    SynthBackbone {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic labelled corpus with an unassigned manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = mcfuse::corpus::DEFAULT_SIDE)]
        side: usize,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: mcfuse::Error| e.to_string())
}

fn parse_class(s: &str) -> Result<Class, String> {
    s.parse().map_err(|e: mcfuse::Error| e.to_string())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let parts = s
        .split(':')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [train, val, test] if train + val + test == 100 => Ok(SplitRatios { train, val, test }),
        [_, _, _] => Err("ratios must sum to 100".into()),
        _ => Err("expected TRAIN:VAL:TEST".into()),
    }
}

fn study_config(manifest: PathBuf, store: PathBuf, study_id: String, per_session: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        study_id,
        manifest,
        store_dir: store,
        per_session,
        seed,
    }
}

fn psycho_serve(config: StudyConfig, addr: &str) -> CmdResult {
    let study = Study::open(config)?;
    let admin_token = std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if admin_token.is_none() {
        log::warn!("{ADMIN_TOKEN_ENV} is not set; the export endpoint is disabled");
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Data(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Usage(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Data(e.to_string()))?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        let state = AppState {
            study: Arc::new(study),
            admin_token,
        };
        mcfuse_psycho::http::serve(listener, state)
            .await
            .map_err(|e| Failure::Data(format!("server error: {e}")))
    })
}

fn run(cli: Cli) -> CmdResult {
    let workers = match (&cli.command, cli.workers) {
        (_, Some(0)) => return Err(Failure::Usage("--workers must be at least 1".into())),
        (_, Some(n)) => n,
        (Command::Extract { .. }, None) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        (_, None) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;

    match cli.command {
        Command::Split {
            input,
            output,
            seed,
            ratios,
        } => commands::split(&input, &output, seed, ratios),
        Command::Extract { config } => commands::extract(&config),
        Command::Train { config } => commands::train(&config),
        Command::Eval {
            config,
            manifest,
            split,
            model,
            name,
        } => commands::eval(EvalArgs {
            config,
            manifest,
            split,
            model,
            name,
        }),
        Command::Robustness {
            config,
            model,
            qualities,
        } => commands::robustness(&config, model, qualities),
        Command::Tsne {
            config,
            split,
            perplexity,
            iterations,
        } => commands::tsne_cmd(&config, split, perplexity, iterations),
        Command::Cam {
            config,
            model,
            image_ids,
            split,
            limit,
            class,
            markings,
        } => commands::cam(CamArgs {
            config,
            model,
            image_ids,
            split,
            limit,
            class,
            markings,
        }),
        Command::Significance { a, b, out } => commands::significance(&a, &b, out.as_deref()),
        Command::PsychoServe {
            manifest,
            store,
            study_id,
            addr,
            per_session,
            seed,
        } => psycho_serve(study_config(manifest, store, study_id, per_session, seed), &addr),
        Command::PsychoExport {
            manifest,
            store,
            study_id,
            per_session,
            seed,
            out,
            model_predictions,
        } => {
            let study = Study::open(study_config(manifest, store, study_id, per_session, seed))?;
            let report = mcfuse_psycho::export::export_study(&study, &out, model_predictions.as_deref())?;
            print!("{}", report.render());
            println!("export written to {}", out.display());
            Ok(())
        }
        Command::SynthBackbone { out, seed } => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            mcfuse::backbone::reference::write(&out, seed)?;
            println!("backbone written to {}", out.display());
            Ok(())
        }
        Command::SynthCorpus {
            out,
            per_class,
            seed,
            side,
        } => {
            let m = mcfuse::corpus::write_corpus(&out, per_class, seed, side)?;
            println!("{} images written to {}", m.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
