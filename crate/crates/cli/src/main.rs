//! `iconoloc`: generate maps, score them, summarize datasets, and run the
//! ranking study.
//!
//! Exit codes: 0 success, 1 runtime or partial failure (a method that
//! produced no map at all), 2 configuration or input error.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iconoloc::config::{ConfigError, RunConfig};
use iconoloc::dataset::{self, Adapter};
use iconoloc::localization::SizeCutoffs;
use iconoloc::pipeline::{self, PipelineError};
use iconoloc::study::{analyze, read_profiles, read_rankings, AnalysisConfig, StudyError};
use iconoloc_study::{export, Store, StudyConfig};

#[derive(Parser)]
#[command(name = "iconoloc", version, about = "Zero-shot saliency localization benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and persist saliency maps for every selected image-class pair.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score persisted maps with the threshold-swept box accuracy.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Add the best threshold per cell to the table.
        #[arg(long)]
        show_tau: bool,
    },
    /// Image, box, class and size-bucket statistics of a dataset split.
    DatasetStats {
        /// Run configuration; alternatively give --root and --adapter.
        #[arg(long, conflicts_with_all = ["root", "adapter"])]
        config: Option<PathBuf>,
        #[arg(long, requires = "adapter")]
        root: Option<PathBuf>,
        #[arg(long, requires = "root")]
        adapter: Option<Adapter>,
        #[arg(long)]
        split: Option<String>,
        /// Directory for the table files; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The human ranking study.
    Study {
        #[command(subcommand)]
        command: StudyCommand,
    },
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Serve the study web service.
    Serve {
        /// Study setup (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Write the collected rankings, profiles and masks to a directory.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, impute and summarize exported rankings.
    Analyze {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration whose `[study]` table sets the analysis.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Imputation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Compute agreement on the records before imputation.
        #[arg(long)]
        w_before_imputation: bool,
    },
}

/// An error with its exit code.
struct Failure(u8, String);

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self(2, e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self(1, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Dataset(_) | PipelineError::Backbone(_) => Self::config(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<StudyError> for Failure {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Io { .. } | StudyError::Parse { .. } | StudyError::InvalidRecord { .. } => Self::config(e),
            _ => Self::runtime(e),
        }
    }
}

fn load(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&run.config).map_err(Failure::config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(|e: ConfigError| Failure::config(e))?;
    Ok(cfg)
}

fn cmd_generate(run: &RunArgs, workers: usize) -> Result<(), Failure> {
    let cfg = load(run)?;
    let s = pipeline::generate(&cfg, workers)?;
    for f in &s.failures {
        log::warn!("{} / {} / {}: {}", f.image_id, f.class, f.method, f.error);
    }
    println!(
        "{} maps written, {} up to date, {} failed; manifest {}",
        s.written,
        s.skipped,
        s.failures.len(),
        s.manifest.display()
    );
    if !s.fully_failed.is_empty() {
        let names: Vec<&str> = s.fully_failed.iter().map(|m| m.as_str()).collect();
        return Err(Failure(1, format!("no map produced by: {}", names.join(", "))));
    }
    Ok(())
}

fn cmd_eval(run: &RunArgs, show_tau: bool) -> Result<(), Failure> {
    let cfg = load(run)?;
    let out = pipeline::eval(&cfg, show_tau)?;
    print!("{}", out.table);
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_dataset_stats(
    config: Option<&Path>,
    root: Option<&Path>,
    adapter: Option<Adapter>,
    split: Option<&str>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (index, cutoffs, hash) = match (config, root, adapter) {
        (Some(path), _, _) => {
            let mut cfg = RunConfig::load(path).map_err(Failure::config)?;
            if let Some(s) = split {
                cfg.dataset.split = Some(s.to_string());
            }
            (pipeline::load_dataset(&cfg)?, cfg.eval.size_cutoffs, Some(cfg.config_hash()))
        }
        (None, Some(root), Some(adapter)) => {
            (dataset::load(root, adapter, split).map_err(Failure::config)?, SizeCutoffs::default(), None)
        }
        _ => return Err(Failure::config("give --config, or --root with --adapter")),
    };
    let stats = pipeline::dataset_stats(&index, &cutoffs, hash.as_deref());
    print!("{}", stats.text);
    if let Some(dir) = out {
        stats.write_to(dir)?;
    }
    Ok(())
}

fn study_config(path: &Path) -> Result<StudyConfig, Failure> {
    let cfg = StudyConfig::load(path).map_err(Failure::config)?;
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn cmd_study(command: &StudyCommand) -> Result<(), Failure> {
    match command {
        StudyCommand::Serve { config, port, host } => {
            let cfg = study_config(config)?;
            let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
            rt.block_on(iconoloc_study::serve(&cfg, SocketAddr::new(*host, *port))).map_err(|e| match e {
                iconoloc_study::api::ServeError::Bind { .. } | iconoloc_study::api::ServeError::Setup(_) => Failure::config(e),
                _ => Failure::runtime(e),
            })
        }
        StudyCommand::Export { config, out } => {
            let cfg = study_config(config)?;
            let store = Store::open(&cfg.database, cfg.pairs.iter().map(|p| p.pair_id.clone()).collect())
                .map_err(Failure::runtime)?;
            let files = export(&store).map_err(Failure::runtime)?.write_to(out).map_err(Failure::runtime)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        StudyCommand::Analyze { rankings, profiles, out, config, seed, iterations, w_before_imputation } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p).map_err(Failure::config)?.study,
                None => AnalysisConfig::default(),
            };
            if let Some(s) = seed {
                cfg.mice.seed = *s;
            }
            if let Some(n) = iterations {
                cfg.mice.iterations = *n;
            }
            cfg.w_before_imputation |= *w_before_imputation;
            let report = analyze(&read_rankings(rankings)?, &read_profiles(profiles)?, &cfg)?;
            report.write_to(out)?;
            println!(
                "{} of {} participants included, {} records, {} ranks imputed",
                report.participants_included, report.participants_total, report.records_included, report.imputed_cells
            );
            for a in &report.agreement {
                println!("  {:<24} W = {:.3} ({} raters)", a.pair_id, a.w, a.m);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { run, workers } => cmd_generate(run, *workers),
        Command::Eval { run, show_tau } => cmd_eval(run, *show_tau),
        Command::DatasetStats { config, root, adapter, split, out } => {
            cmd_dataset_stats(config.as_deref(), root.as_deref(), *adapter, split.as_deref(), out.as_deref())
        }
        Command::Study { command } => cmd_study(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
