//! `metaeval`: evaluate LLM outputs and meta-evaluate the evaluators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaeval::analysis::{CorrelationKind, Table};
use metaeval::pipeline::{self, ApiServer, PipelineConfig, RunOptions, Stage};
use metaeval::Error;

#[derive(Parser)]
#[command(name = "metaeval", version, about = "Evaluate LLM outputs and meta-evaluate the evaluators")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pipeline config and report every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate outputs and score them.
    Run(StageArgs),
    /// Produce perturbed outputs (levels 1-3) and score them.
    Perturb(StageArgs),
    /// Score existing generations.
    Score(StageArgs),
    /// Write results and metric correlation tables.
    Analyse {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum)]
        correlation: Option<Corr>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Meta-evaluate metrics against perturbation ladders.
    Meta {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum)]
        correlation: Option<Corr>,
        /// Comma-separated metric names to include.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Show experiments, progress and damaged record files.
    Status {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Serve the read-only results API and guide assets.
    Serve {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// Directory of static guide files.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    project: Option<PathBuf>,
    /// Config file; supplies the project directory and analysis defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    project: Option<PathBuf>,
    /// Keep existing records and only do missing work.
    #[arg(long)]
    resume: bool,
    /// Comma-separated perturbation levels, e.g. 0,1,2,3.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u8>>,
    /// Comma-separated metric names to score.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corr {
    Spearman,
    Kendall,
    Pearson,
}

impl From<Corr> for CorrelationKind {
    fn from(c: Corr) -> Self {
        match c {
            Corr::Spearman => CorrelationKind::Spearman,
            Corr::Kendall => CorrelationKind::Kendall,
            Corr::Pearson => CorrelationKind::Pearson,
        }
    }
}

/// Outcome of a command: success, or a failure with its exit code.
enum Failure {
    Run(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn render(table: &Table, format: Format) -> Result<String, Error> {
    Ok(match format {
        Format::Csv => table.to_csv()?,
        Format::Json => serde_json::to_string_pretty(&table.to_json())? + "\n",
        Format::Text => table.to_text(),
    })
}

fn project_dir(project: Option<PathBuf>, config: Option<&PipelineConfig>) -> Result<PathBuf, Error> {
    project
        .or_else(|| config.and_then(|c| c.project.clone()))
        .ok_or_else(|| Error::Argument("no project directory; pass --project or set `project` in the config".into()))
}

fn target_config(target: &Target) -> Result<Option<PipelineConfig>, Error> {
    target.config.as_deref().map(pipeline::load_config).transpose()
}

fn run_stage(stage: Stage, args: StageArgs) -> Result<(), Failure> {
    let config = pipeline::load_config(&args.config)?;
    let project = project_dir(args.project, Some(&config))?;
    let options = RunOptions { resume: args.resume, levels: args.levels, metrics: args.metrics };
    let runtime = pipeline::runtime_for(&config, &project);
    let report = pipeline::run_stage(&config, &project, stage, &options, &runtime)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
        f => print!("{}", render(&pipeline::report_table(&report), f)?),
    }
    if report.all_succeeded() {
        Ok(())
    } else {
        let bad = report.experiments.len() - report.count(metaeval::orchestrator::ExperimentStatus::Succeeded);
        Err(Failure::Run(format!("{bad} of {} experiments did not fully succeed", report.experiments.len())))
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { config } => {
            let c = pipeline::load_config(&config)?;
            println!("OK: {} experiments, {} models", c.experiments.len(), c.models.len());
            Ok(())
        }
        Command::Run(args) => run_stage(Stage::Run, args),
        Command::Perturb(args) => run_stage(Stage::Perturb, args),
        Command::Score(args) => run_stage(Stage::Score, args),
        Command::Analyse { target, correlation, format } => {
            let config = target_config(&target)?;
            let kind = correlation.map(Into::into).or(config.as_ref().map(|c| c.meta.correlation)).unwrap_or_default();
            let project = project_dir(target.project, config.as_ref())?;
            let analysis = pipeline::analyse(&project, kind)?;
            print!("{}", render(&analysis.results, format)?);
            if matches!(format, Format::Text) {
                print!("\n{}", analysis.correlation_table.to_text());
            }
            Ok(())
        }
        Command::Meta { target, correlation, metrics, format } => {
            let config = target_config(&target)?;
            let kind = correlation.map(Into::into).or(config.as_ref().map(|c| c.meta.correlation)).unwrap_or_default();
            let project = project_dir(target.project, config.as_ref())?;
            let report = pipeline::meta(&project, kind, metrics.as_deref())?;
            print!("{}", render(&report.table(), format)?);
            Ok(())
        }
        Command::Status { target, format } => {
            let config = target_config(&target)?;
            let project = project_dir(target.project, config.as_ref())?;
            let status = pipeline::status(&project)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&status).map_err(Error::from)?),
                Format::Csv => print!("{}", pipeline::status_table(&status).to_csv()?),
                Format::Text => print!("{}", pipeline::status_text(&status)),
            }
            Ok(())
        }
        Command::Serve { target, port, static_dir } => {
            let config = target_config(&target)?;
            let project = project_dir(target.project, config.as_ref())?;
            if !Path::new(&project).is_dir() {
                return Err(Error::ProjectNotFound(project).into());
            }
            let server = ApiServer::bind(&format!("127.0.0.1:{port}"))?;
            eprintln!("serving {} on http://127.0.0.1:{port}", project.display());
            ApiServer::new(project, static_dir).run(&server);
            Ok(())
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
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(Failure::Error(Error::Invalid(issues))) => {
            for issue in &issues {
                eprintln!("error: {issue}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_environmental() { 2 } else { 1 })
        }
    }
}
