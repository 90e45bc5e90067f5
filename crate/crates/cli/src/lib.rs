//! Command-line entry point and HTTP service for the feedback pipeline.

pub mod config;
pub mod error;
pub mod serve;
pub mod stages;

use std::ffi::OsString;
use std::io::IsTerminal;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use peerfeedback_core::segmenter::{SegmenterConfig, StopRule};
use peerfeedback_core::selfimprove::{SftMode, DEFAULT_SAMPLES};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "peerfeedback", version, about = "Feedback generation pipeline for peer-counseling conversations")]
pub struct Cli {
    /// Log filter for stderr, e.g. `info` or `peerfeedback_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scrub, flag and split a raw corpus.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// One keyword per line; `#` starts a comment.
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// e.g. `annotate=400,prefs=150,test=67`
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Directory receiving one `<split>.jsonl` per split.
        #[arg(long)]
        split_dir: Option<PathBuf>,
    },
    /// Segment conversations by embedding similarity.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        mask: usize,
        #[arg(long, default_value_t = 2)]
        min_seg: usize,
        /// Threshold multiplier for the gradient stop rule.
        #[arg(long, default_value_t = 1.2)]
        c: f64,
        /// Insert exactly this many boundaries instead.
        #[arg(long)]
        boundaries: Option<usize>,
    },
    /// Pre-annotate helper utterances with the model.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        segments: Option<PathBuf>,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        partial_out: Option<PathBuf>,
    },
    /// Preference pairs and SFT exports.
    Selfimprove {
        #[command(subcommand)]
        command: SelfImproveCommand,
    },
    /// Sample scoring and aggregate reports.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Summary statistics of an annotated dataset.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write the numbers as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run pipeline stages from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only these stages (repeatable). Default: every enabled stage.
        #[arg(long = "stage")]
        stages: Vec<config::Stage>,
    },
    /// Serve feedback requests over HTTP.
    Serve {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Environment variable holding a bearer token clients must send.
        #[arg(long)]
        token_env: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub segments: Option<PathBuf>,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SelfImproveCommand {
    /// Build DPO preference pairs.
    Pairs {
        #[command(flatten)]
        t: TargetArgs,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        /// Also write per-utterance gate and sample details.
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Draw generations per helper utterance for SFT export.
    Sample {
        #[command(flatten)]
        t: TargetArgs,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        /// Self-score each generation (needed for `sft --mode best`).
        #[arg(long)]
        score: bool,
    },
    /// Export SFT records.
    Sft {
        #[arg(long)]
        mode: SftMode,
        #[arg(long)]
        out: PathBuf,
        /// Annotated conversations (expert mode).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Output of `selfimprove sample` (gens and best modes).
        #[arg(long)]
        gens: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Self-score k generations per helper utterance.
    Score {
        #[command(flatten)]
        t: TargetArgs,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        k: usize,
        /// Continue from the entries already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Compare systems' score files.
    Report {
        /// `name=path` pairs, comma separated.
        #[arg(long)]
        scores: String,
        #[arg(long)]
        baseline: String,
        /// Output stem; `.json`, `.txt` and `.hist.csv` are written.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn init_tracing(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_tracing(&cli.log_level);
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn print_summary(s: &stages::Summary) {
    println!("{s}");
}

pub fn execute(command: Command) -> Result<(), CliError> {
    use stages::*;
    match command {
        Command::Ingest { input, out, report, keywords, split, seed, split_dir } => {
            print_summary(&ingest(&IngestArgs { input, out, report, keywords, split, seed, split_dir })?);
        }
        Command::Segment { input, out, profile, mask, min_seg, c, boundaries } => {
            let stop = match boundaries {
                Some(count) => StopRule::FixedBoundaries { count },
                None => StopRule::GradientThreshold { c },
            };
            let gw = gateway(profile.as_deref(), None)?;
            let config = SegmenterConfig { mask, min_seg, stop };
            print_summary(&segment(&SegmentArgs { input, out, config }, &gw)?);
        }
        Command::Annotate { input, segments, template, examples, profile, out, partial_out } => {
            let gw = gateway(Some(&profile), None)?;
            print_summary(&annotate(&AnnotateArgs { input, segments, template, examples, out, partial_out }, &gw)?);
        }
        Command::Selfimprove { command } => match command {
            SelfImproveCommand::Pairs { t, n, outcomes } => {
                let gw = gateway(Some(&t.profile), None)?;
                let a = PairsArgs { input: t.input, segments: t.segments, n, out: t.out, outcomes };
                print_summary(&pairs(&a, &gw)?);
            }
            SelfImproveCommand::Sample { t, n, score } => {
                let gw = gateway(Some(&t.profile), None)?;
                let a = SampleArgs { input: t.input, segments: t.segments, n, score, out: t.out };
                print_summary(&sample(&a, &gw)?);
            }
            SelfImproveCommand::Sft { mode, out, input, segments, gens } => {
                print_summary(&sft(&SftArgs { mode, input, segments, gens, out })?);
            }
        },
        Command::Eval { command } => match command {
            EvalCommand::Score { t, k, resume } => {
                let gw = gateway(Some(&t.profile), None)?;
                let a = ScoreArgs { input: t.input, segments: t.segments, k, out: t.out, resume };
                print_summary(&eval_score(&a, &gw)?);
            }
            EvalCommand::Report { scores, baseline, out, alpha, bins } => {
                let systems = parse_systems(&scores)?;
                print_summary(&eval_report(&ReportArgs { systems, baseline, alpha, bins, out: out.clone() })?);
                let stem = report_stem(&out);
                let mut txt = stem.into_os_string();
                txt.push(".txt");
                if let Ok(table) = std::fs::read_to_string(&txt) {
                    print!("{table}");
                }
            }
        },
        Command::Stats { input, out } => {
            print!("{}", stats(&input, out.as_deref())?);
        }
        Command::Run { config, stages } => {
            let cfg = config::PipelineConfig::load(&config)?;
            print_summary(&config::run_pipeline(&cfg, &stages)?);
        }
        Command::Serve { profile, addr, token_env } => {
            let token = match token_env {
                Some(var) => Some(
                    std::env::var(&var).map_err(|_| CliError::Usage(format!("environment variable {var} is not set")))?,
                ),
                None => None,
            };
            serve::serve_blocking(&profile, &addr, token)?;
        }
    }
    Ok(())
}
