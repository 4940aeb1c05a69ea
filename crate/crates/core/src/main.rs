//! `appmarket` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration violation,
//! 3 unreadable dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use appmarket::config::{merge_pairs, parse_override, parse_pairs, ConfigError, MarketConfig};
use appmarket::ingest::{write_reviews_jsonl, write_rejects_jsonl, InputFormat, ParseOutcome};
use appmarket::metrics::window_series;
use appmarket::pipeline::{
    self, analysis_span, catalog_for, load_inputs, market_correlated_events, market_correlations,
    market_events, market_metrics, score_catalog, PipelineError,
};
use appmarket::report::{self, ReportError};
use appmarket::summarize::run_summaries;
use appmarket::synth::{generate, Scenario, SynthError};

#[derive(Parser, Debug)]
#[command(name = "appmarket", version, about = "Event and correlated-event detection over app-store reviews")]
struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Input format for every input file.
    #[arg(long, global = true)]
    format: Option<FormatArg>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => InputFormat::Jsonl,
            FormatArg::Csv => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Ten noisy apps with a shared count spike.
    Desk,
    /// Ten noisy apps, no injections.
    Null,
    /// Ten constant apps.
    Flat,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse inputs and report rejects and per-app coverage.
    IngestCheck { inputs: Vec<PathBuf> },
    /// Weekly and daily metric tables.
    Metrics { inputs: Vec<PathBuf> },
    /// Metric tables plus events.
    Detect { inputs: Vec<PathBuf> },
    /// Metric tables, events and pairwise correlations.
    Correlate { inputs: Vec<PathBuf> },
    /// Correlated events from saved `events.csv` and `correlations.csv`.
    Ce {
        /// Directory holding the saved tables; defaults to the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Everything up to summary prompts; summaries too when a summarizer is configured.
    SummarizePrep { inputs: Vec<PathBuf> },
    /// Generate a synthetic market with ground-truth labels.
    Synth {
        /// Scenario JSON; overrides --preset.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// The full pipeline.
    Run { inputs: Vec<PathBuf> },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read config {0}: {1}")]
    ConfigFile(String, std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ConfigFile(..) | CliError::Pipeline(PipelineError::Config(_)) => 2,
            CliError::Pipeline(PipelineError::Dataset { .. }) => 3,
            _ => 1,
        }
    }
}

fn load_config(cli: &Cli) -> Result<MarketConfig, CliError> {
    let base = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::ConfigFile(path.display().to_string(), e))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    if let Some(format) = cli.format {
        overrides.push(("format".into(), InputFormat::from(format).to_string()));
    }
    Ok(MarketConfig::from_pairs(merge_pairs(base, overrides))?)
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| ReportError::Io { path: dir.display().to_string(), source }.into())
}

fn inputs_for(cli: &Cli, config: &MarketConfig, inputs: &[PathBuf]) -> Result<ParseOutcome, CliError> {
    Ok(load_inputs(inputs, cli.format.map(Into::into), config.format, &config.scales)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Metrics,
    Detect,
    Correlate,
}

fn run_stages(cli: &Cli, config: &MarketConfig, inputs: &[PathBuf], last: Stage) -> Result<(), CliError> {
    let parsed = inputs_for(cli, config, inputs)?;
    let scorer = pipeline::scorer_for(config)?;
    let catalog = catalog_for(parsed.reviews, config);
    let span = analysis_span(config, &catalog);
    let scored = score_catalog(&catalog, &config.scales, &scorer);
    let (weekly, daily) = span.map_or((Vec::new(), Vec::new()), |(start, end)| {
        (window_series(start, end, config.w_e), window_series(start, end, config.w_c))
    });
    let out = &config.out;
    create_out(out)?;
    report::write_file(out, report::REJECTS_FILE, |w| Ok(write_rejects_jsonl(&parsed.rejects, w)?))?;
    let metrics = market_metrics(&scored, &weekly);
    let daily_metrics = market_metrics(&scored, &daily);
    report::write_file(out, report::METRICS_FILE, |w| report::write_metrics_csv(&metrics, w))?;
    report::write_file(out, report::DAILY_METRICS_FILE, |w| report::write_metrics_csv(&daily_metrics, w))?;
    if last >= Stage::Detect {
        let t_omega = span.map_or(chrono::NaiveDate::MIN, |(s, _)| s);
        let events = market_events(&metrics, t_omega, &config.detector());
        report::write_file(out, report::EVENTS_FILE, |w| report::write_events_csv(&events, w))?;
        println!("{} events", events.iter().filter(|e| e.is_event()).count());
    }
    if last >= Stage::Correlate {
        let correlations = market_correlations(&daily_metrics, &daily, &config.correlation());
        report::write_file(out, report::CORRELATIONS_FILE, |w| report::write_correlations_csv(&correlations, w))?;
        println!("{} correlations", correlations.iter().filter(|c| c.c != 0).count());
    }
    println!("{} apps, {} weekly windows -> {}", scored.len(), weekly.len(), out.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let out = config.out.clone();
    match &cli.command {
        Command::IngestCheck { inputs } => {
            let parsed = inputs_for(cli, &config, inputs)?;
            let n_ok = parsed.reviews.len();
            let catalog = appmarket::ingest::build_catalog(parsed.reviews, config.floor);
            create_out(&out)?;
            report::write_file(&out, report::REJECTS_FILE, |w| Ok(write_rejects_jsonl(&parsed.rejects, w)?))?;
            report::write_file(&out, report::CATALOG_FILE, |w| report::write_json(&catalog, w))?;
            println!(
                "{n_ok} reviews accepted, {} rejected, {} duplicates, {} apps ({} insufficient)",
                parsed.rejects.len(),
                catalog.duplicates.len(),
                catalog.coverage.len(),
                catalog.insufficient_apps().len()
            );
        }
        Command::Metrics { inputs } => run_stages(cli, &config, inputs, Stage::Metrics)?,
        Command::Detect { inputs } => run_stages(cli, &config, inputs, Stage::Detect)?,
        Command::Correlate { inputs } => run_stages(cli, &config, inputs, Stage::Correlate)?,
        Command::Ce { from } => {
            let dir = from.as_deref().unwrap_or(&out);
            let events = report::read_events_csv(report::open_file(dir, report::EVENTS_FILE)?)?;
            let correlations = report::read_correlations_csv(report::open_file(dir, report::CORRELATIONS_FILE)?)?;
            let (runs, ces) = market_correlated_events(&events, &correlations, config.w_e);
            create_out(&out)?;
            report::write_file(&out, report::RUNS_FILE, |w| report::write_json(&runs, w))?;
            report::write_file(&out, report::CORRELATED_EVENTS_FILE, |w| report::write_json(&ces, w))?;
            println!("{} correlated events from {} runs", ces.len(), runs.len());
        }
        Command::SummarizePrep { inputs } => {
            let parsed = inputs_for(cli, &config, inputs)?;
            let scorer = pipeline::scorer_for(&config)?;
            let template = pipeline::template_for(&config)?;
            let bundle = pipeline::run_pipeline(&config, parsed, &scorer, &template, None);
            let prompts = bundle.prompts;
            create_out(&out)?;
            report::write_file(&out, report::SUMMARY_REQUESTS_FILE, |w| report::write_json(&prompts, w))?;
            if let Some(client) = pipeline::summarizer_for(&config) {
                let summaries = run_summaries(&prompts, client.as_ref(), &pipeline::retry_policy(&config));
                report::write_file(&out, report::SUMMARIES_FILE, |w| report::write_json(&summaries, w))?;
            }
            println!("{} summary prompts -> {}", prompts.len(), out.display());
        }
        Command::Synth { scenario, preset } => {
            let scenario = match scenario {
                Some(path) => Scenario::from_json(&std::fs::read_to_string(path).map_err(SynthError::from)?)?,
                None => match preset {
                    Preset::Desk => Scenario::desk_scale(config.seed),
                    Preset::Null => Scenario::null_market(config.seed, 10, 40.0),
                    Preset::Flat => Scenario::flat(config.seed),
                },
            };
            let output = generate(&scenario)?;
            create_out(&out)?;
            report::write_file(&out, "reviews.jsonl", |w| Ok(write_reviews_jsonl(&output.reviews, w)?))?;
            report::write_file(&out, "labels.json", |w| report::write_json(&output.labels, w))?;
            report::write_file(&out, "scenario.json", |w| report::write_json(&scenario, w))?;
            let window_config = format!(
                "# analysis span of the generated market\nt_omega = {}\nt_end = {}\nw_e = {}\n",
                scenario.start,
                scenario.end(),
                scenario.window_days
            );
            std::fs::write(out.join("synth.conf"), window_config)
                .map_err(|source| ReportError::Io { path: "synth.conf".into(), source })?;
            println!("{} reviews, {} labels -> {}", output.reviews.len(), output.labels.len(), out.display());
        }
        Command::Run { inputs } => {
            let parsed = inputs_for(cli, &config, inputs)?;
            let scorer = pipeline::scorer_for(&config)?;
            let template = pipeline::template_for(&config)?;
            let client = pipeline::summarizer_for(&config);
            let bundle = pipeline::run_pipeline(&config, parsed, &scorer, &template, client.as_deref());
            pipeline::write_bundle(&bundle, &out)?;
            println!(
                "{} apps: {} events, {} correlations, {} correlated events -> {}",
                bundle.catalog.reviews.len(),
                bundle.event_count(),
                bundle.correlation_count(),
                bundle.correlated_events.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
