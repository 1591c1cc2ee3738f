//! The `codesynth` command line.
//!
//! Exit codes: 0 success, 1 the command ran but its success condition does
//! not hold (no records, validation violations, unavailable embedder),
//! 2 invalid configuration or arguments, 3 output directory already exists.

mod gallery;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::dataset::{validate_shard, DatasetShard, ShardError};
use crate::diversity::{compute_report, EmbedProvider, HttpEmbedder, MockEmbedder};
use crate::instruction::EmitStyle;
use crate::pipeline::job::JobDeps;
use crate::pipeline::{
    run_batch, run_point_batch, BatchError, BatchReport, CategoryChoice, ConfigError, RunConfig,
};
use crate::render::fixture::{self, FixtureError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_OUTPUT_EXISTS: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "codesynth",
    version,
    about = "Code-guided synthetic text-rich image datasets"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a shard for a text query.
    Generate(GenerateArgs),
    /// Derive a pointing shard from an existing shard.
    Point(PointArgs),
    /// Check a shard; prints one JSON line per violation.
    Validate { shard: PathBuf },
    /// Print shard statistics.
    Stats {
        shard: PathBuf,
        /// Print the statistics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Image and text diversity of a shard.
    Diversity(DiversityArgs),
    /// Write a static HTML page of sampled records.
    Gallery(GalleryArgs),
    /// Render a fixture-DSL source file to PNG.
    #[command(hide = true)]
    RenderFixture { source: PathBuf, output: PathBuf },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Serve every LLM stage from scripted fixtures (no network, no credentials).
    #[arg(long)]
    pub mock_provider: bool,
    /// Render every artifact with the built-in fixture renderer.
    #[arg(long)]
    pub fixture_renderer: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Keep the response cache in memory only.
    #[arg(long, conflicts_with = "cache_dir")]
    pub no_cache: bool,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub personas: Option<PathBuf>,
    /// Render timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Training rows to emit: dual, cot or short-answer.
    #[arg(long)]
    pub emit: Option<EmitStyle>,
    /// Print the full batch report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub query: Option<String>,
    /// A category name or `auto`.
    #[arg(long)]
    pub category: Option<CategoryChoice>,
    #[arg(long)]
    pub count: Option<u32>,
    #[arg(long)]
    pub num_topics: Option<usize>,
    /// Keep records with duplicate code.
    #[arg(long)]
    pub no_dedup: bool,
    /// Ask the topic model for a category when no keyword matches.
    #[arg(long)]
    pub llm_classifier: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct PointArgs {
    /// Source shard.
    #[arg(long)]
    pub from: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    pub shard: PathBuf,
    /// Use the deterministic mock embedder.
    #[arg(long)]
    pub mock_provider: bool,
    /// Embedding endpoint; defaults to $CODESYNTH_EMBEDDER_URL.
    #[arg(long)]
    pub embedder_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GalleryArgs {
    pub shard: PathBuf,
    /// Output HTML file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failed command: message for stderr plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<BatchError> for Failure {
    fn from(e: BatchError) -> Self {
        let code = match &e {
            BatchError::Shard(ShardError::OutputExists(_)) => EXIT_OUTPUT_EXISTS,
            BatchError::Select(_) => EXIT_CONFIG,
            _ => EXIT_FAILED,
        };
        if let BatchError::AllJobsFailed { report, .. } = &e {
            print_summary(report);
        }
        Failure::new(code, e)
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("CODESYNTH_LOG")
        .format_timestamp(None)
        .try_init();
    match run(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Point(args) => cmd_point(args),
        Command::Validate { shard } => cmd_validate(&shard),
        Command::Stats { shard, json } => cmd_stats(&shard, json),
        Command::Diversity(args) => cmd_diversity(args),
        Command::Gallery(args) => {
            gallery::cmd_gallery(&args.shard, &args.out, args.sample, args.seed)
                .map_err(|e| Failure::new(EXIT_FAILED, e))
        }
        Command::RenderFixture { source, output } => match fixture::execute(&source, &output) {
            Ok(()) => Ok(()),
            Err(
                e @ (FixtureError::Syntax { .. }
                | FixtureError::MissingCanvas
                | FixtureError::CanvasSize(..)),
            ) => Err(Failure::new(EXIT_CONFIG, e)),
            Err(e) => Err(Failure::new(EXIT_FAILED, e)),
        },
    }
}

fn base_config(run: &RunArgs) -> Result<RunConfig, ConfigError> {
    let mut c = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = run.seed {
        c.seed = v;
    }
    if let Some(v) = run.workers {
        c.workers = v;
    }
    if let Some(v) = &run.out {
        c.out_dir = Some(v.clone());
    }
    if let Some(v) = &run.cache_dir {
        c.provider.cache_dir = Some(v.clone());
    }
    if run.no_cache {
        c.provider.cache_dir = None;
    }
    if let Some(v) = &run.registry {
        c.registry = Some(v.clone());
    }
    if let Some(v) = &run.personas {
        c.personas = Some(v.clone());
    }
    if let Some(v) = run.timeout {
        c.sandbox.timeout_secs = v;
    }
    if let Some(v) = run.max_attempts {
        c.max_attempts = v;
    }
    if let Some(v) = run.emit {
        c.emit = v;
    }
    if run.mock_provider {
        c.use_mock_provider();
    }
    if run.fixture_renderer {
        c.sandbox.fixture_renderer = true;
    }
    if c.sandbox.fixture_renderer
        && c.sandbox.fixture_program.is_none()
        && std::env::var_os("CODESYNTH_FIXTURE_BIN").is_none()
    {
        c.sandbox.fixture_program = std::env::current_exe().ok();
    }
    Ok(c)
}

fn out_dir(c: &RunConfig) -> Result<PathBuf, ConfigError> {
    c.out_dir
        .clone()
        .ok_or_else(|| ConfigError::Invalid("an output directory is required (--out)".into()))
}

fn print_summary(r: &BatchReport) {
    if let (Some(category), Some(resolution)) = (r.category, r.resolution) {
        println!("category     {category} ({resolution:?})");
    }
    for a in &r.allocations {
        println!("  {:<28} {}", a.pipeline_id, a.count);
    }
    println!("jobs         {}", r.jobs);
    println!("succeeded    {}", r.succeeded);
    println!("failed       {}", r.failed);
    for (stage, n) in &r.failures_by_stage {
        println!("  {stage:<28} {n}");
    }
    println!("deduplicated {}", r.dedup_dropped);
    println!("records      {}", r.records);
    println!("qa triplets  {}", r.qa_triplets);
    println!(
        "llm calls    {} ({} cached, rate {:.3})",
        r.llm_calls, r.llm_cache_hits, r.cache_hit_rate
    );
}

fn emit_report(r: &BatchReport, json: bool) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(r).expect("report serializes")
        );
    } else {
        print_summary(r);
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut c = base_config(&args.run)?;
    if let Some(q) = args.query {
        c.query = Some(q);
    }
    if let Some(v) = args.category {
        c.category = v;
    }
    if let Some(v) = args.count {
        c.count = v;
    }
    if let Some(v) = args.num_topics {
        c.num_topics = v;
    }
    if args.no_dedup {
        c.dedup = false;
    }
    if args.llm_classifier {
        c.llm_classifier = true;
    }
    c.validate()?;
    let query = c.query()?;
    let out = out_dir(&c)?;
    let registry = c.registry()?;
    let personas = c.personas()?;
    let gateway = c.gateway()?;
    let renderer = c.renderer();
    let settings = c.job_settings();
    let deps = JobDeps {
        registry: &registry,
        personas: &personas,
        gateway: &gateway,
        renderer: &renderer,
        settings: &settings,
    };
    let (shard, report) = run_batch(&query, &deps, &c.batch_options(&out))?;
    emit_report(&report, args.run.json);
    eprintln!(
        "wrote {} record(s) to {}",
        shard.records.len(),
        shard.dir.display()
    );
    Ok(())
}

fn cmd_point(args: PointArgs) -> Result<(), Failure> {
    let c = base_config(&args.run)?;
    c.validate()?;
    let out = out_dir(&c)?;
    if !args.from.join(crate::dataset::MANIFEST_FILE).is_file() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{} is not a shard (no manifest)", args.from.display()),
        ));
    }
    let registry = c.registry()?;
    let personas = c.personas()?;
    let gateway = c.gateway()?;
    let renderer = c.renderer();
    let settings = c.job_settings();
    let deps = JobDeps {
        registry: &registry,
        personas: &personas,
        gateway: &gateway,
        renderer: &renderer,
        settings: &settings,
    };
    let (shard, report) = run_point_batch(&args.from, c.seed, &deps, &c.batch_options(&out))?;
    emit_report(&report, args.run.json);
    eprintln!(
        "wrote {} pointing record(s) to {}",
        shard.records.len(),
        shard.dir.display()
    );
    Ok(())
}

fn cmd_validate(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{} is not a directory", dir.display()),
        ));
    }
    let violations = validate_shard(dir);
    for v in &violations {
        let line = serde_json::json!({
            "kind": v.kind.as_str(),
            "record": v.record_id,
            "detail": v.detail,
        });
        println!("{line}");
    }
    if violations.is_empty() {
        eprintln!("{}: ok", dir.display());
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_FAILED,
            format!("{} violation(s)", violations.len()),
        ))
    }
}

fn open_shard(dir: &Path) -> Result<DatasetShard, Failure> {
    DatasetShard::open(dir).map_err(|e| Failure::new(EXIT_FAILED, e))
}

fn cmd_stats(dir: &Path, json: bool) -> Result<(), Failure> {
    let shard = open_shard(dir)?;
    let s = &shard.stats;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(s).expect("stats serialize")
        );
        return Ok(());
    }
    println!("{:<24} {:>8}", "category", "records");
    for (cat, n) in &s.per_category {
        println!("{:<24} {:>8}", cat, n);
    }
    println!("{:<24} {:>8}", "total", s.records);
    println!();
    println!("{:<32} {:>8}", "pipeline", "records");
    for (p, n) in &s.per_pipeline {
        println!("{:<32} {:>8}", p, n);
    }
    println!();
    println!("qa triplets       {}", s.qa_triplets);
    println!("qa per image      {:.2}", s.qa_per_image_mean);
    println!("pointing records  {}", s.pointing_records);
    println!("training rows     {}", s.training_rows);
    for (stage, n) in &s.failures_by_stage {
        println!("failed at {stage:<8} {n}");
    }
    if let Some(rate) = s.cache_hit_rate {
        println!("cache hit rate    {rate:.3}");
    }
    Ok(())
}

fn cmd_diversity(args: DiversityArgs) -> Result<(), Failure> {
    let shard = open_shard(&args.shard)?;
    let embedder: Box<dyn EmbedProvider> = if args.mock_provider {
        Box::new(MockEmbedder)
    } else {
        let url = args
            .embedder_url
            .or_else(|| std::env::var("CODESYNTH_EMBEDDER_URL").ok())
            .ok_or_else(|| {
                Failure::new(
                    EXIT_CONFIG,
                    "no embedder: pass --embedder-url or --mock-provider",
                )
            })?;
        Box::new(HttpEmbedder::new(url))
    };
    let report = compute_report(&shard, embedder.as_ref(), args.sample, args.seed)
        .map_err(|e| Failure::new(EXIT_FAILED, e))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{text}\n"))
            .map_err(|e| Failure::new(EXIT_FAILED, format!("{}: {e}", path.display())))?;
    }
    println!("{text}");
    Ok(())
}
