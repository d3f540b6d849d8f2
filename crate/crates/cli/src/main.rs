//! Command-line driver: per-stage subcommands, the full pipeline and the
//! synthetic corpus generator.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use termdisc::clustering::Linkage;
use termdisc::discovery::Scope;
use termdisc::pipeline::{self, PipelineConfig, Recipe, Stage};
use termdisc::synth::{self, SynthConfig};
use termdisc::Error;

#[derive(Parser)]
#[command(name = "termdisc", version, about = "Unsupervised spoken term discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge boundary hypotheses and pool segment features.
    Segment(StageArgs),
    /// Cluster segments into subword units.
    Cluster(StageArgs),
    /// Turn segment labels into initial pseudo transcriptions.
    Label(StageArgs),
    /// Refine transcriptions by alternating training and decoding.
    Iterate(StageArgs),
    /// Derive per-unit speechiness weights from voice activity.
    Weights(StageArgs),
    /// Harvest repeated unit sequences and group them into keyword clusters.
    Discover(StageArgs),
    /// Score keyword clusters against reference transcripts.
    Eval(StageArgs),
    /// Split recordings into sessions and build the TF-IDF matrix.
    Tfidf(StageArgs),
    /// Train skip-gram embeddings over keyword cluster streams.
    Embed(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
    /// Write a seeded synthetic corpus with planted units and keywords.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON pipeline config; relative paths resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Boundary source directory; repeat for several sources.
    #[arg(long = "boundaries")]
    boundaries: Vec<PathBuf>,
    #[arg(long)]
    vad: Option<PathBuf>,
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// kmeans, ahc, gmm, bgmm, density or hybrid.
    #[arg(long)]
    method: Option<Recipe>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    linkage: Option<Linkage>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    min_dur: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    /// within-recording or cross-recording.
    #[arg(long)]
    scope: Option<Scope>,
    #[arg(long)]
    window_minutes: Option<f64>,
    #[arg(long)]
    shift_minutes: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    recordings: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    keywords: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
}

fn usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
    })
}

fn resolve(args: &StageArgs) -> anyhow::Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let seed = args
                .seed
                .ok_or_else(|| Error::Config(vec!["seed: required (pass --seed or a config file)".into()]))?;
            PipelineConfig::new(seed)
        }
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    let p = &mut config.paths;
    if args.workdir.is_some() {
        p.workdir = args.workdir.clone();
    }
    if args.features.is_some() {
        p.features = args.features.clone();
    }
    if !args.boundaries.is_empty() {
        p.boundaries = args.boundaries.clone();
    }
    if args.vad.is_some() {
        p.vad = args.vad.clone();
    }
    if args.transcripts.is_some() {
        p.transcripts = args.transcripts.clone();
    }
    set!(args.seed, config.seed);
    set!(args.workers, config.workers);
    set!(args.method, config.clustering.method);
    set!(args.k, config.clustering.k);
    set!(args.k_max, config.clustering.k_max);
    set!(args.linkage, config.clustering.linkage);
    set!(args.iterations, config.asm.iterations);
    set!(args.states, config.asm.states);
    set!(args.min_dur, config.asm.min_dur);
    set!(args.radius, config.discovery.radius);
    set!(args.margin, config.discovery.margin);
    set!(args.min_len, config.discovery.min_len);
    set!(args.scope, config.discovery.scope);
    set!(args.window_minutes, config.topics.window_minutes);
    set!(args.shift_minutes, config.topics.shift_minutes);
    set!(args.dim, config.topics.dim);
    config.validate()?;
    Ok(config)
}

fn run_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(vec![e.to_string()]))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.recordings {
        cfg.recordings = v;
    }
    if let Some(v) = args.units {
        cfg.units = v;
    }
    if let Some(v) = args.keywords {
        cfg.keywords = v;
    }
    if let Some(v) = args.separation {
        cfg.separation = v;
    }
    cfg.validate()?;
    let corpus = synth::generate(&cfg)?;
    synth::write_corpus(&corpus, &cfg, Path::new(&args.out))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (stage, args) = match cli.command {
        Command::Synth(args) => return run_synth(&args),
        Command::Pipeline(args) => return Ok(pipeline::run_pipeline(&resolve(&args)?)?),
        Command::Segment(a) => (Stage::Segment, a),
        Command::Cluster(a) => (Stage::Cluster, a),
        Command::Label(a) => (Stage::Label, a),
        Command::Iterate(a) => (Stage::Iterate, a),
        Command::Weights(a) => (Stage::Weights, a),
        Command::Discover(a) => (Stage::Discover, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Tfidf(a) => (Stage::Tfidf, a),
        Command::Embed(a) => (Stage::Embed, a),
    };
    pipeline::run_stage(&resolve(&args)?, stage)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if usage_error(&err) { 2 } else { 1 })
        }
    }
}
