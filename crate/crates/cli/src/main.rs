use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixinit_core::config::{ServiceConfig, CONFIG_ENV};
use mixinit_core::eval::{
    build_report, generate_candidates, make_pairings, read_ratings, write_pairing_sheet, CandidateSource,
    CandidateTable, HttpCoherenceScorer, PromptedSetup, ReportOptions,
};
use mixinit_core::retrieval::{pairs_from_corpus, sidecar_path};
use mixinit_core::{
    load_corpus, sample_eval_turns, BackendKind, DecodingParams, DistinctLevel, EvalInstance, HashingEmbedder,
    KnowledgeBase, Lexicon, SourceKey, TaskKind,
};
use mixinit_service::AppState;

#[derive(Parser)]
#[command(name = "mixinit", version, about = "Prompted mixed-initiative dialogue: evaluation tools and chat service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static evaluation pipeline.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the interactive chat service.
    Serve(ServeArgs),
    /// Knowledge-base maintenance.
    #[command(subcommand)]
    Kb(KbCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Draw evaluation turns from a corpus.
    Sample(SampleArgs),
    /// Produce candidate responses for each sampled turn.
    Generate(GenerateArgs),
    /// Build the pairwise rating sheet.
    Pair(PairArgs),
    /// Aggregate ratings and automatic metrics into a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    task: TaskArg,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output of `eval sample`.
    #[arg(long)]
    instances: PathBuf,
    /// Comma-separated: `gt`, `ft:<responses.json>`, `prompt`.
    #[arg(long, default_value = "gt,prompt")]
    sources: String,
    /// JSON backend description, e.g. `{"kind":"http_completion","endpoint":...}`.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// JSON decoding parameters; defaults apply to missing fields.
    #[arg(long)]
    decoding: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// Sources to compare pairwise; defaults to all in the table.
    #[arg(long)]
    sources: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    ratings: PathBuf,
    /// Optional coherence-model endpoint.
    #[arg(long)]
    coherence_endpoint: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = LevelArg::Corpus)]
    distinct_level: LevelArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = CONFIG_ENV)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Mine question/answer pairs from a P4G corpus and embed them.
    Build(KbBuildArgs),
}

#[derive(Args)]
struct KbBuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the embedder configured here instead of the hashing embedder.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct TaskArg(TaskKind);

impl FromStr for TaskArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::from_str(s).map(TaskArg).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Corpus,
    ResponseMean,
}

impl From<LevelArg> for DistinctLevel {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Corpus => DistinctLevel::Corpus,
            LevelArg::ResponseMean => DistinctLevel::ResponseMean,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    Ok(match path {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::default(),
    })
}

fn eval_sample(args: SampleArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, args.task.0)?;
    let instances = sample_eval_turns(&corpus, args.n, args.seed)?;
    write_text(&args.out, &serde_json::to_string_pretty(&instances)?)?;
    tracing::info!(n = instances.len(), out = %args.out.display(), "sampled evaluation turns");
    Ok(())
}

fn eval_generate(args: GenerateArgs) -> Result<()> {
    let instances: Vec<EvalInstance> = read_json(&args.instances)?;
    let sources = CandidateSource::parse_list(&args.sources)?;
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let decoding: DecodingParams = match &args.decoding {
        Some(p) => read_json(p)?,
        None => DecodingParams::default(),
    };
    let backend = match &args.backend {
        Some(p) => Some(read_json::<BackendKind>(p)?.build()),
        None => None,
    };
    if sources.contains(&CandidateSource::Prompted) && backend.is_none() {
        bail!("the prompt source needs --backend");
    }
    let setup = backend.as_deref().map(|backend| PromptedSetup {
        backend,
        lexicon: &lexicon,
        decoding: &decoding,
    });
    let table = generate_candidates(&instances, &sources, setup.as_ref())?;
    let failed = table.cells.values().flat_map(|row| row.values()).filter(|c| c.error.is_some()).count();
    if failed > 0 {
        tracing::warn!(failed, "some candidates failed; see the error fields");
    }
    write_text(&args.out, &serde_json::to_string_pretty(&table)?)?;
    Ok(())
}

fn eval_pair(args: PairArgs) -> Result<()> {
    let table = CandidateTable::load(&args.candidates)?;
    let sources: Vec<SourceKey> = match &args.sources {
        Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?,
        None => table.sources.clone(),
    };
    // Only instances where every compared source produced a response.
    let ids: Vec<String> = table
        .instances
        .iter()
        .filter(|i| sources.iter().all(|s| table.get(&i.id, *s).is_some_and(|c| c.text.is_some())))
        .map(|i| i.id.clone())
        .collect();
    if ids.len() < table.instances.len() {
        tracing::warn!(skipped = table.instances.len() - ids.len(), "instances with failed candidates left out");
    }
    let jobs = make_pairings(&ids, &sources, args.seed)?;
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    write_pairing_sheet(&mut out, &jobs, &table, &lexicon)?;
    out.flush()?;
    tracing::info!(jobs = jobs.len(), out = %args.out.display(), "wrote pairing sheet");
    Ok(())
}

fn eval_report(args: ReportArgs) -> Result<()> {
    let table = CandidateTable::load(&args.candidates)?;
    let file = File::open(&args.ratings).with_context(|| format!("opening {}", args.ratings.display()))?;
    let ratings = read_ratings(file)?;
    let scorer = args.coherence_endpoint.map(HttpCoherenceScorer::new);
    let options = ReportOptions {
        alpha: args.alpha,
        distinct_level: args.distinct_level.into(),
    };
    let report = build_report(
        &table,
        &ratings,
        scorer.as_ref().map(|s| s as &dyn mixinit_core::eval::CoherenceScorer),
        &options,
    )?;
    write_text(&args.out, &report.to_json_pretty())?;
    Ok(())
}

fn kb_build(args: KbBuildArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, TaskKind::P4g)?;
    let pairs = pairs_from_corpus(&corpus);
    if pairs.is_empty() {
        bail!("no question/answer pairs found in {}", args.corpus.display());
    }
    write_text(&args.out, &serde_json::to_string_pretty(&pairs)?)?;
    let embedder = match &args.config {
        Some(p) => ServiceConfig::load(p)?.build_embedder(),
        None => std::sync::Arc::new(HashingEmbedder::default()),
    };
    // Loading computes every embedding and writes the sidecar cache.
    let kb = KnowledgeBase::load(&args.out, embedder.as_ref())?;
    tracing::info!(entries = kb.len(), cache = %sidecar_path(&args.out).display(), "knowledge base built");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig::load(&args.config)?;
    // The completion client is blocking, so build it before the runtime.
    let state = AppState::from_config(&config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        let shutdown = async {
            tokio::signal::ctrl_c().await.ok();
            tracing::info!("shutting down");
        };
        mixinit_service::serve(listener, state, shutdown).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval(EvalCommand::Sample(a)) => eval_sample(a),
        Command::Eval(EvalCommand::Generate(a)) => eval_generate(a),
        Command::Eval(EvalCommand::Pair(a)) => eval_pair(a),
        Command::Eval(EvalCommand::Report(a)) => eval_report(a),
        Command::Serve(a) => serve(a),
        Command::Kb(KbCommand::Build(a)) => kb_build(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
