//! `lawluo`: service, terminal consultations, training, evaluation and corpus checks.
//!
//! Machine-readable output goes to stdout as JSON or JSONL; progress and
//! conversation text go to stderr. Exit status is 0 on success, 1 on a usage
//! error and 2 on a runtime failure.

mod consult;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lawluo_core::backend::mock::MockChat;
use lawluo_core::backend::wire::WireClient;
use lawluo_core::backend::{AgentBackends, ChatBackend, EmbeddingBackend};
use lawluo_core::boss::{self, RmTrainConfig};
use lawluo_core::case_bank::{self, CaseBank};
use lawluo_core::datasets::{self, Manifest};
use lawluo_core::eval::{self, JudgePrompts, PairwiseItem, PairwiseResult, Winner};
use lawluo_core::model::{AblationConfig, DomainTaxonomy, TolcTrigger, Turn};
use lawluo_core::orchestrator::{self, Agents, ArtifactPaths, Orchestrator, SessionStore, SystemClock};
use lawluo_core::receptionist::{self, Receptionist, TrainConfig, DEFAULT_TAU};
use lawluo_core::Error;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "lawluo", version, about = "Multi-agent legal consultation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Hold a consultation in the terminal, or replay one from a script.
    Consult(consult::ConsultArgs),
    /// Ingest a case corpus and build its retrieval index.
    Ingest(IngestArgs),
    /// Train the receptionist or the reward model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Judge responses pairwise or score lawyer turns.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Check dialogue corpus files.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Deterministic offline backend.
    Mock,
    /// OpenAI-compatible HTTP endpoint configured through `LAWLUO_*` variables.
    Wire,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Model backend.
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    /// Directory holding sessions, trained models and the case index.
    #[arg(long, env = orchestrator::DATA_DIR_ENV, default_value = orchestrator::DEFAULT_DATA_DIR)]
    pub data_dir: PathBuf,
}

impl BackendArgs {
    pub fn backends(&self) -> lawluo_core::Result<AgentBackends> {
        match self.backend {
            BackendKind::Mock => Ok(AgentBackends::mock()),
            BackendKind::Wire => {
                let client = Arc::new(WireClient::from_env()?);
                Ok(AgentBackends::uniform(client.clone(), client))
            }
        }
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Address to listen on.
    #[arg(long, env = lawluo_server::LISTEN_ENV, default_value = lawluo_server::DEFAULT_LISTEN)]
    listen: SocketAddr,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// JSONL corpus, one case per line.
    #[arg(long)]
    cases: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    /// Fit the domain projection and centroids from labeled questions.
    Receptionist(TrainReceptionistArgs),
    /// Fit the response reward model from labeled outputs.
    Rm(TrainRmArgs),
}

#[derive(Debug, Args)]
struct TrainReceptionistArgs {
    /// JSONL of `{text, domain_id}`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Triplet margin.
    #[arg(long, default_value_t = receptionist::DEFAULT_ALPHA)]
    alpha: f64,
    /// Cosine floor below which a query goes to "others".
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Seed for triplet mining.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
struct TrainRmArgs {
    /// JSONL of `{text, label}` with label 0 or 1.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = RmTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = RmTrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Win rate of response A over response B.
    Pairwise(EvalPairwiseArgs),
    /// Per-turn scores for the lawyer replies of a transcript.
    Turns(EvalTurnsArgs),
}

#[derive(Debug, Args)]
struct JudgeArgs {
    /// Judge backend.
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    judge: BackendKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl JudgeArgs {
    fn backend(&self) -> lawluo_core::Result<(Arc<dyn ChatBackend>, String)> {
        match self.judge {
            BackendKind::Mock => Ok((Arc::new(MockChat::default()), "mock".to_string())),
            BackendKind::Wire => {
                let client = WireClient::from_env()?;
                let tag = client.tag();
                Ok((Arc::new(client), tag))
            }
        }
    }
}

#[derive(Debug, Args)]
struct EvalPairwiseArgs {
    /// JSONL of `{question, response_a, response_b}`. Lines that already carry
    /// a `winner` are counted as judged.
    #[arg(long)]
    input: PathBuf,
    /// Also write every judged result here as JSONL.
    #[arg(long)]
    results: Option<PathBuf>,
    #[command(flatten)]
    judge: JudgeArgs,
}

#[derive(Debug, Args)]
struct EvalTurnsArgs {
    /// A JSON array of turns, or `consult` output with a `transcript` field.
    #[arg(long)]
    transcript: PathBuf,
    #[command(flatten)]
    judge: JudgeArgs,
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Per-line verdicts for each file, one JSON object per file.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Record and turn counts per category.
    Stats {
        paths: Vec<PathBuf>,
        /// Manifest assigning a category to each file; its files are added to `paths`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Flags mirroring [`AblationConfig`].
#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Skip domain routing; every session goes to the general lawyer.
    #[arg(long)]
    pub no_receptionist: bool,
    /// Use the plain persona instead of the domain persona.
    #[arg(long)]
    pub no_role_enhancement: bool,
    /// Never ask clarifying questions.
    #[arg(long)]
    pub no_tolc: bool,
    /// Skip reward-model selection and report review.
    #[arg(long)]
    pub no_boss: bool,
    /// When to clarify: `always`, `never`, or `short:N` for messages of at most N tokens.
    #[arg(long, value_parser = parse_trigger)]
    pub tolc_trigger: Option<TolcTrigger>,
    /// Lawyer candidates generated per turn.
    #[arg(long)]
    pub candidates: Option<usize>,
}

impl AblationArgs {
    pub fn config(&self) -> AblationConfig {
        let base = AblationConfig::default();
        AblationConfig {
            receptionist_enabled: !self.no_receptionist,
            role_enhancement_enabled: !self.no_role_enhancement,
            tolc_enabled: !self.no_tolc,
            boss_enabled: !self.no_boss,
            tolc_trigger: self.tolc_trigger.unwrap_or(base.tolc_trigger),
            n_candidates: self.candidates.unwrap_or(base.n_candidates),
        }
    }
}

fn parse_trigger(s: &str) -> Result<TolcTrigger, String> {
    match s {
        "always" => Ok(TolcTrigger::Always),
        "never" => Ok(TolcTrigger::Never),
        _ => s
            .strip_prefix("short:")
            .and_then(|n| n.parse().ok())
            .map(|threshold| TolcTrigger::ShortQuery { threshold })
            .ok_or_else(|| format!("expected always, never or short:N, got {s:?}")),
    }
}

/// Failure of a subcommand, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
    /// The command ran but its input did not pass.
    Rejected(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(m) => Failure::Usage(m),
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io {
            path: PathBuf::from("<stdio>"),
            source: e,
        })
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "ConfigError",
        Error::Phase { .. } => "PhaseError",
        Error::Usage(_) => "UsageError",
        Error::Shape(_) => "ShapeError",
        Error::BackendUnavailable(_) => "BackendUnavailable",
        Error::Protocol(_) => "ProtocolError",
        Error::Generation { .. } => "GenerationError",
        Error::MissingClass { .. } => "MissingClassError",
        Error::ReportFormat { .. } => "ReportFormatError",
        Error::Judge { .. } => "JudgeError",
        Error::NotFound(_) => "NotFound",
        Error::Parse { .. } | Error::Json(_) => "ParseError",
        Error::Io { .. } => "IoError",
        Error::SimulatedCrash(_) => "SimulatedCrash",
    }
}

pub type CliResult = std::result::Result<(), Failure>;

/// Writes one JSON document to stdout.
pub fn emit<T: Serialize + ?Sized>(value: &T) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let outcome = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Consult(a) => consult::run(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(TrainCommand::Receptionist(a)) => train_receptionist(a),
        Command::Train(TrainCommand::Rm(a)) => train_rm(a),
        Command::Eval(EvalCommand::Pairwise(a)) => eval_pairwise(a),
        Command::Eval(EvalCommand::Turns(a)) => eval_turns(a),
        Command::Data(DataCommand::Validate { paths }) => data_validate(&paths),
        Command::Data(DataCommand::Stats { paths, manifest }) => data_stats(paths, manifest.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Rejected(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}: {e}", kind(&e));
            ExitCode::from(2)
        }
    }
}

fn serve(args: ServeArgs) -> CliResult {
    let backends = args.backend.backends()?;
    let agents = Agents::load(&args.backend.data_dir, &backends)?;
    let store = SessionStore::open(&args.backend.data_dir)?;
    for w in store.take_warnings() {
        tracing::warn!(?w, "recovered session log");
    }
    let orch = Orchestrator::new(store, Arc::new(agents), backends, Arc::new(SystemClock));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(lawluo_server::serve(args.listen, Arc::new(orch)))?;
    Ok(())
}

fn ingest(args: IngestArgs) -> CliResult {
    let backends = args.backend.backends()?;
    let bank = CaseBank::ingest(&args.cases)?;
    let index = case_bank::build_index(&bank, backends.case_embedder.as_ref())?;
    let paths = ArtifactPaths::new(&args.backend.data_dir);
    copy_atomic(&args.cases, &paths.cases)?;
    index.save(&paths.case_index)?;
    eprintln!("indexed {} cases into {}", bank.len(), paths.case_index.display());
    emit(&json!({
        "cases": bank.len(),
        "dimension": index.dimension,
        "backend_tag": index.backend_tag,
        "warnings": bank.warnings(),
        "index": paths.case_index,
    }))
}

fn copy_atomic(from: &Path, to: &Path) -> lawluo_core::Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| Error::Io { path: p, source }
    };
    let dir = to.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let tmp = dir.join(format!(".ingest-{}", std::process::id()));
    std::fs::copy(from, &tmp).map_err(io(from))?;
    std::fs::rename(&tmp, to).map_err(io(to))
}

fn train_receptionist(args: TrainReceptionistArgs) -> CliResult {
    let backends = args.backend.backends()?;
    let questions = receptionist::load_corpus(&args.corpus)?;
    let config = TrainConfig {
        alpha: args.alpha,
        lr: args.lr,
        epochs: args.epochs,
        output_dim: None,
        seed: args.seed,
    };
    let model = Receptionist::train(
        &questions,
        &DomainTaxonomy::default(),
        backends.receptionist.as_ref(),
        &config,
        args.tau,
    )?;
    let mut correct = 0;
    for q in &questions {
        if model.classify(&q.text, backends.receptionist.as_ref())?.id == q.domain_id {
            correct += 1;
        }
    }
    let path = ArtifactPaths::new(&args.backend.data_dir).receptionist;
    lawluo_core::write_json_atomic(&path, &model)?;
    let log = model.model.train_log();
    eprintln!("receptionist saved to {}", path.display());
    emit(&json!({
        "questions": questions.len(),
        "epochs": args.epochs,
        "initial_loss": log.first().map(|s| s.loss),
        "final_loss": log.last().map(|s| s.loss),
        "train_accuracy": correct as f64 / questions.len() as f64,
        "path": path,
    }))
}

fn train_rm(args: TrainRmArgs) -> CliResult {
    let backends = args.backend.backends()?;
    let labeled = boss::load_labels(&args.labels)?;
    let config = RmTrainConfig {
        lr: args.lr,
        epochs: args.epochs,
        seed: args.seed,
    };
    let model = boss::train_rm(&labeled, backends.boss.as_ref(), &config)?;
    let path = ArtifactPaths::new(&args.backend.data_dir).reward_model;
    model.save(&path)?;
    let log = model.train_log();
    eprintln!("reward model saved to {}", path.display());
    emit(&json!({
        "examples": labeled.len(),
        "epochs": args.epochs,
        "initial_loss": log.first().map(|s| s.loss),
        "final_loss": log.last().map(|s| s.loss),
        "path": path,
    }))
}

fn read_text(path: &Path) -> lawluo_core::Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, line: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn eval_pairwise(args: EvalPairwiseArgs) -> CliResult {
    let raw = read_text(&args.input)?;
    let mut judged: Vec<(usize, PairwiseResult)> = Vec::new();
    let mut pending: Vec<(usize, PairwiseItem)> = Vec::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_error(&args.input, i + 1, e))?;
        if value.get("winner").is_some() {
            let r = serde_json::from_value(value).map_err(|e| parse_error(&args.input, i + 1, e))?;
            judged.push((i, r));
        } else {
            let item = serde_json::from_value(value).map_err(|e| parse_error(&args.input, i + 1, e))?;
            pending.push((i, item));
        }
    }
    if !pending.is_empty() {
        let (judge, tag) = args.judge.backend()?;
        let items: Vec<PairwiseItem> = pending.iter().map(|(_, it)| it.clone()).collect();
        let results = eval::judge_all(judge.as_ref(), &JudgePrompts::default(), &tag, &items, args.judge.seed)?;
        judged.extend(pending.iter().map(|(i, _)| *i).zip(results));
    }
    judged.sort_by_key(|(i, _)| *i);
    let results: Vec<PairwiseResult> = judged.into_iter().map(|(_, r)| r).collect();
    if let Some(path) = &args.results {
        let mut body = String::new();
        for r in &results {
            body.push_str(&serde_json::to_string(r).map_err(Error::from)?);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    let summary = eval::summarize(&results, Winner::A)?;
    eprintln!(
        "A wins {} of {} ({} position disagreements)",
        summary.wins, summary.n, summary.disagreements
    );
    emit(&summary)
}

fn eval_turns(args: EvalTurnsArgs) -> CliResult {
    let raw = read_text(&args.transcript)?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| parse_error(&args.transcript, e.line(), e))?;
    let turns = match value {
        serde_json::Value::Object(mut o) if o.contains_key("transcript") => o.remove("transcript").unwrap_or_default(),
        v => v,
    };
    let turns: Vec<Turn> = serde_json::from_value(turns).map_err(|e| parse_error(&args.transcript, 0, e))?;
    let (judge, _) = args.judge.backend()?;
    let scores = eval::turn_scores(judge.as_ref(), &JudgePrompts::default(), &turns, args.judge.seed)?;
    let mean = scores.iter().map(|s| s.score as f64).sum::<f64>() / scores.len() as f64;
    emit(&json!({ "scores": scores, "mean": mean }))
}

fn data_validate(paths: &[PathBuf]) -> CliResult {
    let mut failed = 0;
    for path in paths {
        let v = datasets::validate_dialogue_file(path)?;
        eprintln!("{}: {} passed, {} failed", path.display(), v.passed, v.failed);
        failed += v.failed;
        println!("{}", serde_json::to_string(&v).map_err(Error::from)?);
    }
    if failed > 0 {
        return Err(Failure::Rejected(format!("{failed} invalid records")));
    }
    Ok(())
}

fn data_stats(mut paths: Vec<PathBuf>, manifest: Option<&Path>) -> CliResult {
    let manifest = manifest.map(Manifest::load).transpose()?;
    if let Some(m) = &manifest {
        paths.extend(m.paths());
    }
    if paths.is_empty() {
        return Err(Failure::Usage("no corpus files given".into()));
    }
    let stats = datasets::corpus_stats(&paths)?;
    let category_mismatches = manifest.map(|m| m.category_mismatches()).transpose()?;
    let reference_mismatches: Vec<_> = stats
        .reference_mismatches()
        .into_iter()
        .map(|(c, expected, found)| json!({"category": c, "expected": expected, "found": found}))
        .collect();
    emit(&json!({
        "stats": stats,
        "reference_mismatches": reference_mismatches,
        "category_mismatches": category_mismatches,
    }))
}
