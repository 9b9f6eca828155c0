use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iterchat::jsonl::{read_jsonl, write_atomic, write_jsonl};
use iterchat::pipeline::{self, BackendKind, EvalOutput, ExtractRun, InputKind};
use iterchat::service::{self, ServeOptions, Store, SystemClock};
use iterchat_core::ingest::{ingest_external, SlotMapping};
use iterchat_core::sampler::{GenerateError, SamplerConfig};
use iterchat_core::schema::draft_schema;
use iterchat_core::{explode, ExtractionMode, IterChatRecord, MultiTurnDialogue};
use serde_json::json;

#[derive(Parser)]
#[command(name = "iterchat", version, about = "Build, label and score one-turn preference extraction data")]
struct Cli {
    /// Seed for every randomized step; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Worker threads for generation and extraction.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draft or check a preference schema.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Sample and realize synthetic one-turn records.
    Generate(GenerateArgs),
    /// Convert between dialogue and record formats.
    #[command(subcommand)]
    Convert(ConvertCommand),
    /// Run few-shot extraction over records or dialogues.
    Extract(ExtractArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Template,
    Echo,
    Http,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Template | BackendArg::Echo => BackendKind::Template,
            BackendArg::Http => BackendKind::Http,
        }
    }
}

#[derive(Args)]
struct BackendOpts {
    #[arg(long, value_enum, default_value = "template")]
    backend: BackendArg,
    /// JSON file overriding HTTP backend settings.
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Directory with prompt templates replacing the built-in ones.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

impl BackendOpts {
    fn backend(&self) -> Result<pipeline::SharedBackend> {
        let kind = BackendKind::from(self.backend);
        let config = match kind {
            BackendKind::Http => Some(pipeline::load_backend_config(self.backend_config.as_deref())?),
            BackendKind::Template => None,
        };
        pipeline::make_backend(kind, config)
    }
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Ask a backend to propose slots and values for a domain.
    Draft {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 8)]
        max_slots: usize,
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a schema file.
    Validate {
        #[arg(long)]
        schema: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Sampler config JSON.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    backend: BackendOpts,
    #[arg(long)]
    out: PathBuf,
    /// Also write generation stats here (they always go to stdout).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Override the record count of the config.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Subcommand)]
enum ConvertCommand {
    /// Labeled dialogues to one record per turn.
    Explode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold record gains back into final states, one line per dialogue.
    Replay {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// External dialogue-state annotations to labeled dialogues.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Iterchat,
    MultiTurn,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, value_enum, default_value = "iterchat")]
    mode: ModeArg,
    #[arg(long)]
    schema: PathBuf,
    /// Records or dialogues (detected from the first line).
    #[arg(long = "in")]
    input: PathBuf,
    /// Labeled demonstrations; the first K are used.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[command(flatten)]
    backend: BackendOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value = "annotation-journal.jsonl")]
    journal: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 900)]
    lease_seconds: i64,
    /// Static UI bundle to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn run_schema(cmd: SchemaCommand) -> Result<()> {
    match cmd {
        SchemaCommand::Draft { domain, max_slots, backend, out } => {
            let prompts = pipeline::load_prompts(backend.prompts.as_deref())?;
            let schema = draft_schema(&domain, &backend.backend()?, max_slots, &prompts).context("drafting schema")?;
            emit(out.as_deref(), &schema.to_json())
        }
        SchemaCommand::Validate { schema } => {
            let s = pipeline::load_schema(&schema)?;
            let summary = json!({
                "valid": true,
                "domain_name": s.domain_name,
                "version": s.version,
                "slot_count": s.slot_count(),
            });
            emit(None, &pretty(&summary))
        }
    }
}

fn run_generate(args: GenerateArgs, seed: Option<u64>, jobs: usize) -> Result<()> {
    let schema = pipeline::load_schema(&args.schema)?;
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config: SamplerConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing sampler config {}", args.config.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(count) = args.count {
        config.record_count = count;
    }
    let prompts = pipeline::load_prompts(args.backend.prompts.as_deref())?;
    let backend = args.backend.backend()?;
    match pipeline::generate(&schema, &config, backend.as_ref(), &prompts, jobs) {
        Ok((records, stats)) => {
            write_jsonl(&args.out, &records)?;
            if let Some(path) = &args.stats {
                write_atomic(path, pretty(&stats).as_bytes())?;
            }
            emit(None, &pretty(&stats))
        }
        Err(GenerateError::TooManyFailures { partial, stats }) => {
            let partial_path = args.out.with_extension("partial.jsonl");
            write_jsonl(&partial_path, &partial)?;
            emit(None, &pretty(&stats))?;
            bail!(
                "{} of {} records failed to realize; partial output written to {}",
                stats.failed,
                stats.requested,
                partial_path.display()
            )
        }
        Err(e) => Err(e).context("generating dataset"),
    }
}

fn run_convert(cmd: ConvertCommand) -> Result<()> {
    match cmd {
        ConvertCommand::Explode { input, out } => {
            let dialogues: Vec<MultiTurnDialogue> = read_jsonl(&input)?;
            let mut records = Vec::new();
            for d in &dialogues {
                records.extend(explode(d).with_context(|| format!("exploding dialogue {:?}", d.dialogue_id))?);
            }
            write_jsonl(&out, &records)?;
            log::info!("{} dialogues -> {} records", dialogues.len(), records.len());
            Ok(())
        }
        ConvertCommand::Replay { input, out } => {
            let records: Vec<IterChatRecord> = read_jsonl(&input)?;
            let lines = pipeline::replay_groups(records)?;
            match out {
                Some(path) => Ok(write_jsonl(&path, &lines)?),
                None => emit(None, &iterchat::jsonl::to_jsonl_string(&lines)),
            }
        }
        ConvertCommand::Ingest { input, mapping, schema, domain, out } => {
            let schema = pipeline::load_schema(&schema)?;
            let raw = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let mapping_text =
                fs::read_to_string(&mapping).with_context(|| format!("reading {}", mapping.display()))?;
            let mapping = SlotMapping::parse(&mapping_text)?;
            let domain = domain.unwrap_or_else(|| schema.domain_name.clone());
            let output = ingest_external(&raw, &mapping, &schema, &domain)?;
            write_jsonl(&out, &output.dialogues)?;
            if output.warning_count > 0 {
                log::warn!("dropped unmapped keys: {:?}", output.dropped_keys);
            }
            let summary = json!({
                "dialogues": output.dialogues.len(),
                "warning_count": output.warning_count,
                "dropped_keys": output.dropped_keys,
            });
            emit(None, &pretty(&summary))
        }
    }
}

fn run_extract(args: ExtractArgs, jobs: usize) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Iterchat => ExtractionMode::IterChat,
        ModeArg::MultiTurn => ExtractionMode::MultiTurn,
    };
    let schema = pipeline::load_schema(&args.schema)?;
    let prompts = pipeline::load_prompts(args.backend.prompts.as_deref())?;
    let demos = pipeline::load_demos(args.demos.as_deref(), mode, args.k)?;
    let backend = args.backend.backend()?;
    let run = ExtractRun { schema: &schema, demos: &demos, backend: backend.as_ref(), prompts: &prompts, jobs };
    let lines = match (mode, pipeline::detect_kind(&args.input)?) {
        (ExtractionMode::IterChat, InputKind::Records) => run.records(&read_jsonl(&args.input)?),
        (ExtractionMode::IterChat, InputKind::Dialogues) => run.dialogues_iterative(&read_jsonl(&args.input)?),
        (ExtractionMode::MultiTurn, InputKind::Dialogues) => run.dialogues_multi_turn(&read_jsonl(&args.input)?),
        (ExtractionMode::MultiTurn, InputKind::Records) => {
            bail!("multi-turn mode needs dialogue input, {} holds records", args.input.display())
        }
    };
    write_jsonl(&args.out, &lines)?;
    let errors: Vec<&str> = lines.iter().filter_map(|l| l.error.as_deref()).collect();
    if !errors.is_empty() {
        bail!("extraction failed for {} of {} items; first error: {}", errors.len(), lines.len(), errors[0]);
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let report: EvalOutput = pipeline::evaluate_files(&args.pred, &args.gold)?;
    let text = match args.format {
        Format::Json => pretty(&report),
        Format::Table => report.to_table(),
    };
    emit(args.out.as_deref(), &text)
}

fn run_serve(args: ServeArgs) -> Result<()> {
    if args.lease_seconds <= 0 {
        bail!("--lease-seconds must be positive");
    }
    let schema = pipeline::load_schema(&args.schema)?;
    let store =
        Store::open(&args.journal, schema, chrono::Duration::seconds(args.lease_seconds), Arc::new(SystemClock))?;
    if let Some(dir) = &args.ui_dir {
        if !dir.join("index.html").is_file() {
            bail!("UI directory {} has no index.html", dir.display());
        }
    }
    service::serve_blocking(Arc::new(store), ServeOptions { addr: args.addr, ui_dir: args.ui_dir })
        .context("running annotation service")
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    match cli.command {
        Command::Schema(cmd) => run_schema(cmd),
        Command::Generate(args) => run_generate(args, cli.seed, cli.jobs),
        Command::Convert(cmd) => run_convert(cmd),
        Command::Extract(args) => run_extract(args, cli.jobs),
        Command::Eval(args) => run_eval(args),
        Command::Serve(args) => run_serve(args),
    }
}

/// The error chain, skipping causes already quoted by the message above them.
fn error_detail(e: &anyhow::Error) -> String {
    let mut detail = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !detail.contains(&text) {
            if !detail.is_empty() {
                detail.push_str(": ");
            }
            detail.push_str(&text);
        }
    }
    detail
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let summary = json!({ "error": e.to_string(), "detail": error_detail(&e) });
            eprintln!("{summary}");
            ExitCode::from(1)
        }
    }
}
