//! `procmem` command line. Exit codes: 0 success, 1 usage error, 2
//! operational error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use procmem_core::bank::Bank;
use procmem_core::fuse::FusionMode;
use procmem_core::schema::ProceduralState;
use procmem_core::toybench::{run_bench, BenchConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{EmbedBackend, ServiceConfig};
use crate::error::{Class, Failure};
use crate::ops;
use crate::server::{self, memories_reply, AppState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "procmem", version, about = "Procedural-memory bank tool and service")]
pub struct Cli {
    /// Service configuration file (TOML).
    #[arg(long, global = true, env = "PROCMEM_CONFIG")]
    pub service_config: Option<PathBuf>,
    /// Bank directory; overrides the config file and PROCMEM_BANK.
    #[arg(long, global = true)]
    pub bank: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage the memory bank.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Rank memories for a procedural state and derive a fusion plan.
    Retrieve(RetrieveArgs),
    /// Fuse the adapters named by a plan into one container.
    Fuse(FuseArgs),
    /// Synthetic benchmark.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Create an empty bank.
    Init {
        /// Embedding model id recorded in the manifest; defaults to the
        /// configured embedder's id.
        #[arg(long)]
        model: Option<String>,
    },
    /// Register a memory.
    Add {
        #[arg(long)]
        task_id: String,
        /// JSON array of procedural states, or @file.
        #[arg(long)]
        states: String,
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Set the base adapter.
    SetBase {
        #[arg(long)]
        adapter: PathBuf,
    },
    List,
    /// Check references, pairing and fusability.
    Validate,
    /// Embed and store every memory field text.
    Precompute,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Procedural state as JSON, or @file.
    #[arg(long)]
    pub state: String,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long = "temp")]
    pub temperature: Option<f64>,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedBackend>,
    #[arg(long)]
    pub mode: Option<FusionMode>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Fusion plan JSON (`selected`, `weights`, optional `mode`), or @file.
    #[arg(long)]
    pub plan: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the plan's mode.
    #[arg(long)]
    pub mode: Option<FusionMode>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    Run {
        /// Bench configuration (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<SocketAddr>,
}

enum CliError {
    Usage(String),
    Failed(Failure),
}

impl From<Failure> for CliError {
    fn from(f: Failure) -> Self {
        Self::Failed(f)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_arg(value: &str) -> Result<String, CliError> {
    match value.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| usage(format!("reading {path}: {e}"))),
        None => Ok(value.to_string()),
    }
}

fn parse_json<T: for<'de> serde::Deserialize<'de>>(what: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_str(&read_arg(value)?).map_err(|e| usage(format!("--{what}: {e}")))
}

fn parse_state(value: &str) -> Result<ProceduralState, CliError> {
    let v: serde_json::Value = parse_json("state", value)?;
    ProceduralState::from_json_value(&v).map_err(|e| usage(format!("--state: {e}")))
}

struct Ctx<'a> {
    cfg: ServiceConfig,
    json: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn emit<T: Serialize>(&mut self, value: &T, human: impl FnOnce() -> String) {
        let text = if self.json {
            serde_json::to_string(value).expect("serializable")
        } else {
            human()
        };
        let _ = writeln!(self.out, "{text}");
    }

    fn open_bank(&self) -> Result<Bank, CliError> {
        Ok(Bank::open(&self.cfg.bank).map_err(Failure::from)?)
    }
}

/// Entry point used by the binary.
pub fn main_from_env() -> i32 {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run(std::env::args_os(), |k| std::env::var(k).ok(), &mut out, &mut err)
}

pub fn run<I, T>(
    args: I,
    env: impl Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let json = cli.json;
    let result = configure(&cli, &env).and_then(|cfg| {
        let mut ctx = Ctx { cfg, json, out: &mut *out };
        dispatch(cli.command, &mut ctx)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failed(f)) => {
            if json {
                let _ = writeln!(out, "{}", json!({ "error": f }));
            }
            let _ = writeln!(err, "error: {f}");
            EXIT_FAILURE
        }
    }
}

fn configure(cli: &Cli, env: &impl Fn(&str) -> Option<String>) -> Result<ServiceConfig, CliError> {
    let mut cfg = match &cli.service_config {
        Some(path) => ServiceConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env(env);
    if let Some(bank) = &cli.bank {
        cfg.bank = bank.clone();
    }
    cfg.check().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn dispatch(command: Command, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    match command {
        Command::Bank(cmd) => bank(cmd, ctx),
        Command::Retrieve(args) => retrieve(args, ctx),
        Command::Fuse(args) => fuse(args, ctx),
        Command::Bench(BenchCommand::Run { config, out }) => bench(config.as_deref(), &out, ctx),
        Command::Serve(args) => serve(args, ctx),
    }
}

fn bank(cmd: BankCommand, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    match cmd {
        BankCommand::Init { model } => {
            let model = match model {
                Some(m) => m,
                None => ctx.cfg.embed.model_id().map_err(Failure::from)?,
            };
            let bank = Bank::init(&ctx.cfg.bank, &model).map_err(Failure::from)?;
            let root = bank.root().display().to_string();
            ctx.emit(&json!({ "bank": root, "embed_model_id": model }), || {
                format!("initialized bank at {root} (embedding model {model})")
            });
        }
        BankCommand::Add { task_id, states, adapter } => {
            let states: Vec<serde_json::Value> = parse_json("states", &states)?;
            let states = states
                .iter()
                .map(ProceduralState::from_json_value)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("--states: {e}")))?;
            let mut bank = ctx.open_bank()?;
            let n = states.len();
            bank.register_memory(&task_id, states, &adapter).map_err(Failure::from)?;
            ctx.emit(&json!({ "task_id": task_id, "states": n }), || {
                format!("registered {task_id} ({n} states)")
            });
        }
        BankCommand::SetBase { adapter } => {
            let mut bank = ctx.open_bank()?;
            bank.set_base_adapter(&adapter).map_err(Failure::from)?;
            let reference = bank.manifest().base_adapter_ref.clone();
            ctx.emit(&json!({ "base_adapter_ref": reference }), || "base adapter set".into());
        }
        BankCommand::List => {
            let snapshot = ctx.open_bank()?.snapshot().map_err(Failure::from)?;
            let reply = memories_reply(&snapshot);
            ctx.emit(&reply, || {
                let mut s = format!("{} memories (embedding model {})", reply.count, reply.embed_model_id);
                for m in &reply.memories {
                    s.push_str(&format!(
                        "\n  {:<24} states={} rank={} layers={}",
                        m.task_id,
                        m.states.len(),
                        m.rank.map_or("?".into(), |r| r.to_string()),
                        m.layers.len()
                    ));
                }
                s
            });
        }
        BankCommand::Validate => {
            let report = ctx.open_bank()?.validate();
            ctx.emit(&report, || report.to_string());
            if report.has_errors() {
                return Err(Failure::new("bank", "ValidationFailed", Class::Operational, "bank has errors").into());
            }
        }
        BankCommand::Precompute => {
            let mut bank = ctx.open_bank()?;
            let service = ctx.cfg.embedding_service().map_err(Failure::from)?;
            let added = bank.precompute_embeddings(&service).map_err(Failure::from)?;
            let stats = service.stats();
            ctx.emit(
                &json!({ "embedded": added, "cache_hits": stats.cache_hits, "endpoint_calls": stats.call_ms.len() }),
                || format!("embedded {added} new field texts ({} endpoint calls)", stats.call_ms.len()),
            );
        }
    }
    Ok(())
}

fn retrieve(args: RetrieveArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let state = parse_state(&args.state)?;
    if let Some(backend) = args.embedder {
        ctx.cfg.embed.backend = backend;
    }
    let d = ctx.cfg.defaults.clone();
    let loaded = server::load(&ctx.cfg)?;
    let retrieval = ops::retrieve(
        &loaded.snapshot,
        loaded.embedder.as_ref(),
        &state,
        args.k.unwrap_or(d.k),
        args.temperature.unwrap_or(d.temperature),
        args.mode.unwrap_or(d.mode),
    )?;
    ctx.emit(&retrieval, || {
        let mut s = String::from("rank  task_id                  similarity  best_state");
        for (i, m) in retrieval.matches.iter().enumerate() {
            s.push_str(&format!("\n{:>4}  {:<24} {:>10.4}  {:>10}", i + 1, m.task_id, m.similarity, m.best_state_index));
        }
        s.push_str(&format!("\nplan ({}):", retrieval.plan.mode));
        for (id, w) in retrieval.plan.selected.iter().zip(&retrieval.plan.weights) {
            s.push_str(&format!("\n  {id:<24} {w:.6}"));
        }
        s
    });
    Ok(())
}

fn fuse(args: FuseArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let mut request: ops::FuseRequest = parse_json("plan", &args.plan)?;
    if args.mode.is_some() {
        request.mode = args.mode;
    }
    let plan = request.into_plan(ctx.cfg.defaults.mode)?;
    let snapshot = ctx.open_bank()?.snapshot().map_err(Failure::from)?;
    let fused = ops::fuse_plan(&snapshot, &plan)?;
    let artifact = ops::write_fused(&fused, &args.out)?;
    ctx.emit(&artifact, || {
        format!(
            "wrote {} ({} mode, {} bytes)\nsha256 {}",
            artifact.path.display(),
            artifact.mode,
            artifact.size_bytes,
            artifact.digest
        )
    });
    Ok(())
}

fn bench(config: Option<&Path>, out: &Path, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = match config {
        Some(path) => BenchConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => BenchConfig::default(),
    };
    let result = run_bench(&cfg, out).map_err(Failure::from)?;
    let summary = std::fs::read_to_string(&result.summary_txt).unwrap_or_default();
    ctx.emit(
        &json!({
            "mrr": result.report.mrr,
            "max_self_error": result.report.max_self_error,
            "rows": result.report.rows.len(),
            "spearman": result.curve.spearman,
            "report_csv": result.report_csv,
            "similarity_gain_csv": result.gain_csv,
            "summary_txt": result.summary_txt,
            "bank": result.bank_dir,
        }),
        || summary.trim_end().to_string(),
    );
    Ok(())
}

fn serve(args: ServeArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    if let Some(listen) = args.listen {
        ctx.cfg.listen = listen;
    }
    if !ctx.cfg.bank.is_dir() {
        return Err(usage(format!("bank {} does not exist", ctx.cfg.bank.display())));
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let io = |e: std::io::Error| Failure::new("svc", "Io", Class::Operational, e.to_string());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io)?;
    let state = AppState::new(ctx.cfg.clone());
    runtime
        .block_on(async {
            let listener = tokio::net::TcpListener::bind(ctx.cfg.listen).await?;
            tracing::info!(addr = %listener.local_addr()?, "listening");
            server::serve(state, listener, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
        })
        .map_err(io)?;
    Ok(())
}
