//! `kdn`: operator front end for the knowledge delivery network.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use kdn_core::store::{KeyMode, DEFAULT_CHUNK_SIZE};

mod commands;
mod output;

use output::Format;

/// Exit code for operational failures; usage errors exit with 2.
const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// An error in how the command was invoked rather than in running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "kdn", version, about = "Store, serve, blend and cost out KV caches")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value = "text")]
    output: Format,

    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct StoreArgs {
    /// Store directory.
    #[arg(long, env = "KDN_ROOT")]
    pub root: PathBuf,

    /// Tokens per chunk; must match whatever wrote the store.
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    pub chunk_size: usize,

    /// Evict least-recently-used chunks beyond this many bytes.
    #[arg(long)]
    pub capacity: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct TextArgs {
    /// Model config JSON: {"n_layers", "n_heads", "d_head", "vocab_size"[, "rope_base"]}.
    #[arg(long)]
    pub model: PathBuf,

    /// Whitespace-separated token ids.
    #[arg(long)]
    pub tokens: PathBuf,

    #[arg(long, default_value_t = KeyMode::Chain)]
    pub mode: KeyMode,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve a store over TCP until interrupted.
    Serve {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to listen on; 0 picks a free one.
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Pace responses to this many bytes per second.
        #[arg(long)]
        bw: Option<f64>,
        /// Per-frame latency in seconds when pacing.
        #[arg(long, default_value_t = 0.0, requires = "bw")]
        latency: f64,
    },
    /// Prefill a text and store its chunked KV cache.
    Put {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        text: TextArgs,
        /// Codec profile, e.g. q8-deflate or q4-varint-g32.
        #[arg(long, default_value = "q8-deflate")]
        profile: String,
    },
    /// Look up the cached chunks of a text, locally or from a server.
    Get {
        /// Store directory, for local lookups.
        #[arg(long, env = "KDN_ROOT", conflicts_with = "server")]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        /// Server address (HOST:PORT).
        #[arg(long)]
        server: Option<String>,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Blend independently cached segments with selective recomputation.
    Blend {
        /// JSON {"model": CFG, "segments": [[tokens]...], "ratio": r}.
        #[arg(long)]
        request: PathBuf,
        /// Where to write the blended cache.
        #[arg(long, default_value = "blended.kdnf")]
        out: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        what: BenchCommand,
    },
    /// Cost/delay model of fine-tuning, in-context learning and KV reuse.
    Cost {
        #[command(subcommand)]
        what: commands::cost::CostCommand,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Compression ratio and error over fixture caches.
    Codec(commands::bench::BenchCodecArgs),
}

fn run(cli: Cli) -> Result<()> {
    let format = cli.output;
    match cli.command {
        Command::Serve {
            store,
            host,
            port,
            bw,
            latency,
        } => commands::store::serve(&store, &host, port, bw, latency),
        Command::Put { store, text, profile } => commands::store::put(&store, &text, &profile, format),
        Command::Get {
            root,
            chunk_size,
            server,
            text,
        } => commands::store::get(root, chunk_size, server.as_deref(), &text, format),
        Command::Blend { request, out, report } => {
            commands::blend::run(&request, &out, report.as_deref(), format)
        }
        Command::Bench {
            what: BenchCommand::Codec(args),
        } => commands::bench::codec(&args, format),
        Command::Cost { what } => commands::cost::run(what, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // Keep the diagnostic to one line; `--help` has the details.
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("tip:"))
                .collect();
            eprintln!("kdn: {}", head.join(" ").trim_start_matches("error: "));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kdn: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
