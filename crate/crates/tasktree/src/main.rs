use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tasktree::config::{provider_from_config, ProviderConfig};
use tasktree::scenario::{self, ScenarioFile};
use tasktree::service::{ServiceSettings, SessionService};
use tasktree::store::{load_session, EventStore};
use tasktree_core::{SessionState, DEFAULT_MAX_DEPTH};
use tracing_subscriber::EnvFilter;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "tasktree", version, about = "Explore a goal as a tree of sub-tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "TASKTREE_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Where session logs are kept.
        #[arg(long, env = "TASKTREE_DATA_DIR", default_value = "./data")]
        data_dir: PathBuf,
        #[command(flatten)]
        provider: ProviderConfig,
        #[arg(long, env = "TASKTREE_LOG", default_value = "info")]
        log_level: String,
    },
    /// Run a scripted scenario and report each step.
    Scenario {
        path: PathBuf,
        /// Keep the session log here instead of in memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Rebuild a session from its log and print it.
    Replay {
        path: PathBuf,
        /// Print the state as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn init_logging(level: &str) {
    let filter = EnvFilter::try_new(level).unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

async fn serve(listen: SocketAddr, data_dir: PathBuf, provider: ProviderConfig) -> ExitCode {
    let handle = match provider_from_config(&provider) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let store = match EventStore::open(&data_dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: invalid configuration: data dir unusable: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let settings = ServiceSettings {
        timeout: provider.timeout(),
        max_attempts: provider.max_attempts,
        max_depth: DEFAULT_MAX_DEPTH,
    };
    let service = SessionService::new(Arc::new(handle.gateway(&provider)), Some(store), settings);
    match service.load_existing() {
        Ok((n, bad)) => tracing::info!(loaded = n, skipped = bad.len(), "sessions restored"),
        Err(e) => {
            eprintln!("error: cannot read data dir: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let listener = match tokio::net::TcpListener::bind(listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {listen}: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let addr = listener.local_addr().unwrap_or(listen);
    println!("listening on {addr}");
    tracing::info!(%addr, provider = service.gateway().provider_id(), "serving");
    match tasktree::api::serve(listener, Arc::new(service), shutdown_signal()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: server failed: {e}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}

async fn run_scenario(path: PathBuf, data_dir: Option<PathBuf>) -> ExitCode {
    let file = match ScenarioFile::load(&path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match scenario::run(&file, data_dir.as_deref()).await {
        Ok(report) => {
            println!("{report}");
            if let Some(log) = &report.log_path {
                println!("log: {}", log.display());
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn print_state(state: &SessionState) {
    println!("session {}", state.session_id());
    println!("{} [{}]", state.query(), state.root().status());
    if let Some(w) = state.root().warning() {
        println!("  warning: {w}");
    }
    if let Some(e) = state.root().error_detail() {
        println!("  error: {e}");
    }
    for child in state.children() {
        println!("  {} {} [{}]", child.id(), child.title(), child.status());
        if let Some(set) = child.option_set() {
            for (i, entry) in set.entries().enumerate() {
                let mark = if child.selected().contains(&i) { "x" } else { " " };
                let tag = if i == 0 { " (recommended)" } else { "" };
                println!("    [{mark}] {i}: {entry}{tag}");
            }
        }
    }
    let ctx = state.context();
    println!(
        "context (revision {}): {}",
        ctx.revision,
        if ctx.text.is_empty() { "None" } else { &ctx.text }
    );
    println!("selections:\n{}", state.selection_digest());
    println!("summary: {}", state.summary().unwrap_or("None"));
}

fn replay(path: PathBuf, json: bool) -> ExitCode {
    match load_session(&path) {
        Ok((state, events)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&state).expect("state serializes"));
            } else {
                println!("{} event(s)", events.len());
                print_state(&state);
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.is_corrupt() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAIL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve {
            listen,
            data_dir,
            provider,
            log_level,
        } => {
            init_logging(&log_level);
            serve(listen, data_dir, provider).await
        }
        Command::Scenario { path, data_dir } => {
            init_logging("warn");
            run_scenario(path, data_dir).await
        }
        Command::Replay { path, json } => replay(path, json),
    }
}
