//! `bi33`: simulate operating characteristics, print decision tables, run the
//! conduct service, and talk to a running service.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 service error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bi33_client::{Client, ClientError};
use bi33_core::api::{CreateSession, EventSubmission, PostEvents};
use bi33_core::report::render_oc_report;
use bi33_core::rules::decision_table_csv;
use bi33_core::sim::{run_batch_with, BatchConfig};
use bi33_core::trial::{DesignParams, DoseGrid};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bi33", version, about = "Bi3+3 dose-finding design: simulation and trial conduct")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its operating characteristics.
    Simulate {
        /// Batch configuration (JSON): scenario, design parameters, options.
        #[arg(long)]
        config: PathBuf,
        /// Base seed; overrides the configuration's `base_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of simulated trials; overrides the configuration's `replicates`.
        #[arg(long)]
        replicates: Option<usize>,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `csv` or `text`.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Worker threads; all cores when omitted. Results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the HTTP conduct service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to listen on; 0 picks a free one.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding the session event logs.
        #[arg(long, env = "BI33_DATA_DIR", default_value = "bi33-data")]
        data_dir: PathBuf,
        /// Require `Authorization: Bearer <token>` on every request.
        #[arg(long, env = "BI33_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
    /// Print the complete-data decision table as CSV (n, y, action).
    DecisionTable {
        #[arg(long, default_value_t = 0.3)]
        p_t: f64,
        #[arg(long, default_value_t = 0.05)]
        eps1: f64,
        #[arg(long, default_value_t = 0.05)]
        eps2: f64,
        /// Largest sample size in the table.
        #[arg(long, default_value_t = 12)]
        max_n: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Work with sessions on a running service.
    Session(SessionArgs),
}

#[derive(Args)]
struct SessionArgs {
    #[arg(long, env = "BI33_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    #[arg(long, env = "BI33_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: SessionCommand,
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Create a session; prints it, including its id.
    Create {
        #[arg(long)]
        num_doses: usize,
        /// Design parameters (JSON); defaults for anything omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parameters and current state.
    Show { id: String },
    /// Submit coordinator events from a JSON file (`-` for standard input):
    /// either a list of events or `{"events": [...]}`. Prints the decision bundle.
    Post {
        id: String,
        #[arg(long)]
        events: PathBuf,
    },
    /// Current decision bundle.
    Decision { id: String },
    /// Interim or final estimates.
    Estimates { id: String },
    /// The session's event log (NDJSON).
    Export {
        id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Service(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Service(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Service(m) => write!(f, "service error: {m}"),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Service(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    if path == Path::new("-") {
        return std::io::read_to_string(std::io::stdin()).map_err(|e| CliError::Io(format!("standard input: {e}")));
    }
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::Io(format!("standard output: {e}"))),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("documents always serialize");
    text.push('\n');
    write(None, text.as_bytes())
}

fn simulate(
    config: &Path,
    seed: Option<u64>,
    replicates: Option<usize>,
    out: Option<&Path>,
    format: &str,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let cfg = BatchConfig::from_json(&read(config)?).map_err(|e| CliError::Config(e.to_string()))?;
    // Reject a bad format before spending time on the batch.
    format.parse::<bi33_core::report::ReportFormat>().map_err(|e| CliError::Config(e.to_string()))?;
    let oc = run_batch_with(
        &cfg.scenario,
        &cfg.design_params,
        &cfg.options,
        replicates.unwrap_or(cfg.replicates),
        seed.unwrap_or(cfg.base_seed),
        threads,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = render_oc_report(&oc, format).map_err(|e| CliError::Config(e.to_string()))?;
    write(out, &bytes)
}

fn decision_table(p_t: f64, eps1: f64, eps2: f64, max_n: u32, out: Option<&Path>) -> Result<(), CliError> {
    let params = DesignParams { p_t, eps1, eps2, ..DesignParams::default() };
    params.validate(2).map_err(|e| CliError::Config(e.to_string()))?;
    if max_n == 0 {
        return Err(CliError::Config("max_n must be at least 1".into()));
    }
    write(out, decision_table_csv(&params, max_n).as_bytes())
}

async fn serve(host: &str, port: u16, data_dir: PathBuf, token: Option<String>) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| CliError::Io(format!("binding {host}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    let config = bi33_service::ServiceConfig { data_dir, bearer_token: token };
    let app = bi33_service::build(&config).await.map_err(|e| CliError::Io(format!("{e:#}")))?;
    // Scripts wait for this line before connecting.
    println!("listening on http://{addr}");
    bi33_service::serve_router(listener, app).await.map_err(|e| CliError::Io(format!("{e:#}")))
}

fn parse_events(text: &str) -> Result<Vec<EventSubmission>, CliError> {
    let bad = |e: serde_json::Error| CliError::Config(format!("events: {e}"));
    let value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
    if value.is_array() {
        serde_json::from_value(value).map_err(bad)
    } else {
        Ok(serde_json::from_value::<PostEvents>(value).map_err(bad)?.events)
    }
}

async fn session(args: SessionArgs) -> Result<(), CliError> {
    let client = Client::new(args.url).with_token(args.token);
    match args.command {
        SessionCommand::Create { num_doses, params, seed } => {
            let params = match params {
                Some(path) => serde_json::from_str(&read(&path)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
                None => DesignParams::default(),
            };
            let req = CreateSession { grid: DoseGrid::new(num_doses), params, seed };
            print_json(&client.create_session(&req).await?)
        }
        SessionCommand::Show { id } => print_json(&client.session(&id).await?),
        SessionCommand::Post { id, events } => {
            let events = parse_events(&read(&events)?)?;
            print_json(&client.post_events(&id, events).await?)
        }
        SessionCommand::Decision { id } => print_json(&client.decision(&id).await?),
        SessionCommand::Estimates { id } => print_json(&client.estimates(&id).await?),
        SessionCommand::Export { id, out } => write(out.as_deref(), client.export(&id).await?.as_bytes()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(format!("starting runtime: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, replicates, out, format, threads } => {
            simulate(&config, seed, replicates, out.as_deref(), &format, threads)
        }
        Command::Serve { host, port, data_dir, token } => runtime()?.block_on(serve(&host, port, data_dir, token)),
        Command::DecisionTable { p_t, eps1, eps2, max_n, out } => decision_table(p_t, eps1, eps2, max_n, out.as_deref()),
        Command::Session(args) => runtime()?.block_on(session(args)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bi33: {e}");
            ExitCode::from(e.code())
        }
    }
}
