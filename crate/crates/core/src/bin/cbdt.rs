//! `cbdt`: run the twin service, or script it.
//!
//! `serve` and `simulate` host a twin. `backfill`, `replay` and `metrics`
//! talk to a running service when `--target` is given and otherwise run
//! against a twin opened from the local config. Exit codes: 0 ok, 1 usage,
//! 2 remote error, 3 local I/O. Errors are printed to stderr as the API
//! error envelope.

use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cbdt::adapters::{dump, DumpReader, SimConfig};
use cbdt::api::{self, ApiError};
use cbdt::clock::SystemClock;
use cbdt::config::Config;
use cbdt::ingest::{BackfillConfig, DeadLetterLog, IngestError, TOKEN_HEADER};
use cbdt::model::{BuildJob, Interval, Scope};
use cbdt::ops::{self, OpsError};
use cbdt::twin::{Twin, TwinError, TwinParts};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "cbdt", version, about = "CI build process digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Local {
    /// TOML config file; environment variables override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Store directory (overrides config and CBDT_STORE_PATH).
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Remote {
    /// Base URL of a running service, e.g. http://127.0.0.1:8080.
    #[arg(long, env = "CBDT_TARGET")]
    target: Option<String>,
    /// Bearer token for mutating calls against --target.
    #[arg(long, env = "CBDT_API_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Boot the API with every subscriber attached.
    Serve {
        #[command(flatten)]
        local: Local,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Pull job history from the actual twin; prints the ingest summary.
    Backfill {
        #[command(flatten)]
        local: Local,
        #[command(flatten)]
        remote: Remote,
        /// Comma-separated project ids; all projects when omitted.
        #[arg(long, value_delimiter = ',')]
        projects: Vec<u64>,
        /// Keep at most this many newest jobs per project.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Feed an exported job dump through the webhook path.
    Replay {
        #[command(flatten)]
        local: Local,
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        file: PathBuf,
        /// Replay recorded gaps this many times faster; back to back when omitted.
        #[arg(long)]
        speed: Option<f64>,
        /// Webhook secret sent with each event against --target.
        #[arg(long, env = "CBDT_WEBHOOK_TOKEN", hide_env_values = true)]
        webhook_token: Option<String>,
    },
    /// Run the simulator through a twin in virtual time; prints a summary.
    Simulate {
        #[command(flatten)]
        local: Local,
        /// Simulated history length, e.g. 1d or 12h.
        #[arg(long)]
        horizon: Option<String>,
        /// Virtual seconds per wall second; as fast as possible when omitted.
        #[arg(long)]
        speed: Option<f64>,
        /// Keep serving the API afterwards.
        #[arg(long)]
        serve: bool,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Print a metric series as a table or JSON.
    Metrics {
        #[command(flatten)]
        local: Local,
        #[command(flatten)]
        remote: Remote,
        /// ALL or comma-separated project ids.
        #[arg(long, default_value = "ALL")]
        scope: String,
        #[arg(long, default_value = "daily")]
        interval: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        json: bool,
    },
    /// Write every stored job as NDJSON.
    Export {
        #[command(flatten)]
        local: Local,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show or re-ingest quarantined records.
    DeadLetters {
        #[command(flatten)]
        local: Local,
        /// Dead-letter log; the configured one when omitted.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        replay: bool,
    },
}

struct Failure {
    exit: u8,
    body: Value,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        let message = message.into();
        Failure {
            exit: 1,
            body: json!({ "code": "USAGE", "message": message, "details": {} }),
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Failure {
            exit: 3,
            body: json!({ "code": "IO_ERROR", "message": e.to_string(), "details": {} }),
        }
    }

    fn api(exit: u8, e: impl Into<ApiError>) -> Self {
        Failure {
            exit,
            body: e.into().body(),
        }
    }
}

impl From<OpsError> for Failure {
    fn from(e: OpsError) -> Self {
        match e {
            OpsError::Config(e) => Failure {
                exit: 1,
                body: json!({ "code": "INVALID_CONFIG", "message": e.to_string(), "details": {} }),
            },
            OpsError::Adapter(e) => Failure {
                exit: 2,
                body: json!({ "code": "UPSTREAM_ERROR", "message": e.to_string(), "details": {} }),
            },
            OpsError::Twin(TwinError::Store(e)) => Failure::api(3, e),
            OpsError::Twin(e) => Failure::io(e),
            OpsError::Io(e) => Failure::io(e),
        }
    }
}

impl From<TwinError> for Failure {
    fn from(e: TwinError) -> Self {
        OpsError::Twin(e).into()
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        let exit = match e {
            IngestError::InvalidConfig(_) => 1,
            IngestError::Store(_) => 3,
            _ => 2,
        };
        Failure::api(exit, e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(local: &Local) -> Result<Config, Failure> {
    let mut config = match &local.config {
        Some(path) => Config::load(path).map_err(|e| Failure::from(OpsError::from(e)))?,
        None => Config::default(),
    };
    config
        .apply_process_env()
        .map_err(|e| Failure::from(OpsError::from(e)))?;
    if let Some(dir) = &local.store {
        config.store.path = Some(dir.clone());
    }
    Ok(config)
}

fn print_json(v: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(v).map_err(Failure::io)?;
    println!("{text}");
    Ok(())
}

struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    fn new(remote: &Remote) -> Option<Client> {
        let base = remote.target.as_ref()?.trim_end_matches('/').to_string();
        Some(Client {
            base,
            token: remote.token.clone(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        })
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let req = self.agent.request(method, &format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.set("Authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    fn send(&self, req: ureq::Request, body: Option<&Value>) -> Result<Value, Failure> {
        let result = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        match result {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| remote_failure("UPSTREAM_ERROR", e)),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_json::<Value>().unwrap_or_else(|_| {
                    json!({ "code": "UPSTREAM_ERROR", "message": format!("HTTP {code}"), "details": {} })
                });
                Err(Failure { exit: 2, body })
            }
            Err(e) => Err(remote_failure("UPSTREAM_UNREACHABLE", e)),
        }
    }
}

fn remote_failure(code: &str, e: impl std::fmt::Display) -> Failure {
    Failure {
        exit: 2,
        body: json!({ "code": code, "message": e.to_string(), "details": {} }),
    }
}

fn serve_twin(twin: Twin, bind: &str) -> CliResult {
    let addr: std::net::SocketAddr = bind
        .parse()
        .map_err(|_| Failure::usage(format!("invalid bind address {bind:?}")))?;
    let twin = Arc::new(twin);
    let workers = twin.spawn_workers();
    let rt = tokio::runtime::Runtime::new().map_err(Failure::io)?;
    let result = rt.block_on(api::serve(twin, addr, async {
        let _ = tokio::signal::ctrl_c().await;
    }));
    workers.shutdown();
    result.map_err(Failure::io)
}

fn serve(local: Local, bind: Option<String>) -> CliResult {
    let mut config = load_config(&local)?;
    if let Some(b) = bind {
        config.server.bind = b;
    }
    let bind = config.server.bind.clone();
    let (twin, _) = ops::twin_from_config(config, Arc::new(SystemClock))?;
    if twin.config.ingest.backfill_on_start {
        let cfg = BackfillConfig {
            max_jobs_per_project: twin.config.ingest.backfill_limit,
            ..Default::default()
        };
        let summary = twin.ingest.backfill(&cfg)?;
        tracing::info!(stored = summary.stored, "startup backfill done");
    }
    serve_twin(twin, &bind)
}

fn backfill(local: Local, remote: Remote, projects: Vec<u64>, limit: Option<usize>) -> CliResult {
    let cfg = BackfillConfig {
        project_ids: projects,
        max_jobs_per_project: limit,
        ..Default::default()
    };
    if let Some(client) = Client::new(&remote) {
        let body = serde_json::to_value(&cfg).map_err(Failure::io)?;
        let summary = client.send(client.request("POST", "/ingest/backfill"), Some(&body))?;
        return print_json(&summary);
    }
    let (twin, _) = ops::twin_from_config(load_config(&local)?, Arc::new(SystemClock))?;
    let summary = twin.ingest.backfill(&cfg)?;
    twin.pump();
    print_json(&summary)
}

fn read_dump(file: &PathBuf) -> Result<DumpReader, Failure> {
    let f = std::fs::File::open(file).map_err(Failure::io)?;
    DumpReader::from_ndjson(BufReader::new(f)).map_err(Failure::io)
}

fn replay(
    local: Local,
    remote: Remote,
    file: PathBuf,
    speed: Option<f64>,
    webhook_token: Option<String>,
) -> CliResult {
    if speed.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
        return Err(Failure::usage("--speed must be a positive number"));
    }
    let reader = read_dump(&file)?;
    if let Some(client) = Client::new(&remote) {
        let token = webhook_token
            .ok_or_else(|| Failure::usage("--webhook-token is required with --target"))?;
        let mut jobs: Vec<&BuildJob> = reader.jobs().collect();
        jobs.sort_by_key(|j| (j.updated_at(), j.job_id));
        let started = Instant::now();
        let origin = jobs.first().map(|j| j.updated_at());
        for job in &jobs {
            if let (Some(speed), Some(origin)) = (speed, origin) {
                let offset =
                    (job.updated_at() - origin).num_milliseconds().max(0) as f64 / 1000.0 / speed;
                let due = started + Duration::from_secs_f64(offset);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
            let req = client
                .request("POST", "/webhooks/jobs")
                .set(TOKEN_HEADER, &token);
            client.send(req, Some(&dump::webhook_body(job)))?;
        }
        return print_json(&json!({ "events": jobs.len(), "rejected": 0 }));
    }
    let mut config = load_config(&local)?;
    config.ingest.webhook_token = config
        .ingest
        .webhook_token
        .or(webhook_token)
        .or(Some("replay".into()));
    config
        .validate()
        .map_err(|e| Failure::from(OpsError::from(e)))?;
    let jobs: Vec<BuildJob> = reader.jobs().cloned().collect();
    let twin = Twin::new(TwinParts::new(
        config,
        Arc::new(SystemClock),
        Arc::new(reader),
    ))?;
    let summary = ops::replay(&twin, &jobs, speed);
    print_json(&summary)
}

fn simulate(
    local: Local,
    horizon: Option<String>,
    speed: Option<f64>,
    serve: bool,
    bind: Option<String>,
) -> CliResult {
    let mut config = match &local.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(Failure::io)?;
            let mut config =
                Config::from_toml(&text).map_err(|e| Failure::from(OpsError::from(e)))?;
            if config.adapter.simulator.is_none() {
                if let Ok(sim) = toml::from_str::<SimConfig>(&text) {
                    config.adapter.simulator = Some(sim);
                }
            }
            config
        }
        None => Config::default(),
    };
    config
        .apply_process_env()
        .map_err(|e| Failure::from(OpsError::from(e)))?;
    if let Some(dir) = &local.store {
        config.store.path = Some(dir.clone());
    }
    if let Some(h) = horizon {
        config.adapter.horizon = h;
        config.adapter.history_jobs = None;
    }
    if let Some(b) = bind {
        config.server.bind = b;
    }
    if speed.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
        return Err(Failure::usage("--speed must be a positive number"));
    }
    let bind = config.server.bind.clone();
    let (twin, sim, clock) = ops::simulation(config)?;
    let summary = ops::run_simulation(&twin, &sim, &clock, speed);
    print_json(&summary)?;
    if serve {
        serve_twin(twin, &bind)?;
    }
    Ok(())
}

fn fmt_opt(v: &Value, digits: usize) -> String {
    v.as_f64()
        .map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn metrics(
    local: Local,
    remote: Remote,
    scope: String,
    interval: String,
    from: String,
    to: String,
    as_json: bool,
) -> CliResult {
    let parsed_scope =
        Scope::parse(&scope).ok_or_else(|| Failure::usage(format!("invalid scope {scope:?}")))?;
    let parsed_interval = Interval::parse(&interval)
        .ok_or_else(|| Failure::usage(format!("invalid interval {interval:?}")))?;
    let series: Value = if let Some(client) = Client::new(&remote) {
        let req = client
            .request("GET", "/metrics/series")
            .query("scope", &scope)
            .query("interval", &interval)
            .query("from", &from)
            .query("to", &to);
        client.send(req, None)?
    } else {
        let parse = |name: &str, v: &str| {
            cbdt::ingest::parse_timestamp(v)
                .ok_or_else(|| Failure::usage(format!("--{name} is not a timestamp: {v:?}")))
        };
        let (from, to) = (parse("from", &from)?, parse("to", &to)?);
        let (twin, _) = ops::twin_from_config(load_config(&local)?, Arc::new(SystemClock))?;
        let series = twin
            .metrics
            .series(&parsed_scope, parsed_interval, from, to)
            .map_err(|e| Failure::api(1, e))?;
        serde_json::to_value(&*series).map_err(Failure::io)?
    };
    if as_json {
        return print_json(&series);
    }
    let rows = series.as_array().cloned().unwrap_or_default();
    let mut out = std::io::stdout().lock();
    let header = format!(
        "{:<26} {:>10} {:>14} {:>10} {:>10}",
        "window_start", "executions", "mean_duration", "failure", "flaky"
    );
    writeln!(out, "{header}").map_err(Failure::io)?;
    for r in rows {
        writeln!(
            out,
            "{:<26} {:>10} {:>14} {:>10} {:>10}",
            r["window_start"].as_str().unwrap_or("?"),
            r["executions_frequency"].to_string(),
            fmt_opt(&r["mean_duration"], 1),
            fmt_opt(&r["failure_ratio"], 4),
            fmt_opt(&r["flaky_failure_ratio"], 4),
        )
        .map_err(Failure::io)?;
    }
    Ok(())
}

fn export(local: Local, out: Option<PathBuf>) -> CliResult {
    let config = load_config(&local)?;
    if config.store.path.is_none() {
        return Err(Failure::usage(
            "export needs a store path (--store or store.path)",
        ));
    }
    let (twin, _) = ops::twin_from_config(config, Arc::new(SystemClock))?;
    let n = match out {
        Some(path) => {
            let f = std::fs::File::create(&path).map_err(Failure::io)?;
            twin.store.export_jobs(std::io::BufWriter::new(f))
        }
        None => twin.store.export_jobs(std::io::stdout().lock()),
    }
    .map_err(Failure::io)?;
    eprintln!("exported {n} jobs");
    Ok(())
}

fn dead_letters(local: Local, file: Option<PathBuf>, do_replay: bool) -> CliResult {
    let config = load_config(&local)?;
    let path = file
        .or_else(|| config.ingest.dead_letter_path.clone())
        .ok_or_else(|| {
            Failure::usage("no dead-letter log given (--file or ingest.dead_letter_path)")
        })?;
    let letters = DeadLetterLog::read(&path).map_err(Failure::io)?;
    if !do_replay {
        return print_json(&letters);
    }
    let (twin, _) = ops::twin_from_config(config, Arc::new(SystemClock))?;
    let summary = twin.ingest.replay_dead_letters(letters)?;
    twin.pump();
    print_json(&summary)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Serve { local, bind } => serve(local, bind),
        Command::Backfill {
            local,
            remote,
            projects,
            limit,
        } => backfill(local, remote, projects, limit),
        Command::Replay {
            local,
            remote,
            file,
            speed,
            webhook_token,
        } => replay(local, remote, file, speed, webhook_token),
        Command::Simulate {
            local,
            horizon,
            speed,
            serve,
            bind,
        } => simulate(local, horizon, speed, serve, bind),
        Command::Metrics {
            local,
            remote,
            scope,
            interval,
            from,
            to,
            json,
        } => metrics(local, remote, scope, interval, from, to, json),
        Command::Export { local, out } => export(local, out),
        Command::DeadLetters {
            local,
            file,
            replay,
        } => dead_letters(local, file, replay),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::usage(e.render().to_string());
            eprintln!("{}", f.body);
            return ExitCode::from(f.exit);
        }
    };
    let default_level = if matches!(
        cli.command,
        Command::Serve { .. } | Command::Simulate { serve: true, .. }
    ) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.exit)
        }
    }
}
