//! `switchmon`: simulator, gateway, API server, demo and store queries.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

mod query;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use switchmon::api::{AuthRecord, DEFAULT_ITERATIONS};
use switchmon::config::{Config, ConfigError};
use switchmon::gateway::run_loop;
use switchmon::pipeline::{self, DemoOptions, PipelineError, ScheduledFault};
use switchmon::sim::SimConfig;
use switchmon::store::{Store, StoreWriter};
use switchmon::transport::{BusRegistry, Endpoint};

#[derive(Parser)]
#[command(name = "switchmon", version, about = "Switchboard power monitoring over Modbus RTU")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run simulated power analysers until interrupted.
    Sim(SimArgs),
    /// Poll the configured devices into the store until interrupted.
    Gateway(GatewayArgs),
    /// Serve the JSON API over an existing store.
    Serve(ServeArgs),
    /// Simulator, gateway and API in one process on in-memory buses.
    Demo(DemoArgs),
    /// Print stored rows.
    Query(query::QueryArgs),
    /// Dump every stored row as JSON lines.
    Export(ExportArgs),
    /// Hash a password read from stdin into a `[[users]]` entry.
    HashPassword(HashArgs),
    /// Print the built-in demo configuration as a starting point.
    InitConfig,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    unit: Option<u8>,
    /// `host:port`, `tcp://host:port`.
    #[arg(long)]
    listen: Option<Endpoint>,
    #[arg(long)]
    seed: Option<u64>,
    /// Line-oriented control port for fault injection.
    #[arg(long)]
    admin: Option<String>,
    /// Physics tick in milliseconds; 0 freezes the readings.
    #[arg(long)]
    tick_ms: Option<u64>,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    interval_ms: Option<u64>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    /// One 12-register read per cycle.
    #[arg(long)]
    fast: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    /// Stop after this many seconds; runs until interrupted otherwise.
    #[arg(long)]
    duration: Option<f64>,
    /// `<fault>@<seconds>`; fault is fuse-blown, voltage-sag, pump-off or restore.
    #[arg(long = "fault")]
    faults: Vec<ScheduledFault>,
    /// Seed for every simulator.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    interval_ms: Option<u64>,
    #[arg(long)]
    no_api: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct HashArgs {
    #[arg(long)]
    user: String,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: u32,
}

/// Error classified by exit status.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.quiet);
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn init_logging(quiet: bool) {
    use tracing_subscriber::EnvFilter;
    let filter = if quiet {
        EnvFilter::new("warn")
    } else {
        EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"))
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
}

fn load(path: Option<&PathBuf>) -> Result<Option<Config>, Failure> {
    path.map(Config::load).transpose().map_err(Failure::from)
}

/// Cancelled on Ctrl-C or SIGTERM.
fn shutdown_token() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            match signal(SignalKind::terminate()) {
                Ok(mut term) => {
                    tokio::select! {
                        _ = tokio::signal::ctrl_c() => {}
                        _ = term.recv() => {}
                    }
                }
                Err(_) => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
        info!("shutting down");
        t.cancel();
    });
    token
}

async fn run(cli: Cli) -> Result<(), Failure> {
    let config = load(cli.config.as_ref())?;
    match cli.command {
        Command::Sim(args) => cmd_sim(config, args).await,
        Command::Gateway(args) => cmd_gateway(config, args).await,
        Command::Serve(args) => cmd_serve(config, args).await,
        Command::Demo(args) => cmd_demo(config, args).await,
        Command::Query(args) => query::cmd_query(config, args),
        Command::Export(args) => cmd_export(config, args),
        Command::HashPassword(args) => cmd_hash_password(args),
        Command::InitConfig => {
            print!("{}", Config::demo().to_toml());
            Ok(())
        }
    }
}

async fn cmd_sim(config: Option<Config>, args: SimArgs) -> Result<(), Failure> {
    let mut config = config.unwrap_or_default();
    if config.sims.is_empty() {
        config.sims.push(SimConfig { listen: Some(Endpoint::Tcp("127.0.0.1:5020".into())), ..SimConfig::default() });
    }
    let overrides = args.unit.is_some()
        || args.listen.is_some()
        || args.seed.is_some()
        || args.admin.is_some()
        || args.tick_ms.is_some();
    if overrides && config.sims.len() > 1 {
        return Err(usage("--unit/--listen/--seed/--admin/--tick-ms need a config with at most one [[sims]] entry"));
    }
    let sim = &mut config.sims[0];
    if let Some(unit) = args.unit {
        sim.unit = unit;
    }
    if let Some(listen) = args.listen {
        sim.listen = Some(listen);
    }
    if let Some(seed) = args.seed {
        sim.seed = seed;
    }
    if args.admin.is_some() {
        sim.admin = args.admin;
    }
    if let Some(tick) = args.tick_ms {
        sim.tick_ms = tick;
    }
    for s in &config.sims {
        s.validate().map_err(usage)?;
        if !matches!(s.listen, Some(Endpoint::Tcp(_))) {
            return Err(usage(format!("simulator unit {} needs a tcp listen address in this mode", s.unit)));
        }
    }
    config.validate_sims()?;

    let cancel = shutdown_token();
    let handles = pipeline::start_sims(&config, &BusRegistry::new(), &cancel).await?;
    for s in &config.sims {
        info!(unit = s.unit, seed = s.seed, listen = %s.listen.as_ref().unwrap(), "simulator running");
    }
    cancel.cancelled().await;
    drop(handles);
    Ok(())
}

async fn cmd_gateway(config: Option<Config>, args: GatewayArgs) -> Result<(), Failure> {
    let mut config = config.ok_or_else(|| usage("gateway needs --config with at least one [[devices]] entry"))?;
    if let Some(store) = args.store {
        config.store_path = store;
    }
    let poll = &mut config.poll;
    poll.interval_ms = args.interval_ms.unwrap_or(poll.interval_ms);
    poll.timeout_ms = args.timeout_ms.unwrap_or(poll.timeout_ms);
    poll.retries = args.retries.unwrap_or(poll.retries);
    poll.fast |= args.fast;
    config.validate()?;
    if config.devices.is_empty() {
        return Err(usage("no [[devices]] configured"));
    }
    for d in &config.devices {
        if let Endpoint::Memory(bus) = &d.transport {
            warn!(device = %d.name, %bus, "in-memory bus has no simulator in this process; use `demo` or a tcp endpoint");
        }
    }

    let writer = StoreWriter::open(&config.store_path)
        .with_context(|| format!("cannot open store {}", config.store_path.display()))
        .map_err(Failure::Runtime)?;
    let cancel = shutdown_token();
    let result = run_loop(config.devices, config.poll, BusRegistry::new(), writer.sink(), cancel).await;
    writer.close();
    result.map_err(runtime)
}

async fn cmd_serve(config: Option<Config>, args: ServeArgs) -> Result<(), Failure> {
    let mut config = config.ok_or_else(|| usage("serve needs --config with devices and users"))?;
    if let Some(store) = args.store {
        config.store_path = store;
    }
    if let Some(bind) = args.bind {
        config.api_bind = bind;
    }
    if args.static_dir.is_some() {
        config.static_dir = args.static_dir;
    }
    config.validate()?;
    if config.users.is_empty() {
        return Err(usage("no [[users]] configured; create one with `switchmon hash-password --user NAME`"));
    }
    if !config.store_path.exists() {
        warn!(store = %config.store_path.display(), "store does not exist yet; queries return no data until it does");
    }
    let cancel = shutdown_token();
    let addr = pipeline::start_api(pipeline::api_config(&config), &config.api_bind, &cancel).await?;
    println!("serving http://{addr}");
    cancel.cancelled().await;
    Ok(())
}

async fn cmd_demo(config: Option<Config>, args: DemoArgs) -> Result<(), Failure> {
    let mut config = config.unwrap_or_else(Config::demo);
    if let Some(store) = args.store {
        config.store_path = store;
    }
    if let Some(bind) = args.bind {
        config.api_bind = bind;
    }
    if let Some(seed) = args.seed {
        for s in &mut config.sims {
            s.seed = seed;
        }
    }
    if let Some(ms) = args.interval_ms {
        config.poll.interval_ms = ms;
    }
    let duration = match args.duration {
        Some(s) if s.is_finite() && s > 0.0 => Some(Duration::from_secs_f64(s)),
        Some(s) => return Err(usage(format!("--duration must be positive, got {s}"))),
        None => None,
    };
    config.validate()?;
    let store_path = config.store_path.clone();
    let opts = DemoOptions { config, duration, faults: args.faults, serve_api: !args.no_api };
    let report = pipeline::run_demo(opts, shutdown_token(), |r| {
        match r.api_addr {
            Some(addr) => println!("demo started at {}; api on http://{addr}", switchmon::sample::format_ts(&r.started)),
            None => println!("demo started at {}", switchmon::sample::format_ts(&r.started)),
        }
    })
    .await?;
    for (at, fault) in &report.injected {
        println!("injected {fault} at {}", switchmon::sample::format_ts(at));
    }
    let store = Store::open_read_only(&store_path).map_err(runtime)?;
    for table in store.tables() {
        let rows = store.rows(table).map_err(runtime)?;
        let samples = rows.iter().filter(|r| r.sample().is_some()).count();
        println!("{table}: {samples} samples, {} gaps", rows.len() - samples);
    }
    Ok(())
}

fn cmd_export(config: Option<Config>, args: ExportArgs) -> Result<(), Failure> {
    let path = args.store.or(config.map(|c| c.store_path)).unwrap_or_else(|| Config::default().store_path);
    let store = Store::open_read_only(&path)
        .with_context(|| format!("cannot open store {}", path.display()))
        .map_err(Failure::Runtime)?;
    let n = match args.output {
        Some(out) => {
            let file = std::fs::File::create(&out)
                .with_context(|| format!("cannot create {}", out.display()))
                .map_err(Failure::Runtime)?;
            let mut w = std::io::BufWriter::new(file);
            let n = store.export_jsonl(&mut w).map_err(runtime)?;
            std::io::Write::flush(&mut w).map_err(runtime)?;
            n
        }
        None => store.export_jsonl(std::io::stdout().lock()).map_err(runtime)?,
    };
    info!(rows = n, "export complete");
    Ok(())
}

fn cmd_hash_password(args: HashArgs) -> Result<(), Failure> {
    let mut line = String::new();
    std::io::stdin().read_line(&mut line).map_err(runtime)?;
    let password = line.trim_end_matches(['\r', '\n']);
    if password.is_empty() {
        return Err(usage("empty password on stdin"));
    }
    let record = AuthRecord::create(&args.user, password, args.iterations);
    record.validate().map_err(usage)?;
    #[derive(serde::Serialize)]
    struct Users {
        users: Vec<AuthRecord>,
    }
    print!("{}", toml::to_string(&Users { users: vec![record] }).map_err(runtime)?);
    Ok(())
}
