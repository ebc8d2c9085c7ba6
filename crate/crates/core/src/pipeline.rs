//! Wiring for the long-running roles: simulators, gateway, API, and the
//! all-in-one demo. Components talk only through transports and the store.

use std::collections::HashMap;
use std::io;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use tokio::net::TcpListener;
use tokio::time::{self, Instant};
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use crate::api::{self, ApiConfig, AuthRecord, DeviceInfo, DEFAULT_ITERATIONS};
use crate::config::{Config, ConfigError};
use crate::gateway::{run_loop, GatewayError};
use crate::sim::{serve_admin, serve_tcp, spawn_on_bus, FaultKind, SimHandle, SimState};
use crate::store::{StoreError, StoreWriter};
use crate::transport::{Bus, BusRegistry, Endpoint};

pub const DEMO_USER: &str = "demo";
pub const DEMO_PASSWORD: &str = "demo";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

async fn bind(addr: &str) -> Result<TcpListener, PipelineError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| PipelineError::Bind { addr: addr.to_owned(), source })
}

/// Start every configured simulator. Simulators sharing a listen endpoint
/// share one bus; TCP endpoints get a listener bridged onto that bus.
pub async fn start_sims(
    config: &Config,
    buses: &BusRegistry,
    cancel: &CancellationToken,
) -> Result<Vec<SimHandle>, PipelineError> {
    config.validate_sims()?;
    let mut tcp_buses: HashMap<String, Bus> = HashMap::new();
    let mut handles = Vec::new();
    let mut admin: HashMap<String, Vec<SimHandle>> = HashMap::new();
    for sim in &config.sims {
        let bus = match sim.listen.as_ref().expect("validated") {
            Endpoint::Memory(name) => buses.bus(name),
            Endpoint::Tcp(addr) => {
                if !tcp_buses.contains_key(addr) {
                    let listener = bind(addr).await?;
                    let bus = Bus::new();
                    info!(%addr, "simulator listening");
                    tokio::spawn(serve_tcp(listener, bus.clone(), cancel.clone()));
                    tcp_buses.insert(addr.clone(), bus);
                }
                tcp_buses[addr].clone()
            }
            Endpoint::Serial(_) => unreachable!("rejected by validation"),
        };
        let (handle, _) = spawn_on_bus(SimState::new(sim.clone()), &bus, cancel.clone());
        if let Some(addr) = &sim.admin {
            admin.entry(addr.clone()).or_default().push(handle.clone());
        }
        handles.push(handle);
    }
    for (addr, sims) in admin {
        let listener = bind(&addr).await?;
        info!(%addr, "simulator admin port listening");
        tokio::spawn(serve_admin(listener, sims, cancel.clone()));
    }
    Ok(handles)
}

pub fn api_config(config: &Config) -> ApiConfig {
    ApiConfig {
        devices: config.devices.iter().map(|d| DeviceInfo { name: d.name.clone(), unit: d.unit }).collect(),
        store_path: config.store_path.clone(),
        users: config.users.clone(),
        token_ttl: config.token_ttl(),
        static_dir: config.static_dir.clone(),
    }
}

/// Bind the API listener up front so bind failures surface before anything
/// else starts.
pub async fn start_api(config: ApiConfig, bind_addr: &str, cancel: &CancellationToken) -> Result<std::net::SocketAddr, PipelineError> {
    let listener = bind(bind_addr).await?;
    let addr = listener.local_addr().map_err(|source| PipelineError::Bind { addr: bind_addr.to_owned(), source })?;
    info!(%addr, "api listening");
    let cancel = cancel.clone();
    tokio::spawn(async move {
        if let Err(e) = api::serve(listener, config, cancel).await {
            warn!(error = %e, "api server stopped");
        }
    });
    Ok(addr)
}

/// `<fault>@<seconds>`, e.g. `fuse-blown@30`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledFault {
    pub at: Duration,
    pub fault: FaultKind,
}

impl FromStr for ScheduledFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (fault, at) = s.split_once('@').ok_or_else(|| format!("expected <fault>@<seconds>, got '{s}'"))?;
        let secs: f64 = at.parse().map_err(|_| format!("bad fault time '{at}'"))?;
        if !(secs >= 0.0 && secs.is_finite()) {
            return Err(format!("bad fault time '{at}'"));
        }
        Ok(ScheduledFault { at: Duration::from_secs_f64(secs), fault: fault.parse()? })
    }
}

pub struct DemoOptions {
    pub config: Config,
    /// Run until cancelled when `None`.
    pub duration: Option<Duration>,
    pub faults: Vec<ScheduledFault>,
    pub serve_api: bool,
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    /// The demo's t = 0; fault times are offsets from here.
    pub started: DateTime<Utc>,
    pub api_addr: Option<std::net::SocketAddr>,
    pub injected: Vec<(DateTime<Utc>, FaultKind)>,
}

/// Simulators, gateway and (optionally) the API in one process.
///
/// Polling starts half an interval after t = 0, so faults scheduled on
/// whole-interval marks fall between poll cycles rather than inside one.
pub async fn run_demo(
    mut opts: DemoOptions,
    cancel: CancellationToken,
    on_ready: impl FnOnce(&DemoReport),
) -> Result<DemoReport, PipelineError> {
    let config = &mut opts.config;
    if config.users.is_empty() && opts.serve_api {
        warn!(user = DEMO_USER, password = DEMO_PASSWORD, "no users configured; adding the demo login");
        config.users.push(AuthRecord::create(DEMO_USER, DEMO_PASSWORD, DEFAULT_ITERATIONS));
    }
    config.validate()?;
    let writer = StoreWriter::open(&config.store_path)?;
    let buses = BusRegistry::new();
    let inner = cancel.child_token();

    let sims = start_sims(config, &buses, &inner).await?;
    let api_addr = if opts.serve_api {
        Some(start_api(api_config(config), &config.api_bind, &inner).await?)
    } else {
        None
    };

    let origin = Instant::now();
    let started = Utc::now();
    let injected = Arc::new(Mutex::new(Vec::new()));
    for sf in opts.faults.iter().copied() {
        let sims = sims.clone();
        let injected = injected.clone();
        let stop = inner.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = stop.cancelled() => {}
                _ = time::sleep_until(origin + sf.at) => {
                    for s in &sims {
                        s.inject(sf.fault);
                    }
                    info!(fault = %sf.fault, at_s = sf.at.as_secs_f64(), "scheduled fault injected");
                    injected.lock().unwrap().push((Utc::now(), sf.fault));
                }
            }
        });
    }

    let settle = config.poll.interval() / 2;
    let gateway = {
        let devices = config.devices.clone();
        let policy = config.poll;
        let sink = writer.sink();
        let stop = inner.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = stop.cancelled() => return Ok(()),
                _ = time::sleep_until(origin + settle) => {}
            }
            run_loop(devices, policy, buses, sink, stop).await
        })
    };

    on_ready(&DemoReport { started, api_addr, injected: Vec::new() });

    let deadline = opts.duration.map(|d| origin + d);
    let mut gateway = gateway;
    let early = tokio::select! {
        _ = cancel.cancelled() => None,
        _ = async { time::sleep_until(deadline.unwrap()).await }, if deadline.is_some() => None,
        r = &mut gateway => Some(r),
    };
    inner.cancel();
    let result = match early {
        Some(r) => r,
        None => gateway.await,
    };
    writer.close();
    match result {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return Err(e.into()),
        Err(join) => std::panic::resume_unwind(join.into_panic()),
    }
    let injected = injected.lock().unwrap().clone();
    Ok(DemoReport { started, api_addr, injected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_scheduled_fault() {
        let f: ScheduledFault = "fuse-blown@30".parse().unwrap();
        assert_eq!(f.at, Duration::from_secs(30));
        assert_eq!(f.fault, FaultKind::FuseBlown);
        let f: ScheduledFault = "voltage-sag@2.5".parse().unwrap();
        assert_eq!(f.at, Duration::from_millis(2500));
        assert!("fuse-blown".parse::<ScheduledFault>().is_err());
        assert!("fuse-blown@-1".parse::<ScheduledFault>().is_err());
        assert!("nope@1".parse::<ScheduledFault>().is_err());
    }
}
