//! The Modbus master: polls each analyser once per interval and appends the
//! resulting samples (or gap events) to the store.

use std::collections::HashMap;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use tokio::time::{self, Instant};
use tokio_util::sync::CancellationToken;
use tracing::{debug, error, info, warn};

use crate::modbus::{decode_response, encode_read_request, f32_from_registers, ModbusError, ReadRequest};
use crate::registers::{MeasurementKind, RegisterMap, BLOCK_LEN};
use crate::sample::{GapEvent, GapReason, PollOutcome, Sample};
use crate::store::{StoreError, StoreSink};
use crate::transport::{drain, read_response, BusRegistry, Connector, Endpoint, ReadError, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub name: String,
    pub unit: u8,
    pub transport: Endpoint,
    #[serde(default)]
    pub register_map: RegisterMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PollPolicy {
    pub interval_ms: u64,
    pub timeout_ms: u64,
    /// Attempts per request.
    pub retries: u32,
    /// One 12-register read per cycle instead of six.
    pub fast: bool,
}

impl Default for PollPolicy {
    fn default() -> Self {
        PollPolicy { interval_ms: 1000, timeout_ms: 500, retries: 3, fast: false }
    }
}

impl PollPolicy {
    pub fn interval(&self) -> Duration {
        Duration::from_millis(self.interval_ms)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// True when a fully failing request would run past one interval; the
    /// cycle budget then cuts the later attempts short.
    pub fn retries_exceed_interval(&self) -> bool {
        self.timeout_ms.saturating_mul(self.retries as u64) > self.interval_ms
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot open transport {endpoint}: {source}")]
    Transport { endpoint: Endpoint, source: std::io::Error },
    #[error("store append failed for {device}: {source}")]
    Store { device: String, source: StoreError },
}

/// A (re)connectable link to the devices behind one endpoint.
pub struct Link {
    connector: Option<Connector>,
    transport: Option<Box<dyn Transport>>,
}

#[derive(Debug)]
enum AttemptError {
    Timeout,
    Frame(ModbusError),
    Exception(u8),
    Disconnected,
}

impl Link {
    pub fn new(connector: Connector) -> Self {
        Link { connector: Some(connector), transport: None }
    }

    /// Wrap an already open transport. Once it closes the link stays down.
    pub fn from_transport(transport: impl Transport + 'static) -> Self {
        Link { connector: None, transport: Some(Box::new(transport)) }
    }

    async fn transact(&mut self, req: &ReadRequest, deadline: Instant) -> Result<Vec<u16>, AttemptError> {
        if self.transport.is_none() {
            let Some(connector) = &self.connector else {
                time::sleep_until(deadline).await;
                return Err(AttemptError::Timeout);
            };
            let connected = time::timeout_at(deadline, connector.connect()).await;
            match connected {
                Ok(Ok(t)) => self.transport = Some(t),
                Ok(Err(e)) => {
                    debug!(error = %e, "connect failed");
                    return Err(AttemptError::Timeout);
                }
                Err(_) => return Err(AttemptError::Timeout),
            }
        }
        let t = self.transport.as_mut().unwrap();
        let frame = encode_read_request(req).map_err(AttemptError::Frame)?;
        let io = async {
            drain(t).await?;
            t.send(&frame).await?;
            read_response(t, deadline).await
        };
        match io.await {
            Ok(reply) => match decode_response(&reply, req) {
                Ok(regs) => Ok(regs),
                Err(ModbusError::ExceptionReceived(code)) => Err(AttemptError::Exception(code)),
                Err(e) => Err(AttemptError::Frame(e)),
            },
            Err(ReadError::Timeout) => Err(AttemptError::Timeout),
            Err(ReadError::Closed) | Err(ReadError::Io(_)) => {
                self.transport = None;
                Err(AttemptError::Disconnected)
            }
        }
    }

    /// One request with retries, never running past `budget`.
    async fn request(
        &mut self,
        req: &ReadRequest,
        policy: &PollPolicy,
        budget: Instant,
    ) -> Result<Vec<u16>, GapReason> {
        let mut reason = GapReason::Timeout;
        for attempt in 1..=policy.retries.max(1) {
            let now = Instant::now();
            if now >= budget {
                break;
            }
            let deadline = budget.min(now + policy.timeout());
            match self.transact(req, deadline).await {
                Ok(regs) => return Ok(regs),
                // the device answered deliberately; asking again won't help
                Err(AttemptError::Exception(code)) => return Err(GapReason::Exception(code)),
                Err(AttemptError::Timeout) | Err(AttemptError::Disconnected) => {
                    reason = GapReason::Timeout
                }
                Err(AttemptError::Frame(e)) => {
                    debug!(unit = req.unit, start = req.start, attempt, error = %e, "bad frame");
                    reason = GapReason::CrcError;
                }
            }
        }
        Err(reason)
    }
}

fn decode_block(regs: &[u16]) -> Result<f32, GapReason> {
    f32_from_registers(regs[0], regs[1]).map_err(|_| GapReason::InvalidValue)
}

/// Six two-register reads in fixed kind order. All six must succeed within
/// `budget` for a sample; anything else is a gap.
pub async fn poll_device_within(
    link: &mut Link,
    device: &DeviceConfig,
    policy: &PollPolicy,
    budget: Instant,
) -> PollOutcome {
    let mut values = [0f32; 6];
    for kind in MeasurementKind::ALL {
        let req = match ReadRequest::new(device.unit, device.register_map.start(kind), BLOCK_LEN) {
            Ok(r) => r,
            Err(_) => return GapEvent::new(&device.name, Utc::now(), GapReason::Exception(0x02)).into(),
        };
        let value = link.request(&req, policy, budget).await.and_then(|regs| decode_block(&regs));
        match value {
            Ok(v) => values[kind.index()] = v,
            Err(reason) => return GapEvent::new(&device.name, Utc::now(), reason).into(),
        }
    }
    Sample::from_values(&device.name, Utc::now(), values).into()
}

/// [`poll_device_within`] with one interval as the budget.
pub async fn poll_device(link: &mut Link, device: &DeviceConfig, policy: &PollPolicy) -> PollOutcome {
    poll_device_within(link, device, policy, Instant::now() + policy.interval()).await
}

/// One 12-register read covering the contiguous default map.
pub async fn read_all_fast_within(
    link: &mut Link,
    device: &DeviceConfig,
    policy: &PollPolicy,
    budget: Instant,
) -> Result<PollOutcome, GatewayError> {
    if !device.register_map.is_contiguous_default() {
        return Err(GatewayError::InvalidArgument(format!(
            "device {} does not use the contiguous default register map",
            device.name
        )));
    }
    let req = ReadRequest::new(device.unit, 0, RegisterMap::contiguous_len())
        .map_err(|e| GatewayError::InvalidArgument(e.to_string()))?;
    let outcome = match link.request(&req, policy, budget).await {
        Ok(regs) => {
            let values: Result<Vec<f32>, _> = regs.chunks_exact(2).map(decode_block).collect();
            match values {
                Ok(v) => Sample::from_values(&device.name, Utc::now(), v.try_into().unwrap()).into(),
                Err(reason) => GapEvent::new(&device.name, Utc::now(), reason).into(),
            }
        }
        Err(reason) => GapEvent::new(&device.name, Utc::now(), reason).into(),
    };
    Ok(outcome)
}

pub async fn read_all_fast(
    link: &mut Link,
    device: &DeviceConfig,
    policy: &PollPolicy,
) -> Result<PollOutcome, GatewayError> {
    read_all_fast_within(link, device, policy, Instant::now() + policy.interval()).await
}

pub fn validate_devices(devices: &[DeviceConfig], policy: &PollPolicy) -> Result<(), GatewayError> {
    let invalid = |msg: String| Err(GatewayError::InvalidArgument(msg));
    if policy.interval_ms == 0 || policy.timeout_ms == 0 || policy.retries == 0 {
        return invalid("poll interval, timeout and retries must be positive".into());
    }
    let mut names = HashMap::new();
    let mut units = HashMap::new();
    for d in devices {
        if d.name.is_empty() || d.name.len() > 64 {
            return invalid(format!("device name '{}' must be 1..=64 bytes", d.name));
        }
        if !(1..=247).contains(&d.unit) {
            return invalid(format!("device {} has unit {} outside 1..=247", d.name, d.unit));
        }
        if names.insert(d.name.as_str(), ()).is_some() {
            return invalid(format!("duplicate device name '{}'", d.name));
        }
        if let Some(other) = units.insert((&d.transport, d.unit), d.name.as_str()) {
            return invalid(format!(
                "devices {other} and {} share unit {} on {}",
                d.name, d.unit, d.transport
            ));
        }
        d.register_map
            .validate()
            .map_err(|e| GatewayError::InvalidArgument(format!("device {}: {e}", d.name)))?;
        if policy.fast && !d.register_map.is_contiguous_default() {
            return invalid(format!("fast polling needs the default register map (device {})", d.name));
        }
    }
    Ok(())
}

/// Poll every device until `cancel` fires. Devices behind the same endpoint
/// share one task and are polled one after another; distinct endpoints run
/// independently. Cycles follow a fixed cadence: each deadline is the
/// previous deadline plus the interval.
pub async fn run_loop(
    devices: Vec<DeviceConfig>,
    policy: PollPolicy,
    buses: BusRegistry,
    sink: StoreSink,
    cancel: CancellationToken,
) -> Result<(), GatewayError> {
    validate_devices(&devices, &policy)?;
    if policy.retries_exceed_interval() {
        info!(
            interval_ms = policy.interval_ms,
            timeout_ms = policy.timeout_ms,
            retries = policy.retries,
            "timeout x retries exceeds the poll interval; late attempts are cut at the cycle boundary"
        );
    }
    let mut groups: Vec<(Endpoint, Vec<DeviceConfig>)> = Vec::new();
    for d in devices {
        match groups.iter_mut().find(|(e, _)| *e == d.transport) {
            Some((_, v)) => v.push(d),
            None => groups.push((d.transport.clone(), vec![d])),
        }
    }
    for (_, devs) in &groups {
        for d in devs {
            sink.ensure_table(&d.name)
                .await
                .map_err(|source| GatewayError::Store { device: d.name.clone(), source })?;
        }
    }

    let mut tasks = Vec::new();
    for (endpoint, devs) in groups {
        let connector = Connector::for_endpoint(&endpoint, &buses)
            .map_err(|source| GatewayError::Transport { endpoint: endpoint.clone(), source })?;
        let link = Link::new(connector);
        // a fatal error in one task stops the rest
        let stop = cancel.child_token();
        tasks.push(tokio::spawn(poll_transport(link, devs, policy, sink.clone(), stop, cancel.clone())));
    }
    let mut result = Ok(());
    for t in tasks {
        match t.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                cancel.cancel();
                if result.is_ok() {
                    result = Err(e);
                }
            }
            Err(join) => std::panic::resume_unwind(join.into_panic()),
        }
    }
    result
}

async fn poll_transport(
    mut link: Link,
    devices: Vec<DeviceConfig>,
    policy: PollPolicy,
    sink: StoreSink,
    cancel: CancellationToken,
    fail_all: CancellationToken,
) -> Result<(), GatewayError> {
    let interval = policy.interval();
    let slot = interval / devices.len() as u32;
    let mut last_ts = HashMap::new();
    let mut next = Instant::now();
    loop {
        tokio::select! {
            _ = cancel.cancelled() => return Ok(()),
            _ = time::sleep_until(next) => {}
        }
        for (i, device) in devices.iter().enumerate() {
            let started = Instant::now();
            let budget = next + slot * (i as u32 + 1);
            let mut outcome = if policy.fast {
                read_all_fast_within(&mut link, device, &policy, budget).await?
            } else {
                poll_device_within(&mut link, device, &policy, budget).await
            };
            let ts = outcome.ts();
            if let Some(prev) = last_ts.get(&device.name) {
                if ts <= *prev {
                    set_ts(&mut outcome, *prev + chrono::Duration::milliseconds(1));
                }
            }
            last_ts.insert(device.name.clone(), outcome.ts());
            let latency_ms = started.elapsed().as_millis() as u64;
            match &outcome {
                PollOutcome::Sample(s) => info!(device = %device.name, outcome = "sample", latency_ms, voltage = s.voltage),
                PollOutcome::Gap(g) => info!(device = %device.name, outcome = "gap", reason = %g.reason, latency_ms),
            }
            if let Err(source) = sink.append(outcome).await {
                error!(device = %device.name, error = %source, "store append failed; stopping gateway");
                fail_all.cancel();
                return Err(GatewayError::Store { device: device.name.clone(), source });
            }
        }
        next += interval;
        let now = Instant::now();
        while next + interval <= now {
            warn!("poll cycle overran by more than one interval; skipping a slot");
            next += interval;
        }
    }
}

fn set_ts(outcome: &mut PollOutcome, ts: chrono::DateTime<Utc>) {
    match outcome {
        PollOutcome::Sample(s) => s.ts = ts,
        PollOutcome::Gap(g) => g.ts = ts,
    }
}
