use std::io;

use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{self, Instant, MissedTickBehavior};
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use super::state::{FaultKind, Readings, SimState};
use crate::transport::{Bus, RequestFramer, StreamTransport, Transport, INTER_FRAME_GAP};

/// Messages into a running serve loop.
#[derive(Debug)]
pub enum Control {
    Fault(FaultKind),
    Snapshot(oneshot::Sender<Readings>),
}

/// Client side of a spawned simulator.
#[derive(Clone)]
pub struct SimHandle {
    unit: u8,
    tx: mpsc::UnboundedSender<Control>,
}

impl SimHandle {
    pub fn unit(&self) -> u8 {
        self.unit
    }

    pub fn inject(&self, fault: FaultKind) -> bool {
        self.tx.send(Control::Fault(fault)).is_ok()
    }

    pub async fn snapshot(&self) -> Option<Readings> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Control::Snapshot(tx)).ok()?;
        rx.await.ok()
    }
}

async fn next_tick(ticker: &mut Option<time::Interval>) {
    match ticker {
        Some(t) => {
            t.tick().await;
        }
        None => std::future::pending().await,
    }
}

/// Run the slave until cancelled or the transport closes. One request is
/// handled at a time; the reply is written before the next frame is looked
/// at. Returns the final state.
pub async fn serve<T: Transport>(
    mut state: SimState,
    mut transport: T,
    mut controls: Option<mpsc::UnboundedReceiver<Control>>,
    cancel: CancellationToken,
) -> io::Result<SimState> {
    let period = state.config().tick_period();
    let dt = period.map(|p| p.as_secs_f64()).unwrap_or(0.0);
    let mut ticker = period.map(|p| {
        let mut t = time::interval_at(Instant::now() + p, p);
        t.set_missed_tick_behavior(MissedTickBehavior::Delay);
        t
    });
    let mut framer = RequestFramer::new();
    let mut last_rx = Instant::now();

    loop {
        let gap_deadline = last_rx + INTER_FRAME_GAP;
        let partial = framer.pending() > 0;
        // Controls win over pending bytes so a fault injected before a
        // request is in effect when that request is answered.
        tokio::select! {
            biased;
            _ = cancel.cancelled() => break,
            msg = async { controls.as_mut().unwrap().recv().await }, if controls.is_some() => match msg {
                Some(Control::Fault(fault)) => {
                    info!(unit = state.unit(), %fault, "fault injected");
                    state.inject_fault(fault);
                }
                Some(Control::Snapshot(reply)) => {
                    let _ = reply.send(state.readings());
                }
                None => controls = None,
            },
            received = transport.recv() => match received? {
                Some(bytes) => {
                    framer.push(&bytes);
                    last_rx = Instant::now();
                    while let Some(frame) = framer.next_frame() {
                        if let Some(reply) = state.handle_request(&frame) {
                            transport.send(&reply).await?;
                        }
                    }
                }
                None => {
                    debug!(unit = state.unit(), "transport closed");
                    break;
                }
            },
            _ = time::sleep_until(gap_deadline), if partial => framer.reset(),
            _ = next_tick(&mut ticker) => state.tick(dt),
        }
    }
    Ok(state)
}

/// Attach a simulator to an in-memory bus and run it in the background.
pub fn spawn_on_bus(
    state: SimState,
    bus: &Bus,
    cancel: CancellationToken,
) -> (SimHandle, JoinHandle<io::Result<SimState>>) {
    let (tx, rx) = mpsc::unbounded_channel();
    let handle = SimHandle { unit: state.unit(), tx };
    let port = bus.port();
    let task = tokio::spawn(serve(state, port, Some(rx), cancel));
    (handle, task)
}

/// Expose a bus over TCP. Every accepted connection is bridged onto the
/// bus, so all simulators attached to it see the raw RTU bytes.
pub async fn serve_tcp(listener: TcpListener, bus: Bus, cancel: CancellationToken) -> io::Result<()> {
    loop {
        let (socket, peer) = tokio::select! {
            _ = cancel.cancelled() => return Ok(()),
            accepted = listener.accept() => accepted?,
        };
        socket.set_nodelay(true)?;
        debug!(%peer, "master connected");
        let port = bus.port();
        let cancel = cancel.clone();
        tokio::spawn(async move {
            if let Err(e) = bridge(StreamTransport::new(socket), port, cancel).await {
                warn!(%peer, error = %e, "bridge closed with error");
            }
        });
    }
}

async fn bridge<A: Transport, B: Transport>(
    mut a: A,
    mut b: B,
    cancel: CancellationToken,
) -> io::Result<()> {
    loop {
        tokio::select! {
            _ = cancel.cancelled() => return Ok(()),
            r = a.recv() => match r? {
                Some(bytes) => b.send(&bytes).await?,
                None => return Ok(()),
            },
            r = b.recv() => match r? {
                Some(bytes) => a.send(&bytes).await?,
                None => return Ok(()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modbus::{decode_response, encode_read_request, ReadRequest};
    use crate::sim::SimConfig;
    use crate::transport::read_response;
    use std::time::Duration;

    fn frozen(unit: u8) -> SimState {
        SimState::new(SimConfig { unit, tick_ms: 0, walk_step: 0.0, ..SimConfig::default() })
    }

    async fn ask<T: Transport>(t: &mut T, req: &ReadRequest) -> Option<Vec<u16>> {
        t.send(&encode_read_request(req).unwrap()).await.unwrap();
        let deadline = Instant::now() + Duration::from_millis(200);
        let frame = read_response(t, deadline).await.ok()?;
        decode_response(&frame, req).ok()
    }

    #[tokio::test]
    async fn hundred_sequential_requests_over_pipe() {
        let (a, b) = tokio::io::duplex(256);
        let cancel = CancellationToken::new();
        let task = tokio::spawn(serve(frozen(1), StreamTransport::new(b), None, cancel));
        let mut master = StreamTransport::new(a);
        for i in 0..100u16 {
            let req = ReadRequest::new(1, (i % 6) * 2, 2).unwrap();
            assert!(ask(&mut master, &req).await.is_some(), "request {i}");
        }
        drop(master);
        // closing the pipe shuts the loop down cleanly
        task.await.unwrap().unwrap();
    }

    #[tokio::test]
    async fn noise_before_a_request_is_skipped() {
        let (a, b) = tokio::io::duplex(256);
        let cancel = CancellationToken::new();
        tokio::spawn(serve(frozen(1), StreamTransport::new(b), None, cancel.clone()));
        let mut master = StreamTransport::new(a);
        let noise: [&[u8]; 3] = [&[0xFF, 0x00, 0x13], &[0x01, 0x04, 0x00], &[0x55; 11]];
        for n in noise {
            let req = ReadRequest::new(1, 0, 2).unwrap();
            let mut line = n.to_vec();
            line.extend(encode_read_request(&req).unwrap());
            master.send(&line).await.unwrap();
            let frame = read_response(&mut master, Instant::now() + Duration::from_millis(200)).await.unwrap();
            assert_eq!(decode_response(&frame, &req).unwrap(), vec![0x435C, 0x0000]);
        }
        cancel.cancel();
    }

    #[tokio::test]
    async fn two_units_share_a_bus() {
        let bus = Bus::new();
        let cancel = CancellationToken::new();
        let mut s2 = SimConfig { unit: 2, tick_ms: 0, walk_step: 0.0, ..SimConfig::default() };
        s2.nominal_voltage = 230.0;
        spawn_on_bus(frozen(1), &bus, cancel.clone());
        spawn_on_bus(SimState::new(s2), &bus, cancel.clone());
        let mut master = bus.port();
        for _ in 0..10 {
            let v1 = ask(&mut master, &ReadRequest::new(1, 0, 2).unwrap()).await.unwrap();
            let v2 = ask(&mut master, &ReadRequest::new(2, 0, 2).unwrap()).await.unwrap();
            assert_eq!(v1, vec![0x435C, 0]);
            assert_eq!(v2, vec![0x4366, 0]);
            assert!(ask(&mut master, &ReadRequest::new(3, 0, 2).unwrap()).await.is_none());
        }
        cancel.cancel();
    }

    #[tokio::test]
    async fn fault_control_and_snapshot() {
        let bus = Bus::new();
        let cancel = CancellationToken::new();
        let (handle, task) = spawn_on_bus(frozen(1), &bus, cancel.clone());
        let mut master = bus.port();
        let req = ReadRequest::new(1, 0, 2).unwrap();
        assert!(ask(&mut master, &req).await.is_some());
        handle.inject(FaultKind::FuseBlown);
        assert!(ask(&mut master, &req).await.is_none());
        handle.inject(FaultKind::Restore);
        assert!(ask(&mut master, &req).await.is_some());
        assert_eq!(handle.snapshot().await.unwrap().voltage, 220.0);
        cancel.cancel();
        assert!(task.await.unwrap().unwrap().fuse_intact());
    }

    #[tokio::test]
    async fn tcp_listener_bridges_to_bus() {
        let bus = Bus::new();
        let cancel = CancellationToken::new();
        spawn_on_bus(frozen(1), &bus, cancel.clone());
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(serve_tcp(listener, bus, cancel.clone()));
        let stream = tokio::net::TcpStream::connect(addr).await.unwrap();
        let mut master = StreamTransport::new(stream);
        let regs = ask(&mut master, &ReadRequest::new(1, 0, 2).unwrap()).await.unwrap();
        assert_eq!(regs, vec![0x435C, 0]);
        cancel.cancel();
    }
}
