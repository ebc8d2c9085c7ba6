use std::time::Duration;

use switchmon::gateway::{
    poll_device, read_all_fast, run_loop, DeviceConfig, GatewayError, Link, PollPolicy,
};
use switchmon::registers::RegisterMap;
use switchmon::sample::{GapReason, PollOutcome};
use switchmon::sim::{spawn_on_bus, FaultKind, SimConfig, SimState};
use switchmon::store::{Store, StoreWriter};
use switchmon::transport::{Bus, BusRegistry, Endpoint, Transport};
use tokio_util::sync::CancellationToken;

fn frozen_sim(unit: u8) -> SimState {
    SimState::new(SimConfig { unit, tick_ms: 0, walk_step: 0.0, ..SimConfig::default() })
}

fn device(name: &str, unit: u8, bus: &str) -> DeviceConfig {
    DeviceConfig {
        name: name.into(),
        unit,
        transport: Endpoint::Memory(bus.into()),
        register_map: RegisterMap::default(),
    }
}

fn quick_policy() -> PollPolicy {
    PollPolicy { interval_ms: 1000, timeout_ms: 100, retries: 3, fast: false }
}

#[tokio::test]
async fn healthy_poll_yields_sample() {
    let bus = Bus::new();
    let cancel = CancellationToken::new();
    spawn_on_bus(frozen_sim(1), &bus, cancel.clone());
    let mut link = Link::from_transport(bus.port());
    let outcome = poll_device(&mut link, &device("pm01", 1, "b"), &quick_policy()).await;
    let sample = outcome.as_sample().expect("sample");
    // 220 V * 14 A * 0.85
    assert_eq!(sample.active_power, 2618.0);
    assert_eq!(sample.voltage, 220.0);
    assert_eq!(sample.frequency, 50.0);
    cancel.cancel();
}

#[tokio::test]
async fn fuse_blown_is_timeout_gap() {
    let bus = Bus::new();
    let cancel = CancellationToken::new();
    let (sim, _) = spawn_on_bus(frozen_sim(1), &bus, cancel.clone());
    sim.inject(FaultKind::FuseBlown);
    let mut link = Link::from_transport(bus.port());
    let dev = device("pm01", 1, "b");
    let outcome = poll_device(&mut link, &dev, &quick_policy()).await;
    assert_eq!(outcome.as_gap().unwrap().reason, GapReason::Timeout);
    let fast = read_all_fast(&mut link, &dev, &quick_policy()).await.unwrap();
    assert_eq!(fast.as_gap().unwrap().reason, GapReason::Timeout);
    cancel.cancel();
}

#[tokio::test]
async fn misconfigured_map_is_exception_gap() {
    let bus = Bus::new();
    let cancel = CancellationToken::new();
    spawn_on_bus(frozen_sim(1), &bus, cancel.clone());
    let mut link = Link::from_transport(bus.port());
    let mut dev = device("pm01", 1, "b");
    dev.register_map.voltage = 0x00F0;
    let outcome = poll_device(&mut link, &dev, &quick_policy()).await;
    assert_eq!(outcome.as_gap().unwrap().reason, GapReason::Exception(0x02));
    cancel.cancel();
}

#[tokio::test]
async fn fast_read_matches_six_reads_on_frozen_clock() {
    let bus = Bus::new();
    let cancel = CancellationToken::new();
    let mut cfg = SimConfig { tick_ms: 0, ..SimConfig::default() };
    cfg.nominal_voltage = 221.3;
    cfg.power_factor = 0.91;
    spawn_on_bus(SimState::new(cfg), &bus, cancel.clone());
    let mut link = Link::from_transport(bus.port());
    let dev = device("pm01", 1, "b");
    let slow = poll_device(&mut link, &dev, &quick_policy()).await;
    let fast = read_all_fast(&mut link, &dev, &quick_policy()).await.unwrap();
    assert_eq!(slow.as_sample().unwrap().values(), fast.as_sample().unwrap().values());

    let mut custom = dev.clone();
    custom.register_map.energy = 0x0100;
    assert!(matches!(
        read_all_fast(&mut link, &custom, &quick_policy()).await,
        Err(GatewayError::InvalidArgument(_))
    ));
    cancel.cancel();
}

#[tokio::test]
async fn silent_device_logs_one_gap_per_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gw.db");
    let writer = StoreWriter::open(&path).unwrap();
    let buses = BusRegistry::new();
    let cancel = CancellationToken::new();
    let policy = PollPolicy { interval_ms: 200, timeout_ms: 50, retries: 2, fast: false };
    let gw = tokio::spawn(run_loop(
        vec![device("pm01", 1, "empty")],
        policy,
        buses,
        writer.sink(),
        cancel.clone(),
    ));
    tokio::time::sleep(Duration::from_millis(1100)).await;
    cancel.cancel();
    gw.await.unwrap().unwrap();
    writer.close();
    let store = Store::open_read_only(&path).unwrap();
    let rows = store.rows("pm01").unwrap();
    assert!((4..=7).contains(&rows.len()), "{} rows", rows.len());
    assert!(rows.iter().all(|r| r.outcome.as_gap().map(|g| g.reason) == Some(GapReason::Timeout)));
}

/// Watches every byte on the bus and checks requests and replies alternate.
async fn record_bus(mut spy: impl Transport, stop: CancellationToken) -> Vec<Vec<u8>> {
    let mut chunks = Vec::new();
    loop {
        tokio::select! {
            _ = stop.cancelled() => return chunks,
            r = spy.recv() => match r.unwrap() {
                Some(c) => chunks.push(c),
                None => return chunks,
            },
        }
    }
}

#[tokio::test]
async fn shared_bus_polls_both_devices_without_interleaving() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gw.db");
    let writer = StoreWriter::open(&path).unwrap();
    let buses = BusRegistry::new();
    let bus = buses.bus("rs485");
    let cancel = CancellationToken::new();
    spawn_on_bus(frozen_sim(1), &bus, cancel.clone());
    spawn_on_bus(frozen_sim(2), &bus, cancel.clone());
    let spy = tokio::spawn(record_bus(bus.port(), cancel.clone()));

    let policy = PollPolicy { interval_ms: 500, timeout_ms: 100, retries: 3, fast: false };
    let devices = vec![device("pm01", 1, "rs485"), device("pm02", 2, "rs485")];
    let gw = tokio::spawn(run_loop(devices, policy, buses, writer.sink(), cancel.clone()));
    tokio::time::sleep(Duration::from_millis(2600)).await;
    cancel.cancel();
    gw.await.unwrap().unwrap();
    let chunks = spy.await.unwrap();
    writer.close();

    // every request (8 bytes, function 4) is followed by exactly one reply
    // before the next request goes out
    let mut expecting_reply = false;
    let mut requests = 0;
    for c in &chunks {
        let is_request = c.len() == 8 && c[1] == 0x04 && c[2] == 0x00;
        if is_request {
            assert!(!expecting_reply, "request sent while another was in flight");
            expecting_reply = true;
            requests += 1;
        } else {
            assert!(expecting_reply, "reply without a request");
            expecting_reply = false;
        }
    }
    assert!(requests >= 5 * 12, "{requests} requests");

    let store = Store::open_read_only(&path).unwrap();
    for dev in ["pm01", "pm02"] {
        let rows = store.rows(dev).unwrap();
        assert!((5..=7).contains(&rows.len()), "{dev}: {} rows", rows.len());
        assert!(rows.iter().all(|r| r.sample().is_some()));
        assert!(rows.windows(2).all(|w| w[0].ts() < w[1].ts()));
    }
}

#[tokio::test]
async fn store_failure_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let writer = StoreWriter::open(dir.path().join("gw.db")).unwrap();
    let sink = writer.sink();
    let buses = BusRegistry::new();
    let cancel = CancellationToken::new();
    spawn_on_bus(frozen_sim(1), &buses.bus("b"), cancel.clone());
    let policy = PollPolicy { interval_ms: 100, timeout_ms: 50, retries: 1, fast: false };
    let gw = tokio::spawn(run_loop(vec![device("pm01", 1, "b")], policy, buses, sink, cancel.clone()));
    tokio::time::sleep(Duration::from_millis(250)).await;
    writer.close();
    let result = tokio::time::timeout(Duration::from_secs(2), gw).await.unwrap().unwrap();
    assert!(matches!(result, Err(GatewayError::Store { .. })));
}

#[tokio::test]
async fn duplicate_units_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let writer = StoreWriter::open(dir.path().join("gw.db")).unwrap();
    let devices = vec![device("pm01", 1, "b"), device("pm02", 1, "b")];
    let err = run_loop(devices, PollPolicy::default(), BusRegistry::new(), writer.sink(), CancellationToken::new())
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::InvalidArgument(_)));
}

#[tokio::test]
async fn reconnects_over_tcp() {
    use switchmon::sim::serve_tcp;
    let bus = Bus::new();
    let cancel = CancellationToken::new();
    spawn_on_bus(frozen_sim(1), &bus, cancel.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(serve_tcp(listener, bus, cancel.clone()));
    let mut link = Link::new(switchmon::transport::Connector::Tcp(addr));
    let dev = DeviceConfig { transport: Endpoint::Tcp("unused".into()), ..device("pm01", 1, "b") };
    for _ in 0..3 {
        assert!(matches!(poll_device(&mut link, &dev, &quick_policy()).await, PollOutcome::Sample(_)));
    }
    cancel.cancel();
}
