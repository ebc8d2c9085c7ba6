//! Line-oriented TCP control port for a running simulator.
//!
//! Commands, one per line: `fuse-blown`, `voltage-sag`, `pump-off`,
//! `restore`, `status`. Replies are `ok`, a JSON readings object for
//! `status`, or `error: <reason>`.

use std::collections::HashMap;
use std::io;
use std::str::FromStr;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tracing::debug;

use super::serve::SimHandle;
use super::state::FaultKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdminCommand {
    Fault(FaultKind),
    Status,
}

impl FromStr for AdminCommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "status" => Ok(AdminCommand::Status),
            other => other.parse().map(AdminCommand::Fault),
        }
    }
}

/// A line may be prefixed with a unit address (`2 fuse-blown`) when several
/// simulators share the port; otherwise it applies to all of them.
async fn execute(line: &str, sims: &HashMap<u8, SimHandle>) -> String {
    let (targets, command): (Vec<&SimHandle>, &str) = match line.split_once(' ') {
        Some((unit, rest)) if unit.parse::<u8>().is_ok() => {
            let unit: u8 = unit.parse().unwrap();
            match sims.get(&unit) {
                Some(h) => (vec![h], rest),
                None => return format!("error: no simulator with unit {unit}"),
            }
        }
        _ => (sims.values().collect(), line),
    };
    match command.parse::<AdminCommand>() {
        Ok(AdminCommand::Fault(fault)) => {
            for h in targets {
                h.inject(fault);
            }
            "ok".into()
        }
        Ok(AdminCommand::Status) => {
            let mut out = serde_json::Map::new();
            for h in targets {
                if let Some(r) = h.snapshot().await {
                    out.insert(h.unit().to_string(), serde_json::to_value(r).unwrap_or_default());
                }
            }
            serde_json::Value::Object(out).to_string()
        }
        Err(e) => format!("error: {e}"),
    }
}

pub async fn serve_admin(
    listener: TcpListener,
    sims: Vec<SimHandle>,
    cancel: CancellationToken,
) -> io::Result<()> {
    let sims: HashMap<u8, SimHandle> = sims.into_iter().map(|h| (h.unit(), h)).collect();
    loop {
        let (socket, peer) = tokio::select! {
            _ = cancel.cancelled() => return Ok(()),
            accepted = listener.accept() => accepted?,
        };
        debug!(%peer, "admin connection");
        let sims = sims.clone();
        tokio::spawn(async move {
            let (rd, mut wr) = socket.into_split();
            let mut lines = BufReader::new(rd).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                if line.trim().is_empty() {
                    continue;
                }
                let reply = execute(&line, &sims).await;
                if wr.write_all(format!("{reply}\n").as_bytes()).await.is_err() {
                    break;
                }
            }
        });
    }
}
