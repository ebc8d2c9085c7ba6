//! Records response in the shape older clients expect: a single key named
//! after the device table, holding rows whose values are all strings.

use serde::{Deserialize, Serialize};

use crate::sample::format_ts;
use crate::store::StoredRow;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacyRow {
    pub id: String,
    pub ts: String,
    pub voltage: String,
    pub current: String,
    pub frequency: String,
    pub power_factor: String,
    pub active_power: String,
    pub energy: String,
}

/// Shortest decimal text that reads back to the same f32 ("220.0", "0.85").
fn decimal(v: f32) -> String {
    format!("{v:?}")
}

impl LegacyRow {
    /// `None` for gap rows, which carry no readings.
    pub fn from_stored(row: &StoredRow) -> Option<LegacyRow> {
        let s = row.sample()?;
        Some(LegacyRow {
            id: row.id.to_string(),
            ts: format_ts(&s.ts),
            voltage: decimal(s.voltage),
            current: decimal(s.current),
            frequency: decimal(s.frequency),
            power_factor: decimal(s.power_factor),
            active_power: decimal(s.active_power),
            energy: decimal(s.energy),
        })
    }
}

/// `{"<table>":[...rows]}`, compact, keys in declaration order.
pub fn render(table: &str, rows: &[LegacyRow]) -> String {
    let mut out = String::from("{");
    out.push_str(&serde_json::to_string(table).expect("string serialises"));
    out.push(':');
    out.push_str(&serde_json::to_string(rows).expect("rows serialise"));
    out.push('}');
    out
}
