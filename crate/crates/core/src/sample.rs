//! Readings produced by one poll cycle.

use std::fmt;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::registers::MeasurementKind;

/// Truncate to the millisecond resolution used on disk and over the API.
pub fn to_millis(ts: DateTime<Utc>) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(ts.timestamp_millis()).single().expect("in range")
}

pub fn format_ts(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub(crate) mod ts_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// One timestamped six-quantity reading from one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub device: String,
    #[serde(with = "ts_format")]
    pub ts: DateTime<Utc>,
    pub voltage: f32,
    pub current: f32,
    pub frequency: f32,
    pub power_factor: f32,
    pub active_power: f32,
    pub energy: f32,
}

impl Sample {
    /// Build from values in [`MeasurementKind::ALL`] order.
    pub fn from_values(device: impl Into<String>, ts: DateTime<Utc>, values: [f32; 6]) -> Self {
        let [voltage, current, frequency, power_factor, active_power, energy] = values;
        Sample {
            device: device.into(),
            ts: to_millis(ts),
            voltage,
            current,
            frequency,
            power_factor,
            active_power,
            energy,
        }
    }

    pub fn values(&self) -> [f32; 6] {
        [
            self.voltage,
            self.current,
            self.frequency,
            self.power_factor,
            self.active_power,
            self.energy,
        ]
    }

    pub fn value(&self, kind: MeasurementKind) -> f32 {
        self.values()[kind.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapReason {
    Timeout,
    CrcError,
    Exception(u8),
    /// Registers decoded to NaN or infinity.
    InvalidValue,
}

impl fmt::Display for GapReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GapReason::Timeout => f.write_str("timeout"),
            GapReason::CrcError => f.write_str("crc_error"),
            GapReason::Exception(code) => write!(f, "exception_{code:02x}"),
            GapReason::InvalidValue => f.write_str("invalid_value"),
        }
    }
}

/// A poll cycle that produced no sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEvent {
    pub device: String,
    #[serde(with = "ts_format")]
    pub ts: DateTime<Utc>,
    pub reason: GapReason,
}

impl GapEvent {
    pub fn new(device: impl Into<String>, ts: DateTime<Utc>, reason: GapReason) -> Self {
        GapEvent { device: device.into(), ts: to_millis(ts), reason }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    Sample(Sample),
    Gap(GapEvent),
}

impl PollOutcome {
    pub fn device(&self) -> &str {
        match self {
            PollOutcome::Sample(s) => &s.device,
            PollOutcome::Gap(g) => &g.device,
        }
    }

    pub fn ts(&self) -> DateTime<Utc> {
        match self {
            PollOutcome::Sample(s) => s.ts,
            PollOutcome::Gap(g) => g.ts,
        }
    }

    pub fn as_sample(&self) -> Option<&Sample> {
        match self {
            PollOutcome::Sample(s) => Some(s),
            PollOutcome::Gap(_) => None,
        }
    }

    pub fn as_gap(&self) -> Option<&GapEvent> {
        match self {
            PollOutcome::Gap(g) => Some(g),
            PollOutcome::Sample(_) => None,
        }
    }
}

impl From<Sample> for PollOutcome {
    fn from(s: Sample) -> Self {
        PollOutcome::Sample(s)
    }
}

impl From<GapEvent> for PollOutcome {
    fn from(g: GapEvent) -> Self {
        PollOutcome::Gap(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_json_uses_numbers_and_millis() {
        let ts = Utc.timestamp_nanos(1_700_000_000_123_456_789);
        let s = Sample::from_values("pm01", ts, [220.0, 14.0, 50.0, 0.85, 2618.0, 1.5]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"device":"pm01","ts":"2023-11-14T22:13:20.123Z","voltage":220.0,"current":14.0,"frequency":50.0,"power_factor":0.85,"active_power":2618.0,"energy":1.5}"#
        );
        let back: Sample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
