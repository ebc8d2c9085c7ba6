//! On-disk layout.
//!
//! ```text
//! header  : magic "SWMSTORE" | version u16 LE | 6 reserved zero bytes
//! record  : payload_len u32 LE | crc32(payload) u32 LE | payload
//! payload : kind u8 | name_len u8 | name (UTF-8)
//!           kind 1 (table)  : nothing further
//!           kind 2 (sample) : id u64 | ts_ms i64 | 6 x f32   (all LE)
//!           kind 3 (gap)    : id u64 | ts_ms i64 | reason u8 | code u8
//!           reason: 0 timeout, 1 crc error, 2 exception (code), 3 invalid value
//! ```

use chrono::{DateTime, TimeZone, Utc};

use crate::sample::{GapEvent, GapReason, PollOutcome, Sample};

pub const MAGIC: &[u8; 8] = b"SWMSTORE";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_PREFIX: usize = 8;
/// Anything larger is treated as a corrupt length field.
pub const MAX_PAYLOAD: usize = 1024;

const KIND_TABLE: u8 = 1;
const KIND_SAMPLE: u8 = 2;
const KIND_GAP: u8 = 3;

pub fn header() -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(MAGIC);
    h[8..10].copy_from_slice(&VERSION.to_le_bytes());
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Table(String),
    Row { id: u64, outcome: PollOutcome },
}

#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    /// Not enough bytes yet for a whole record.
    Incomplete,
    /// Length or checksum is wrong; nothing past this point can be trusted.
    Corrupt,
}

pub fn encode(record: &Record) -> Vec<u8> {
    let mut payload = Vec::with_capacity(64);
    let name = match record {
        Record::Table(name) => name,
        Record::Row { outcome, .. } => outcome.device(),
    };
    let kind = match record {
        Record::Table(_) => KIND_TABLE,
        Record::Row { outcome: PollOutcome::Sample(_), .. } => KIND_SAMPLE,
        Record::Row { outcome: PollOutcome::Gap(_), .. } => KIND_GAP,
    };
    payload.push(kind);
    payload.push(name.len() as u8);
    payload.extend_from_slice(name.as_bytes());
    if let Record::Row { id, outcome } = record {
        payload.extend_from_slice(&id.to_le_bytes());
        payload.extend_from_slice(&outcome.ts().timestamp_millis().to_le_bytes());
        match outcome {
            PollOutcome::Sample(s) => {
                for v in s.values() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            PollOutcome::Gap(g) => {
                let (reason, code) = match g.reason {
                    GapReason::Timeout => (0, 0),
                    GapReason::CrcError => (1, 0),
                    GapReason::Exception(code) => (2, code),
                    GapReason::InvalidValue => (3, 0),
                };
                payload.push(reason);
                payload.push(code);
            }
        }
    }
    let mut out = Vec::with_capacity(RECORD_PREFIX + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decode the record at the start of `buf`, returning it with its total size.
pub fn decode(buf: &[u8]) -> Result<(Record, usize), Decoded> {
    if buf.len() < RECORD_PREFIX {
        return Err(Decoded::Incomplete);
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if len == 0 || len > MAX_PAYLOAD {
        return Err(Decoded::Corrupt);
    }
    let total = RECORD_PREFIX + len;
    if buf.len() < total {
        return Err(Decoded::Incomplete);
    }
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let payload = &buf[RECORD_PREFIX..total];
    if crc32fast::hash(payload) != crc {
        return Err(Decoded::Corrupt);
    }
    parse_payload(payload).map(|r| (r, total)).ok_or(Decoded::Corrupt)
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Some(head)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|b| b.try_into().unwrap())
    }
}

fn parse_payload(payload: &[u8]) -> Option<Record> {
    let mut cur = Cursor(payload);
    let kind = cur.u8()?;
    let name_len = cur.u8()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?).ok()?.to_owned();
    let record = match kind {
        KIND_TABLE => Record::Table(name),
        KIND_SAMPLE | KIND_GAP => {
            let id = u64::from_le_bytes(cur.array()?);
            let ts = millis(i64::from_le_bytes(cur.array()?))?;
            let outcome = if kind == KIND_SAMPLE {
                let mut values = [0f32; 6];
                for v in &mut values {
                    *v = f32::from_le_bytes(cur.array()?);
                }
                PollOutcome::Sample(Sample::from_values(name, ts, values))
            } else {
                let reason = match (cur.u8()?, cur.u8()?) {
                    (0, _) => GapReason::Timeout,
                    (1, _) => GapReason::CrcError,
                    (2, code) => GapReason::Exception(code),
                    (3, _) => GapReason::InvalidValue,
                    _ => return None,
                };
                PollOutcome::Gap(GapEvent::new(name, ts, reason))
            };
            Record::Row { id, outcome }
        }
        _ => return None,
    };
    cur.0.is_empty().then_some(record)
}

fn millis(ms: i64) -> Option<DateTime<Utc>> {
    Utc.timestamp_millis_opt(ms).single()
}
