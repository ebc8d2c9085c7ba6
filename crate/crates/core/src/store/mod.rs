//! Append-only sample store, one logical table per device.
//!
//! A single file holds length-prefixed, checksummed records; the in-memory
//! index is rebuilt on open. A torn or corrupt tail is dropped on recovery,
//! so reopening after a crash yields exactly the rows whose append returned.

mod format;
mod writer;

pub use format::{HEADER_LEN, MAGIC, VERSION};
pub use writer::{StoreSink, StoreWriter};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions, TryLockError};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde_json::{json, Value};

use crate::sample::{format_ts, PollOutcome, Sample};
use format::{Decoded, Record};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("storage full")]
    StorageFull,
    #[error("store {0} is already open for writing by another process")]
    Locked(PathBuf),
    #[error("{0} is not a store file (bad magic)")]
    BadMagic(PathBuf),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown device '{0}'")]
    UnknownDevice(String),
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: String, to: String },
    #[error("invalid limit {0}")]
    InvalidLimit(usize),
    #[error("invalid table name '{0}'")]
    InvalidName(String),
    #[error("row for '{device}' at {ts} is older than the previous row")]
    OutOfOrder { device: String, ts: String },
    #[error("store is open read-only")]
    ReadOnly,
    #[error("store writer has shut down")]
    Closed,
}

impl StoreError {
    fn from_io(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ReadWrite,
    ReadOnly,
}

/// A persisted sample or gap with its per-device id.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRow {
    pub id: u64,
    pub outcome: PollOutcome,
}

impl StoredRow {
    pub fn ts(&self) -> DateTime<Utc> {
        self.outcome.ts()
    }

    pub fn sample(&self) -> Option<&Sample> {
        self.outcome.as_sample()
    }

    /// Flat JSON object used by the export format.
    pub fn to_json(&self) -> Value {
        match &self.outcome {
            PollOutcome::Sample(s) => json!({
                "table": s.device,
                "id": self.id,
                "ts": format_ts(&s.ts),
                "kind": "sample",
                "voltage": s.voltage,
                "current": s.current,
                "frequency": s.frequency,
                "power_factor": s.power_factor,
                "active_power": s.active_power,
                "energy": s.energy,
            }),
            PollOutcome::Gap(g) => json!({
                "table": g.device,
                "id": self.id,
                "ts": format_ts(&g.ts),
                "kind": "gap",
                "reason": g.reason.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeResult {
    pub rows: Vec<StoredRow>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFilter {
    All,
    SamplesOnly,
}

pub struct Store {
    path: PathBuf,
    file: File,
    mode: Mode,
    tables: BTreeMap<String, Vec<StoredRow>>,
    /// Offset just past the last intact record.
    end: u64,
    header_ok: bool,
}

impl Store {
    /// Open for appending, creating the file if needed. Takes an exclusive
    /// lock and drops any torn tail left by a crash.
    pub fn open(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(StoreError::Locked(path)),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }
        let mut store = Store::new(path, file, Mode::ReadWrite);
        store.load()?;
        if !store.header_ok {
            store.file.set_len(0)?;
            store.file.seek(SeekFrom::Start(0))?;
            store.file.write_all(&format::header()).map_err(StoreError::from_io)?;
            store.file.sync_all()?;
            store.end = HEADER_LEN as u64;
            store.header_ok = true;
        } else if store.file.metadata()?.len() != store.end {
            store.file.set_len(store.end)?;
            store.file.sync_all()?;
        }
        Ok(store)
    }

    /// Open an existing store for queries. Never modifies the file; call
    /// [`Store::refresh`] to pick up rows appended since.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let mut store = Store::new(path, file, Mode::ReadOnly);
        store.load()?;
        Ok(store)
    }

    fn new(path: PathBuf, file: File, mode: Mode) -> Store {
        Store { path, file, mode, tables: BTreeMap::new(), end: 0, header_ok: false }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn load(&mut self) -> Result<(), StoreError> {
        let len = self.file.metadata()?.len();
        if len < HEADER_LEN as u64 {
            let mut buf = vec![0; len as usize];
            self.file.seek(SeekFrom::Start(0))?;
            self.file.read_exact(&mut buf)?;
            // A writer that died while creating the file leaves a header prefix.
            if !format::header().starts_with(&buf) {
                return Err(StoreError::BadMagic(self.path.clone()));
            }
            return Ok(());
        }
        let mut header = [0u8; HEADER_LEN];
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(StoreError::BadMagic(self.path.clone()));
        }
        let version = u16::from_le_bytes([header[8], header[9]]);
        if version != VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        self.header_ok = true;
        self.end = HEADER_LEN as u64;
        self.scan()
    }

    /// Index every complete record past `self.end`.
    fn scan(&mut self) -> Result<(), StoreError> {
        let mut buf = Vec::new();
        self.file.seek(SeekFrom::Start(self.end))?;
        self.file.read_to_end(&mut buf)?;
        let mut pos = 0;
        while pos < buf.len() {
            match format::decode(&buf[pos..]) {
                Ok((record, used)) => {
                    if !self.apply(record) {
                        break;
                    }
                    pos += used;
                }
                Err(Decoded::Incomplete) | Err(Decoded::Corrupt) => break,
            }
        }
        self.end += pos as u64;
        Ok(())
    }

    /// Returns false when the record contradicts the index (treated as
    /// corruption).
    fn apply(&mut self, record: Record) -> bool {
        match record {
            Record::Table(name) => {
                self.tables.entry(name).or_default();
                true
            }
            Record::Row { id, outcome } => {
                let rows = self.tables.entry(outcome.device().to_owned()).or_default();
                if id != rows.len() as u64 + 1 {
                    return false;
                }
                rows.push(StoredRow { id, outcome });
                true
            }
        }
    }

    /// Pick up records appended by a writer since the last look.
    pub fn refresh(&mut self) -> Result<(), StoreError> {
        if !self.header_ok {
            return self.load();
        }
        self.scan()
    }

    fn write_record(&mut self, record: &Record) -> Result<(), StoreError> {
        if self.mode == Mode::ReadOnly {
            return Err(StoreError::ReadOnly);
        }
        let bytes = format::encode(record);
        self.file.seek(SeekFrom::Start(self.end))?;
        let written = self.file.write_all(&bytes).and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            // leave no partial record behind if we can help it
            let _ = self.file.set_len(self.end);
            return Err(StoreError::from_io(e));
        }
        self.end += bytes.len() as u64;
        Ok(())
    }

    pub fn ensure_table(&mut self, name: &str) -> Result<(), StoreError> {
        if name.is_empty() || name.len() > u8::MAX as usize {
            return Err(StoreError::InvalidName(name.to_owned()));
        }
        if self.tables.contains_key(name) {
            return Ok(());
        }
        self.write_record(&Record::Table(name.to_owned()))?;
        self.tables.insert(name.to_owned(), Vec::new());
        Ok(())
    }

    /// Append durably; returns the row id (1-based, gapless per device).
    pub fn append(&mut self, outcome: PollOutcome) -> Result<u64, StoreError> {
        let device = outcome.device().to_owned();
        self.ensure_table(&device)?;
        let rows = &self.tables[&device];
        if let Some(last) = rows.last() {
            if outcome.ts() < last.ts() {
                return Err(StoreError::OutOfOrder { device, ts: format_ts(&outcome.ts()) });
            }
        }
        let id = rows.len() as u64 + 1;
        self.write_record(&Record::Row { id, outcome: outcome.clone() })?;
        self.tables.get_mut(&device).unwrap().push(StoredRow { id, outcome });
        Ok(id)
    }

    pub fn tables(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn rows(&self, device: &str) -> Result<&[StoredRow], StoreError> {
        self.tables
            .get(device)
            .map(Vec::as_slice)
            .ok_or_else(|| StoreError::UnknownDevice(device.to_owned()))
    }

    /// Highest-id sample for the device; gap rows are skipped.
    pub fn query_latest(&self, device: &str) -> Result<Option<&StoredRow>, StoreError> {
        Ok(self.rows(device)?.iter().rev().find(|r| r.sample().is_some()))
    }

    /// Rows with `from <= ts <= to`, ascending, at most `limit` of them.
    pub fn query_range(
        &self,
        device: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
        limit: usize,
        filter: RowFilter,
    ) -> Result<RangeResult, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from: format_ts(&from), to: format_ts(&to) });
        }
        if limit == 0 {
            return Err(StoreError::InvalidLimit(limit));
        }
        let rows = self.rows(device)?;
        // ts is non-decreasing in id order
        let lo = rows.partition_point(|r| r.ts() < from);
        let hi = rows.partition_point(|r| r.ts() <= to);
        let mut matching = rows[lo..hi]
            .iter()
            .filter(|r| filter == RowFilter::All || r.sample().is_some());
        let out: Vec<StoredRow> = matching.by_ref().take(limit).cloned().collect();
        let truncated = matching.next().is_some();
        Ok(RangeResult { rows: out, truncated })
    }

    /// Every row of every table as line-delimited JSON, tables in name order.
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> io::Result<usize> {
        let mut n = 0;
        for rows in self.tables.values() {
            for row in rows {
                writeln!(out, "{}", row.to_json())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{GapEvent, GapReason};
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
    }

    fn sample(device: &str, secs: i64) -> PollOutcome {
        Sample::from_values(device, t0() + Duration::seconds(secs), [220.0, 14.0, 50.0, 0.85, 2618.0, secs as f32])
            .into()
    }

    fn gap(device: &str, secs: i64) -> PollOutcome {
        GapEvent::new(device, t0() + Duration::seconds(secs), GapReason::Timeout).into()
    }

    #[test]
    fn ids_start_at_one_and_are_gapless() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        assert_eq!(store.append(sample("pm01", 0)).unwrap(), 1);
        for i in 1..100 {
            assert_eq!(store.append(sample("pm01", i)).unwrap(), i as u64 + 1);
        }
        let ids: Vec<u64> = store.rows("pm01").unwrap().iter().map(|r| r.id).collect();
        assert_eq!(ids, (1..=100).collect::<Vec<_>>());
    }

    #[test]
    fn reopen_after_unclean_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        let mut store = Store::open(&path).unwrap();
        store.append(sample("pm01", 0)).unwrap();
        // no destructor: the lock and handle just go away as on a crash
        std::mem::forget(store);
        let reader = Store::open_read_only(&path).unwrap();
        assert_eq!(reader.rows("pm01").unwrap().len(), 1);
        assert_eq!(reader.rows("pm01").unwrap()[0].outcome, sample("pm01", 0));
    }

    #[test]
    fn latest_skips_gaps_and_isolates_devices() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        store.ensure_table("pm01").unwrap();
        assert_eq!(store.query_latest("pm01").unwrap(), None);
        assert!(matches!(store.query_latest("pm99"), Err(StoreError::UnknownDevice(_))));
        for i in 0..5 {
            store.append(sample("pm01", i)).unwrap();
            store.append(sample("pm02", i + 100)).unwrap();
        }
        store.append(gap("pm01", 5)).unwrap();
        let latest = store.query_latest("pm01").unwrap().unwrap();
        assert_eq!(latest.id, 5);
        assert_eq!(latest.outcome, sample("pm01", 4));
        assert_eq!(store.query_latest("pm02").unwrap().unwrap().outcome, sample("pm02", 104));
    }

    #[test]
    fn range_queries() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        for i in 0..60 {
            store.append(sample("pm01", i)).unwrap();
        }
        let all = store.query_range("pm01", t0(), t0() + Duration::seconds(59), 1000, RowFilter::All).unwrap();
        assert_eq!(all.rows.len(), 60);
        assert!(!all.truncated);

        let ten = store.query_range("pm01", t0(), t0() + Duration::seconds(59), 10, RowFilter::All).unwrap();
        assert_eq!(ten.rows, all.rows[..10]);
        assert!(ten.truncated);

        let at = t0() + Duration::seconds(17);
        let one = store.query_range("pm01", at, at, 5, RowFilter::All).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.rows[0].ts(), at);

        let exact = store.query_range("pm01", t0(), t0() + Duration::seconds(9), 10, RowFilter::All).unwrap();
        assert!(!exact.truncated);

        assert!(matches!(
            store.query_range("pm01", at, t0(), 5, RowFilter::All),
            Err(StoreError::InvalidRange { .. })
        ));
        assert!(matches!(store.query_range("pm01", t0(), at, 0, RowFilter::All), Err(StoreError::InvalidLimit(0))));
        assert!(matches!(store.query_range("nope", t0(), at, 1, RowFilter::All), Err(StoreError::UnknownDevice(_))));
    }

    #[test]
    fn samples_only_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        store.append(sample("pm01", 0)).unwrap();
        store.append(gap("pm01", 1)).unwrap();
        store.append(sample("pm01", 2)).unwrap();
        let r = store.query_range("pm01", t0(), t0() + Duration::seconds(2), 10, RowFilter::SamplesOnly).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn rejects_out_of_order_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        store.append(sample("pm01", 5)).unwrap();
        assert!(matches!(store.append(sample("pm01", 4)), Err(StoreError::OutOfOrder { .. })));
        // same timestamp is allowed
        store.append(gap("pm01", 5)).unwrap();
    }

    #[test]
    fn single_writer_many_readers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        let mut writer = Store::open(&path).unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::Locked(_))));
        let mut r1 = Store::open_read_only(&path).unwrap();
        let r2 = Store::open_read_only(&path).unwrap();
        writer.append(sample("pm01", 0)).unwrap();
        assert!(r1.rows("pm01").is_err());
        r1.refresh().unwrap();
        assert_eq!(r1.rows("pm01").unwrap().len(), 1);
        assert!(r2.tables().next().is_none());
        let mut r1 = r1;
        assert!(matches!(r1.append(sample("pm01", 1)), Err(StoreError::ReadOnly)));
        drop(writer);
        Store::open(&path).unwrap();
    }

    #[test]
    fn reader_ignores_partial_tail_until_complete() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        let mut writer = Store::open(&path).unwrap();
        writer.append(sample("pm01", 0)).unwrap();
        let full = std::fs::read(&path).unwrap();
        let record = format::encode(&Record::Row { id: 2, outcome: sample("pm01", 1) });
        let mut reader = Store::open_read_only(&path).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&record[..10]).unwrap();
        reader.refresh().unwrap();
        assert_eq!(reader.rows("pm01").unwrap().len(), 1);
        f.write_all(&record[10..]).unwrap();
        reader.refresh().unwrap();
        assert_eq!(reader.rows("pm01").unwrap().len(), 2);
        assert_eq!(std::fs::read(&path).unwrap().len(), full.len() + record.len());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        std::fs::write(&path, b"definitely not a store file").unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::BadMagic(_))));
        assert!(matches!(Store::open_read_only(&path), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn export_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.db")).unwrap();
        store.append(sample("pm01", 0)).unwrap();
        store.append(gap("pm01", 1)).unwrap();
        let mut out = Vec::new();
        assert_eq!(store.export_jsonl(&mut out).unwrap(), 2);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["kind"], "sample");
        assert_eq!(lines[0]["voltage"], 220.0);
        assert_eq!(lines[1]["reason"], "timeout");
        assert_eq!(lines[1]["id"], 2);
    }
}
