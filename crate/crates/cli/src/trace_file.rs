//! On-disk training traces: one comment line with provenance, then CSV.
//!
//! ```text
//! # adp2sgd-trace schema_version=1 config_sha256=<hex> seed=<n>
//! virtual_time,global_iter,worker,event,loss,grad_norm_sq,staleness,eps_spent
//! ```
//!
//! Absent values are empty cells. Floats use the shortest representation
//! that round-trips, so identical runs give identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use adp2sgd_core::engine::{EventKind, TraceRecord};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "# adp2sgd-trace";
pub const COLUMNS: [&str; 8] = [
    "virtual_time",
    "global_iter",
    "worker",
    "event",
    "loss",
    "grad_norm_sq",
    "staleness",
    "eps_spent",
];

#[derive(Debug, thiserror::Error)]
pub enum TraceFileError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("not a trace file: {0}")]
    Header(String),
    #[error("trace schema version {found} is not supported (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
}

impl TraceHeader {
    pub fn new(config_sha256: String, seed: u64) -> Self {
        Self { schema_version: TRACE_SCHEMA_VERSION, config_sha256, seed }
    }

    fn line(&self) -> String {
        format!(
            "{MAGIC} schema_version={} config_sha256={} seed={}",
            self.schema_version, self.config_sha256, self.seed
        )
    }

    fn parse(line: &str) -> Result<Self, TraceFileError> {
        let rest = line
            .trim_end()
            .strip_prefix(MAGIC)
            .ok_or_else(|| TraceFileError::Header(format!("missing `{MAGIC}` line")))?;
        let mut version = None;
        let mut hash = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| TraceFileError::Header(format!("malformed header field `{field}`")))?;
            let bad = || TraceFileError::Header(format!("bad value for {key}: `{value}`"));
            match key {
                "schema_version" => version = Some(value.parse::<u32>().map_err(|_| bad())?),
                "config_sha256" => hash = Some(value.to_string()),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                _ => {}
            }
        }
        let schema_version = version.ok_or_else(|| TraceFileError::Header("missing schema_version".into()))?;
        if schema_version != TRACE_SCHEMA_VERSION {
            return Err(TraceFileError::SchemaVersion { found: schema_version, expected: TRACE_SCHEMA_VERSION });
        }
        Ok(Self {
            schema_version,
            config_sha256: hash.ok_or_else(|| TraceFileError::Header("missing config_sha256".into()))?,
            seed: seed.ok_or_else(|| TraceFileError::Header("missing seed".into()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes header and rows.
pub fn write_trace<W: Write>(out: W, header: &TraceHeader, records: &[TraceRecord]) -> Result<(), TraceFileError> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{}", header.line())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            r.virtual_time.to_string(),
            r.global_iter.to_string(),
            opt(r.worker),
            r.event.as_str().to_string(),
            opt(r.loss),
            opt(r.grad_norm_sq),
            opt(r.staleness),
            opt(r.eps_spent),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the trace next to `path` and renames it into place, so a reader
/// never sees a partial file at `path`.
pub fn write_trace_atomic(path: &Path, header: &TraceHeader, records: &[TraceRecord]) -> Result<(), TraceFileError> {
    write_atomic(path, |f| write_trace(f, header, records))
}

pub(crate) fn write_atomic<E: From<std::io::Error>>(
    path: &Path,
    fill: impl FnOnce(&mut File) -> Result<(), E>,
) -> Result<(), E> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    fill(tmp.as_file_mut())?;
    tmp.as_file_mut().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn cell<T: std::str::FromStr>(s: &str, row: usize, column: &str) -> Result<Option<T>, TraceFileError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>()
        .map(Some)
        .map_err(|_| TraceFileError::Row { row, message: format!("bad {column} `{s}`") })
}

fn required<T: std::str::FromStr>(s: &str, row: usize, column: &str) -> Result<T, TraceFileError> {
    cell(s, row, column)?.ok_or_else(|| TraceFileError::Row { row, message: format!("missing {column}") })
}

pub fn read_trace<R: Read>(input: R) -> Result<TraceFile, TraceFileError> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let header = TraceHeader::parse(&first)?;
    let mut reader = csv::Reader::from_reader(input);
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if columns != COLUMNS {
        return Err(TraceFileError::Header(format!("unexpected columns {columns:?}")));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let n = i + 1;
        let event = EventKind::parse(&row[3])
            .ok_or_else(|| TraceFileError::Row { row: n, message: format!("unknown event `{}`", &row[3]) })?;
        records.push(TraceRecord {
            virtual_time: required(&row[0], n, "virtual_time")?,
            global_iter: required(&row[1], n, "global_iter")?,
            worker: cell(&row[2], n, "worker")?,
            event,
            loss: cell(&row[4], n, "loss")?,
            grad_norm_sq: cell(&row[5], n, "grad_norm_sq")?,
            staleness: cell(&row[6], n, "staleness")?,
            eps_spent: cell(&row[7], n, "eps_spent")?,
            compute_time: None,
        });
    }
    Ok(TraceFile { header, records })
}

pub fn read_trace_file(path: &Path) -> Result<TraceFile, TraceFileError> {
    read_trace(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(t: f64, iter: usize, event: EventKind) -> TraceRecord {
        TraceRecord {
            virtual_time: t,
            global_iter: iter,
            worker: Some(3),
            event,
            loss: None,
            grad_norm_sq: Some(0.1 + 0.2),
            staleness: Some(2),
            eps_spent: None,
            compute_time: None,
        }
    }

    #[test]
    fn absent_values_are_empty_cells() {
        let mut buf = Vec::new();
        let header = TraceHeader::new("ab".into(), 7);
        write_trace(&mut buf, &header, &[record(1.5, 4, EventKind::GossipExchange)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# adp2sgd-trace schema_version=1 config_sha256=ab seed=7");
        assert_eq!(lines[1], COLUMNS.join(","));
        assert_eq!(lines[2], "1.5,4,3,gossip_exchange,,0.30000000000000004,2,");
    }

    #[test]
    fn other_schema_versions_are_refused() {
        let text = "# adp2sgd-trace schema_version=2 config_sha256=ab seed=1\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceFileError::SchemaVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(read_trace("time,iter\n".as_bytes()), Err(TraceFileError::Header(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let header = TraceHeader::new("00".into(), 0);
        write_trace_atomic(&path, &header, &[record(0.0, 0, EventKind::MetricProbe)]).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("t.csv")]);
        assert_eq!(read_trace_file(&path).unwrap().records.len(), 1);
    }

    fn arb_event() -> impl Strategy<Value = EventKind> {
        prop_oneof![
            Just(EventKind::GradientReady),
            Just(EventKind::GossipExchange),
            Just(EventKind::SyncBarrier),
            Just(EventKind::MetricProbe),
        ]
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            rows in prop::collection::vec(
                (0.0..1e6f64, 0usize..1_000_000, prop::option::of(0usize..64), arb_event(),
                 prop::option::of(-1e3..1e3f64), prop::option::of(0.0..1e9f64),
                 prop::option::of(0usize..100), prop::option::of(0.0..10f64)),
                0..40),
            seed in any::<u64>(),
        ) {
            let records: Vec<TraceRecord> = rows
                .into_iter()
                .map(|(t, i, w, e, l, g, s, eps)| TraceRecord {
                    virtual_time: t, global_iter: i, worker: w, event: e, loss: l,
                    grad_norm_sq: g, staleness: s, eps_spent: eps, compute_time: None,
                })
                .collect();
            let header = TraceHeader::new("deadbeef".into(), seed);
            let mut buf = Vec::new();
            write_trace(&mut buf, &header, &records).unwrap();
            let back = read_trace(buf.as_slice()).unwrap();
            prop_assert_eq!(back.header, header);
            prop_assert_eq!(back.records, records);
        }
    }
}
