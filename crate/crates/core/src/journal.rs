//! Append-only run journal.
//!
//! One JSON object per line. The header is record 0; every later record
//! carries the next sequence number. Appends are flushed and synced before
//! their sequence number is returned. On reopen, a torn final line is
//! dropped (and truncated away); damage anywhere else is a hard error.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{ObjectiveSpec, Orientation, TrialStatus};
use crate::pbt::Schedule;
use crate::protocol::{MethodSpec, SeedPlan};
use crate::space::{ConfigSpace, Configuration};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal is corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("journal has no header")]
    MissingHeader,
    #[error("journal format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("space digest mismatch: journal has {journal}, space file has {file}")]
    DigestMismatch { journal: String, file: String },
    #[error("append failed after sequence {last_durable}: {message}")]
    Append { last_durable: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub method: MethodSpec,
    pub space: ConfigSpace,
    pub space_digest: String,
    pub objective: ObjectiveSpec,
    pub seed_plan: SeedPlan,
    pub budget_runs: usize,
    pub repetitions: usize,
    pub rng_seed: u64,
    pub orientation: Orientation,
    /// Rung budgets, for multi-fidelity methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rungs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tuning,
    Warmstart,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub rep: usize,
    pub phase: Phase,
    /// Multi-seed evaluation this trial belongs to.
    pub group: u64,
    pub group_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<usize>,
    pub config: Configuration,
    pub budget: f64,
    /// Fraction the trial resumed from (0 for a fresh start).
    pub trained_from: f64,
    pub seed: u64,
    pub status: TrialStatus,
    #[serde(default)]
    pub cost: Option<f64>,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    /// Budget actually trained by this trial, as a share of its group's
    /// full-run equivalents.
    pub fn spend(&self) -> f64 {
        (self.budget - self.trained_from) / self.group_size as f64
    }

    /// Equality ignoring measured wall time.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub rep: usize,
    #[serde(default)]
    pub incumbent: Option<Configuration>,
    #[serde(default)]
    pub tuning_cost: Option<f64>,
    pub test_costs: Vec<f64>,
    pub spend: f64,
    pub warmstart_spend: f64,
    /// Hyperparameter schedule of the incumbent, for population methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordBody {
    Header(JournalHeader),
    Trial(TrialRecord),
    Incumbent {
        rep: usize,
        config: Configuration,
        cost: f64,
    },
    Exploit {
        rep: usize,
        interval: usize,
        loser: usize,
        winner: usize,
    },
    Explore {
        rep: usize,
        interval: usize,
        member: usize,
        mode: String,
        config: Configuration,
    },
    KernelRestart {
        rep: usize,
        interval: usize,
    },
    Repetition(RepetitionSummary),
    Complete,
}

impl RecordBody {
    /// Equality used when replaying: trial wall times are not compared.
    pub fn replays_as(&self, other: &RecordBody) -> bool {
        match (self, other) {
            (RecordBody::Trial(a), RecordBody::Trial(b)) => a.same_outcome(b),
            (a, b) => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seq: u64,
    #[serde(flatten)]
    pub body: RecordBody,
}

/// Result of reading a journal from disk.
#[derive(Debug)]
pub struct Loaded {
    pub header: JournalHeader,
    /// All records after the header.
    pub records: Vec<Record>,
    pub warnings: Vec<String>,
}

impl Loaded {
    pub fn is_complete(&self) -> bool {
        matches!(self.records.last(), Some(Record { body: RecordBody::Complete, .. }))
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter_map(|r| match &r.body {
            RecordBody::Trial(t) => Some(t),
            _ => None,
        })
    }

    pub fn repetitions(&self) -> impl Iterator<Item = &RepetitionSummary> {
        self.records.iter().filter_map(|r| match &r.body {
            RecordBody::Repetition(s) => Some(s),
            _ => None,
        })
    }
}

/// Reads and validates a journal file without opening it for writing.
pub fn read(path: &Path) -> Result<Loaded, JournalError> {
    let (loaded, _) = read_with_len(path)?;
    Ok(loaded)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JournalError + '_ {
    move |source| JournalError::Io { path: path.to_path_buf(), source }
}

/// Returns the parsed journal plus the byte length of its intact prefix.
fn read_with_len(path: &Path) -> Result<(Loaded, u64), JournalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut lines: Vec<(String, bool)> = Vec::new();
    loop {
        let mut buf = Vec::new();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        let terminated = buf.last() == Some(&b'\n');
        if terminated {
            buf.pop();
        }
        lines.push((String::from_utf8_lossy(&buf).into_owned(), terminated));
    }

    let mut warnings = Vec::new();
    let mut parsed = Vec::new();
    let mut good_len = 0u64;
    let count = lines.len();
    for (i, (line, terminated)) in lines.iter().enumerate() {
        let last = i + 1 == count;
        let result = serde_json::from_str::<Record>(line);
        match result {
            Ok(rec) if *terminated => {
                if rec.seq != parsed.len() as u64 {
                    return Err(JournalError::Corrupt {
                        line: i + 1,
                        message: format!("expected sequence {}, found {}", parsed.len(), rec.seq),
                    });
                }
                good_len += line.len() as u64 + 1;
                parsed.push(rec);
            }
            _ if last => {
                warnings.push(format!("dropped torn trailing record at line {}", i + 1));
            }
            Ok(_) => unreachable!("only the last line can be unterminated"),
            Err(e) => {
                return Err(JournalError::Corrupt { line: i + 1, message: e.to_string() });
            }
        }
    }

    let mut iter = parsed.into_iter();
    let header = match iter.next() {
        Some(Record { body: RecordBody::Header(h), .. }) => h,
        _ => return Err(JournalError::MissingHeader),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(JournalError::Version { found: header.format_version, expected: FORMAT_VERSION });
    }
    Ok((Loaded { header, records: iter.collect(), warnings }, good_len))
}

/// Writable journal; keeps every record in memory as well.
#[derive(Debug)]
pub struct Journal {
    path: Option<PathBuf>,
    file: Option<File>,
    header: Option<JournalHeader>,
    records: Vec<Record>,
}

impl Journal {
    /// Journal that lives only in memory.
    pub fn in_memory(header: JournalHeader) -> Self {
        Self { path: None, file: None, header: Some(header), records: Vec::new() }
    }

    /// In-memory journal without a header, for runs outside the protocol.
    pub fn scratch() -> Self {
        Self { path: None, file: None, header: None, records: Vec::new() }
    }

    /// Creates a new journal file and writes the header as record 0.
    pub fn create(path: &Path, header: JournalHeader) -> Result<Self, JournalError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut journal = Self { path: Some(path.to_path_buf()), file: Some(file), header: Some(header.clone()), records: Vec::new() };
        journal.write_line(&Record { seq: 0, body: RecordBody::Header(header) })?;
        Ok(journal)
    }

    /// Opens an existing journal for appending. Returns the journal and the
    /// records already present (after the header).
    pub fn open(path: &Path) -> Result<(Self, Loaded), JournalError> {
        let (loaded, good_len) = read_with_len(path)?;
        let mut file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(good_len).map_err(io_err(path))?;
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        let journal = Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            header: Some(loaded.header.clone()),
            records: loaded.records.clone(),
        };
        Ok((journal, loaded))
    }

    pub fn header(&self) -> Option<&JournalHeader> {
        self.header.as_ref()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn last_seq(&self) -> u64 {
        self.records.len() as u64
    }

    fn write_line(&mut self, record: &Record) -> Result<(), JournalError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        let last_durable = record.seq.saturating_sub(1);
        let fail = |e: std::io::Error| JournalError::Append { last_durable, message: e.to_string() };
        file.write_all(line.as_bytes()).map_err(fail)?;
        file.flush().map_err(fail)?;
        file.sync_data().map_err(fail)?;
        Ok(())
    }

    /// Appends a record and returns its sequence number once it is durable.
    pub fn append(&mut self, body: RecordBody) -> Result<u64, JournalError> {
        let record = Record { seq: self.records.len() as u64 + 1, body };
        self.write_line(&record)?;
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }

    /// Fails unless `space` is the space this journal was written for.
    pub fn check_space(&self, space: &ConfigSpace) -> Result<(), JournalError> {
        let Some(header) = &self.header else {
            return Ok(());
        };
        let file = space.digest();
        if file != header.space_digest {
            return Err(JournalError::DigestMismatch { journal: header.space_digest.clone(), file });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::test_header;
    use crate::space::Value;

    fn trial(id: u64) -> RecordBody {
        RecordBody::Trial(TrialRecord {
            trial_id: id,
            rep: 0,
            phase: Phase::Tuning,
            group: id,
            group_size: 1,
            member: None,
            config: Configuration::new().with("x0", Value::Float(0.25)),
            budget: 1.0,
            trained_from: 0.0,
            seed: 0,
            status: TrialStatus::Done,
            cost: Some(0.1 + id as f64),
            wall_time: 0.01,
            checkpoint: None,
            error: None,
        })
    }

    #[test]
    fn sequence_numbers_start_at_one_and_increase() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        let mut j = Journal::create(&path, test_header()).unwrap();
        assert_eq!(j.append(trial(0)).unwrap(), 1);
        assert_eq!(j.append(trial(1)).unwrap(), 2);
        let loaded = read(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.header, test_header());
    }

    #[test]
    fn appended_record_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let mut j = Journal::create(&path, test_header()).unwrap();
            j.append(trial(0)).unwrap();
            // Dropped without any shutdown step, as in a crash.
        }
        let (mut j, loaded) = Journal::open(&path).unwrap();
        assert_eq!(loaded.records[0].body, trial(0));
        assert_eq!(j.append(trial(1)).unwrap(), 2);
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let mut j = Journal::create(&path, test_header()).unwrap();
            j.append(trial(0)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":2,\"type\":\"tri").unwrap();
        drop(f);
        let (mut j, loaded) = Journal::open(&path).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(j.append(trial(1)).unwrap(), 2);
        let again = read(&path).unwrap();
        assert_eq!(again.records.len(), 2);
        assert!(again.warnings.is_empty());
    }

    #[test]
    fn mid_journal_corruption_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let mut j = Journal::create(&path, test_header()).unwrap();
            j.append(trial(0)).unwrap();
            j.append(trial(1)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "garbage";
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(read(&path), Err(JournalError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn out_of_order_sequence_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let mut j = Journal::create(&path, test_header()).unwrap();
            j.append(trial(0)).unwrap();
            j.append(trial(1)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&path, format!("{}\n{}\n{}\n", lines[0], lines[2], lines[1])).unwrap();
        assert!(matches!(read(&path), Err(JournalError::Corrupt { .. })));
    }

    #[test]
    fn missing_header_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read(&path), Err(JournalError::MissingHeader)));
        let mut h = test_header();
        h.format_version = 99;
        let line = serde_json::to_string(&Record { seq: 0, body: RecordBody::Header(h) }).unwrap();
        std::fs::write(&path, line + "\n").unwrap();
        assert!(matches!(read(&path), Err(JournalError::Version { found: 99, .. })));
    }

    #[test]
    fn digest_check_names_both_digests() {
        let j = Journal::in_memory(test_header());
        let other: ConfigSpace = "y: (0, 2)".parse().unwrap();
        match j.check_space(&other) {
            Err(JournalError::DigestMismatch { journal, file }) => {
                assert_eq!(journal, test_header().space_digest);
                assert_eq!(file, other.digest());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(j.check_space(&test_header().space).is_ok());
    }

    #[test]
    fn record_lines_are_self_describing() {
        let line = serde_json::to_string(&Record { seq: 3, body: RecordBody::Complete }).unwrap();
        assert_eq!(line, r#"{"seq":3,"type":"complete"}"#);
    }
}
