//! Event-log ingestion and labeling.
//!
//! Two CSV shapes are understood: raw event logs (one timestamped event per
//! row, grouped into cases here) and labeled-trace exports (header
//! `label,sequence`, one trace per row). Labels are boolean and derived
//! either from case duration against a threshold or from equality of a
//! case-level attribute.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use thiserror::Error;

use crate::numeric::seeded_rng;
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}` in header")]
    MissingColumn(String),
    #[error("duplicate column `{0}` in header")]
    DuplicateColumn(String),
    #[error("line {line}: empty activity sequence")]
    EmptySequence { line: u64 },
    #[error("line {line}: cannot parse label `{value}` (expected true/false/1/0)")]
    BadLabel { line: u64, value: String },
    #[error("line {line}: cannot parse timestamp `{value}` with format `{format}`")]
    BadTimestamp {
        line: u64,
        value: String,
        format: String,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("{0}")]
    Config(String),
}

/// One timestamped event from a raw log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub case_id: String,
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    /// Case-level attribute value, when an attribute column was configured.
    pub attribute: Option<String>,
}

/// All events of one case, sorted by timestamp (stable on ties).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseGroup {
    pub case_id: String,
    pub events: Vec<RawEvent>,
}

/// A labeled activity sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub case_id: String,
    pub activities: Vec<String>,
    pub label: bool,
    pub duration: Option<Duration>,
}

/// Stratified train/validation split of labeled traces.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub training: Vec<Trace>,
    pub validation: Vec<Trace>,
    pub split_seed: u64,
    pub split_fraction: f64,
}

/// Headline statistics of a labeled log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogSummary {
    pub traces: usize,
    pub positives: usize,
    pub max_length: usize,
    pub distinct_activities: usize,
}

/// Column names used when reading a raw event CSV.
#[derive(Debug, Clone)]
pub struct EventColumns {
    pub case: String,
    pub activity: String,
    pub timestamp: String,
    pub attribute: Option<String>,
}

/// Reads a labeled-trace CSV (`label,sequence` header; RFC 4180 quoting).
/// The sequence cell splits on `seq_separator`; labels accept
/// true/false/1/0 case-insensitively.
pub fn parse_labeled_csv(
    path: &Path,
    delimiter: u8,
    seq_separator: char,
) -> Result<Vec<Trace>, LogError> {
    let file = open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    check_duplicates(&headers)?;
    let label_idx = find_column(&headers, "label")?;
    let seq_idx = find_column(&headers, "sequence")?;

    let mut traces = Vec::new();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let label = parse_label(record.get(label_idx).unwrap_or(""), line)?;
        let cell = record.get(seq_idx).unwrap_or("");
        let activities: Vec<String> = cell
            .split(seq_separator)
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if activities.is_empty() {
            return Err(LogError::EmptySequence { line });
        }
        traces.push(Trace {
            case_id: format!("row-{line}"),
            activities,
            label,
            duration: None,
        });
    }
    Ok(traces)
}

/// Writes traces back out in the labeled-trace CSV format. Tokens must be
/// non-empty and free of the separator so the file round-trips exactly.
/// The file is written to a temporary sibling and renamed into place.
pub fn write_labeled_csv(
    traces: &[Trace],
    path: &Path,
    delimiter: u8,
    seq_separator: char,
) -> Result<(), LogError> {
    for trace in traces {
        for token in &trace.activities {
            if token.is_empty() || token.contains(seq_separator) {
                return Err(LogError::Config(format!(
                    "activity `{token}` in case `{}` cannot be written with separator `{seq_separator}`",
                    trace.case_id
                )));
            }
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    {
        let mut writer = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(&tmp);
        writer.write_record(["label", "sequence"])?;
        let sep = seq_separator.to_string();
        for trace in traces {
            let sequence = trace.activities.join(&sep);
            writer.write_record([if trace.label { "true" } else { "false" }, &sequence])?;
        }
        writer.flush().map_err(|e| LogError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    tmp.persist(path).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Reads a raw event CSV and groups rows into cases (first-appearance order);
/// every group is sorted by timestamp ascending with input order breaking
/// ties. `timestamp_format` is a chrono pattern; zoned patterns (`%z`) are
/// honored, naive ones are taken as UTC.
pub fn parse_event_csv(
    path: &Path,
    columns: &EventColumns,
    timestamp_format: &str,
) -> Result<Vec<CaseGroup>, LogError> {
    let file = open(path)?;
    let mut reader = csv::ReaderBuilder::new().from_reader(file);
    let headers = reader.headers()?.clone();
    check_duplicates(&headers)?;
    let case_idx = find_column(&headers, &columns.case)?;
    let act_idx = find_column(&headers, &columns.activity)?;
    let ts_idx = find_column(&headers, &columns.timestamp)?;
    let attr_idx = match &columns.attribute {
        Some(name) => Some(find_column(&headers, name)?),
        None => None,
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawEvent>> = HashMap::new();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let case_id = record.get(case_idx).unwrap_or("").trim().to_string();
        if case_id.is_empty() {
            return Err(LogError::Row {
                line,
                message: "empty case id".into(),
            });
        }
        let activity = record.get(act_idx).unwrap_or("").trim().to_string();
        if activity.is_empty() {
            return Err(LogError::Row {
                line,
                message: "empty activity".into(),
            });
        }
        let raw_ts = record.get(ts_idx).unwrap_or("");
        let timestamp = parse_timestamp(raw_ts, timestamp_format).ok_or_else(|| {
            LogError::BadTimestamp {
                line,
                value: raw_ts.to_string(),
                format: timestamp_format.to_string(),
            }
        })?;
        let attribute = attr_idx.map(|i| record.get(i).unwrap_or("").trim().to_string());
        let events = groups.entry(case_id.clone()).or_insert_with(|| {
            order.push(case_id.clone());
            Vec::new()
        });
        events.push(RawEvent {
            case_id,
            activity,
            timestamp,
            attribute,
        });
    }

    let mut result = Vec::with_capacity(order.len());
    for case_id in order {
        let mut events = groups.remove(&case_id).unwrap();
        events.sort_by_key(|e| e.timestamp);
        result.push(CaseGroup { case_id, events });
    }
    Ok(result)
}

/// Keeps only the first `n` cases in appearance order.
pub fn truncate_cases(mut groups: Vec<CaseGroup>, n: usize) -> Vec<CaseGroup> {
    groups.truncate(n);
    groups
}

/// Labels each case by total duration: `last - first > threshold` (strict).
/// Single-event cases have zero duration.
pub fn label_by_duration(cases: &[CaseGroup], threshold: Duration) -> Vec<Trace> {
    cases
        .iter()
        .map(|case| {
            assert!(!case.events.is_empty(), "case `{}` has no events", case.case_id);
            let first = case.events.iter().map(|e| e.timestamp).min().unwrap();
            let last = case.events.iter().map(|e| e.timestamp).max().unwrap();
            let duration = last - first;
            Trace {
                case_id: case.case_id.clone(),
                activities: case.events.iter().map(|e| e.activity.clone()).collect(),
                label: duration > threshold,
                duration: Some(duration),
            }
        })
        .collect()
}

/// Labels each case by equality of its case-level attribute with `expected`
/// (trimmed exact match). Cases without the attribute are labeled false and
/// counted in the returned warning tally.
pub fn label_by_attribute(cases: &[CaseGroup], expected: &str) -> (Vec<Trace>, usize) {
    let expected = expected.trim();
    let mut warnings = 0usize;
    let traces = cases
        .iter()
        .map(|case| {
            assert!(!case.events.is_empty(), "case `{}` has no events", case.case_id);
            let value = case
                .events
                .iter()
                .find_map(|e| e.attribute.as_deref().map(str::trim).filter(|v| !v.is_empty()));
            let label = match value {
                Some(v) => v == expected,
                None => {
                    warnings += 1;
                    false
                }
            };
            Trace {
                case_id: case.case_id.clone(),
                activities: case.events.iter().map(|e| e.activity.clone()).collect(),
                label,
                duration: None,
            }
        })
        .collect();
    (traces, warnings)
}

/// Stratified split: each class is shuffled with a ChaCha8 generator seeded
/// from `seed` (positive class first) and cut at `round(fraction * n)`,
/// clamped so both sides keep at least one trace per class. Training gets the
/// first part. Deterministic for a fixed input order and seed.
pub fn split(traces: Vec<Trace>, fraction: f64, seed: u64) -> Result<Dataset, LogError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LogError::Config(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    if traces.is_empty() {
        return Err(LogError::Config("cannot split an empty trace list".into()));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for trace in traces {
        if trace.label {
            positives.push(trace);
        } else {
            negatives.push(trace);
        }
    }
    for (name, class) in [("positive", &positives), ("negative", &negatives)] {
        if class.len() < 2 {
            return Err(LogError::Config(format!(
                "cannot stratify: {name} class has {} trace(s), need at least 2",
                class.len()
            )));
        }
    }

    let mut rng = seeded_rng(seed);
    let mut training = Vec::new();
    let mut validation = Vec::new();
    for class in [&mut positives, &mut negatives] {
        class.shuffle(&mut rng);
        let n = class.len();
        let cut = ((n as f64 * fraction) + 0.5).floor() as usize;
        let cut = cut.clamp(1, n - 1);
        let rest = class.split_off(cut);
        training.append(class);
        validation.extend(rest);
    }
    Ok(Dataset {
        training,
        validation,
        split_seed: seed,
        split_fraction: fraction,
    })
}

/// Trace count, positive count, longest sequence and distinct activity count.
pub fn summarize(traces: &[Trace]) -> LogSummary {
    let mut distinct: HashMap<&str, ()> = HashMap::new();
    let mut positives = 0;
    let mut max_length = 0;
    for trace in traces {
        if trace.label {
            positives += 1;
        }
        max_length = max_length.max(trace.activities.len());
        for activity in &trace.activities {
            distinct.insert(activity, ());
        }
    }
    LogSummary {
        traces: traces.len(),
        positives,
        max_length,
        distinct_activities: distinct.len(),
    }
}

fn open(path: &Path) -> Result<File, LogError> {
    File::open(path).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize, LogError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| LogError::MissingColumn(name.to_string()))
}

fn check_duplicates(headers: &csv::StringRecord) -> Result<(), LogError> {
    let mut seen = HashMap::new();
    for h in headers.iter() {
        if seen.insert(h, ()).is_some() {
            return Err(LogError::DuplicateColumn(h.to_string()));
        }
    }
    Ok(())
}

fn parse_label(raw: &str, line: u64) -> Result<bool, LogError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(LogError::BadLabel {
            line,
            value: raw.to_string(),
        }),
    }
}

fn parse_timestamp(raw: &str, format: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_str(raw, format) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(raw, format)
        .ok()
        .map(|naive| naive.and_utc())
}

/// Writes case groups out as a raw event CSV (columns `case,activity,
/// timestamp[,attribute]`), millisecond timestamps. Mostly useful for tests
/// and for preparing fixture logs.
pub fn write_event_csv(groups: &[CaseGroup], path: &Path, with_attribute: bool) -> Result<(), LogError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    {
        let mut writer = csv::Writer::from_writer(&tmp);
        if with_attribute {
            writer.write_record(["case", "activity", "timestamp", "attribute"])?;
        } else {
            writer.write_record(["case", "activity", "timestamp"])?;
        }
        for group in groups {
            for event in &group.events {
                let ts = event.timestamp.format("%Y-%m-%d %H:%M:%S%.3f").to_string();
                if with_attribute {
                    writer.write_record([
                        group.case_id.as_str(),
                        event.activity.as_str(),
                        ts.as_str(),
                        event.attribute.as_deref().unwrap_or(""),
                    ])?;
                } else {
                    writer.write_record([group.case_id.as_str(), event.activity.as_str(), ts.as_str()])?;
                }
            }
        }
        writer.flush().map_err(|e| LogError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    tmp.persist(path).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// The default timestamp pattern used by `write_event_csv` and the CLI.
pub const DEFAULT_TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.3f";
