//! CSV and JSON files exchanged between commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use smcvi::models::hawkes::{Event, EventStream};

pub fn write_matrix(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV with a header row.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{} row {}", path.display(), i + 1))?;
        rows.push(row);
    }
    if let Some(row) = rows.iter().find(|r| r.len() != rows[0].len()) {
        bail!("{}: ragged row of length {}", path.display(), row.len());
    }
    Ok(rows)
}

pub fn column_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Events as `timestamp_seconds,mark` with 1-based marks.
pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["timestamp_seconds", "mark"])?;
    for e in events {
        w.write_record([e.time.to_string(), (e.mark + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let (Some(t), Some(c)) = (rec.get(0), rec.get(1)) else {
            bail!("{} row {}: expected timestamp and mark", path.display(), i + 1);
        };
        let time: f64 = t.trim().parse().with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let mark: usize = c.trim().parse().with_context(|| format!("{} row {}", path.display(), i + 1))?;
        if mark == 0 {
            bail!("{} row {}: marks are 1-based", path.display(), i + 1);
        }
        out.push(Event { time, mark: mark - 1 });
    }
    Ok(out)
}

/// Builds a stream starting at time 0 from consecutive event files.
pub fn event_stream(dims: usize, parts: Vec<Vec<Event>>) -> Result<EventStream> {
    let events: Vec<Event> = parts.into_iter().flatten().collect();
    Ok(EventStream::new(0.0, dims, events)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
