use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Frame, IngestError, LabeledStream};
use crate::labels::OperationId;

pub const STREAM_HEADER: &str = "timestamp,acc_x,acc_y,acc_z,operation";

pub fn load_stream(path: impl AsRef<Path>) -> Result<LabeledStream, IngestError> {
    parse_stream(BufReader::new(File::open(path)?))
}

/// Parse the comma-separated stream schema; errors carry 1-based line numbers.
pub fn parse_stream(reader: impl Read) -> Result<LabeledStream, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| malformed(1, e))?,
        None => {
            return Err(IngestError::Header {
                expected: STREAM_HEADER,
                found: String::new(),
            })
        }
    };
    let found = header.iter().collect::<Vec<_>>().join(",");
    if found != STREAM_HEADER {
        return Err(IngestError::Header {
            expected: STREAM_HEADER,
            found,
        });
    }

    let mut frames: Vec<Frame> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| malformed(0, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 5 {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let timestamp: i64 = parse_field(&rec[0], line, "timestamp")?;
        let mut acc = [0.0; 3];
        for (k, slot) in acc.iter_mut().enumerate() {
            *slot = parse_field(&rec[k + 1], line, "acceleration")?;
        }
        let raw: u32 =
            parse_field(&rec[4], line, "operation").map_err(|_| IngestError::UnknownLabel {
                line,
                id: rec[4].to_string(),
            })?;
        let label = OperationId::new(raw).ok_or(IngestError::UnknownLabel {
            line,
            id: rec[4].to_string(),
        })?;
        if let Some(prev) = frames.last() {
            if timestamp <= prev.timestamp {
                return Err(IngestError::Ordering {
                    line,
                    previous: prev.timestamp,
                    current: timestamp,
                });
            }
        }
        frames.push(Frame {
            timestamp,
            acc,
            label,
        });
    }
    LabeledStream::new(frames)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T, IngestError> {
    s.trim().parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("invalid {what} `{s}`"),
    })
}

fn malformed(line: u64, e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(line);
    IngestError::Malformed {
        line,
        message: e.to_string(),
    }
}

pub fn save_stream(stream: &LabeledStream, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stream(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Write in the same schema `parse_stream` reads; floats use shortest round-trip formatting.
pub fn write_stream(stream: &LabeledStream, mut w: impl Write) -> Result<(), IngestError> {
    writeln!(w, "{STREAM_HEADER}")?;
    for f in stream.frames() {
        writeln!(
            w,
            "{},{},{},{},{}",
            f.timestamp, f.acc[0], f.acc[1], f.acc[2], f.label
        )?;
    }
    Ok(())
}
