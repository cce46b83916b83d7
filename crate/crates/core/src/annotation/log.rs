//! Text formats for telemetry logs and frame labels.
//!
//! A log line is `timestamp wheel_fl wheel_fr wheel_rl wheel_rr laser frame_id`,
//! whitespace separated. Lines with more than seven fields carry a full scan
//! between the wheel speeds and the frame id, which is reduced to its
//! minimum. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;

use super::{FrameLabel, TelemetryRecord};
use crate::error::{Error, Result};

fn number(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{what} {field:?} is not finite")));
    }
    Ok(v)
}

/// Parses a telemetry log. Timestamps must strictly increase and laser
/// ranges be positive; errors name the offending line.
pub fn parse_log(text: &str) -> Result<Vec<TelemetryRecord>> {
    let mut out: Vec<TelemetryRecord> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_ascii_whitespace().collect();
        if fields.len() < 7 {
            return Err(Error::parse(
                line,
                format!("expected at least 7 fields, got {}", fields.len()),
            ));
        }
        let timestamp = number(fields[0], line, "timestamp")?;
        let mut wheels = [0.0; 4];
        for (w, f) in wheels.iter_mut().zip(&fields[1..5]) {
            *w = number(f, line, "wheel velocity")?;
        }
        let last = fields.len() - 1;
        let mut laser_min = f64::INFINITY;
        for f in &fields[5..last] {
            laser_min = laser_min.min(number(f, line, "laser range")?);
        }
        if !(laser_min > 0.0) {
            return Err(Error::parse(line, format!("laser range {laser_min} must be positive")));
        }
        let frame_id = fields[last]
            .parse()
            .map_err(|_| Error::parse(line, format!("invalid frame id {:?}", fields[last])))?;
        if let Some(prev) = out.last() {
            if timestamp <= prev.timestamp {
                return Err(Error::parse(
                    line,
                    format!("timestamp {timestamp} does not increase (previous {})", prev.timestamp),
                ));
            }
        }
        out.push(TelemetryRecord {
            timestamp,
            wheels,
            laser_min,
            frame_id,
        });
    }
    Ok(out)
}

/// Writes one record per line using shortest round-trip decimal formatting,
/// so [`parse_log`] recovers every value exactly.
pub fn write_log(records: &[TelemetryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{:?} {:?} {:?} {:?} {:?} {:?} {}",
            r.timestamp, r.wheels[0], r.wheels[1], r.wheels[2], r.wheels[3], r.laser_min, r.frame_id
        );
    }
    out
}

pub fn write_labels(labels: &[FrameLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{} {}", l.frame_id, l.label);
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<FrameLabel>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut it = content.split_ascii_whitespace();
        let (Some(id), Some(label), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(line, "expected `frame_id label`"));
        };
        out.push(FrameLabel {
            frame_id: id
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid frame id {id:?}")))?,
            label: label
                .parse()
                .map_err(|_| Error::parse(line, format!("unknown label {label:?}")))?,
        });
    }
    Ok(out)
}
