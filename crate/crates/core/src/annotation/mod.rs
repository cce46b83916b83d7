//! Positive/unlabeled frame annotation from robot telemetry.
//!
//! A record qualifies when every wheel turns at least `velocity_threshold`
//! m/s, the robot moves forwards or turns, and nothing is closer than
//! `clearance` metres. A window starting at record `i` ends at the first
//! record `j` with `t_j − t_i ≥ window`; if every record in `i..=j`
//! qualifies, the frame whose timestamp is nearest `(t_i + t_j) / 2` is
//! labelled positive (ties go to the earlier record). Every other frame is
//! unlabeled.

pub mod log;
pub mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use log::{parse_labels, parse_log, write_labels, write_log};
pub use sim::{simulate_log, Scenario, SimulatedLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    /// Seconds; strictly increasing within a log.
    pub timestamp: f64,
    /// Front-left, front-right, rear-left, rear-right in m/s, forward positive.
    pub wheels: [f64; 4],
    /// Closest laser return in metres.
    pub laser_min: f64,
    pub frame_id: u64,
}

impl TelemetryRecord {
    pub fn left_mean(&self) -> f64 {
        (self.wheels[0] + self.wheels[2]) / 2.0
    }

    pub fn right_mean(&self) -> f64 {
        (self.wheels[1] + self.wheels[3]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationConfig {
    /// m/s every wheel must reach.
    pub velocity_threshold: f64,
    /// Seconds.
    pub window: f64,
    /// Metres of laser clearance required.
    pub clearance: f64,
    /// Left/right mean difference (m/s) above which same-sign motion counts
    /// as turning.
    pub turn_tolerance: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            velocity_threshold: 1.0,
            window: 2.5,
            clearance: 1.2,
            turn_tolerance: 0.2,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("velocity_threshold", self.velocity_threshold),
            ("window", self.window),
            ("clearance", self.clearance),
            ("turn_tolerance", self.turn_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// All three conditions for a single record.
    pub fn record_qualifies(&self, r: &TelemetryRecord) -> bool {
        let fast = r.wheels.iter().all(|v| v.abs() >= self.velocity_threshold);
        let (l, r_) = (r.left_mean(), r.right_mean());
        let forward = l > 0.0 && r_ > 0.0;
        let turning = l * r_ < 0.0 || (l - r_).abs() > self.turn_tolerance;
        fast && (forward || turning) && r.laser_min > self.clearance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(Error::Config(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame_id: u64,
    pub label: Label,
}

/// Labels one window of records.
pub fn label_window(records: &[TelemetryRecord], cfg: &AnnotationConfig) -> Result<Label> {
    let (first, last) = match records {
        [] => return Err(Error::Window("empty window".into())),
        [first, .., last] => (first, last),
        [_] => {
            return Err(Error::Window(format!(
                "a single record cannot span {} s",
                cfg.window
            )))
        }
    };
    let span = last.timestamp - first.timestamp;
    if !(span >= cfg.window) {
        return Err(Error::Window(format!(
            "window spans {span} s, need at least {} s",
            cfg.window
        )));
    }
    Ok(if records.iter().all(|r| cfg.record_qualifies(r)) {
        Label::Positive
    } else {
        Label::Unlabeled
    })
}

/// Checks timestamps are finite and strictly increasing, wheel speeds
/// finite and laser ranges positive.
pub fn validate_log(log: &[TelemetryRecord]) -> Result<()> {
    for (i, r) in log.iter().enumerate() {
        let bad = |msg: String| Error::Ingest { record: i, msg };
        if !r.timestamp.is_finite() {
            return Err(bad(format!("timestamp {} is not finite", r.timestamp)));
        }
        if let Some(prev) = i.checked_sub(1).map(|p| log[p].timestamp) {
            if r.timestamp <= prev {
                return Err(bad(format!(
                    "timestamp {} does not increase (previous {prev})",
                    r.timestamp
                )));
            }
        }
        if r.wheels.iter().any(|v| !v.is_finite()) {
            return Err(bad("wheel velocity is not finite".into()));
        }
        if !(r.laser_min > 0.0 && r.laser_min.is_finite()) {
            return Err(bad(format!("laser range {} must be positive", r.laser_min)));
        }
    }
    Ok(())
}

/// Index of the record nearest `(t_i + t_j) / 2` within `i..=j`; ties go to
/// the earlier record.
fn center(log: &[TelemetryRecord], i: usize, j: usize) -> usize {
    let mid = (log[i].timestamp + log[j].timestamp) / 2.0;
    // First record at or after the midpoint; the nearest is it or its predecessor.
    let after = i + log[i..=j].partition_point(|r| r.timestamp < mid);
    if after == i {
        return i;
    }
    let before = after - 1;
    if after > j {
        return before;
    }
    let d_before = mid - log[before].timestamp;
    let d_after = log[after].timestamp - mid;
    if d_after < d_before {
        after
    } else {
        before
    }
}

/// Slides the window one record at a time and labels each window's central
/// frame. Frames appear once each, in order of first appearance.
pub fn annotate_log(log: &[TelemetryRecord], cfg: &AnnotationConfig) -> Result<Vec<FrameLabel>> {
    cfg.validate()?;
    validate_log(log)?;

    // failing[k] = number of non-qualifying records among log[..k].
    let mut failing = Vec::with_capacity(log.len() + 1);
    failing.push(0usize);
    for r in log {
        let last = *failing.last().expect("non-empty");
        failing.push(last + usize::from(!cfg.record_qualifies(r)));
    }

    let mut positive = vec![false; log.len()];
    let mut j = 0;
    for i in 0..log.len() {
        j = j.max(i);
        while j < log.len() && log[j].timestamp - log[i].timestamp < cfg.window {
            j += 1;
        }
        if j == log.len() {
            break;
        }
        if failing[j + 1] == failing[i] {
            positive[center(log, i, j)] = true;
        }
    }

    let mut order: Vec<u64> = Vec::new();
    let mut labels: std::collections::HashMap<u64, Label> = std::collections::HashMap::new();
    for (r, &pos) in log.iter().zip(&positive) {
        let entry = labels.entry(r.frame_id).or_insert_with(|| {
            order.push(r.frame_id);
            Label::Unlabeled
        });
        if pos {
            *entry = Label::Positive;
        }
    }
    Ok(order
        .into_iter()
        .map(|frame_id| FrameLabel {
            frame_id,
            label: labels[&frame_id],
        })
        .collect())
}

/// Number of positive labels.
pub fn count_positive(labels: &[FrameLabel]) -> usize {
    labels.iter().filter(|l| l.label == Label::Positive).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64, v: f64, laser: f64, frame: u64) -> TelemetryRecord {
        TelemetryRecord {
            timestamp: t,
            wheels: [v; 4],
            laser_min: laser,
            frame_id: frame,
        }
    }

    fn steady(n: usize, v: f64, laser: f64) -> Vec<TelemetryRecord> {
        (0..n).map(|k| rec(k as f64 * 0.125, v, laser, k as u64)).collect()
    }

    #[test]
    fn window_examples() {
        let cfg = AnnotationConfig::default();
        let log = steady(21, 1.5, 2.0);
        assert_eq!(label_window(&log, &cfg).unwrap(), Label::Positive);

        let mut slow = log.clone();
        slow[7].wheels[2] = 0.5;
        assert_eq!(label_window(&slow, &cfg).unwrap(), Label::Unlabeled);

        let mut close = log.clone();
        close[13].laser_min = 1.0;
        assert_eq!(label_window(&close, &cfg).unwrap(), Label::Unlabeled);

        assert!(matches!(label_window(&[], &cfg), Err(Error::Window(_))));
        assert!(matches!(label_window(&log[..20], &cfg), Err(Error::Window(_))));
        assert!(matches!(label_window(&log[..1], &cfg), Err(Error::Window(_))));
    }

    #[test]
    fn motion_direction() {
        let cfg = AnnotationConfig::default();
        let mut r = rec(0.0, 1.5, 2.0, 0);
        assert!(cfg.record_qualifies(&r));
        r.wheels = [-1.5; 4];
        assert!(!cfg.record_qualifies(&r), "pure reverse");
        r.wheels = [1.5, -1.5, 1.5, -1.5];
        assert!(cfg.record_qualifies(&r), "turning in place");
        r.wheels = [-1.2, -1.8, -1.2, -1.8];
        assert!(cfg.record_qualifies(&r), "differential beyond tolerance");
        r.wheels = [-1.5, -1.6, -1.5, -1.6];
        assert!(!cfg.record_qualifies(&r), "reverse within tolerance");
        r.wheels = [1.0, 1.0, 1.0, 1.0];
        assert!(cfg.record_qualifies(&r), "threshold is inclusive");
        r.laser_min = 1.2;
        assert!(!cfg.record_qualifies(&r), "clearance is strict");
    }

    #[test]
    fn steady_log_labels_centres() {
        let cfg = AnnotationConfig::default();
        let labels = annotate_log(&steady(41, 1.5, 2.0), &cfg).unwrap();
        assert_eq!(labels.len(), 41);
        for l in &labels {
            let expect = (10..=30).contains(&l.frame_id);
            assert_eq!(l.label == Label::Positive, expect, "frame {}", l.frame_id);
        }
        assert!(annotate_log(&[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn centre_tie_goes_to_earlier_record() {
        // Window 0..=3 at t = 0, 1, 2, 3: the midpoint 1.5 is equidistant.
        let cfg = AnnotationConfig {
            window: 3.0,
            ..AnnotationConfig::default()
        };
        let log: Vec<_> = (0..4).map(|k| rec(k as f64, 1.5, 2.0, k)).collect();
        let labels = annotate_log(&log, &cfg).unwrap();
        let pos: Vec<u64> = labels
            .iter()
            .filter(|l| l.label == Label::Positive)
            .map(|l| l.frame_id)
            .collect();
        assert_eq!(pos, vec![1]);
    }

    #[test]
    fn repeated_frame_ids_get_one_label() {
        let cfg = AnnotationConfig::default();
        let mut log = steady(41, 1.5, 2.0);
        for r in &mut log {
            r.frame_id /= 2;
        }
        let labels = annotate_log(&log, &cfg).unwrap();
        assert_eq!(labels.len(), 21);
        let ids: Vec<u64> = labels.iter().map(|l| l.frame_id).collect();
        assert_eq!(ids, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn ingestion_errors() {
        let cfg = AnnotationConfig::default();
        let mut log = steady(5, 1.5, 2.0);
        log[3].timestamp = log[2].timestamp;
        assert!(matches!(annotate_log(&log, &cfg), Err(Error::Ingest { record: 3, .. })));
        let mut log = steady(5, 1.5, 2.0);
        log[1].laser_min = 0.0;
        assert!(matches!(annotate_log(&log, &cfg), Err(Error::Ingest { record: 1, .. })));
        let bad = AnnotationConfig {
            window: 0.0,
            ..AnnotationConfig::default()
        };
        assert!(annotate_log(&steady(5, 1.5, 2.0), &bad).is_err());
    }
}
