//! Synthetic telemetry with known labels.
//!
//! Logs are sampled every 0.125 s, so a 2.5 s window spans exactly 20
//! intervals and its centre is the record 10 steps in. Each scenario is built
//! from segments whose qualifying status is known from how they were
//! generated; the ground truth marks frame `k` positive iff records
//! `k−10..=k+10` all lie in qualifying segments. It assumes the default
//! [`AnnotationConfig`](super::AnnotationConfig).

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrameLabel, Label, TelemetryRecord};
use crate::error::{Error, Result};

pub const SAMPLE_INTERVAL: f64 = 0.125;
pub const RECORDS: usize = 200;
const HALF_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Cruise,
    StopAndGo,
    NearObstacle,
    Reverse,
    Turning,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Cruise,
        Scenario::StopAndGo,
        Scenario::NearObstacle,
        Scenario::Reverse,
        Scenario::Turning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Cruise => "cruise",
            Scenario::StopAndGo => "stop_and_go",
            Scenario::NearObstacle => "near_obstacle",
            Scenario::Reverse => "reverse",
            Scenario::Turning => "turning",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLog {
    pub scenario: Scenario,
    pub records: Vec<TelemetryRecord>,
    /// One label per frame, frame ids equal to record indices.
    pub truth: Vec<FrameLabel>,
    /// Record index range of the laser dip (near_obstacle only).
    pub dip: Option<std::ops::Range<usize>>,
}

struct Builder {
    rng: ChaCha8Rng,
    wheels: Vec<[f64; 4]>,
    laser: Vec<f64>,
    good: Vec<bool>,
}

impl Builder {
    fn jitter(&mut self, base: f64, amp: f64) -> f64 {
        base + self.rng.gen_range(-amp..=amp)
    }

    /// Appends `n` records with left/right wheel bases `(l, r)`.
    fn segment(&mut self, n: usize, l: f64, r: f64, amp: f64, good: bool) {
        for _ in 0..n {
            let w = [
                self.jitter(l, amp),
                self.jitter(r, amp),
                self.jitter(l, amp),
                self.jitter(r, amp),
            ];
            let laser = self.rng.gen_range(2.0..4.0);
            self.wheels.push(w);
            self.laser.push(laser);
            self.good.push(good);
        }
    }
}

/// Deterministic log for `scenario`.
pub fn simulate_log(scenario: Scenario, seed: u64) -> SimulatedLog {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7e1e_3e7c),
        wheels: Vec::with_capacity(RECORDS),
        laser: Vec::with_capacity(RECORDS),
        good: Vec::with_capacity(RECORDS),
    };
    let mut dip = None;
    match scenario {
        Scenario::Cruise => b.segment(RECORDS, 1.5, 1.5, 0.1, true),
        Scenario::Reverse => b.segment(RECORDS, -1.5, -1.5, 0.04, false),
        Scenario::StopAndGo => {
            let mut moving = true;
            while b.good.len() < RECORDS {
                let left = RECORDS - b.good.len();
                if moving {
                    let n = b.rng.gen_range(30..=60).min(left);
                    b.segment(n, 1.5, 1.5, 0.1, true);
                } else {
                    let n = b.rng.gen_range(8..=20).min(left);
                    b.segment(n, 0.0, 0.0, 0.05, false);
                }
                moving = !moving;
            }
        }
        Scenario::NearObstacle => {
            b.segment(RECORDS, 1.5, 1.5, 0.1, true);
            let start = b.rng.gen_range(60..=100);
            let len = b.rng.gen_range(16..=40);
            for k in start..start + len {
                b.laser[k] = b.rng.gen_range(0.75..=0.85);
                b.good[k] = false;
            }
            dip = Some(start..start + len);
        }
        Scenario::Turning => {
            while b.good.len() < RECORDS {
                let n = b.rng.gen_range(20..=50).min(RECORDS - b.good.len());
                let flip = b.rng.gen_bool(0.5);
                let (l, r, good) = match b.rng.gen_range(0..4) {
                    0 => (1.5, 1.5, true),
                    1 => (1.8, 1.2, true),
                    2 => (1.2, -1.2, true),
                    // One side below the speed threshold.
                    _ => (1.5, 0.6, false),
                };
                let (l, r) = if flip { (r, l) } else { (l, r) };
                b.segment(n, l, r, 0.04, good);
            }
        }
    }

    let t0 = SAMPLE_INTERVAL * b.rng.gen_range(0..8000) as f64;
    let records: Vec<TelemetryRecord> = (0..RECORDS)
        .map(|k| TelemetryRecord {
            timestamp: t0 + SAMPLE_INTERVAL * k as f64,
            wheels: b.wheels[k],
            laser_min: b.laser[k],
            frame_id: k as u64,
        })
        .collect();
    let truth = (0..RECORDS)
        .map(|k| {
            let covered = k >= HALF_WINDOW
                && k + HALF_WINDOW < RECORDS
                && b.good[k - HALF_WINDOW..=k + HALF_WINDOW].iter().all(|&g| g);
            FrameLabel {
                frame_id: k as u64,
                label: if covered {
                    Label::Positive
                } else {
                    Label::Unlabeled
                },
            }
        })
        .collect();
    SimulatedLog {
        scenario,
        records,
        truth,
        dip,
    }
}
