//! Independent reference implementations shared by the integration tests and
//! the acceptance run. They favour the most literal code over speed.

#![allow(dead_code)]

use freespace::annotation::{AnnotationConfig, FrameLabel, Label, TelemetryRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn qualifies(r: &TelemetryRecord, cfg: &AnnotationConfig) -> bool {
    let [fl, fr, rl, rr] = r.wheels;
    if [fl, fr, rl, rr].iter().any(|v| v.abs() < cfg.velocity_threshold) {
        return false;
    }
    let left = (fl + rl) / 2.0;
    let right = (fr + rr) / 2.0;
    let forward = left > 0.0 && right > 0.0;
    let opposite = (left > 0.0 && right < 0.0) || (left < 0.0 && right > 0.0);
    let uneven = (left - right).abs() > cfg.turn_tolerance;
    (forward || opposite || uneven) && r.laser_min > cfg.clearance
}

/// Quadratic-time annotator: for every start record, walk forward to the
/// first record a full window later, test every record in between, and
/// mark the record closest to the time midpoint (earliest on ties).
pub fn brute_force_annotate(log: &[TelemetryRecord], cfg: &AnnotationConfig) -> Vec<FrameLabel> {
    let mut positive = vec![false; log.len()];
    for i in 0..log.len() {
        let Some(j) = (i..log.len()).find(|&j| log[j].timestamp - log[i].timestamp >= cfg.window) else {
            continue;
        };
        if !(i..=j).all(|k| qualifies(&log[k], cfg)) {
            continue;
        }
        let mid = (log[i].timestamp + log[j].timestamp) / 2.0;
        let mut best = i;
        for k in i..=j {
            if (log[k].timestamp - mid).abs() < (log[best].timestamp - mid).abs() {
                best = k;
            }
        }
        positive[best] = true;
    }
    let mut out: Vec<FrameLabel> = Vec::new();
    for (k, r) in log.iter().enumerate() {
        match out.iter_mut().find(|l| l.frame_id == r.frame_id) {
            Some(l) => {
                if positive[k] {
                    l.label = Label::Positive;
                }
            }
            None => out.push(FrameLabel {
                frame_id: r.frame_id,
                label: if positive[k] { Label::Positive } else { Label::Unlabeled },
            }),
        }
    }
    out
}

/// Random log with irregular sampling, occasional repeated frame ids and a
/// per-log rate of records that break one of the rules.
pub fn random_log(seed: u64, len: usize) -> Vec<TelemetryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad_rate = rng.gen_range(0.0..0.15);
    let regular = rng.gen_bool(0.3);
    let mut t = rng.gen_range(0.0..100.0);
    let mut frame = rng.gen_range(0..1000u64);
    (0..len)
        .map(|_| {
            t += if regular { 0.125 } else { rng.gen_range(0.02..0.4) };
            if rng.gen_bool(0.8) {
                frame += 1;
            }
            let base: f64 = rng.gen_range(1.0..2.0);
            let mut wheels = match rng.gen_range(0..4) {
                0 | 1 => [base; 4],
                2 => [base + 0.3, base, base + 0.3, base],
                _ => [base, -base, base, -base],
            };
            for w in &mut wheels {
                *w += rng.gen_range(-0.05..0.05);
            }
            let mut laser = rng.gen_range(1.25..5.0);
            if rng.gen_bool(bad_rate) {
                match rng.gen_range(0..4) {
                    0 => wheels[rng.gen_range(0..4)] = rng.gen_range(-0.99..0.99),
                    1 => laser = rng.gen_range(0.1..1.2),
                    2 => wheels = [-base; 4],
                    _ => wheels = [-base, -base - 0.1, -base, -base - 0.1],
                }
            }
            TelemetryRecord {
                timestamp: t,
                wheels,
                laser_min: laser,
                frame_id: frame,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Plain nested-loop model, written from the layer description rather than the
// tape code: 2×2 patch merge, linear, GELU, token mixing with a residual,
// per-stage decoder projections summed at stage-0 resolution, GELU, head and
// a 2× nearest upsample.

use freespace::model::ModelParams;

pub fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn weight<'a>(p: &'a ModelParams, name: &str) -> &'a [f64] {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// Feature map `[h][w][c]` stored flat.
#[derive(Clone)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }
}

fn linear(input: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| b[j] + input.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

pub struct RefOutput {
    /// `[H][W][2]` logits.
    pub logits: Vec<f64>,
    pub hidden: Vec<Grid>,
}

/// One image `[H][W][C]` through the reference model.
pub fn reference_forward(p: &ModelParams, image: &[f64]) -> RefOutput {
    let cfg = p.config().clone();
    let mut grid = Grid {
        h: cfg.height,
        w: cfg.width,
        c: cfg.channels_in,
        data: image.iter().map(|v| (v - 0.5) / 0.25).collect(),
    };
    let mut hidden = Vec::new();
    for (i, &width) in cfg.stage_widths.iter().enumerate() {
        let (gh, gw) = (grid.h / 2, grid.w / 2);
        let pw = weight(p, &format!("encoder.{i}.proj.weight"));
        let pb = weight(p, &format!("encoder.{i}.proj.bias"));
        let mix = weight(p, &format!("encoder.{i}.mix.weight"));
        let mut act = Vec::with_capacity(gh * gw * width);
        for r in 0..gh {
            for q in 0..gw {
                let mut merged = Vec::with_capacity(4 * grid.c);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    merged.extend_from_slice(grid.at(2 * r + dy, 2 * q + dx));
                }
                act.extend(linear(&merged, pw, pb, width).into_iter().map(gelu_ref));
            }
        }
        let tokens = gh * gw;
        let mut out = act.clone();
        for t in 0..tokens {
            for s in 0..tokens {
                let m = mix[t * tokens + s];
                for c in 0..width {
                    out[t * width + c] += m * act[s * width + c];
                }
            }
        }
        grid = Grid {
            h: gh,
            w: gw,
            c: width,
            data: out,
        };
        hidden.push(grid.clone());
    }

    let (h0, w0) = (hidden[0].h, hidden[0].w);
    let dw = cfg.decoder_width;
    let mut fused = vec![0.0; h0 * w0 * dw];
    for (i, stage) in hidden.iter().enumerate() {
        let dwt = weight(p, &format!("decoder.{i}.weight"));
        let dbt = weight(p, &format!("decoder.{i}.bias"));
        let f = 1 << i;
        for y in 0..h0 {
            for x in 0..w0 {
                let proj = linear(stage.at(y / f, x / f), dwt, dbt, dw);
                for (k, v) in proj.into_iter().enumerate() {
                    fused[(y * w0 + x) * dw + k] += v;
                }
            }
        }
    }
    let hw = weight(p, "head.weight");
    let hb = weight(p, "head.bias");
    let coarse: Vec<Vec<f64>> = fused
        .chunks(dw)
        .map(|f| {
            let g: Vec<f64> = f.iter().map(|&v| gelu_ref(v)).collect();
            linear(&g, hw, hb, 2)
        })
        .collect();
    let mut logits = Vec::with_capacity(cfg.height * cfg.width * 2);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            logits.extend_from_slice(&coarse[(y / 2) * w0 + x / 2]);
        }
    }
    RefOutput { logits, hidden }
}

/// Mean cross-entropy of `[N][2]` logits against labels.
pub fn reference_ce(logits: &[f64], mask: &[u8]) -> f64 {
    let total: f64 = logits
        .chunks(2)
        .zip(mask)
        .map(|(z, &m)| {
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[m as usize]
        })
        .sum();
    total / mask.len() as f64
}

/// `(task_clean, task_adv, hidden, total)` for a batch of `[H][W][C]` images.
pub fn reference_loss(
    p: &ModelParams,
    clean: &[Vec<f64>],
    adv: &[Vec<f64>],
    mask: &[u8],
    lambda: f64,
) -> (f64, f64, f64, f64) {
    let rc: Vec<RefOutput> = clean.iter().map(|x| reference_forward(p, x)).collect();
    let ra: Vec<RefOutput> = adv.iter().map(|x| reference_forward(p, x)).collect();
    let cat = |outs: &[RefOutput]| outs.iter().flat_map(|o| o.logits.iter().copied()).collect::<Vec<_>>();
    let ce_c = reference_ce(&cat(&rc), mask);
    let ce_a = reference_ce(&cat(&ra), mask);
    let stages = rc[0].hidden.len();
    let mut hidden = 0.0;
    for s in 0..stages {
        let mut sq = 0.0;
        let mut n = 0;
        for (c, a) in rc.iter().zip(&ra) {
            for (u, v) in c.hidden[s].data.iter().zip(&a.hidden[s].data) {
                sq += (u - v) * (u - v);
                n += 1;
            }
        }
        hidden += sq / n as f64;
    }
    hidden /= stages as f64;
    (ce_c, ce_a, hidden, 0.5 * (ce_c + ce_a) + lambda * hidden)
}
