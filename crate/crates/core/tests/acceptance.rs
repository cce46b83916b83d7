//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p freespace --test acceptance -- 1 3 7`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use freespace::annotation::{annotate_log, simulate_log, AnnotationConfig, Scenario};
use freespace::attack::{self, AttackConfig};
use freespace::autodiff::{Tape, Tensor};
use freespace::config::RunConfig;
use freespace::eval::{self, epsilon_sweep, miou, EvalAttack, Experiment, DEFAULT_LAMBDAS};
use freespace::gradcheck;
use freespace::losses::{task_loss, total_loss, HiddenStages, LossConfig};
use freespace::model::{BoundParams, ModelConfig, ModelParams};
use freespace::synth::{generate_split, Dataset};
use freespace::trainer::{self, stack, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_LAMBDA: f64 = 1.0;
const SWEEP_EPSILONS: [f64; 5] = [0.0, 0.005, 0.01, 0.05, 0.1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// The experiment recipe: the checked-in `configs/experiment.ini`.
fn experiment_config() -> RunConfig {
    let text = include_str!("../../../configs/experiment.ini");
    RunConfig::parse(text).expect("experiment config parses")
}

struct Shared {
    run: RunConfig,
    dataset: Dataset,
}

impl Shared {
    fn new() -> Self {
        let run = experiment_config();
        let dataset = generate_split(&run.split_config()).expect("dataset");
        Shared { run, dataset }
    }

    fn experiment(&self) -> Experiment<'_> {
        Experiment::new(&self.dataset, self.run.experiment_config()).on_trained(|m| {
            let r = &m.report;
            eprintln!(
                "    trained {} lambda={} seed={}: {} epochs, best {} (val mIoU {:.4})",
                r.config.mode.as_str(),
                r.config.loss.lambda,
                r.model.seed,
                r.epochs.len(),
                r.best_epoch,
                r.best_validation_miou
            );
        })
    }
}

fn random_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        stage_widths: vec![4, 8],
        decoder_width: 6,
        seed,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in p.tensors_mut() {
        if t.name.ends_with(".bias") {
            t.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, side: usize) -> (Tensor, Vec<u8>) {
    let n = batch * side * side;
    let data = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    let mask = (0..n).map(|_| rng.gen_range(0..2)).collect();
    (Tensor::new(vec![batch, side, side, 1], data).unwrap(), mask)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut total = gradcheck::GradCheckReport::default();
    let mut failed_seeds = Vec::new();
    for seed in 0..20u64 {
        let p = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (clean, mask) = random_batch(&mut rng, 1, 16);
        let adv: Vec<f64> = clean.data().iter().map(|v| v + rng.gen_range(-0.01..0.01)).collect();
        let adv = Tensor::new(clean.shape().to_vec(), adv).unwrap();
        let lambda = [0.1, 1.0, 10.0][seed as usize % 3];
        let mut inputs: Vec<Tensor> = p.tensors().iter().map(|t| t.tensor.clone()).collect();
        inputs.push(clean);
        inputs.push(adv);
        let n = p.tensors().len();
        let report = gradcheck::check(&inputs, |tape, vars| {
            let bound = BoundParams::from_vars(vars[..n].to_vec());
            let cfg = LossConfig {
                lambda,
                hidden_stages: HiddenStages::All,
            };
            Ok(total_loss(tape, &p, &bound, vars[n], vars[n + 1], &mask, &cfg)?.total)
        })
        .expect("gradient check runs");
        if !report.passed() {
            failed_seeds.push(seed);
        }
        total.merge(&report);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failed_seeds.is_empty() && secs < 60.0,
        format!(
            "{} components, {} failures (seeds {failed_seeds:?}), max rel err {:.2e}, max abs err {:.2e}, {secs:.1}s",
            total.checked, total.failures, total.max_rel_err, total.max_abs_err
        ),
    )
}

fn per_sample_ce(params: &ModelParams, images: &Tensor, mask: &[u8]) -> Vec<f64> {
    let batch = images.shape()[0];
    let pixels = mask.len() / batch;
    let per_image = images.numel() / batch;
    (0..batch)
        .map(|b| {
            let mut shape = images.shape().to_vec();
            shape[0] = 1;
            let x = Tensor::new(shape, images.data()[b * per_image..(b + 1) * per_image].to_vec()).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let out = params.forward(&mut tape, &bound, xv).unwrap();
            let l = task_loss(&mut tape, out.logits, &mask[b * pixels..(b + 1) * pixels]).unwrap();
            tape.value(l).item()
        })
        .collect()
}

fn criterion_2(shared: &Shared, exp: &mut Experiment<'_>) -> Outcome {
    let started = Instant::now();
    let mut bound_violations = 0;
    let mut fgsm_mismatches = 0;
    for run in 0..1000u64 {
        let p = random_model(run % 25);
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let (x, mask) = random_batch(&mut rng, 1 + (run % 2) as usize, 16);
        let eps = rng.gen_range(0.001..0.1);
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: Some(eps * rng.gen_range(0.1..1.5)),
            steps: rng.gen_range(1..=10),
            random_start: rng.gen_bool(0.5),
            seed: run,
            ..AttackConfig::default()
        };
        let adv = attack::pgd(&p, &x, &mask, &cfg).unwrap();
        let ok = adv
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, x0)| (a - x0).abs() <= eps + 1e-12 && (0.0..=1.0).contains(a));
        if !ok {
            bound_violations += 1;
        }

        // One step of size ε from the clean point is FGSM.
        let fgsm_cfg = AttackConfig {
            step_size: Some(eps),
            steps: 1,
            random_start: false,
            ..cfg
        };
        let reduced = attack::pgd(&p, &x, &mask, &fgsm_cfg).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = p.forward(&mut tape, &bound, xv).unwrap();
        let loss = task_loss(&mut tape, out.logits, &mask).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad_data(xv).unwrap();
        let closed: Vec<f64> = x
            .data()
            .iter()
            .zip(grad)
            .map(|(&v, &g)| {
                let s = if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (v + eps * s).clamp(0.0, 1.0)
            })
            .collect();
        let same = closed
            .iter()
            .zip(reduced.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            fgsm_mismatches += 1;
        }
    }
    let invariant_secs = started.elapsed().as_secs_f64();

    // Loss increase against a trained model, per test sample.
    let params = exp.model(TrainMode::Clean, 0.0, SEEDS[0]).unwrap().params.clone();
    let attack_cfg = shared.run.eval_attack();
    let attack_started = Instant::now();
    let samples: Vec<&freespace::synth::Sample> = shared.dataset.test.iter().collect();
    let mut increased = 0;
    let mut total = 0;
    for (i, chunk) in samples.chunks(shared.run.eval_batch).enumerate() {
        let (images, mask) = stack(chunk).unwrap();
        let cfg = AttackConfig {
            seed: attack_cfg.seed.wrapping_add(i as u64),
            ..attack_cfg.clone()
        };
        let adv = attack::pgd(&params, &images, &mask, &cfg).unwrap();
        let before = per_sample_ce(&params, &images, &mask);
        let after = per_sample_ce(&params, &adv, &mask);
        increased += before.iter().zip(&after).filter(|(b, a)| a >= b).count();
        total += before.len();
    }
    let fraction = increased as f64 / total as f64;
    let secs = invariant_secs + attack_started.elapsed().as_secs_f64();
    outcome(
        bound_violations == 0 && fgsm_mismatches == 0 && fraction >= 0.95 && secs < 120.0,
        format!(
            "1000 runs: {bound_violations} bound violations, {fgsm_mismatches} FGSM mismatches; \
             loss increased on {increased}/{total} test samples ({:.1}%); {secs:.1}s excluding training",
            100.0 * fraction
        ),
    )
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let cfg = AnnotationConfig::default();
    let mut mismatches = Vec::new();
    let mut positives = 0;
    for seed in 0..1000u64 {
        let log = common::random_log(seed, 500);
        let got = annotate_log(&log, &cfg).unwrap();
        if got != common::brute_force_annotate(&log, &cfg) {
            mismatches.push(format!("random log {seed}"));
        }
        positives += freespace::annotation::count_positive(&got);
    }
    for sc in Scenario::ALL {
        let sim = simulate_log(sc, 0);
        let got = annotate_log(&sim.records, &cfg).unwrap();
        if got != common::brute_force_annotate(&sim.records, &cfg) || got != sim.truth {
            mismatches.push(format!("scenario {}", sc.as_str()));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "1000 logs ({positives} positive frames) + 5 scenarios, mismatches {mismatches:?}, {secs:.1}s"
        ),
    )
}

fn criterion_4(exp: &mut Experiment<'_>) -> Outcome {
    let started = Instant::now();
    let matrix = match exp.run_ablation(&SEEDS, ABLATION_LAMBDA) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let secs = started.elapsed().as_secs_f64();
    eprintln!("{}", matrix.table());
    let s: Vec<&eval::MeanStd> = matrix.rows.iter().map(|c| &c.summary).collect();
    let (clean, attacked, at, hidden) = (s[0], s[1], s[2], s[3]);
    let gap = |lo: &eval::MeanStd, hi: &eval::MeanStd| hi.mean - lo.mean > lo.std.max(hi.std);
    let checks = [
        ("attacked < AT", attacked.mean < at.mean),
        ("AT < AT+hidden", at.mean < hidden.mean),
        ("AT+hidden <= clean", hidden.mean <= clean.mean),
        ("gap attacked/AT > 1 std", gap(attacked, at)),
        ("gap AT/AT+hidden > 1 std", gap(at, hidden)),
        ("gap AT+hidden/clean > 1 std", gap(hidden, clean)),
        ("clean >= 0.85", clean.mean >= 0.85),
        ("runtime < 30 min", secs < 1800.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "clean {clean}, attacked {attacked}, AT {at}, AT+hidden {hidden}; {secs:.0}s; failed checks {failed:?}"
        ),
    )
}

fn criterion_5(exp: &mut Experiment<'_>) -> Outcome {
    let sweep = match exp.lambda_sweep(&DEFAULT_LAMBDAS, &SEEDS) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    eprintln!("{}", sweep.table());
    let mean = |l: f64| {
        sweep
            .points
            .iter()
            .find(|p| p.value == l)
            .map(|p| p.summary.mean)
            .expect("lambda in sweep")
    };
    let best = sweep
        .points
        .iter()
        .max_by(|a, b| a.summary.mean.total_cmp(&b.summary.mean))
        .expect("non-empty sweep")
        .value;
    let pass = mean(10.0) < mean(0.0) && (best == 0.1 || best == 1.0);
    let points: Vec<String> = sweep
        .points
        .iter()
        .map(|p| format!("λ={}: {}", p.value, p.summary))
        .collect();
    outcome(pass, format!("{}; best λ = {best}", points.join(", ")))
}

fn criterion_6(shared: &Shared, exp: &mut Experiment<'_>) -> Outcome {
    let params = exp
        .model(TrainMode::AdversarialHidden, ABLATION_LAMBDA, SEEDS[0])
        .unwrap()
        .params
        .clone();
    let points = epsilon_sweep(
        &params,
        &shared.dataset.test,
        &shared.run.eval_attack(),
        &SWEEP_EPSILONS,
        shared.run.eval_batch,
    )
    .unwrap();
    let values: Vec<f64> = points.iter().map(|p| p.report.miou).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = points
        .iter()
        .map(|p| format!("ε={}: {:.4}", p.epsilon, p.report.miou))
        .collect();
    outcome(monotone, shown.join(", "))
}

/// Exact mIoU as an unreduced fraction `num / den` from raw counts.
fn rational_miou(pairs: &[(Vec<u8>, Vec<u8>)]) -> (i128, i128) {
    // inter[c], union[c] by direct enumeration.
    let mut inter = [0i128; 2];
    let mut union = [0i128; 2];
    for (pred, gt) in pairs {
        for (&p, &g) in pred.iter().zip(gt) {
            for c in 0..2u8 {
                if p == c && g == c {
                    inter[c as usize] += 1;
                }
                if p == c || g == c {
                    union[c as usize] += 1;
                }
            }
        }
    }
    // Empty union counts as a perfect score: 1/1.
    let frac = |c: usize| if union[c] == 0 { (1, 1) } else { (inter[c], union[c]) };
    let (a, b) = frac(0);
    let (c, d) = frac(1);
    (a * d + c * b, 2 * b * d)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..10_000 {
        let count = if i % 10 == 0 { rng.gen_range(2..6) } else { 1 };
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..count)
            .map(|_| {
                let n = rng.gen_range(1..=64);
                let p_free = rng.gen_range(0.0..=1.0);
                let p_agree = rng.gen_range(0.0..=1.0);
                let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p_free))).collect();
                let pred = gt
                    .iter()
                    .map(|&g| if rng.gen_bool(p_agree) { g } else { 1 - g })
                    .collect();
                (pred, gt)
            })
            .collect();
        let got = miou(pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())))
            .unwrap()
            .miou;
        let (num, den) = rational_miou(&pairs);
        let err = (got * den as f64 - num as f64).abs() / den as f64;
        worst = worst.max(err);
        if err > 1e-12 {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("10000 cases, {failures} failures, max error {worst:.1e}"))
}

fn records_once(shared: &Shared) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = shared.run.clone();
    run.n_positive = 24;
    run.n_challenging = 8;
    run.train.epochs = 2;
    run.train.mode = TrainMode::AdversarialHidden;
    let ds = generate_split(&run.split_config()).unwrap();
    let masks: Vec<u8> = ds.train.iter().chain(&ds.test).flat_map(|s| s.mask.clone()).collect();
    let pixels: Vec<u64> = ds
        .train
        .iter()
        .flat_map(|s| s.image.data().iter().map(|v| v.to_bits()))
        .collect();
    out.push(serde_json::to_string(&(masks, pixels)).unwrap());

    let log = simulate_log(Scenario::Turning, 3).records;
    out.push(serde_json::to_string(&annotate_log(&log, &run.annotation).unwrap()).unwrap());

    let trained = trainer::train(&ds.train, &run.model_config(run.seed), &run.train_config()).unwrap();
    for e in &trained.report.epochs {
        out.push(serde_json::to_string(e).unwrap());
    }
    out.push(digest(&freespace::checkpoint::encode(&trained.params)));
    let attack_cfg = run.eval_attack();
    let report = eval::evaluate(&trained.params, &ds.test, EvalAttack::Pgd(&attack_cfg), 4).unwrap();
    out.push(serde_json::to_string(&report).unwrap());
    for p in epsilon_sweep(&trained.params, &ds.test, &attack_cfg, &SWEEP_EPSILONS, 4).unwrap() {
        out.push(serde_json::to_string(&p).unwrap());
    }
    out
}

fn digest(bytes: &[u8]) -> String {
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    format!("{h:016x}/{}", bytes.len())
}

fn criterion_8(shared: &Shared) -> Outcome {
    let a = records_once(shared);
    let b = records_once(shared);
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    outcome(
        a.len() == b.len() && differing == 0,
        format!("{} records per run, {differing} differ", a.len()),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let names = [
        "",
        "gradient oracle",
        "PGD invariants",
        "annotation oracle",
        "ablation ordering",
        "lambda sweep shape",
        "epsilon monotonicity",
        "mIoU oracle",
        "determinism",
    ];

    let shared = Shared::new();
    let mut exp = shared.experiment();
    let mut all_pass = true;
    let mut report = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let took = Duration::from_secs_f64(t.elapsed().as_secs_f64());
        all_pass &= o.pass;
        println!(
            "criterion {n} ({}): {} - {} [{:.1}s]",
            names[n as usize],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    };
    report(1, &mut criterion_1);
    report(2, &mut || criterion_2(&shared, &mut exp));
    report(3, &mut criterion_3);
    report(7, &mut criterion_7);
    report(8, &mut || criterion_8(&shared));
    report(4, &mut || criterion_4(&mut exp));
    report(5, &mut || criterion_5(&mut exp));
    report(6, &mut || criterion_6(&shared, &mut exp));

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
