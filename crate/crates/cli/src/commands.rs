use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ArgMatches;
use freespace::annotation::{self, AnnotationConfig, Label, Scenario};
use freespace::checkpoint;
use freespace::config::RunConfig;
use freespace::eval::{self, AblationMatrix, EvalAttack, Experiment, TrainedModel};
use freespace::model::{ModelParams, CLASS_FREE};
use freespace::synth::manifest::{read_dataset, write_dataset, MANIFEST_FILE};
use freespace::synth::pgm::Pgm;
use freespace::synth::{generate_split, Dataset};
use freespace::trainer;
use serde_json::{json, Value};

use crate::args::{output_dir, resolve_config};
use crate::exit::{fail, NO_CHECKPOINT, PATH, USAGE};

/// Line-delimited JSON on stdout.
struct Records {
    out: io::StdoutLock<'static>,
}

impl Records {
    fn new() -> Self {
        Records {
            out: io::stdout().lock(),
        }
    }

    fn emit(&mut self, record: &str, body: Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("record".into(), Value::from(record));
        match body {
            Value::Object(fields) => obj.extend(fields),
            other => {
                obj.insert("value".into(), other);
            }
        }
        serde_json::to_writer(&mut self.out, &Value::Object(obj))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| fail(PATH, format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".freespace-write-test");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| fail(PATH, format!("output directory {} is not writable: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| fail(PATH, format!("cannot write {}: {e}", path.display())))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    records: Records,
}

impl Ctx {
    fn path_or(&self, m: &ArgMatches, id: &str, default: &str) -> PathBuf {
        m.get_one::<PathBuf>(id).cloned().unwrap_or_else(|| self.out.join(default))
    }

    fn dataset(&self, m: &ArgMatches) -> Result<Dataset> {
        let dir = self.path_or(m, "dataset", "dataset");
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(fail(
                PATH,
                format!("no dataset at {} (run `freespace synth` first)", dir.display()),
            ));
        }
        let ds = read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
        let model = self.cfg.model_config(self.cfg.seed);
        if let Some(s) = ds.train.iter().chain(&ds.test).find(|s| {
            s.image.shape() != [model.height, model.width, model.channels_in]
        }) {
            return Err(fail(
                USAGE,
                format!(
                    "dataset images are {:?} but the model expects {}x{}x{}",
                    s.image.shape(),
                    model.height,
                    model.width,
                    model.channels_in
                ),
            ));
        }
        Ok(ds)
    }

    fn checkpoint(&self, m: &ArgMatches) -> Result<(PathBuf, ModelParams)> {
        let path = self.path_or(m, "checkpoint", "model.ckpt");
        if !path.is_file() {
            return Err(fail(
                NO_CHECKPOINT,
                format!("checkpoint {} not found (run `freespace train` first)", path.display()),
            ));
        }
        let params = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok((path, params))
    }
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve_config(m)?;
    if name == "config" {
        print!("{}", cfg.to_ini());
        return Ok(());
    }
    let out = output_dir(&cfg);
    let mut ctx = Ctx {
        cfg,
        out,
        records: Records::new(),
    };
    ctx.records.emit(
        "config",
        json!({ "command": name, "output_dir": ctx.out.display().to_string(), "config": ctx.cfg.to_ini() }),
    )?;
    match name {
        "synth" => synth(&mut ctx),
        "annotate" => annotate(&mut ctx, sub),
        "train" => train(&mut ctx, sub),
        "eval" => evaluate(&mut ctx, sub),
        "attack" => attack(&mut ctx, sub),
        "ablation" => ablation(&mut ctx, sub),
        "sweep-lambda" => sweep_lambda(&mut ctx, sub),
        "sweep-epsilon" => sweep_epsilon(&mut ctx, sub),
        other => Err(fail(USAGE, format!("unknown command {other}"))),
    }
}

fn synth(ctx: &mut Ctx) -> Result<()> {
    let dir = ctx.out.join("dataset");
    ensure_dir(&ctx.out)?;
    let ds = generate_split(&ctx.cfg.split_config())?;
    let manifest = write_dataset(&dir, &ds).map_err(|e| fail(PATH, format!("writing {}: {e}", dir.display())))?;
    let digest = fnv1a(manifest.encode().as_bytes());
    eprintln!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), dir.display());
    ctx.records.emit(
        "synth",
        json!({
            "dataset": dir.display().to_string(),
            "train": ds.train.len(),
            "test": ds.test.len(),
            "manifest_fnv1a": format!("{digest:016x}"),
        }),
    )
}

fn annotate(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let cfg: &AnnotationConfig = &ctx.cfg.annotation;
    let (source, records) = if let Some(name) = m.get_one::<String>("scenario") {
        let scenario: Scenario = name.parse().map_err(|e| fail(USAGE, format!("{e}")))?;
        let sim = annotation::simulate_log(scenario, ctx.cfg.seed);
        if let Some(path) = m.get_one::<PathBuf>("save-log") {
            write_file(path, annotation::write_log(&sim.records))?;
        }
        (format!("scenario:{name}"), sim.records)
    } else {
        let path = m.get_one::<PathBuf>("log").expect("log or scenario");
        let text = fs::read_to_string(path).map_err(|e| fail(PATH, format!("cannot read {}: {e}", path.display())))?;
        let records = annotation::parse_log(&text).with_context(|| format!("in {}", path.display()))?;
        (path.display().to_string(), records)
    };
    let labels = annotation::annotate_log(&records, cfg)?;
    let labels_path = ctx.path_or(m, "labels", "labels.txt");
    write_file(&labels_path, annotation::write_labels(&labels))?;
    let positive = annotation::count_positive(&labels);
    eprintln!(
        "{} frames: {positive} positive, {} unlabeled",
        labels.len(),
        labels.len() - positive
    );
    ctx.records.emit(
        "annotation",
        json!({
            "source": source,
            "records": records.len(),
            "frames": labels.len(),
            "positive": positive,
            "unlabeled": labels.iter().filter(|l| l.label == Label::Unlabeled).count(),
            "labels": labels_path.display().to_string(),
        }),
    )
}

fn train(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let ckpt = ctx.path_or(m, "checkpoint", "model.ckpt");
    ensure_dir(&ctx.out)?;
    let model_cfg = ctx.cfg.model_config(ctx.cfg.seed);
    let train_cfg = ctx.cfg.train_config();
    let records = &mut ctx.records;
    let mut emit_err = None;
    let outcome = trainer::train_with_hook(&ds.train, &model_cfg, &train_cfg, &mut |epoch, step, parts| {
        if emit_err.is_none() {
            if let Err(e) = records.emit(
                "step",
                json!({ "epoch": epoch, "step": step, "loss": serde_json::to_value(parts).unwrap_or_default() }),
            ) {
                emit_err = Some(e);
            }
        }
    })?;
    if let Some(e) = emit_err {
        return Err(e);
    }
    for e in &outcome.report.epochs {
        eprintln!(
            "epoch {:>3}: loss {:.5} hidden {:.3e} val mIoU {:.4} ({:.1}s)",
            e.epoch, e.loss.total, e.loss.hidden, e.validation_miou, e.wall_seconds
        );
        ctx.records.emit("epoch", serde_json::to_value(e)?)?;
    }
    checkpoint::save(&ckpt, &outcome.params).map_err(|e| fail(PATH, format!("writing {}: {e}", ckpt.display())))?;
    let r = &outcome.report;
    ctx.records.emit(
        "train",
        json!({
            "mode": r.config.mode.as_str(),
            "epochs_run": r.epochs.len(),
            "best_epoch": r.best_epoch,
            "best_validation_miou": r.best_validation_miou,
            "stopped_early": r.stopped_early,
            "steps": r.steps,
            "attack_calls": r.attack_calls,
            "checkpoint": ckpt.display().to_string(),
        }),
    )
}

fn write_masks(dir: &Path, params: &ModelParams, ds: &Dataset, batch: usize) -> Result<()> {
    ensure_dir(dir)?;
    for (b, chunk) in ds.test.chunks(batch).enumerate() {
        let refs: Vec<_> = chunk.iter().collect();
        let (images, _) = trainer::stack(&refs)?;
        let pred = params.predict(&images)?;
        let per = pred.len() / chunk.len();
        for (k, s) in chunk.iter().enumerate() {
            let values: Vec<f64> = pred[k * per..(k + 1) * per]
                .iter()
                .map(|&c| if c == CLASS_FREE { 1.0 } else { 0.0 })
                .collect();
            let pgm = Pgm::from_unit(s.width(), s.height(), 255, &values)?;
            write_file(&dir.join(format!("{:06}.pred.pgm", b * batch + k)), pgm.encode())?;
        }
    }
    Ok(())
}

fn evaluate(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let (path, params) = ctx.checkpoint(m)?;
    let (batch, threads) = (ctx.cfg.eval_batch, ctx.cfg.threads);
    let (clean, _) = eval::evaluate_threaded(&params, &ds.test, EvalAttack::None, batch, threads)?;
    ctx.records.emit(
        "eval",
        json!({ "checkpoint": path.display().to_string(), "attack": "none", "report": clean }),
    )?;
    let attack_cfg = ctx.cfg.eval_attack();
    let (attacked, pert) = eval::evaluate_threaded(&params, &ds.test, EvalAttack::Pgd(&attack_cfg), batch, threads)?;
    ctx.records.emit(
        "eval",
        json!({
            "checkpoint": path.display().to_string(),
            "attack": "pgd",
            "epsilon": attack_cfg.epsilon,
            "report": attacked,
            "perturbation": pert,
        }),
    )?;
    eprintln!("clean mIoU {:.4}, attacked mIoU {:.4} (ε = {})", clean.miou, attacked.miou, attack_cfg.epsilon);
    if let Some(dir) = m.get_one::<PathBuf>("export-masks") {
        write_masks(dir, &params, &ds, batch)?;
    }
    Ok(())
}

fn attack(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let (path, params) = ctx.checkpoint(m)?;
    let into = ctx.path_or(m, "into", "adversarial");
    let attack_cfg = ctx.cfg.eval_attack();
    let adversarial = eval::attack_samples(&params, &ds.test, &attack_cfg, ctx.cfg.eval_batch)?;
    let out = Dataset {
        train: Vec::new(),
        test: adversarial,
    };
    write_dataset(&into, &out).map_err(|e| fail(PATH, format!("writing {}: {e}", into.display())))?;
    let (report, pert) = eval::evaluate_threaded(
        &params,
        &ds.test,
        EvalAttack::Pgd(&attack_cfg),
        ctx.cfg.eval_batch,
        ctx.cfg.threads,
    )?;
    eprintln!("wrote {} attacked samples to {}", out.test.len(), into.display());
    ctx.records.emit(
        "attack",
        json!({
            "checkpoint": path.display().to_string(),
            "dataset": into.display().to_string(),
            "samples": out.test.len(),
            "attack": attack_cfg,
            "report": report,
            "perturbation": pert,
        }),
    )
}

fn experiment<'d>(ctx: &Ctx, ds: &'d Dataset) -> Experiment<'d> {
    Experiment::new(ds, ctx.cfg.experiment_config()).on_trained(|t: &TrainedModel| {
        let r = &t.report;
        eprintln!(
            "trained {} (lambda {}) seed {}: {} epochs, best val mIoU {:.4}",
            r.config.mode.as_str(),
            r.config.loss.lambda,
            r.model.seed,
            r.epochs.len(),
            r.best_validation_miou
        );
    })
}

fn emit_ablation(records: &mut Records, matrix: &AblationMatrix) -> Result<()> {
    for cell in &matrix.rows {
        records.emit(
            "ablation",
            json!({
                "row": cell.row.label(),
                "attack": cell.row.attack,
                "adversarial_training": cell.row.adversarial_training,
                "hidden_loss": cell.row.hidden_loss,
                "seeds": matrix.seeds,
                "per_seed": cell.per_seed,
                "mean": cell.summary.mean,
                "std": cell.summary.std,
            }),
        )?;
    }
    Ok(())
}

fn ablation(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let seeds = ctx.cfg.seeds.clone();
    let lambda = ctx.cfg.loss.lambda;
    let mut exp = experiment(ctx, &ds);
    match exp.run_ablation(&seeds, lambda) {
        Ok(matrix) => {
            eprint!("{}", matrix.table());
            emit_ablation(&mut ctx.records, &matrix)
        }
        Err(partial) => {
            emit_ablation(&mut ctx.records, &partial.partial)?;
            Err(partial.error.into())
        }
    }
}

fn sweep_lambda(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let (lambdas, seeds) = (ctx.cfg.lambdas.clone(), ctx.cfg.seeds.clone());
    let mut exp = experiment(ctx, &ds);
    let sweep = exp.lambda_sweep(&lambdas, &seeds)?;
    eprint!("{}", sweep.table());
    for p in &sweep.points {
        ctx.records.emit(
            "sweep_lambda",
            json!({
                "lambda": p.value,
                "seeds": sweep.seeds,
                "per_seed": p.per_seed,
                "mean": p.summary.mean,
                "std": p.summary.std,
            }),
        )?;
    }
    Ok(())
}

fn sweep_epsilon(ctx: &mut Ctx, m: &ArgMatches) -> Result<()> {
    let ds = ctx.dataset(m)?;
    let (path, params) = ctx.checkpoint(m)?;
    let base = ctx.cfg.eval_attack();
    for &epsilon in &ctx.cfg.epsilons.clone() {
        let (report, pert) = if epsilon == 0.0 {
            eval::evaluate_threaded(&params, &ds.test, EvalAttack::None, ctx.cfg.eval_batch, ctx.cfg.threads)?
        } else {
            let cfg = base.with_epsilon(epsilon);
            cfg.validate()?;
            eval::evaluate_threaded(&params, &ds.test, EvalAttack::Pgd(&cfg), ctx.cfg.eval_batch, ctx.cfg.threads)?
        };
        eprintln!("ε = {epsilon:<6} mIoU {:.4}", report.miou);
        ctx.records.emit(
            "sweep_epsilon",
            json!({
                "checkpoint": path.display().to_string(),
                "epsilon": epsilon,
                "report": report,
                "perturbation": pert,
            }),
        )?;
    }
    Ok(())
}
